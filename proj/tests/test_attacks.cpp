#include "advpocket/attacks.hpp"
#include "advpocket/data.hpp"
#include "advpocket/error.hpp"
#include "advpocket/train.hpp"
#include "helpers.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

using namespace advpocket;
using namespace advpocket::testing;

TEST(Adam, MatchesReferenceTrajectoryOnQuadratic) {
    const std::vector<double> a = {1.0, 10.0, 0.1, 3.0};
    const std::vector<double> c = {0.5, -2.0, 4.0, 0.0};
    std::vector<double> x = {3.0, 1.0, -1.0, 2.0};
    std::vector<long double> rx(x.begin(), x.end()), rm(4, 0.0L), rv(4, 0.0L);
    const long double lr = 0.05L, b1 = 0.9L, b2 = 0.999L, eps = 1e-8L;
    AdamState state;
    for (int t = 1; t <= 200; ++t) {
        std::vector<double> g(4);
        for (int i = 0; i < 4; ++i) g[i] = a[i] * (x[i] - c[i]);
        adam_update(state, x, g, static_cast<double>(lr));
        for (int i = 0; i < 4; ++i) {
            const long double gi = static_cast<long double>(a[i]) * (rx[i] - c[i]);
            rm[i] = b1 * rm[i] + (1 - b1) * gi;
            rv[i] = b2 * rv[i] + (1 - b2) * gi * gi;
            const long double mh = rm[i] / (1 - std::pow(b1, static_cast<long double>(t)));
            const long double vh = rv[i] / (1 - std::pow(b2, static_cast<long double>(t)));
            rx[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
        for (int i = 0; i < 4; ++i) ASSERT_NEAR(x[i], static_cast<double>(rx[i]), 1e-10) << "step " << t << " coord " << i;
    }
    EXPECT_EQ(state.step, 200);
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
    std::vector<double> x = {0.0, 0.0, 0.0};
    const std::vector<double> g = {2.0, -1e-3, 0.0};
    AdamState s;
    adam_update(s, x, g, 0.1);
    EXPECT_NEAR(x[0], -0.1, 1e-8);
    EXPECT_NEAR(x[1], 0.1, 1e-5);
    EXPECT_EQ(x[2], 0.0);
}

TEST(Projection, ConstraintsIdempotenceAndNearest) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-0.5, 1.5), t(0.0, 0.5), unit(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        Tensor origin({16}), cand({16});
        for (auto& v : origin.values()) v = unit(rng);
        for (auto& v : cand.values()) v = u(rng);
        const double tau = trial % 10 == 0 ? 0.0 : t(rng);
        const Tensor p = project_linf_and_box(cand, origin, tau);
        for (std::size_t i = 0; i < p.size(); ++i) {
            ASSERT_GE(p[i], 0.0);
            ASSERT_LE(p[i], 1.0);
            ASSERT_LE(std::abs(p[i] - origin[i]), tau);
        }
        EXPECT_EQ(project_linf_and_box(p, origin, tau), p);
        double dp = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dp += (p[i] - cand[i]) * (p[i] - cand[i]);
        for (int k = 0; k < 20; ++k) {
            Tensor z = origin;
            for (std::size_t i = 0; i < z.size(); ++i) {
                const double lo = std::max(0.0, origin[i] - tau), hi = std::min(1.0, origin[i] + tau);
                z[i] = lo + (hi - lo) * unit(rng);
            }
            double dz = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) dz += (z[i] - cand[i]) * (z[i] - cand[i]);
            ASSERT_LE(dp, dz + 1e-12);
        }
    }
}

TEST(Attack, OutputsSatisfyBudgetAndBoxExactly) {
    std::mt19937_64 rng(3);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Model m = random_model(seed % 2 ? small_conv_spec() : small_mlp_spec(), seed, 3.0);
        const Tensor x = random_input(m.spec().input_shape, rng);
        AttackConfig cfg;
        cfg.tau = 0.01 * static_cast<double>(seed % 7);
        cfg.learning_rate = 0.2;
        cfg.max_steps = 20;
        cfg.loss = seed % 3 == 0 ? AttackLoss::margin_untargeted : AttackLoss::cross_entropy_targeted;
        cfg.target = (m.predict(x) + 1) % m.num_classes();
        cfg.optimizer = seed % 2 ? Optimizer::sign_gd : Optimizer::adam;
        const AttackResult r = run_attack(m, x, cfg);
        ASSERT_EQ(r.loss_trace.size(), 20u);
        for (std::size_t i = 0; i < x.size(); ++i) {
            ASSERT_GE(r.x_adv[i], 0.0);
            ASSERT_LE(r.x_adv[i], 1.0);
            ASSERT_LE(std::abs(r.x_adv[i] - x[i]), cfg.tau);
        }
        EXPECT_EQ(r.final_prediction, m.predict(r.x_adv));
    }
}

TEST(Attack, TargetedAttackWithoutTargetIsRejected) {
    const Model m = random_model(small_mlp_spec(), 1);
    AttackConfig cfg;
    EXPECT_THROW(run_attack(m, Tensor::filled(m.spec().input_shape, 0.5), cfg), ConfigError);
}

TEST(StepsToFlip, ZeroWhenGoalAlreadyHolds) {
    const Model m = random_model(small_mlp_spec(), 2);
    const Tensor x = Tensor::filled(m.spec().input_shape, 0.3);
    AttackConfig cfg;
    cfg.target = m.predict(x);
    EXPECT_EQ(steps_to_flip(m, x, {m.predict(x), true}, cfg), (FlipCount{0, true}));
}

// Sign steps on a two-class linear model under the targeted margin loss move every coordinate by
// lr toward its bound, so the logit gap after k steps is gap0 + sum_i |d_i| min(k lr, room_i).
TEST(StepsToFlip, MatchesClosedFormOnLinearBlobs) {
    const Dataset blobs = synth_blobs(40, 2, 6, 0.35, 5);
    TrainingConfig tc;
    tc.epochs = 5;
    tc.learning_rate = 0.05;
    const Model m = train(linear_spec(6, 2), blobs, tc);
    const auto& w = m.params().layers[0].weight;
    const auto& b = m.params().layers[0].bias;

    int checked = 0, capped = 0;
    for (std::size_t n = 0; n < blobs.size(); ++n) {
        const Tensor x = blobs.image(n).reshaped({6});
        const std::size_t a = m.predict(x), t = 1 - a;
        AttackConfig cfg;
        cfg.loss = AttackLoss::margin_targeted;
        cfg.optimizer = Optimizer::sign_gd;
        cfg.learning_rate = 0.004;
        cfg.max_steps = 300;
        cfg.tau = n % 3 == 0 ? 0.04 : 0.25;
        cfg.target = t;

        double gap0 = b[t] - b[a];
        std::vector<double> d(6), room(6);
        for (std::size_t i = 0; i < 6; ++i) {
            d[i] = w[t * 6 + i] - w[a * 6 + i];
            gap0 += d[i] * x[i];
            room[i] = d[i] > 0 ? std::min(1.0, x[i] + cfg.tau) - x[i] : x[i] - std::max(0.0, x[i] - cfg.tau);
        }
        auto gap = [&](int k) {
            double g = gap0;
            for (std::size_t i = 0; i < 6; ++i) g += std::abs(d[i]) * std::min(k * cfg.learning_rate, room[i]);
            return g;
        };
        int expected = cfg.max_steps;
        bool flips = false;
        for (int k = 1; k <= cfg.max_steps; ++k) {
            if (gap(k) > 0.0) {
                expected = k;
                flips = true;
                break;
            }
        }
        if (std::abs(gap(expected)) < 1e-9 || (expected > 1 && std::abs(gap(expected - 1)) < 1e-9)) continue;
        EXPECT_EQ(steps_to_flip(m, x, {t, true}, cfg), (FlipCount{expected, flips})) << "sample " << n;
        ++checked;
        capped += !flips;
    }
    EXPECT_GE(checked, 50);
    EXPECT_GE(capped, 1);
    EXPECT_LT(capped, checked);
}

TEST(AttackConfig, JsonRoundTripAndUnknownKeys) {
    AttackConfig c;
    c.loss = AttackLoss::margin_untargeted;
    c.learning_rate = 0.25;
    c.max_steps = 7;
    c.kappa = 1.5;
    nlohmann::json j = c;
    const AttackConfig back = j.get<AttackConfig>();
    EXPECT_EQ(back.loss, c.loss);
    EXPECT_EQ(back.learning_rate, c.learning_rate);
    EXPECT_EQ(back.max_steps, 7);
    j["bogus"] = 1;
    EXPECT_THROW(j.get<AttackConfig>(), ConfigError);
}
