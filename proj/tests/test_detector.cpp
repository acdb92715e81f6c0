#include "advpocket/detector.hpp"
#include "advpocket/error.hpp"
#include "helpers.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

using namespace advpocket;
using namespace advpocket::testing;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Brute force: threshold at level k is the (n-1-k)-th order statistic; try every k.
std::size_t brute_force_level(const std::vector<std::vector<double>>& scores, double fpr) {
    const std::size_t n = scores.front().size();
    std::size_t best = 0;
    for (std::size_t k = 0; k <= n; ++k) {
        std::size_t flagged = 0;
        for (std::size_t r = 0; r < n; ++r) {
            bool any = false;
            for (const auto& col : scores) {
                std::vector<double> s = col;
                std::sort(s.begin(), s.end());
                double t = k == n ? std::nextafter(s.front(), -kInf) : s[n - 1 - k];
                if (std::isinf(t)) {
                    t = -kInf;
                    for (double v : s) {
                        if (std::isfinite(v)) t = std::max(t, v);
                    }
                }
                any = any || col[r] > t || std::isinf(col[r]);
            }
            flagged += any;
        }
        if (static_cast<double>(flagged) / static_cast<double>(n) <= fpr + 1e-12) best = k;
    }
    return best;
}

}  // namespace

TEST(SharedQuantile, SingleCriterionWithDistinctScoresHitsFloorOfTarget) {
    std::vector<double> s(200);
    std::iota(s.begin(), s.end(), 0.0);
    std::shuffle(s.begin(), s.end(), std::mt19937_64(1));
    for (double fpr : {0.05, 0.1, 0.2, 0.37}) {
        const QuantileCalibration q = calibrate_shared_quantile({s}, fpr);
        EXPECT_EQ(q.level, static_cast<std::size_t>(std::floor(200 * fpr + 1e-9)));
        EXPECT_DOUBLE_EQ(q.achieved_fpr, static_cast<double>(q.level) / 200.0);
    }
}

TEST(SharedQuantile, MatchesBruteForceWithTiesAndInfinity) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> small(0, 12);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 20 + static_cast<std::size_t>(trial);
        std::vector<std::vector<double>> scores(3, std::vector<double>(n));
        for (auto& v : scores[0]) v = u(rng);
        for (auto& v : scores[1]) v = small(rng);
        for (auto& v : scores[2]) v = u(rng) < 0.03 ? kInf : small(rng) * 10.0;
        for (double fpr : {0.1, 0.2}) {
            const std::size_t inf_rows = static_cast<std::size_t>(std::count(scores[2].begin(), scores[2].end(), kInf));
            if (static_cast<double>(inf_rows) > fpr * static_cast<double>(n)) {
                EXPECT_THROW(calibrate_shared_quantile(scores, fpr), CalibrationError);
                continue;
            }
            const QuantileCalibration q = calibrate_shared_quantile(scores, fpr);
            EXPECT_EQ(q.level, brute_force_level(scores, fpr)) << "trial " << trial;
            EXPECT_LE(q.achieved_fpr, fpr + 1e-12);
            EXPECT_DOUBLE_EQ(q.achieved_fpr, union_flag_rate(scores, q.thresholds));
        }
    }
}

TEST(SharedQuantile, RefusesUnidentifiableQuantile) {
    const std::vector<double> s = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    EXPECT_THROW(calibrate_shared_quantile({s}, 0.1), CalibrationError);
    EXPECT_NO_THROW(calibrate_shared_quantile({s}, 0.2));
}

TEST(SharedQuantile, InfiniteScoresAreAlwaysFlagged) {
    std::vector<double> s(10, kInf);
    s[0] = 1.0;
    const QuantileCalibration q = calibrate_shared_quantile({s}, 0.95);
    EXPECT_EQ(union_flag_rate({s}, q.thresholds), 0.9);
    EXPECT_TRUE(std::isfinite(q.thresholds[0]));
}

TEST(SharedQuantile, RefusesWhenNeverFlippingRowsExceedTarget) {
    std::vector<double> s(10, 1.0);
    s[0] = s[1] = kInf;
    EXPECT_THROW(calibrate_shared_quantile({s}, 0.1), CalibrationError);
    EXPECT_NO_THROW(calibrate_shared_quantile({s}, 0.2));
}

TEST(Detector, CriterionScoresAndDetectRule) {
    DetectionStats s;
    s.delta = 0.3;
    s.k_t = 40;
    s.k_u = 500;
    s.u_flipped = false;
    EXPECT_EQ(criterion_score(s, Criterion::c1), 0.3);
    EXPECT_EQ(criterion_score(s, Criterion::c2t), 40.0);
    EXPECT_TRUE(std::isinf(criterion_score(s, Criterion::c2u)));
    Thresholds t;
    t.t_c1 = 0.3;
    t.t_c2t = 39.0;
    t.t_c2u = 1e9;
    const Verdict v = detect(s, t);
    EXPECT_TRUE(v.is_adversarial);
    EXPECT_EQ(v.failed_criteria, (std::vector<Criterion>{Criterion::c2t, Criterion::c2u}));
    t.criteria = {Criterion::c1};
    EXPECT_FALSE(detect(s, t).is_adversarial);
}

TEST(Detector, StatC1IsZeroWithoutNoiseAndReproducible) {
    const Model m = random_model(small_mlp_spec(), 1);
    std::mt19937_64 g(1);
    const Tensor x = random_input(m.spec().input_shape, g);
    Rng r1(5), r2(5);
    EXPECT_EQ(stat_c1(m, x, 0.0, 3, r1), 0.0);
    Rng a(9), b(9);
    EXPECT_EQ(stat_c1(m, x, 0.2, 4, a), stat_c1(m, x, 0.2, 4, b));
    EXPECT_GT(stat_c1(m, x, 0.2, 4, a), 0.0);
}

TEST(Detector, StatisticsDependOnlyOnSeedAndInputId) {
    const Model m = random_model(small_mlp_spec(), 2, 2.0);
    std::mt19937_64 g(2);
    const Tensor x = random_input(m.spec().input_shape, g);
    DetectorConfig c;
    c.c2t_attack.max_steps = 30;
    c.c2u_attack.max_steps = 30;
    const DetectionStats a = compute_stats(m, x, c, 17), b = compute_stats(m, x, c, 17);
    EXPECT_EQ(a.delta, b.delta);
    EXPECT_EQ(a.k_t, b.k_t);
    EXPECT_EQ(a.c2t_target, b.c2t_target);
    EXPECT_NE(a.c2t_target, m.predict(x));
    c.target_choice = TargetChoice::next_class;
    EXPECT_EQ(c2t_target(m, x, c, 3), (m.predict(x) + 1) % m.num_classes());
}

TEST(Detector, ConfigJsonRoundTripAndValidation) {
    DetectorConfig c;
    c.sigma = 0.07;
    c.c2u_attack.max_steps = 33;
    c.seed = 4;
    const nlohmann::json j = c;
    const DetectorConfig back = j.get<DetectorConfig>();
    EXPECT_EQ(back.fingerprint(), c.fingerprint());
    EXPECT_EQ(back.c2u_attack.max_steps, 33);
    nlohmann::json partial = {{"sigma", 0.2}, {"c2t_attack", {{"lr", 0.5}}}};
    const DetectorConfig p = partial.get<DetectorConfig>();
    EXPECT_EQ(p.c2t_attack.learning_rate, 0.5);
    EXPECT_EQ(p.c2t_attack.max_steps, DetectorConfig::default_c2t().max_steps);
    EXPECT_THROW((nlohmann::json{{"sigmaa", 1}}.get<DetectorConfig>()), ConfigError);
    DetectorConfig bad;
    bad.c2t_attack.loss = AttackLoss::cross_entropy_untargeted;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Detector, CalibrationRefusesSmallSetsAndStaleModels) {
    const Model m = random_model(small_mlp_spec(), 3);
    const Model other = random_model(small_mlp_spec(), 4);
    std::mt19937_64 g(3);
    DetectorConfig c;
    c.c2t_attack.max_steps = 200;
    c.c2t_attack.tau = 1.0;
    c.c2t_attack.learning_rate = 0.05;
    c.c2u_attack.max_steps = 200;
    c.c2u_attack.tau = 1.0;
    c.c2u_attack.learning_rate = 0.05;
    std::vector<Tensor> few;
    for (int i = 0; i < 5; ++i) few.push_back(random_input(m.spec().input_shape, g));
    EXPECT_THROW(calibrate(m, few, c, 0.1, "few"), CalibrationError);

    std::vector<Tensor> clean;
    for (int i = 0; i < 30; ++i) clean.push_back(random_input(m.spec().input_shape, g));
    const Thresholds t = calibrate(m, clean, c, 0.2, "ok", 2);
    EXPECT_LE(t.achieved_fpr, 0.2);
    EXPECT_EQ(t.calibration_size, 30u);
    EXPECT_NO_THROW(detect(m, clean[0], t, c, 0));
    EXPECT_THROW(detect(other, clean[0], t, c, 0), CalibrationError);
    DetectorConfig changed = c;
    changed.sigma = 0.3;
    EXPECT_THROW(detect(m, clean[0], t, changed, 0), CalibrationError);

    const nlohmann::json j = t;
    const Thresholds back = j.get<Thresholds>();
    EXPECT_EQ(back.t_c1, t.t_c1);
    EXPECT_EQ(back.model_checksum, t.model_checksum);
    EXPECT_EQ(back.config_hash, t.config_hash);
}

TEST(Detector, ChooseSigmaRespectsAccuracyDrop) {
    const Model m = random_model(small_mlp_spec(), 6, 3.0);
    std::mt19937_64 g(6);
    std::vector<Tensor> clean;
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        clean.push_back(random_input(m.spec().input_shape, g));
        labels.push_back(static_cast<int>(m.predict(clean.back())));
    }
    EXPECT_EQ(choose_sigma(m, clean, labels, {0.0, 0.01, 5.0}, 0.0, 1) <= 0.01, true);
    EXPECT_EQ(choose_sigma(m, clean, labels, {0.0, 0.01, 5.0}, 1.0, 1), 5.0);
}
