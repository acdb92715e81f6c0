#include "advpocket/adaptive.hpp"

#include "advpocket/error.hpp"
#include "advpocket/parallel.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace advpocket {

namespace {

constexpr std::array<WhiteboxTerm, 4> kAllTerms = {WhiteboxTerm::l1, WhiteboxTerm::l2, WhiteboxTerm::l3,
                                                   WhiteboxTerm::l4};

bool all_finite(const Tensor& t) { return t.all_finite(); }

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor clamp_unit(Tensor t) {
    for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
    return t;
}

// x + s * d, without projection.
Tensor axpy(const Tensor& x, double s, const Tensor& d) {
    Tensor out = x;
    auto o = out.values();
    auto dv = d.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * dv[i];
    return out;
}

double ce(std::span<const double> logits, std::size_t label) {
    return log_sum_exp(logits) - logits[label];
}

std::size_t sample_other_class(std::size_t classes, std::size_t excluded, Rng& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, classes - 2);
    const std::size_t c = pick(rng);
    return c >= excluded ? c + 1 : c;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct GoalAndLabel {
    AttackGoal goal;
    std::size_t label;
};

GoalAndLabel resolve_goal(const Model& model, const Tensor& x, std::size_t y_t, const AttackConfig& attack) {
    if (attack.targeted()) {
        if (y_t >= model.num_classes()) throw ConfigError(fmt::format("target {} out of range", y_t));
        return {{y_t, true}, y_t};
    }
    const std::size_t pred = model.predict(x);
    return {{pred, false}, pred};
}

// Shared driver for the baseline attacks: Adam on `objective`, projection, flip bookkeeping.
template <typename Objective>
AttackResult optimize(const Model& model, const Tensor& x, const AttackGoal& goal, const AttackConfig& attack,
                      Objective&& objective) {
    attack.validate();
    const auto start = std::chrono::steady_clock::now();
    AttackResult result;
    result.x_adv = x;
    result.loss_trace.reserve(static_cast<std::size_t>(attack.max_steps));
    if (goal.reached(model.predict(x))) result.steps_to_first_flip = 0;
    AdamState adam;
    for (int step = 0; step < attack.max_steps; ++step) {
        if (step > 0 && !result.steps_to_first_flip && goal.reached(model.predict(result.x_adv))) {
            result.steps_to_first_flip = step;
        }
        ObjectiveValue v = objective(result.x_adv, step);
        if (!std::isfinite(v.value) || !all_finite(v.gradient)) {
            throw NumericError(fmt::format("adaptive attack gradient became non-finite at step {}", step));
        }
        result.loss_trace.push_back(v.value);
        if (attack.optimizer == Optimizer::adam) {
            adam_update(adam, result.x_adv.values(), v.gradient.values(), attack.learning_rate);
        } else {
            auto xv = result.x_adv.values();
            auto g = v.gradient.values();
            for (std::size_t i = 0; i < xv.size(); ++i) xv[i] -= attack.learning_rate * sign(g[i]);
        }
        project_linf_and_box_inplace(result.x_adv.values(), x.values(), attack.tau);
    }
    result.final_prediction = model.predict(result.x_adv);
    if (!result.steps_to_first_flip && goal.reached(result.final_prediction)) result.steps_to_first_flip = attack.max_steps;
    result.success = goal.reached(result.final_prediction);
    result.wall_time = seconds_since(start);
    return result;
}

}  // namespace

std::string to_string(WhiteboxTerm t) {
    switch (t) {
        case WhiteboxTerm::l1: return "L1";
        case WhiteboxTerm::l2: return "L2";
        case WhiteboxTerm::l3: return "L3";
        case WhiteboxTerm::l4: return "L4";
    }
    return "unknown";
}

std::string to_string(BaseLoss b) { return b == BaseLoss::cw_margin ? "cw_margin" : "pgd_ce"; }

WhiteboxTerm whitebox_term_from_string(const std::string& s) {
    for (auto t : kAllTerms) {
        if (to_string(t) == s) return t;
    }
    throw ConfigError(fmt::format("unknown white-box loss term '{}'", s));
}

BaseLoss base_loss_from_string(const std::string& s) {
    if (s == "pgd_ce") return BaseLoss::pgd_ce;
    if (s == "cw_margin") return BaseLoss::cw_margin;
    throw ConfigError(fmt::format("unknown base loss '{}'", s));
}

bool WhiteboxConfig::uses(WhiteboxTerm t) const { return std::find(enabled.begin(), enabled.end(), t) != enabled.end(); }

void WhiteboxConfig::validate() const {
    if (!(lambda > 0.0)) throw ConfigError(fmt::format("lambda {} must be positive", lambda));
    if (!(alpha >= 0.0)) throw ConfigError(fmt::format("alpha {} must be >= 0", alpha));
    if (!(learning_rate > 0.0)) throw ConfigError("white-box learning rate must be positive");
    if (max_steps < 1) throw ConfigError("white-box max_steps must be >= 1");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("white-box tau outside [0, 1]");
    if (!(sigma >= 0.0)) throw ConfigError("white-box sigma must be >= 0");
    if (mc_noise_samples < 1 || mc_class_samples < 1) throw ConfigError("Monte Carlo sample counts must be >= 1");
    if (kappa < 0.0) throw ConfigError("kappa must be >= 0");
    if (!uses(WhiteboxTerm::l1)) throw ConfigError("L1 must be enabled");
}

void to_json(nlohmann::json& j, const WhiteboxConfig& c) {
    nlohmann::json terms = nlohmann::json::array();
    for (auto t : kAllTerms) {
        if (c.uses(t)) terms.push_back(to_string(t));
    }
    j = {{"lambda", c.lambda},
         {"alpha", c.alpha},
         {"lr", c.learning_rate},
         {"steps", c.max_steps},
         {"tau", c.tau},
         {"sigma", c.sigma},
         {"mc_noise_samples", c.mc_noise_samples},
         {"mc_class_samples", c.mc_class_samples},
         {"enabled_losses", terms},
         {"base_loss", to_string(c.base_loss)},
         {"kappa", c.kappa},
         {"targeted", c.targeted},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WhiteboxConfig& c) {
    static const char* const known[] = {"lambda", "alpha", "lr", "steps", "tau", "sigma", "mc_noise_samples",
                                        "mc_class_samples", "enabled_losses", "base_loss", "kappa", "targeted", "seed"};
    for (const auto& item : j.items()) {
        if (std::find(std::begin(known), std::end(known), item.key()) == std::end(known)) {
            throw ConfigError(fmt::format("unknown adaptive config key '{}'", item.key()));
        }
    }
    WhiteboxConfig out;
    out.lambda = j.value("lambda", out.lambda);
    out.alpha = j.value("alpha", out.alpha);
    out.learning_rate = j.value("lr", out.learning_rate);
    out.max_steps = j.value("steps", out.max_steps);
    out.tau = j.value("tau", out.tau);
    out.sigma = j.value("sigma", out.sigma);
    out.mc_noise_samples = j.value("mc_noise_samples", out.mc_noise_samples);
    out.mc_class_samples = j.value("mc_class_samples", out.mc_class_samples);
    if (j.contains("enabled_losses")) {
        out.enabled.clear();
        for (const auto& t : j.at("enabled_losses")) out.enabled.push_back(whitebox_term_from_string(t.get<std::string>()));
    }
    if (j.contains("base_loss")) out.base_loss = base_loss_from_string(j.at("base_loss").get<std::string>());
    out.kappa = j.value("kappa", out.kappa);
    out.targeted = j.value("targeted", out.targeted);
    out.seed = j.value("seed", out.seed);
    out.validate();
    c = out;
}

PadvVector make_p_adv(std::span<const double> probs, std::size_t y, std::size_t y_t) {
    if (y >= probs.size() || y_t >= probs.size()) throw ConfigError("p_adv labels out of range");
    if (y == y_t) throw ConfigError(fmt::format("p_adv needs a target different from the source class {}", y));
    PadvVector p{{probs.begin(), probs.end()}, y, y_t};
    std::swap(p.probs[y], p.probs[y_t]);
    return p;
}

double loss_L1(const Model& model, const Tensor& x_prime, const PadvVector& p_adv) {
    return evaluate_loss(SoftCrossEntropyLoss{p_adv.probs}, model.forward(x_prime).logits).value;
}

double loss_L2(const Model& model, const Tensor& x_prime, double sigma, int mc_noise_samples, Rng& rng) {
    if (mc_noise_samples < 1) throw ConfigError("mc_noise_samples must be >= 1");
    if (sigma == 0.0) return 0.0;
    const auto p = model.probabilities(x_prime);
    std::normal_distribution<double> noise(0.0, sigma);
    double total = 0.0;
    for (int s = 0; s < mc_noise_samples; ++s) {
        Tensor noisy = x_prime;
        for (double& v : noisy.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
        total += l1_distance(p, model.probabilities(noisy));
    }
    return total / mc_noise_samples;
}

double loss_L3(const Model& model, const Tensor& x_prime, std::size_t y_t, double alpha, int mc_class_samples,
               Rng& rng) {
    const std::size_t C = model.num_classes();
    if (C < 2) throw ConfigError("L3 needs at least two classes");
    if (mc_class_samples < 1) throw ConfigError("mc_class_samples must be >= 1");
    double total = 0.0;
    for (int s = 0; s < mc_class_samples; ++s) {
        const std::size_t yp = sample_other_class(C, y_t, rng);
        const Tensor d = input_gradient(model, x_prime, CrossEntropyLoss{yp}).gradient;
        total += ce(model.forward(axpy(x_prime, -alpha, d)).logits, yp);
    }
    return total / mc_class_samples;
}

double loss_L4(const Model& model, const Tensor& x_prime, std::size_t y_t, double alpha) {
    const Tensor d = input_gradient(model, x_prime, CrossEntropyLoss{y_t}).gradient;
    return -ce(model.forward(axpy(x_prime, alpha, d)).logits, y_t);
}

WhiteboxDraw draw_whitebox(const Model& model, const Tensor& x_prime, std::size_t y_t, const WhiteboxConfig& config,
                           Rng& rng) {
    if (model.num_classes() < 2) throw ConfigError("white-box attack needs at least two classes");
    WhiteboxDraw d;
    std::normal_distribution<double> noise(0.0, config.sigma > 0.0 ? config.sigma : 1.0);
    for (int s = 0; s < config.mc_noise_samples; ++s) {
        Tensor e(x_prime.shape());
        if (config.sigma > 0.0) {
            for (double& v : e.values()) v = noise(rng);
        }
        d.noise.push_back(std::move(e));
    }
    for (int s = 0; s < config.mc_class_samples; ++s) d.l3_classes.push_back(sample_other_class(model.num_classes(), y_t, rng));
    return d;
}

FrozenDeltas inner_gradients(const Model& model, const Tensor& x_prime, std::size_t y_t, const WhiteboxDraw& draw) {
    FrozenDeltas f;
    for (std::size_t yp : draw.l3_classes) f.l3.push_back(input_gradient(model, x_prime, CrossEntropyLoss{yp}).gradient);
    f.l4 = input_gradient(model, x_prime, CrossEntropyLoss{y_t}).gradient;
    return f;
}

WhiteboxLoss whitebox_surrogate(const Model& model, const Tensor& x_prime, const PadvVector& p_adv, std::size_t y_t,
                                const WhiteboxConfig& config, const WhiteboxDraw& draw, const FrozenDeltas& frozen) {
    if (frozen.l3.size() != draw.l3_classes.size()) throw ShapeError("one frozen delta per L3 class expected");
    const ForwardPass pass = model.forward(x_prime);
    WhiteboxLoss out;
    out.gradient = Tensor(x_prime.shape());

    // L1
    LossDescriptor base;
    if (config.targeted) {
        if (config.base_loss == BaseLoss::pgd_ce) {
            base = SoftCrossEntropyLoss{p_adv.probs};
        } else {
            base = MarginLoss{p_adv.target, config.kappa, true};
        }
    } else {
        if (config.base_loss == BaseLoss::pgd_ce) {
            base = CompositeLoss{{{-1.0, CrossEntropyLoss{p_adv.source}}}};
        } else {
            base = MarginLoss{p_adv.source, config.kappa, false};
        }
    }
    LossValue l1 = evaluate_loss(base, pass.logits);
    out.terms[0] = l1.value;
    for (double& g : l1.logit_grad) g *= config.lambda;
    out.gradient += model.backward_logits(pass, l1.logit_grad);

    // L2
    const double n2 = static_cast<double>(draw.noise.size());
    std::vector<double> prob_grad(pass.probs.size(), 0.0);
    for (const Tensor& eps : draw.noise) {
        Tensor noisy = x_prime + eps;
        const Tensor inside = [&] {
            Tensor m(noisy.shape());
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = (noisy[i] > 0.0 && noisy[i] < 1.0) ? 1.0 : 0.0;
            return m;
        }();
        noisy = clamp_unit(std::move(noisy));
        const ForwardPass np = model.forward(noisy);
        std::vector<double> s(pass.probs.size());
        for (std::size_t k = 0; k < s.size(); ++k) {
            const double diff = pass.probs[k] - np.probs[k];
            out.terms[1] += std::abs(diff) / n2;
            s[k] = sign(diff) / n2;
            prob_grad[k] += s[k];
        }
        if (config.uses(WhiteboxTerm::l2)) {
            for (double& v : s) v = -v;
            Tensor g = model.backward_probs(np, s);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] *= inside[i];
            out.gradient += g;
        }
    }
    if (config.uses(WhiteboxTerm::l2)) out.gradient += model.backward_probs(pass, prob_grad);

    // L3: one simulated targeted step of the detector's attack towards each sampled class.
    const double n3 = static_cast<double>(draw.l3_classes.size());
    for (std::size_t s = 0; s < draw.l3_classes.size(); ++s) {
        const std::size_t yp = draw.l3_classes[s];
        const InputGradient g = input_gradient(model, axpy(x_prime, -config.alpha, frozen.l3[s]), CrossEntropyLoss{yp});
        out.terms[2] += g.value / n3;
        if (config.uses(WhiteboxTerm::l3)) out.gradient += g.gradient * (1.0 / n3);
    }

    // L4: one simulated untargeted step away from y_t.
    {
        const InputGradient g = input_gradient(model, axpy(x_prime, config.alpha, frozen.l4), CrossEntropyLoss{y_t});
        out.terms[3] = -g.value;
        if (config.uses(WhiteboxTerm::l4)) out.gradient -= g.gradient;
    }

    out.total = config.lambda * out.terms[0];
    if (config.uses(WhiteboxTerm::l2)) out.total += out.terms[1];
    if (config.uses(WhiteboxTerm::l3)) out.total += out.terms[2];
    if (config.uses(WhiteboxTerm::l4)) out.total += out.terms[3];
    return out;
}

WhiteboxLoss bpda_gradient(const Model& model, const Tensor& x_prime, const PadvVector& p_adv, std::size_t y_t,
                           const WhiteboxConfig& config, const WhiteboxDraw& draw) {
    return whitebox_surrogate(model, x_prime, p_adv, y_t, config, draw, inner_gradients(model, x_prime, y_t, draw));
}

WhiteboxResult run_whitebox(const Model& model, const Tensor& x, std::size_t y, std::size_t y_t,
                            const WhiteboxConfig& config, std::uint64_t input_id) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto clean_probs = model.probabilities(x);
    if (argmax(clean_probs) != y) throw ConfigError("white-box attack expects a correctly classified input");
    PadvVector p_adv = config.targeted ? make_p_adv(clean_probs, y, y_t) : PadvVector{clean_probs, y, y};
    const AttackGoal goal{config.targeted ? y_t : y, config.targeted};

    Rng rng = make_rng(config.seed, {stream::attack, input_id});
    WhiteboxResult out;
    out.target = goal.label;
    AttackResult& r = out.attack;
    r.x_adv = x;
    const auto steps = static_cast<std::size_t>(config.max_steps);
    for (auto* v : {&out.traces.l1, &out.traces.l2, &out.traces.l3, &out.traces.l4, &out.traces.total}) v->reserve(steps);
    r.loss_trace.reserve(steps);

    AdamState adam;
    for (int step = 0; step < config.max_steps; ++step) {
        const std::size_t pred = model.predict(r.x_adv);
        if (step > 0 && !r.steps_to_first_flip && goal.reached(pred)) r.steps_to_first_flip = step;
        const std::size_t anchor = config.targeted ? y_t : pred;
        const WhiteboxDraw draw = draw_whitebox(model, r.x_adv, anchor, config, rng);
        const WhiteboxLoss loss = bpda_gradient(model, r.x_adv, p_adv, anchor, config, draw);
        if (!std::isfinite(loss.total) || !all_finite(loss.gradient)) {
            throw NumericError(fmt::format("white-box gradient became non-finite at step {}", step));
        }
        out.traces.l1.push_back(loss.terms[0]);
        out.traces.l2.push_back(loss.terms[1]);
        out.traces.l3.push_back(loss.terms[2]);
        out.traces.l4.push_back(loss.terms[3]);
        out.traces.total.push_back(loss.total);
        r.loss_trace.push_back(loss.total);
        adam_update(adam, r.x_adv.values(), loss.gradient.values(), config.learning_rate);
        project_linf_and_box_inplace(r.x_adv.values(), x.values(), config.tau);
    }
    r.final_prediction = model.predict(r.x_adv);
    if (!r.steps_to_first_flip && goal.reached(r.final_prediction)) r.steps_to_first_flip = config.max_steps;
    r.success = goal.reached(r.final_prediction);
    r.wall_time = seconds_since(start);
    return out;
}

LambdaSearch escalate_lambda(const Model& model, const std::vector<WhiteboxCase>& probe, const WhiteboxConfig& config,
                             double target_rate, int max_doublings, int jobs) {
    if (probe.empty()) throw ConfigError("lambda escalation needs a non-empty probe set");
    LambdaSearch search;
    WhiteboxConfig c = config;
    for (int round = 0; round <= max_doublings; ++round) {
        std::vector<char> ok(probe.size(), 0);
        parallel_for(probe.size(), jobs, [&](std::size_t i) {
            const auto& p = probe[i];
            ok[i] = run_whitebox(model, p.x, p.label, p.target, c, p.id).attack.success ? 1 : 0;
        });
        const double rate = static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(probe.size());
        search.tried.emplace_back(c.lambda, rate);
        search.lambda = c.lambda;
        if (rate >= target_rate) {
            search.reached = true;
            break;
        }
        if (round < max_doublings) c.lambda *= 2.0;
    }
    return search;
}

ObjectiveValue fs_attack_objective(const Model& model, const Tensor& x_prime, std::size_t y_t,
                                   const SqueezeConfig& squeeze, const AttackConfig& attack) {
    const ForwardPass pass = model.forward(x_prime);
    const LossValue base = evaluate_loss(attack_loss_descriptor(attack.loss, y_t, attack.kappa), pass.logits);
    ObjectiveValue out;
    out.value = base.value;
    out.gradient = model.backward_logits(pass, base.logit_grad);
    std::vector<double> prob_grad(pass.probs.size(), 0.0);
    for (const auto& s : squeeze_transforms(x_prime, squeeze)) {
        const ForwardPass sp = model.forward(s.image);
        std::vector<double> sg(pass.probs.size());
        for (std::size_t k = 0; k < sg.size(); ++k) {
            const double diff = pass.probs[k] - sp.probs[k];
            out.value += std::abs(diff);
            prob_grad[k] += sign(diff);
            sg[k] = -sign(diff);
        }
        const Tensor g = model.backward_probs(sp, sg);
        if (s.kind == SqueezeKind::median) {
            for (std::size_t o = 0; o < g.size(); ++o) out.gradient[s.median_source[o]] += g[o];
        } else {
            out.gradient += g;
        }
    }
    out.gradient += model.backward_probs(pass, prob_grad);
    return out;
}

AttackResult whitebox_vs_feature_squeezing(const Model& model, const Tensor& x, std::size_t y_t,
                                           const SqueezeConfig& squeeze, const AttackConfig& attack) {
    squeeze.validate();
    const GoalAndLabel g = resolve_goal(model, x, y_t, attack);
    return optimize(model, x, g.goal, attack, [&](const Tensor& xp, int) {
        return fs_attack_objective(model, xp, g.label, squeeze, attack);
    });
}

ObjectiveValue artifacts_attack_objective(const Model& model, const Tensor& x_prime, std::size_t y_t,
                                          const KdeModel& kde, const std::vector<DropoutMask>& masks,
                                          const AttackConfig& attack) {
    const ForwardPass pass = model.forward(x_prime);
    const LossValue base = evaluate_loss(attack_loss_descriptor(attack.loss, y_t, attack.kappa), pass.logits);
    ObjectiveValue out;
    out.value = base.value;
    out.gradient = model.backward_logits(pass, base.logit_grad);

    const std::size_t kde_class = attack.targeted() ? y_t : argmax(pass.logits);
    const KdeValue phi = kde_density_with_gradient(kde, pass.features(model).values(), kde_class);
    out.value -= phi.density;
    std::vector<double> up(phi.gradient.size());
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = -phi.gradient[i];
    out.gradient += model.backward(pass, model.spec().features_index(), up);

    const std::size_t N = masks.size();
    if (N >= 2) {
        std::vector<ForwardPass> passes;
        passes.reserve(N);
        for (const auto& m : masks) passes.push_back(model.forward(x_prime, &m));
        const std::size_t C = pass.probs.size();
        std::vector<double> mu(C, 0.0);
        for (const auto& p : passes) {
            for (std::size_t k = 0; k < C; ++k) mu[k] += p.probs[k] / static_cast<double>(N);
        }
        const double scale = 2.0 / static_cast<double>(N - 1);
        for (std::size_t n = 0; n < N; ++n) {
            std::vector<double> g(C);
            for (std::size_t k = 0; k < C; ++k) {
                const double d = passes[n].probs[k] - mu[k];
                out.value += d * d / static_cast<double>(N - 1);
                g[k] = scale * d;
            }
            out.gradient += model.backward_probs(passes[n], g, &masks[n]);
        }
    }
    return out;
}

AttackResult whitebox_vs_artifacts(const Model& model, const Tensor& x, std::size_t y_t, const KdeModel& kde,
                                   const ArtifactsConfig& artifacts, const AttackConfig& attack,
                                   std::uint64_t input_id) {
    artifacts.validate();
    if (model.spec().dropout_layers().empty()) throw ConfigError("artifacts attack needs a model with dropout layers");
    const GoalAndLabel g = resolve_goal(model, x, y_t, attack);
    Rng rng = make_rng(attack.seed, {stream::dropout, input_id, 1});
    return optimize(model, x, g.goal, attack, [&](const Tensor& xp, int) {
        std::vector<DropoutMask> masks;
        masks.reserve(static_cast<std::size_t>(artifacts.n_dropout_masks));
        for (int n = 0; n < artifacts.n_dropout_masks; ++n) {
            masks.push_back(sample_dropout_mask(model.spec(), artifacts.dropout_rate, rng()));
        }
        return artifacts_attack_objective(model, xp, g.label, kde, masks, attack);
    });
}

}  // namespace advpocket
