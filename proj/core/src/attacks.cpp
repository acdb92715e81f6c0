#include "advpocket/attacks.hpp"

#include "advpocket/error.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>

namespace advpocket {

namespace {

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void descend(const AttackConfig& config, AdamState& adam, std::span<double> x, std::span<const double> grad) {
    if (config.optimizer == Optimizer::adam) {
        adam_update(adam, x, grad, config.learning_rate);
    } else {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double g = grad[i];
            x[i] -= config.learning_rate * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
        }
    }
}

}  // namespace

std::string to_string(AttackLoss loss) {
    switch (loss) {
        case AttackLoss::cross_entropy_targeted: return "cross_entropy_targeted";
        case AttackLoss::cross_entropy_untargeted: return "cross_entropy_untargeted";
        case AttackLoss::margin_targeted: return "margin_targeted";
        case AttackLoss::margin_untargeted: return "margin_untargeted";
    }
    return "unknown";
}

std::string to_string(Optimizer optimizer) { return optimizer == Optimizer::adam ? "adam" : "sign_gd"; }

AttackLoss attack_loss_from_string(const std::string& name) {
    for (auto l : {AttackLoss::cross_entropy_targeted, AttackLoss::cross_entropy_untargeted,
                   AttackLoss::margin_targeted, AttackLoss::margin_untargeted}) {
        if (to_string(l) == name) return l;
    }
    throw ConfigError(fmt::format("unknown attack loss '{}'", name));
}

Optimizer optimizer_from_string(const std::string& name) {
    if (name == "adam") return Optimizer::adam;
    if (name == "sign_gd") return Optimizer::sign_gd;
    throw ConfigError(fmt::format("unknown optimizer '{}'", name));
}

bool is_targeted(AttackLoss loss) noexcept {
    return loss == AttackLoss::cross_entropy_targeted || loss == AttackLoss::margin_targeted;
}

void AttackConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError(fmt::format("attack learning rate {} must be positive", learning_rate));
    if (max_steps < 1) throw ConfigError(fmt::format("attack max_steps {} must be >= 1", max_steps));
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError(fmt::format("attack tau {} outside [0,1]", tau));
    if (kappa < 0.0) throw ConfigError(fmt::format("margin kappa {} is negative", kappa));
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
    j = {{"loss", to_string(c.loss)}, {"optimizer", to_string(c.optimizer)},
         {"lr", c.learning_rate},     {"steps", c.max_steps},
         {"tau", c.tau},              {"kappa", c.kappa},
         {"seed", c.seed}};
    if (c.target) j["target"] = *c.target;
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
    static const char* const known[] = {"loss", "optimizer", "lr", "steps", "tau", "kappa", "seed", "target"};
    for (const auto& item : j.items()) {
        if (std::find(std::begin(known), std::end(known), item.key()) == std::end(known)) {
            throw ConfigError(fmt::format("unknown attack config key '{}'", item.key()));
        }
    }
    AttackConfig out;
    if (j.contains("loss")) out.loss = attack_loss_from_string(j.at("loss").get<std::string>());
    if (j.contains("optimizer")) out.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    out.learning_rate = j.value("lr", out.learning_rate);
    out.max_steps = j.value("steps", out.max_steps);
    out.tau = j.value("tau", out.tau);
    out.kappa = j.value("kappa", out.kappa);
    out.seed = j.value("seed", out.seed);
    if (j.contains("target") && !j.at("target").is_null()) out.target = j.at("target").get<std::size_t>();
    c = out;
}

void adam_update(AdamState& state, std::span<double> variable, std::span<const double> gradient, double lr) {
    if (gradient.size() != variable.size()) throw ShapeError("adam: gradient and variable sizes differ");
    if (state.m.empty()) {
        state.m.assign(variable.size(), 0.0);
        state.v.assign(variable.size(), 0.0);
    }
    if (state.m.size() != variable.size()) throw ShapeError("adam: state size differs from variable");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, state.step);
    const double c2 = 1.0 - std::pow(state.beta2, state.step);
    for (std::size_t i = 0; i < variable.size(); ++i) {
        const double g = gradient[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        variable[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

LossDescriptor attack_loss_descriptor(AttackLoss kind, std::size_t label, double kappa) {
    switch (kind) {
        case AttackLoss::cross_entropy_targeted: return CrossEntropyLoss{label};
        case AttackLoss::cross_entropy_untargeted: return CompositeLoss{{{-1.0, CrossEntropyLoss{label}}}};
        case AttackLoss::margin_targeted: return MarginLoss{label, kappa, true};
        case AttackLoss::margin_untargeted: return MarginLoss{label, kappa, false};
    }
    throw ConfigError("unknown attack loss");
}

LossValue adversarial_loss(AttackLoss kind, std::span<const double> logits, std::size_t label, double kappa) {
    return evaluate_loss(attack_loss_descriptor(kind, label, kappa), logits);
}

LossValue adversarial_loss(std::span<const double> logits, std::span<const double> target_probs) {
    double mass = 0.0;
    for (double p : target_probs) mass += p;
    if (std::abs(mass - 1.0) > 1e-6) throw ConfigError(fmt::format("target probabilities sum to {}", mass));
    return evaluate_loss(SoftCrossEntropyLoss{{target_probs.begin(), target_probs.end()}}, logits);
}

void project_linf_and_box_inplace(std::span<double> candidate, std::span<const double> origin, double tau) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        double lo = origin[i] - tau;
        double hi = origin[i] + tau;
        while (origin[i] - lo > tau) lo = std::nextafter(lo, origin[i]);
        while (hi - origin[i] > tau) hi = std::nextafter(hi, origin[i]);
        candidate[i] = std::clamp(candidate[i], std::max(0.0, lo), std::min(1.0, hi));
    }
}

Tensor project_linf_and_box(const Tensor& candidate, const Tensor& origin, double tau) {
    if (candidate.size() != origin.size()) throw ShapeError("projection: candidate and origin sizes differ");
    Tensor out = candidate;
    project_linf_and_box_inplace(out.values(), origin.values(), tau);
    return out;
}

AttackResult run_attack(const Model& model, const Tensor& x, const AttackConfig& config) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const ForwardPass clean = model.forward(x);
    const std::size_t original = argmax(clean.logits);
    if (config.targeted() && !config.target) throw ConfigError("targeted attack requires a target label");
    const AttackGoal goal{config.targeted() ? *config.target : original, config.targeted()};
    const LossDescriptor loss = attack_loss_descriptor(config.loss, goal.label, config.kappa);

    AttackResult result;
    result.x_adv = x;
    result.loss_trace.reserve(static_cast<std::size_t>(config.max_steps));
    if (goal.reached(original)) result.steps_to_first_flip = 0;

    AdamState adam;
    for (int step = 0; step < config.max_steps; ++step) {
        const InputGradient g = input_gradient(model, result.x_adv, loss);
        if (step > 0 && !result.steps_to_first_flip && goal.reached(argmax(g.pass.logits))) {
            result.steps_to_first_flip = step;
        }
        if (!std::isfinite(g.value) || !all_finite(g.gradient.values())) {
            throw NumericError(fmt::format("attack gradient became non-finite at step {}", step));
        }
        result.loss_trace.push_back(g.value);
        descend(config, adam, result.x_adv.values(), g.gradient.values());
        project_linf_and_box_inplace(result.x_adv.values(), x.values(), config.tau);
    }
    result.final_prediction = model.predict(result.x_adv);
    if (!result.steps_to_first_flip && goal.reached(result.final_prediction)) {
        result.steps_to_first_flip = config.max_steps;
    }
    result.success = goal.reached(result.final_prediction);
    result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

FlipCount steps_to_flip(const Model& model, const Tensor& x, const AttackGoal& goal, const AttackConfig& config) {
    config.validate();
    const LossDescriptor loss = attack_loss_descriptor(config.loss, goal.label, config.kappa);
    Tensor current = x;
    AdamState adam;
    for (int step = 0;; ++step) {
        const InputGradient g = input_gradient(model, current, loss);
        if (goal.reached(argmax(g.pass.logits))) return {step, true};
        if (step == config.max_steps) return {config.max_steps, false};
        if (!std::isfinite(g.value) || !all_finite(g.gradient.values())) {
            throw NumericError(fmt::format("attack gradient became non-finite at step {}", step));
        }
        descend(config, adam, current.values(), g.gradient.values());
        project_linf_and_box_inplace(current.values(), x.values(), config.tau);
    }
}

}  // namespace advpocket
