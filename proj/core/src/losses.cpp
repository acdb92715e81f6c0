#include "advpocket/losses.hpp"

#include "advpocket/error.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace advpocket {

namespace {

void check_label(std::size_t label, std::size_t classes) {
    if (label >= classes) throw ConfigError(fmt::format("label {} outside [0, {})", label, classes));
}

void check_vector(std::span<const double> v, std::size_t classes, const char* what) {
    if (v.size() != classes) {
        throw ConfigError(fmt::format("{} has {} entries, model has {} classes", what, v.size(), classes));
    }
}

// Largest logit among classes other than `excluded`; lowest index on ties.
std::size_t best_other(std::span<const double> logits, std::size_t excluded) {
    std::size_t best = excluded == 0 ? 1 : 0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        if (k != excluded && logits[k] > logits[best]) best = k;
    }
    return best;
}

LossValue evaluate_term(const CrossEntropyLoss& l, std::span<const double> z) {
    check_label(l.label, z.size());
    LossValue out;
    out.value = log_sum_exp(z) - z[l.label];
    out.logit_grad = softmax(z);
    out.logit_grad[l.label] -= 1.0;
    return out;
}

LossValue evaluate_term(const SoftCrossEntropyLoss& l, std::span<const double> z) {
    check_vector(l.target, z.size(), "soft target");
    double mass = 0.0;
    for (double t : l.target) {
        if (t < 0.0) throw ConfigError("soft target has a negative entry");
        mass += t;
    }
    const double lse = log_sum_exp(z);
    const auto p = softmax(z);
    LossValue out;
    out.logit_grad.resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
        out.value += l.target[k] * (lse - z[k]);
        out.logit_grad[k] = mass * p[k] - l.target[k];
    }
    return out;
}

LossValue evaluate_term(const MarginLoss& l, std::span<const double> z) {
    check_label(l.label, z.size());
    if (l.kappa < 0.0) throw ConfigError(fmt::format("margin kappa {} is negative", l.kappa));
    const std::size_t other = best_other(z, l.label);
    const double gap = l.targeted ? z[other] - z[l.label] + l.kappa : z[l.label] - z[other] + l.kappa;
    LossValue out;
    out.logit_grad.assign(z.size(), 0.0);
    if (gap > 0.0) {
        out.value = gap;
        const double sign = l.targeted ? 1.0 : -1.0;
        out.logit_grad[other] += sign;
        out.logit_grad[l.label] -= sign;
    }
    return out;
}

LossValue evaluate_term(const ProbabilityL1Loss& l, std::span<const double> z) {
    check_vector(l.reference, z.size(), "L1 reference");
    const auto p = softmax(z);
    std::vector<double> sign(z.size());
    LossValue out;
    for (std::size_t k = 0; k < z.size(); ++k) {
        const double d = p[k] - l.reference[k];
        out.value += std::abs(d);
        sign[k] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
    out.logit_grad = softmax_vjp(p, sign);
    return out;
}

LossValue evaluate_term(const ConstantLoss& l, std::span<const double> z) {
    return {l.value, std::vector<double>(z.size(), 0.0)};
}

LossValue evaluate_term(const CompositeLoss& c, std::span<const double> z) {
    LossValue out;
    out.logit_grad.assign(z.size(), 0.0);
    for (const auto& wt : c.terms) {
        const LossValue part = std::visit([&](const auto& t) { return evaluate_term(t, z); }, wt.term);
        out.value += wt.weight * part.value;
        for (std::size_t k = 0; k < z.size(); ++k) out.logit_grad[k] += wt.weight * part.logit_grad[k];
    }
    return out;
}

LossTerm term_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "cross_entropy") return CrossEntropyLoss{j.at("label").get<std::size_t>()};
    if (kind == "soft_cross_entropy") return SoftCrossEntropyLoss{j.at("target").get<std::vector<double>>()};
    if (kind == "margin") {
        return MarginLoss{j.at("label").get<std::size_t>(), j.value("kappa", 0.0), j.value("targeted", true)};
    }
    if (kind == "l1_difference") return ProbabilityL1Loss{j.at("reference").get<std::vector<double>>()};
    if (kind == "constant") return ConstantLoss{j.at("value").get<double>()};
    throw ConfigError(fmt::format("unregistered loss '{}'", kind));
}

}  // namespace

LossValue evaluate_loss(const LossDescriptor& loss, std::span<const double> logits) {
    LossValue out = std::visit([&](const auto& l) { return evaluate_term(l, logits); }, loss);
    if (!std::isfinite(out.value)) throw NumericError("loss evaluated to a non-finite value");
    return out;
}

InputGradient input_gradient(const Model& model, const Tensor& x, const LossDescriptor& loss, const DropoutMask* mask) {
    InputGradient out;
    out.pass = model.forward(x, mask);
    const LossValue lv = evaluate_loss(loss, out.pass.logits);
    out.value = lv.value;
    out.gradient = model.backward_logits(out.pass, lv.logit_grad, mask);
    return out;
}

LossDescriptor loss_from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() == "composite") {
        CompositeLoss c;
        for (const auto& t : j.at("terms")) c.terms.push_back({t.value("weight", 1.0), term_from_json(t)});
        return c;
    }
    return std::visit([](auto&& t) -> LossDescriptor { return t; }, term_from_json(j));
}

}  // namespace advpocket
