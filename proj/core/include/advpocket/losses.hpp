#pragma once

#include "advpocket/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>
#include <variant>
#include <vector>

namespace advpocket {

/// cross-entropy(h(x), label), computed from logits via log-sum-exp.
struct CrossEntropyLoss {
    std::size_t label = 0;
};

/// Full-distribution cross-entropy against a soft target: -sum_k t_k log h(x)_k.
struct SoftCrossEntropyLoss {
    std::vector<double> target;
};

/// Hinge on the logit gap. Targeted: [max_{k!=label} Z_k - Z_label + kappa]_+.
/// Untargeted: [Z_label - max_{k!=label} Z_k + kappa]_+.
struct MarginLoss {
    std::size_t label = 0;
    double kappa = 0.0;
    bool targeted = true;
};

/// ||h(x) - reference||_1 with the reference held constant.
struct ProbabilityL1Loss {
    std::vector<double> reference;
};

struct ConstantLoss {
    double value = 0.0;
};

using LossTerm = std::variant<CrossEntropyLoss, SoftCrossEntropyLoss, MarginLoss, ProbabilityL1Loss, ConstantLoss>;

struct WeightedLoss {
    double weight = 1.0;
    LossTerm term;
};

/// Weighted sum of terms evaluated at the same input.
struct CompositeLoss {
    std::vector<WeightedLoss> terms;
};

using LossDescriptor =
    std::variant<CrossEntropyLoss, SoftCrossEntropyLoss, MarginLoss, ProbabilityL1Loss, ConstantLoss, CompositeLoss>;

struct LossValue {
    double value = 0.0;
    std::vector<double> logit_grad;  // dL/dZ
};

/// Value and logit-gradient of a scalar loss. Throws ConfigError on invalid labels or targets.
LossValue evaluate_loss(const LossDescriptor& loss, std::span<const double> logits);

struct InputGradient {
    double value = 0.0;
    Tensor gradient;  // dL/dx, shaped like the model input
    ForwardPass pass;
};

/// Analytic gradient of `loss` with respect to the model input, via backpropagation.
InputGradient input_gradient(const Model& model, const Tensor& x, const LossDescriptor& loss,
                             const DropoutMask* mask = nullptr);

/// Registry lookup for loss descriptors written in config files, e.g.
/// {"kind": "margin", "label": 3, "kappa": 1, "targeted": true}. Unknown kinds throw ConfigError.
LossDescriptor loss_from_json(const nlohmann::json& j);

}  // namespace advpocket
