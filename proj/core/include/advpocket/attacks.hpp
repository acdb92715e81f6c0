#pragma once

#include "advpocket/losses.hpp"
#include "advpocket/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace advpocket {

enum class AttackLoss { cross_entropy_targeted, cross_entropy_untargeted, margin_targeted, margin_untargeted };
enum class Optimizer { adam, sign_gd };

std::string to_string(AttackLoss loss);
std::string to_string(Optimizer optimizer);
AttackLoss attack_loss_from_string(const std::string& name);
Optimizer optimizer_from_string(const std::string& name);

bool is_targeted(AttackLoss loss) noexcept;

struct AttackConfig {
    AttackLoss loss = AttackLoss::cross_entropy_targeted;
    Optimizer optimizer = Optimizer::adam;
    double learning_rate = 0.01;
    int max_steps = 50;
    double tau = 0.1;    // L-infinity budget
    double kappa = 0.0;  // margin constant for the margin losses
    std::optional<std::size_t> target;
    std::uint64_t seed = 0;

    bool targeted() const noexcept { return is_targeted(loss); }
    /// Throws ConfigError on lr <= 0, max_steps < 1, tau outside [0,1], kappa < 0 or a missing target.
    void validate() const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

/// What counts as a flipped prediction.
struct AttackGoal {
    std::size_t label = 0;
    bool targeted = true;

    /// Targeted: prediction equals label. Untargeted: prediction differs from label.
    bool reached(std::size_t prediction) const noexcept { return targeted ? prediction == label : prediction != label; }
};

struct AttackResult {
    Tensor x_adv;
    bool success = false;
    std::optional<int> steps_to_first_flip;
    std::size_t final_prediction = 0;
    std::vector<double> loss_trace;  // loss at the start of each step
    double wall_time = 0.0;          // seconds
};

/// Bias-corrected Adam moments for one variable. Moments are created on first use.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    int step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One Adam descent step on `variable`, in place.
void adam_update(AdamState& state, std::span<double> variable, std::span<const double> gradient, double lr);

/// Loss descriptor for an attack loss aimed at `label` (the target for targeted losses, the
/// original class for untargeted ones).
LossDescriptor attack_loss_descriptor(AttackLoss kind, std::size_t label, double kappa);

/// Value and dL/dZ of the adversarial loss at the given logits.
LossValue adversarial_loss(AttackLoss kind, std::span<const double> logits, std::size_t label, double kappa);

/// Cross-entropy against a probability vector (the soft-target form used by the adaptive attack).
LossValue adversarial_loss(std::span<const double> logits, std::span<const double> target_probs);

/// Coordinate-wise clamp of `candidate` onto {|x - origin|_inf <= tau} intersected with [0,1]^n.
Tensor project_linf_and_box(const Tensor& candidate, const Tensor& origin, double tau);
void project_linf_and_box_inplace(std::span<double> candidate, std::span<const double> origin, double tau);

/// Full-budget attack: gradient step, projection, repeat for max_steps. Records the first step at
/// which the goal was reached but keeps optimizing. Throws NumericError on a non-finite gradient.
AttackResult run_attack(const Model& model, const Tensor& x, const AttackConfig& config);

struct FlipCount {
    int steps = 0;         // cap when the prediction never flipped
    bool flipped = false;

    friend bool operator==(const FlipCount&, const FlipCount&) = default;
};

/// Number of attack steps until the prediction reaches `goal`; stops at the first flip. The attack
/// loss is taken from config.loss, its label from goal.label.
FlipCount steps_to_flip(const Model& model, const Tensor& x, const AttackGoal& goal, const AttackConfig& config);

}  // namespace advpocket
