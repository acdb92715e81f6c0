#pragma once

#include "advpocket/attacks.hpp"
#include "advpocket/baselines.hpp"
#include "advpocket/model.hpp"
#include "advpocket/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace advpocket {

/// The four components of the white-box objective lambda*L1 + L2 + L3 + L4.
enum class WhiteboxTerm { l1, l2, l3, l4 };
enum class BaseLoss { pgd_ce, cw_margin };

std::string to_string(WhiteboxTerm t);
std::string to_string(BaseLoss b);
WhiteboxTerm whitebox_term_from_string(const std::string& s);
BaseLoss base_loss_from_string(const std::string& s);

struct WhiteboxConfig {
    double lambda = 2.0;
    double alpha = 0.005;  // simulated detector step for L3/L4
    double learning_rate = 0.01;
    int max_steps = 50;
    double tau = 0.1;
    double sigma = 0.1;  // noise level of L2; should match the detector's sigma
    int mc_noise_samples = 1;
    int mc_class_samples = 1;
    std::vector<WhiteboxTerm> enabled = {WhiteboxTerm::l1, WhiteboxTerm::l2, WhiteboxTerm::l3, WhiteboxTerm::l4};
    BaseLoss base_loss = BaseLoss::pgd_ce;
    double kappa = 0.0;
    bool targeted = true;  // false: L1 pushes away from the true class, L3/L4 use the current prediction
    std::uint64_t seed = 0;

    bool uses(WhiteboxTerm t) const;
    /// Throws ConfigError unless lambda > 0, alpha >= 0, sample counts >= 1 and L1 is enabled.
    void validate() const;
};

void to_json(nlohmann::json& j, const WhiteboxConfig& c);
void from_json(const nlohmann::json& j, WhiteboxConfig& c);

/// h(x) with the source and target entries exchanged.
struct PadvVector {
    std::vector<double> probs;
    std::size_t source = 0;
    std::size_t target = 0;
};

/// Throws ConfigError if y == y_t or either label is out of range.
PadvVector make_p_adv(std::span<const double> probs, std::size_t y, std::size_t y_t);

/// Cross-entropy of h(x') against the soft target p_adv.
double loss_L1(const Model& model, const Tensor& x_prime, const PadvVector& p_adv);

/// Monte Carlo estimate of E ||h(x') - h(clamp(x' + eps))||_1, eps ~ N(0, sigma^2 I).
double loss_L2(const Model& model, const Tensor& x_prime, double sigma, int mc_noise_samples, Rng& rng);

/// Mean over sampled y' != y_t of CE(h(x' - alpha * d_y'), y'), d_y' = grad CE(h(x'), y').
double loss_L3(const Model& model, const Tensor& x_prime, std::size_t y_t, double alpha, int mc_class_samples,
               Rng& rng);

/// -CE(h(x' + alpha * d_yt), y_t), d_yt = grad CE(h(x'), y_t).
double loss_L4(const Model& model, const Tensor& x_prime, std::size_t y_t, double alpha);

/// Random quantities of one white-box iteration: the L2 noise draws and the L3 classes.
struct WhiteboxDraw {
    std::vector<Tensor> noise;
    std::vector<std::size_t> l3_classes;
};

WhiteboxDraw draw_whitebox(const Model& model, const Tensor& x_prime, std::size_t y_t, const WhiteboxConfig& config,
                           Rng& rng);

/// Inner attack gradients d_y' (one per L3 class) and d_yt, treated as constants by BPDA.
struct FrozenDeltas {
    std::vector<Tensor> l3;
    Tensor l4;
};

FrozenDeltas inner_gradients(const Model& model, const Tensor& x_prime, std::size_t y_t, const WhiteboxDraw& draw);

struct WhiteboxLoss {
    std::array<double, 4> terms{};  // L1..L4 values, computed whether or not enabled
    double total = 0.0;             // lambda*L1 + enabled others
    Tensor gradient;                // d total / d x' for the frozen-delta surrogate
};

/// The objective at x' with the given deltas held fixed: its gradient is exact for the surrogate
/// g(x') = loss(x' -/+ alpha * frozen). `label` is y_t (targeted) or the true class (untargeted).
WhiteboxLoss whitebox_surrogate(const Model& model, const Tensor& x_prime, const PadvVector& p_adv, std::size_t y_t,
                                const WhiteboxConfig& config, const WhiteboxDraw& draw, const FrozenDeltas& frozen);

/// BPDA gradient: deltas computed at x', then frozen.
WhiteboxLoss bpda_gradient(const Model& model, const Tensor& x_prime, const PadvVector& p_adv, std::size_t y_t,
                           const WhiteboxConfig& config, const WhiteboxDraw& draw);

struct LossTraces {
    std::vector<double> l1, l2, l3, l4, total;
};

struct WhiteboxResult {
    AttackResult attack;
    LossTraces traces;  // one entry per step, values at the start of the step
    std::size_t target = 0;
};

/// Adam + L-infinity/box projection on the white-box objective. p_adv is frozen from h(x).
/// Untargeted configs ignore y_t. RNG stream: (config.seed, input_id).
WhiteboxResult run_whitebox(const Model& model, const Tensor& x, std::size_t y, std::size_t y_t,
                            const WhiteboxConfig& config, std::uint64_t input_id = 0);

struct WhiteboxCase {
    Tensor x;
    std::size_t label = 0;
    std::size_t target = 0;
    std::uint64_t id = 0;
};

struct LambdaSearch {
    double lambda = 0.0;
    std::vector<std::pair<double, double>> tried;  // (lambda, success rate)
    bool reached = false;
};

/// Doubles lambda from config.lambda until the probe success rate reaches `target_rate`, at most
/// `max_doublings` times.
LambdaSearch escalate_lambda(const Model& model, const std::vector<WhiteboxCase>& probe, const WhiteboxConfig& config,
                             double target_rate = 0.95, int max_doublings = 6, int jobs = 1);

/// CE(h(x'), y_t) + sum_i ||h(x') - h(F_i(x'))||_1. Identity backward through quantization and
/// non-local means, exact routing through the median. The attack loss kind, lr, steps and tau
/// come from `attack`.
AttackResult whitebox_vs_feature_squeezing(const Model& model, const Tensor& x, std::size_t y_t,
                                           const SqueezeConfig& squeeze, const AttackConfig& attack);

/// Value and BPDA gradient of the feature squeezing objective at x'.
struct ObjectiveValue {
    double value = 0.0;
    Tensor gradient;
};
ObjectiveValue fs_attack_objective(const Model& model, const Tensor& x_prime, std::size_t y_t,
                                   const SqueezeConfig& squeeze, const AttackConfig& attack);

/// CE(h(x'), y_t) - phi_{y_t}(x') + tr(Sigma(x')), Sigma from config.n_dropout_masks fresh masks per
/// iteration. Throws ConfigError for a model without dropout.
AttackResult whitebox_vs_artifacts(const Model& model, const Tensor& x, std::size_t y_t, const KdeModel& kde,
                                   const ArtifactsConfig& artifacts, const AttackConfig& attack,
                                   std::uint64_t input_id = 0);

/// The artifacts objective for explicit masks (for gradient checks).
ObjectiveValue artifacts_attack_objective(const Model& model, const Tensor& x_prime, std::size_t y_t,
                                          const KdeModel& kde, const std::vector<DropoutMask>& masks,
                                          const AttackConfig& attack);

}  // namespace advpocket
