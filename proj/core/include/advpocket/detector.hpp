#pragma once

#include "advpocket/attacks.hpp"
#include "advpocket/model.hpp"
#include "advpocket/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace advpocket {

enum class Criterion { c1, c2t, c2u };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& name);

enum class TargetChoice {
    uniform_excluding_prediction,  // uniform over classes != current argmax, seeded per input id
    next_class,                    // (argmax + 1) mod C
};

struct DetectorConfig {
    double sigma = 0.1;
    int n_noise = 1;
    AttackConfig c2t_attack = default_c2t();
    AttackConfig c2u_attack = default_c2u();
    TargetChoice target_choice = TargetChoice::uniform_excluding_prediction;
    std::uint64_t seed = 0;

    /// Targeted PGD, step 0.005, 200 steps, tau_A 0.03.
    static AttackConfig default_c2t();
    /// Untargeted PGD, step 0.2, 1000 steps, tau_A 0.03.
    static AttackConfig default_c2u();

    void validate() const;
    /// FNV-1a of the canonical JSON form; ties thresholds to the config they were calibrated with.
    std::uint64_t fingerprint() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

/// (Delta, K_t, K_u) for one input. A K that never flipped holds the cap and flipped = false.
struct DetectionStats {
    double delta = 0.0;
    int k_t = 0;
    int k_u = 0;
    bool t_flipped = true;
    bool u_flipped = true;
    std::size_t c2t_target = 0;
    double seconds_c1 = 0.0;
    double seconds_c2t = 0.0;
    double seconds_c2u = 0.0;
};

/// Mean over n_noise draws eps ~ N(0, sigma^2 I) of ||h(x) - h(clamp(x + eps))||_1.
double stat_c1(const Model& model, const Tensor& x, double sigma, int n_noise, Rng& rng);

/// Class C2t attacks towards under config.target_choice.
std::size_t c2t_target(const Model& model, const Tensor& x, const DetectorConfig& config, std::uint64_t input_id);

/// Steps for the targeted detector attack to reach the target (explicit, or chosen per config).
FlipCount stat_c2t(const Model& model, const Tensor& x, const DetectorConfig& config, std::uint64_t input_id,
                   std::optional<std::size_t> target = std::nullopt);

/// Steps for the untargeted detector attack to move the prediction off the current argmax.
FlipCount stat_c2u(const Model& model, const Tensor& x, const DetectorConfig& config);

/// All three statistics with per-statistic wall times; RNG streams derive from (config.seed, input_id).
DetectionStats compute_stats(const Model& model, const Tensor& x, const DetectorConfig& config,
                             std::uint64_t input_id);

/// Result of the shared-quantile search over several suspicion scores (larger = more suspicious;
/// +inf is always flagged).
struct QuantileCalibration {
    std::vector<double> thresholds;
    std::size_t level = 0;  // number of top order statistics each criterion is allowed to flag
    double achieved_fpr = 0.0;
};

/// Finds the largest shared level k such that flagging score > t_i (t_i the (n-1-k)-th order
/// statistic of criterion i) flags at most target_fpr of the rows in the union. Bisection over k.
/// Throws CalibrationError if n < 1/target_fpr.
QuantileCalibration calibrate_shared_quantile(const std::vector<std::vector<double>>& scores, double target_fpr);

/// Fraction of rows flagged by score > threshold in any column.
double union_flag_rate(const std::vector<std::vector<double>>& scores, const std::vector<double>& thresholds);

struct Thresholds {
    double t_c1 = 0.0;
    double t_c2t = 0.0;
    double t_c2u = 0.0;
    std::vector<Criterion> criteria = {Criterion::c1, Criterion::c2t, Criterion::c2u};
    double target_fpr = 0.0;
    double achieved_fpr = 0.0;
    double quantile_level = 0.0;
    std::size_t calibration_size = 0;
    std::string calibration_set_id;
    std::uint64_t model_checksum = 0;
    std::uint64_t config_hash = 0;

    bool uses(Criterion c) const;
};

void to_json(nlohmann::json& j, const Thresholds& t);
void from_json(const nlohmann::json& j, Thresholds& t);

/// Suspicion score of one criterion; +inf for a C2 attack that never flipped.
double criterion_score(const DetectionStats& s, Criterion c);

/// Thresholds for `criteria` (all three by default) at `target_fpr` on clean statistics.
Thresholds calibrate(const std::vector<DetectionStats>& clean, const DetectorConfig& config, double target_fpr,
                     std::uint64_t model_checksum, std::string set_id,
                     std::vector<Criterion> criteria = {Criterion::c1, Criterion::c2t, Criterion::c2u});

/// Computes statistics for every clean input (parallel over `jobs`), then calibrates.
Thresholds calibrate(const Model& model, const std::vector<Tensor>& clean_set, const DetectorConfig& config,
                     double target_fpr, std::string set_id, int jobs = 1);

struct Verdict {
    bool is_adversarial = false;
    std::vector<Criterion> failed_criteria;
    DetectionStats stats;
};

/// Applies the rejection rule to precomputed statistics.
Verdict detect(const DetectionStats& stats, const Thresholds& thresholds);

/// Computes statistics and applies the rule. Throws CalibrationError if the thresholds were made
/// for a different model or detector config.
Verdict detect(const Model& model, const Tensor& x, const Thresholds& thresholds, const DetectorConfig& config,
               std::uint64_t input_id);

/// Largest sigma among `candidates` whose noisy-input accuracy drop on `clean` stays within max_drop.
double choose_sigma(const Model& model, const std::vector<Tensor>& clean, const std::vector<int>& labels,
                    const std::vector<double>& candidates, double max_drop, std::uint64_t seed);

}  // namespace advpocket
