#pragma once

#include "advpocket/data.hpp"
#include "advpocket/detector.hpp"
#include "advpocket/model.hpp"
#include "advpocket/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace advpocket {

struct NlmParams {
    std::size_t patch = 3;   // odd patch side
    std::size_t search = 7;  // odd search window side
    double strength = 0.1;   // filter parameter h, in pixel units
};

struct SqueezeConfig {
    std::size_t median_window = 3;  // 0 disables
    int bit_depth = 5;              // 0 disables
    std::optional<NlmParams> nlm = NlmParams{};

    /// Throws ConfigError on an even or too small window, bit_depth outside [1, 8], or bad NLM sizes.
    void validate() const;
    std::size_t transform_count() const noexcept;
};

void to_json(nlohmann::json& j, const SqueezeConfig& c);
void from_json(const nlohmann::json& j, SqueezeConfig& c);

/// Per-channel median filter over a window x window neighbourhood with reflect padding. When
/// `source` is given it receives, for every output pixel, the flat input index the median came from.
Tensor median_filter(const Tensor& x, std::size_t window, std::vector<std::size_t>* source = nullptr);

/// round(x * (2^bits - 1)) / (2^bits - 1).
Tensor bit_quantize(const Tensor& x, int bits);

/// Non-local means with square patches compared inside a square search window (reflect padding).
Tensor non_local_means(const Tensor& x, const NlmParams& params);

enum class SqueezeKind { median, bit_depth, nlm };
std::string to_string(SqueezeKind k);

struct SqueezedInput {
    SqueezeKind kind;
    Tensor image;
    std::vector<std::size_t> median_source;  // filled for the median transform only
};

/// Every enabled transform of a [C, H, W] image, each inside the unit box.
std::vector<SqueezedInput> squeeze_transforms(const Tensor& x, const SqueezeConfig& config);

/// max_i ||h(x) - h(F_i(x))||_1. Throws ConfigError when every transform is disabled.
double fs_statistic(const Model& model, const Tensor& x, const SqueezeConfig& config);

struct ArtifactsConfig {
    double kde_bandwidth = 0.0;  // <= 0: median heuristic at fit time
    int n_dropout_masks = 50;
    double dropout_rate = 0.5;

    void validate() const;
};

void to_json(nlohmann::json& j, const ArtifactsConfig& c);
void from_json(const nlohmann::json& j, ArtifactsConfig& c);

/// Class-conditional Gaussian KDE over penultimate-layer features,
/// phi_c(f) = mean_i exp(-||f - f_i||^2 / (2 b^2)) over training features f_i of class c.
struct KdeModel {
    double bandwidth = 1.0;
    std::size_t dim = 0;
    std::vector<std::vector<double>> class_features;  // row-major [count_c * dim] per class
    std::uint64_t model_checksum = 0;

    std::size_t num_classes() const noexcept { return class_features.size(); }
    std::size_t count(std::size_t c) const noexcept { return dim == 0 ? 0 : class_features[c].size() / dim; }
};

/// Median pairwise Euclidean distance over (a deterministic subsample of at most `max_points` of) rows.
double median_heuristic_bandwidth(const std::vector<std::vector<double>>& rows, std::size_t max_points = 1000);

/// Throws DataError(insufficient) when some class has no training feature.
KdeModel kde_fit(const std::vector<std::vector<double>>& features, const std::vector<int>& labels,
                 std::size_t num_classes, double bandwidth);

/// Features of every training image under `model`, then kde_fit.
KdeModel kde_fit(const Model& model, const Dataset& train_set, double bandwidth);

struct KdeValue {
    double density = 0.0;
    std::vector<double> gradient;  // d phi / d feature
};

double kde_density(const KdeModel& kde, std::span<const double> feature, std::size_t cls);
/// log phi via log-sum-exp; finite even where phi underflows.
double kde_log_density(const KdeModel& kde, std::span<const double> feature, std::size_t cls);
KdeValue kde_density_with_gradient(const KdeModel& kde, std::span<const double> feature, std::size_t cls);

/// Binary file "APKD" v1: bandwidth, dim, model checksum, per-class counts, float64 features.
void save_kde(const KdeModel& kde, const std::filesystem::path& path);
KdeModel load_kde(const std::filesystem::path& path);

struct Uncertainty {
    std::vector<double> mu;
    double trace_sigma = 0.0;
};

/// N dropout-masked forward passes: mean probability and trace of their empirical covariance
/// (N - 1 denominator). Throws ConfigError when the model has no dropout layer.
Uncertainty dropout_uncertainty(const Model& model, const Tensor& x, const ArtifactsConfig& config, Rng& rng);

struct BaselineStats {
    double fs = 0.0;
    double log_density = 0.0;
    double trace_sigma = 0.0;
    std::size_t predicted = 0;
};

/// FS statistic, KDE log-density of the predicted class and dropout uncertainty; dropout stream seeded by
/// (seed, input_id).
BaselineStats compute_baseline_stats(const Model& model, const Tensor& x, const SqueezeConfig& squeeze,
                                     const KdeModel& kde, const ArtifactsConfig& artifacts, std::uint64_t seed,
                                     std::uint64_t input_id);

enum class BaselineKind { feature_squeezing, artifacts };
std::string to_string(BaselineKind k);

struct BaselineThresholds {
    BaselineKind kind = BaselineKind::feature_squeezing;
    double t_fs = 0.0;
    double t_log_density = 0.0;
    double t_trace = 0.0;
    double target_fpr = 0.0;
    double achieved_fpr = 0.0;
    std::size_t calibration_size = 0;
    std::uint64_t model_checksum = 0;
};

void to_json(nlohmann::json& j, const BaselineThresholds& t);
void from_json(const nlohmann::json& j, BaselineThresholds& t);

/// Shared-quantile calibration of the baseline's statistics on clean inputs.
BaselineThresholds calibrate_baseline(BaselineKind kind, const std::vector<BaselineStats>& clean, double target_fpr,
                                      std::uint64_t model_checksum);

struct BaselineVerdict {
    bool is_adversarial = false;
    std::vector<std::string> reasons;  // "fs", "density", "uncertainty"
};

/// FS: fs > t_fs. Artifacts: log_density < t_log_density or trace > t_trace. Strict inequalities.
BaselineVerdict baseline_detect(const BaselineStats& stats, const BaselineThresholds& thresholds);

/// As above, refusing thresholds calibrated for another model.
BaselineVerdict baseline_detect(const BaselineStats& stats, const BaselineThresholds& thresholds,
                                std::uint64_t model_checksum);

}  // namespace advpocket
