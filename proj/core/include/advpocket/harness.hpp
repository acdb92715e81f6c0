#pragma once

#include "advpocket/adaptive.hpp"
#include "advpocket/baselines.hpp"
#include "advpocket/data.hpp"
#include "advpocket/detector.hpp"
#include "advpocket/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace advpocket {

enum class AttackKind { pgd, cw };
enum class Variant { full, gray_box, c1_only, untargeted, small_radius };
/// Which objective produced an adversarial set: the detector-aware attack or a baseline-aware one.
enum class Adversary { detector, feature_squeezing, artifacts };

std::string to_string(AttackKind k);
std::string to_string(Variant v);
std::string to_string(Adversary a);
AttackKind attack_kind_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);
Adversary adversary_from_string(const std::string& s);

/// Detection-rate rows of the tables.
inline const std::vector<std::string> kReportRows = {"C1", "C2t", "C2u", "Combined", "FS", "Artifacts"};

struct PlanSettings {
    std::vector<AttackKind> attacks = {AttackKind::pgd, AttackKind::cw};
    std::vector<double> learning_rates = {0.01, 0.03, 0.1};
    std::vector<Variant> variants = {Variant::full, Variant::gray_box, Variant::c1_only, Variant::untargeted,
                                     Variant::small_radius};
    std::vector<double> fprs = {0.1, 0.2};
    std::size_t pass_set_size = 200;
    std::size_t calibration_size = 500;
    std::size_t audit_size = 500;
    int attack_steps = 50;
    double tau = 0.1;
    double small_tau = 0.03;
    bool baseline_attacks = true;
    std::vector<int> c2_cap_candidates;  // empty: keep the detector's caps
    std::size_t c2_probe_size = 100;
    double lambda_target = 0.95;
    std::size_t lambda_probe = 32;
    int lambda_max_doublings = 3;
    std::vector<int> trend_checkpoints = {10, 25, 50, 100};
    std::size_t trend_size = 50;
    double trend_lr = 0.03;
    std::size_t timing_size = 20;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const PlanSettings& p);
void from_json(const nlohmann::json& j, PlanSettings& p);

struct DataPaths {
    std::filesystem::path train_images, train_labels, test_images, test_labels;
};

struct ModelSection {
    std::filesystem::path path;
    std::size_t hidden1 = 256;
    std::size_t hidden2 = 128;
    double dropout = 0.5;
    TrainingConfig training;
};

/// The single experiment config file: {model, data, detector, attacks, adaptive, baselines, plan}.
/// Relative paths are resolved against `base_dir`.
struct RunConfig {
    ModelSection model;
    DataPaths data;
    DetectorConfig detector;
    AttackConfig attacks;  // gray-box attack used by the `attack` subcommand
    WhiteboxConfig adaptive;
    SqueezeConfig squeeze;
    ArtifactsConfig artifacts;
    PlanSettings plan;
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::filesystem::path& p) const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j, std::filesystem::path base_dir = {});

/// Applies "a.b.c=value" to a parsed config. The key path must already exist; the value is parsed
/// as JSON when possible, otherwise taken as a string. Throws ConfigError.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Reads a config file, applies overrides in order, and parses the result.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Detection outcome of one row in one grid cell at one FPR; rate = detected / n over successful
/// adversarials only.
struct RateCell {
    AttackKind attack = AttackKind::pgd;
    double lr = 0.0;
    Variant variant = Variant::full;
    double fpr = 0.0;
    std::string row;
    std::size_t n = 0;
    std::size_t detected = 0;

    std::optional<double> rate() const;
    friend bool operator==(const RateCell&, const RateCell&) = default;
};

struct AttackCell {
    AttackKind attack = AttackKind::pgd;
    double lr = 0.0;
    Variant variant = Variant::full;
    Adversary adversary = Adversary::detector;
    std::size_t attempted = 0;
    std::size_t succeeded = 0;
    double lambda = 0.0;  // 0 for attacks without the white-box objective

    friend bool operator==(const AttackCell&, const AttackCell&) = default;
};

struct FprAudit {
    std::string row;
    double target = 0.0;
    double calibration_fpr = 0.0;
    double audit_fpr = 0.0;
    std::size_t audit_n = 0;

    friend bool operator==(const FprAudit&, const FprAudit&) = default;
};

/// Medians over the pass set of each loss component at one white-box step (step 0 is the clean image).
struct CurvePoint {
    AttackKind attack = AttackKind::pgd;
    double lr = 0.0;
    Variant variant = Variant::full;
    int step = 0;
    double l1 = 0.0, l2 = 0.0, l3 = 0.0, l4 = 0.0, total = 0.0;

    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct TrendPoint {
    std::string series;     // clean, gray_box, white_box
    std::string statistic;  // delta, k_t
    int checkpoint = 0;
    std::size_t n = 0;
    double q30 = 0.0, median = 0.0, q70 = 0.0;

    friend bool operator==(const TrendPoint&, const TrendPoint&) = default;
};

struct TimingRow {
    std::string input_kind;  // clean, pgd, cw
    std::string criterion;   // C1, C2t, C2u
    std::size_t n = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

struct EvaluationReport {
    std::string config_fingerprint;
    std::uint64_t seed = 0;
    nlohmann::json effective_config;
    nlohmann::json detector_used;  // detector config after automatic cap selection
    nlohmann::json calibration;    // per-FPR thresholds of every row
    nlohmann::json lambda_search;
    std::vector<AttackCell> attacks;
    std::vector<RateCell> rates;
    std::vector<FprAudit> audits;
    std::vector<CurvePoint> curves;
    std::vector<TrendPoint> trend;
    std::vector<TimingRow> timing;  // wall-clock; written to timing.csv, never to report.json
};

void to_json(nlohmann::json& j, const EvaluationReport& r);
void from_json(const nlohmann::json& j, EvaluationReport& r);

using Logger = std::function<void(const std::string&)>;

/// Smallest candidate cap such that at least `quantile` of the probe flips within it for both C2
/// attacks (largest candidate when none does). Returns the adjusted config.
DetectorConfig choose_c2_caps(const Model& model, const std::vector<Tensor>& probe, DetectorConfig config,
                              const std::vector<int>& candidates, double quantile = 0.99, int jobs = 1);

/// Median and 30/70% quantiles of delta and K_t for clean, gray-box and white-box inputs after
/// each checkpoint number of attack iterations.
std::vector<TrendPoint> statistic_trend(const Model& model, const std::vector<WhiteboxCase>& cases,
                                        const WhiteboxConfig& adaptive, const DetectorConfig& detector,
                                        const std::vector<int>& checkpoints, int jobs = 1);

/// Mean/stddev seconds per criterion and input kind; the first input of every kind is a warm-up.
std::vector<TimingRow> timing_table(const Model& model,
                                    const std::vector<std::pair<std::string, std::vector<Tensor>>>& inputs_by_kind,
                                    const DetectorConfig& detector);

/// The whole grid: calibration per FPR, adversarial generation per cell, detection tables, loss
/// curves, statistic trend and timing. Deterministic given plan.seed for every `jobs`.
EvaluationReport run_plan(const RunConfig& config, const Model& model, const Dataset& train, const Dataset& test,
                          int jobs = 1, const Logger& log = {});

/// Plain-text tables, one block per (attack kind, FPR); the worst (minimum) rate of each row is
/// marked with '*'.
std::string render_tables(const EvaluationReport& report);

std::string tables_csv(const std::vector<RateCell>& cells);
std::vector<RateCell> parse_tables_csv(const std::string& csv);

/// Writes report.json, tables.csv, curves.csv, trend.csv, tables.txt and timing.csv into `dir`.
/// `formats` filters by file stem ("json", "csv", "txt"); empty means all.
void emit_report(const EvaluationReport& report, const std::filesystem::path& dir,
                 const std::vector<std::string>& formats = {});

EvaluationReport load_report(const std::filesystem::path& report_json);

}  // namespace advpocket
