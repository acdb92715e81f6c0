#include "advpocket/detector.hpp"

#include "advpocket/error.hpp"
#include "advpocket/hash.hpp"
#include "advpocket/parallel.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace advpocket {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string to_string(TargetChoice c) {
    return c == TargetChoice::next_class ? "next_class" : "uniform_excluding_prediction";
}

TargetChoice target_choice_from_string(const std::string& s) {
    if (s == "next_class") return TargetChoice::next_class;
    if (s == "uniform_excluding_prediction") return TargetChoice::uniform_excluding_prediction;
    throw ConfigError(fmt::format("unknown target_choice '{}'", s));
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
    if (!j.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", what));
    for (const auto& item : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; })) {
            throw ConfigError(fmt::format("unknown {} key '{}'", what, item.key()));
        }
    }
}

// Threshold at level k for one column: flagging score > t marks the k largest scores (fewer on ties).
double level_threshold(const std::vector<double>& sorted, std::size_t k) {
    const std::size_t n = sorted.size();
    double max_finite = 0.0;
    bool any_finite = false;
    for (double v : sorted) {
        if (std::isfinite(v)) {
            max_finite = any_finite ? std::max(max_finite, v) : v;
            any_finite = true;
        }
    }
    if (k >= n) {
        if (!any_finite) return 0.0;
        return std::nextafter(sorted.front(), -kInf);
    }
    const double t = sorted[n - 1 - k];
    return std::isfinite(t) ? t : max_finite;
}

bool exceeds(double score, double threshold) { return std::isinf(score) || score > threshold; }

}  // namespace

std::string to_string(Criterion c) {
    switch (c) {
        case Criterion::c1: return "C1";
        case Criterion::c2t: return "C2t";
        case Criterion::c2u: return "C2u";
    }
    return "unknown";
}

Criterion criterion_from_string(const std::string& name) {
    for (auto c : {Criterion::c1, Criterion::c2t, Criterion::c2u}) {
        if (to_string(c) == name) return c;
    }
    throw ConfigError(fmt::format("unknown criterion '{}'", name));
}

AttackConfig DetectorConfig::default_c2t() {
    AttackConfig c;
    c.loss = AttackLoss::cross_entropy_targeted;
    c.learning_rate = 0.005;
    c.max_steps = 200;
    c.tau = 0.03;
    return c;
}

AttackConfig DetectorConfig::default_c2u() {
    AttackConfig c;
    c.loss = AttackLoss::cross_entropy_untargeted;
    c.learning_rate = 0.2;
    c.max_steps = 1000;
    c.tau = 0.03;
    return c;
}

void DetectorConfig::validate() const {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError(fmt::format("sigma {} must be >= 0", sigma));
    if (n_noise < 1) throw ConfigError(fmt::format("n_noise {} must be >= 1", n_noise));
    c2t_attack.validate();
    c2u_attack.validate();
    if (!c2t_attack.targeted()) throw ConfigError("c2t_attack must use a targeted loss");
    if (c2u_attack.targeted()) throw ConfigError("c2u_attack must use an untargeted loss");
}

std::uint64_t DetectorConfig::fingerprint() const {
    nlohmann::json j = *this;
    return fnv1a(j.dump());
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    nlohmann::json t = c.c2t_attack;
    nlohmann::json u = c.c2u_attack;
    t.erase("target");
    j = {{"sigma", c.sigma},          {"n_noise", c.n_noise},
         {"c2t_attack", t},           {"c2u_attack", u},
         {"target_choice", to_string(c.target_choice)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    check_keys(j, {"sigma", "n_noise", "c2t_attack", "c2u_attack", "target_choice", "seed"}, "detector");
    DetectorConfig out;
    out.sigma = j.value("sigma", out.sigma);
    out.n_noise = j.value("n_noise", out.n_noise);
    // Partial attack sections override the desk defaults key by key.
    auto merge = [](AttackConfig base, const nlohmann::json& patch) {
        nlohmann::json merged = base;
        merged.merge_patch(patch);
        return merged.get<AttackConfig>();
    };
    if (j.contains("c2t_attack")) out.c2t_attack = merge(out.c2t_attack, j.at("c2t_attack"));
    if (j.contains("c2u_attack")) out.c2u_attack = merge(out.c2u_attack, j.at("c2u_attack"));
    if (j.contains("target_choice")) out.target_choice = target_choice_from_string(j.at("target_choice").get<std::string>());
    out.seed = j.value("seed", out.seed);
    out.validate();
    c = out;
}

double stat_c1(const Model& model, const Tensor& x, double sigma, int n_noise, Rng& rng) {
    if (n_noise < 1) throw ConfigError("n_noise must be >= 1");
    if (sigma == 0.0) return 0.0;
    const std::vector<double> clean = model.probabilities(x);
    std::normal_distribution<double> noise(0.0, sigma);
    Tensor noisy = x;
    double total = 0.0;
    for (int s = 0; s < n_noise; ++s) {
        auto dst = noisy.values();
        auto src = x.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::clamp(src[i] + noise(rng), 0.0, 1.0);
        total += l1_distance(clean, model.probabilities(noisy));
    }
    return total / n_noise;
}

std::size_t c2t_target(const Model& model, const Tensor& x, const DetectorConfig& config, std::uint64_t input_id) {
    const std::size_t classes = model.num_classes();
    if (classes < 2) throw ConfigError("C2t needs at least two classes");
    const std::size_t pred = model.predict(x);
    if (config.target_choice == TargetChoice::next_class) return (pred + 1) % classes;
    Rng rng = make_rng(config.seed, {stream::c2t_target, input_id});
    std::uniform_int_distribution<std::size_t> pick(0, classes - 2);
    const std::size_t t = pick(rng);
    return t >= pred ? t + 1 : t;
}

FlipCount stat_c2t(const Model& model, const Tensor& x, const DetectorConfig& config, std::uint64_t input_id,
                   std::optional<std::size_t> target) {
    const std::size_t t = target ? *target : c2t_target(model, x, config, input_id);
    if (t >= model.num_classes()) throw ConfigError(fmt::format("C2t target {} out of range", t));
    return steps_to_flip(model, x, AttackGoal{t, true}, config.c2t_attack);
}

FlipCount stat_c2u(const Model& model, const Tensor& x, const DetectorConfig& config) {
    return steps_to_flip(model, x, AttackGoal{model.predict(x), false}, config.c2u_attack);
}

DetectionStats compute_stats(const Model& model, const Tensor& x, const DetectorConfig& config,
                             std::uint64_t input_id) {
    config.validate();
    DetectionStats s;
    auto start = std::chrono::steady_clock::now();
    Rng noise = make_rng(config.seed, {stream::c1_noise, input_id});
    s.delta = stat_c1(model, x, config.sigma, config.n_noise, noise);
    s.seconds_c1 = seconds_since(start);

    start = std::chrono::steady_clock::now();
    s.c2t_target = c2t_target(model, x, config, input_id);
    const FlipCount t = stat_c2t(model, x, config, input_id, s.c2t_target);
    s.k_t = t.steps;
    s.t_flipped = t.flipped;
    s.seconds_c2t = seconds_since(start);

    start = std::chrono::steady_clock::now();
    const FlipCount u = stat_c2u(model, x, config);
    s.k_u = u.steps;
    s.u_flipped = u.flipped;
    s.seconds_c2u = seconds_since(start);
    return s;
}

double union_flag_rate(const std::vector<std::vector<double>>& scores, const std::vector<double>& thresholds) {
    if (scores.size() != thresholds.size()) throw ShapeError("one threshold per score column expected");
    if (scores.empty() || scores.front().empty()) return 0.0;
    const std::size_t n = scores.front().size();
    std::size_t flagged = 0;
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < scores.size(); ++c) {
            if (exceeds(scores[c][r], thresholds[c])) {
                ++flagged;
                break;
            }
        }
    }
    return static_cast<double>(flagged) / static_cast<double>(n);
}

QuantileCalibration calibrate_shared_quantile(const std::vector<std::vector<double>>& scores, double target_fpr) {
    if (!(target_fpr > 0.0 && target_fpr <= 1.0)) {
        throw CalibrationError(fmt::format("target FPR {} outside (0, 1]", target_fpr));
    }
    if (scores.empty()) throw CalibrationError("no criteria to calibrate");
    const std::size_t n = scores.front().size();
    for (const auto& col : scores) {
        if (col.size() != n) throw ShapeError("score columns differ in length");
        for (double v : col) {
            if (std::isnan(v) || v == -kInf) throw CalibrationError("calibration scores must be finite or +inf");
        }
    }
    if (static_cast<double>(n) * target_fpr < 1.0 - 1e-12) {
        throw CalibrationError(fmt::format(
            "calibration set of {} inputs cannot identify the {} quantile (need at least {})", n,
            1.0 - target_fpr, static_cast<std::size_t>(std::ceil(1.0 / target_fpr - 1e-12))));
    }
    std::vector<std::vector<double>> sorted = scores;
    for (auto& col : sorted) std::sort(col.begin(), col.end());
    auto thresholds_at = [&](std::size_t k) {
        std::vector<double> t;
        t.reserve(sorted.size());
        for (const auto& col : sorted) t.push_back(level_threshold(col, k));
        return t;
    };

    // Union rate is non-decreasing in k; find the largest k whose rate stays within target.
    std::size_t lo = 0;
    std::size_t hi = n;
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo + 1) / 2;
        if (union_flag_rate(scores, thresholds_at(mid)) <= target_fpr + 1e-12) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    if (lo == 0 && union_flag_rate(scores, thresholds_at(0)) > target_fpr + 1e-12) {
        throw CalibrationError(fmt::format(
            "{:.3f} of calibration inputs never flip within the step cap, above the target FPR {}; raise the cap",
            union_flag_rate(scores, thresholds_at(0)), target_fpr));
    }
    QuantileCalibration out;
    out.level = lo;
    out.thresholds = thresholds_at(lo);
    out.achieved_fpr = union_flag_rate(scores, out.thresholds);
    return out;
}

bool Thresholds::uses(Criterion c) const { return std::find(criteria.begin(), criteria.end(), c) != criteria.end(); }

void to_json(nlohmann::json& j, const Thresholds& t) {
    nlohmann::json crit = nlohmann::json::array();
    for (auto c : t.criteria) crit.push_back(to_string(c));
    j = {{"t_c1", t.t_c1},
         {"t_c2t", t.t_c2t},
         {"t_c2u", t.t_c2u},
         {"criteria", crit},
         {"target_fpr", t.target_fpr},
         {"achieved_fpr", t.achieved_fpr},
         {"quantile_level", t.quantile_level},
         {"calibration_size", t.calibration_size},
         {"calibration_set_id", t.calibration_set_id},
         {"model_checksum", hex64(t.model_checksum)},
         {"config_hash", hex64(t.config_hash)}};
}

void from_json(const nlohmann::json& j, Thresholds& t) {
    check_keys(j,
               {"t_c1", "t_c2t", "t_c2u", "criteria", "target_fpr", "achieved_fpr", "quantile_level",
                "calibration_size", "calibration_set_id", "model_checksum", "config_hash"},
               "thresholds");
    Thresholds out;
    try {
        out.t_c1 = j.at("t_c1").get<double>();
        out.t_c2t = j.at("t_c2t").get<double>();
        out.t_c2u = j.at("t_c2u").get<double>();
        out.criteria.clear();
        for (const auto& c : j.at("criteria")) out.criteria.push_back(criterion_from_string(c.get<std::string>()));
        out.target_fpr = j.at("target_fpr").get<double>();
        out.achieved_fpr = j.value("achieved_fpr", 0.0);
        out.quantile_level = j.value("quantile_level", 0.0);
        out.calibration_size = j.value("calibration_size", std::size_t{0});
        out.calibration_set_id = j.value("calibration_set_id", std::string{});
        out.model_checksum = parse_hex64(j.at("model_checksum").get<std::string>());
        out.config_hash = parse_hex64(j.at("config_hash").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("malformed thresholds: {}", e.what()));
    } catch (const std::logic_error& e) {
        throw ConfigError(fmt::format("malformed thresholds checksum: {}", e.what()));
    }
    if (!std::isfinite(out.t_c1) || !std::isfinite(out.t_c2t) || !std::isfinite(out.t_c2u)) {
        throw ConfigError("thresholds must be finite");
    }
    t = out;
}

double criterion_score(const DetectionStats& s, Criterion c) {
    switch (c) {
        case Criterion::c1: return s.delta;
        case Criterion::c2t: return s.t_flipped ? static_cast<double>(s.k_t) : kInf;
        case Criterion::c2u: return s.u_flipped ? static_cast<double>(s.k_u) : kInf;
    }
    return 0.0;
}

Thresholds calibrate(const std::vector<DetectionStats>& clean, const DetectorConfig& config, double target_fpr,
                     std::uint64_t model_checksum, std::string set_id, std::vector<Criterion> criteria) {
    if (criteria.empty()) throw CalibrationError("at least one criterion required");
    std::vector<std::vector<double>> scores(criteria.size());
    for (std::size_t c = 0; c < criteria.size(); ++c) {
        scores[c].reserve(clean.size());
        for (const auto& s : clean) scores[c].push_back(criterion_score(s, criteria[c]));
    }
    const QuantileCalibration q = calibrate_shared_quantile(scores, target_fpr);
    Thresholds t;
    for (std::size_t c = 0; c < criteria.size(); ++c) {
        switch (criteria[c]) {
            case Criterion::c1: t.t_c1 = q.thresholds[c]; break;
            case Criterion::c2t: t.t_c2t = q.thresholds[c]; break;
            case Criterion::c2u: t.t_c2u = q.thresholds[c]; break;
        }
    }
    t.criteria = std::move(criteria);
    t.target_fpr = target_fpr;
    t.achieved_fpr = q.achieved_fpr;
    t.quantile_level = static_cast<double>(q.level) / static_cast<double>(clean.size());
    t.calibration_size = clean.size();
    t.calibration_set_id = std::move(set_id);
    t.model_checksum = model_checksum;
    t.config_hash = config.fingerprint();
    return t;
}

Thresholds calibrate(const Model& model, const std::vector<Tensor>& clean_set, const DetectorConfig& config,
                     double target_fpr, std::string set_id, int jobs) {
    config.validate();
    if (static_cast<double>(clean_set.size()) * target_fpr < 1.0 - 1e-12) {
        throw CalibrationError(fmt::format("calibration set of {} inputs is smaller than 1/FPR = {}",
                                           clean_set.size(), 1.0 / target_fpr));
    }
    std::vector<DetectionStats> stats(clean_set.size());
    parallel_for(clean_set.size(), jobs, [&](std::size_t i) { stats[i] = compute_stats(model, clean_set[i], config, i); });
    return calibrate(stats, config, target_fpr, model.checksum(), std::move(set_id));
}

Verdict detect(const DetectionStats& stats, const Thresholds& thresholds) {
    Verdict v;
    v.stats = stats;
    for (auto c : {Criterion::c1, Criterion::c2t, Criterion::c2u}) {
        if (!thresholds.uses(c)) continue;
        const double t = c == Criterion::c1 ? thresholds.t_c1 : (c == Criterion::c2t ? thresholds.t_c2t : thresholds.t_c2u);
        if (exceeds(criterion_score(stats, c), t)) v.failed_criteria.push_back(c);
    }
    v.is_adversarial = !v.failed_criteria.empty();
    return v;
}

Verdict detect(const Model& model, const Tensor& x, const Thresholds& thresholds, const DetectorConfig& config,
               std::uint64_t input_id) {
    if (thresholds.model_checksum != model.checksum()) {
        throw CalibrationError(fmt::format("thresholds were calibrated for model {}, not {}",
                                           hex64(thresholds.model_checksum), hex64(model.checksum())));
    }
    if (thresholds.config_hash != config.fingerprint()) {
        throw CalibrationError(fmt::format("thresholds were calibrated with detector config {}, not {}",
                                           hex64(thresholds.config_hash), hex64(config.fingerprint())));
    }
    return detect(compute_stats(model, x, config, input_id), thresholds);
}

double choose_sigma(const Model& model, const std::vector<Tensor>& clean, const std::vector<int>& labels,
                    const std::vector<double>& candidates, double max_drop, std::uint64_t seed) {
    if (clean.size() != labels.size()) throw ShapeError("one label per clean input expected");
    if (clean.empty() || candidates.empty()) throw ConfigError("choose_sigma needs inputs and candidates");
    auto acc = [&](double sigma) {
        std::size_t ok = 0;
        for (std::size_t i = 0; i < clean.size(); ++i) {
            Tensor x = clean[i];
            if (sigma > 0.0) {
                Rng rng = make_rng(seed, {stream::c1_noise, i});
                std::normal_distribution<double> noise(0.0, sigma);
                for (double& v : x.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
            }
            ok += static_cast<int>(model.predict(x)) == labels[i];
        }
        return static_cast<double>(ok) / static_cast<double>(clean.size());
    };
    const double base = acc(0.0);
    std::vector<double> sorted = candidates;
    std::sort(sorted.begin(), sorted.end());
    double best = sorted.front();
    for (double s : sorted) {
        if (base - acc(s) <= max_drop + 1e-12) best = s;
    }
    return best;
}

}  // namespace advpocket
