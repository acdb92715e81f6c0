#include "advpocket/harness.hpp"

#include "advpocket/error.hpp"
#include "advpocket/hash.hpp"
#include "advpocket/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace advpocket {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
    if (!j.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", what));
    for (const auto& item : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; })) {
            throw ConfigError(fmt::format("unknown {} key '{}'", what, item.key()));
        }
    }
}

template <typename T>
T parse_section(const nlohmann::json& j, const char* name) {
    try {
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("config section '{}': {}", name, e.what()));
    }
}

nlohmann::json training_json(const TrainingConfig& t) {
    return {{"epochs", t.epochs},     {"batch_size", t.batch_size}, {"lr", t.learning_rate},
            {"momentum", t.momentum}, {"lr_decay", t.lr_decay},     {"seed", t.seed}};
}

TrainingConfig training_from_json(const nlohmann::json& j) {
    check_keys(j, {"epochs", "batch_size", "lr", "momentum", "lr_decay", "seed"}, "training");
    TrainingConfig t;
    t.epochs = j.value("epochs", t.epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.learning_rate = j.value("lr", t.learning_rate);
    t.momentum = j.value("momentum", t.momentum);
    t.lr_decay = j.value("lr_decay", t.lr_decay);
    t.seed = j.value("seed", t.seed);
    if (t.epochs < 0 || t.batch_size == 0 || !(t.learning_rate > 0.0)) throw ConfigError("invalid training settings");
    return t;
}

double quantile_or_zero(std::vector<double> v, double q) { return v.empty() ? 0.0 : quantile(std::move(v), q); }

std::string fmt_double(double v) { return fmt::format("{}", v); }

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(DataError::Kind::io, fmt::format("cannot write {}", path.string()));
    out << text;
    if (!out) throw DataError(DataError::Kind::io, fmt::format("write to {} failed", path.string()));
}

// Stable ids so that detector and attack RNG streams never depend on the schedule.
std::uint64_t adversarial_id(std::size_t cell, Adversary adv, std::size_t index) {
    return (static_cast<std::uint64_t>(cell) + 1) * 1'000'000ULL + static_cast<std::uint64_t>(adv) * 100'000ULL + index;
}

struct RowThresholds {
    Thresholds combined, c1, c2t, c2u;
    BaselineThresholds fs, artifacts;
};

bool flagged(const std::string& row, const RowThresholds& t, const DetectionStats* s, const BaselineStats* b) {
    if (row == "C1") return detect(*s, t.c1).is_adversarial;
    if (row == "C2t") return detect(*s, t.c2t).is_adversarial;
    if (row == "C2u") return detect(*s, t.c2u).is_adversarial;
    if (row == "Combined") return detect(*s, t.combined).is_adversarial;
    if (row == "FS") return baseline_detect(*b, t.fs).is_adversarial;
    return baseline_detect(*b, t.artifacts).is_adversarial;
}

AttackConfig gray_box_config(AttackKind kind, double lr, int steps, double tau, std::size_t target,
                             std::uint64_t seed) {
    AttackConfig a;
    a.loss = kind == AttackKind::pgd ? AttackLoss::cross_entropy_targeted : AttackLoss::margin_targeted;
    a.learning_rate = lr;
    a.max_steps = steps;
    a.tau = tau;
    a.target = target;
    a.seed = seed;
    return a;
}

}  // namespace

std::string to_string(AttackKind k) { return k == AttackKind::cw ? "cw" : "pgd"; }

std::string to_string(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::gray_box: return "gray_box";
        case Variant::c1_only: return "c1_only";
        case Variant::untargeted: return "untargeted";
        case Variant::small_radius: return "small_radius";
    }
    return "unknown";
}

std::string to_string(Adversary a) {
    switch (a) {
        case Adversary::detector: return "detector";
        case Adversary::feature_squeezing: return "feature_squeezing";
        case Adversary::artifacts: return "artifacts";
    }
    return "unknown";
}

AttackKind attack_kind_from_string(const std::string& s) {
    if (s == "pgd") return AttackKind::pgd;
    if (s == "cw") return AttackKind::cw;
    throw ConfigError(fmt::format("unknown attack kind '{}'", s));
}

Variant variant_from_string(const std::string& s) {
    for (auto v : {Variant::full, Variant::gray_box, Variant::c1_only, Variant::untargeted, Variant::small_radius}) {
        if (to_string(v) == s) return v;
    }
    throw ConfigError(fmt::format("unknown attack variant '{}'", s));
}

Adversary adversary_from_string(const std::string& s) {
    for (auto a : {Adversary::detector, Adversary::feature_squeezing, Adversary::artifacts}) {
        if (to_string(a) == s) return a;
    }
    throw ConfigError(fmt::format("unknown adversary '{}'", s));
}

void PlanSettings::validate() const {
    if (attacks.empty() || learning_rates.empty() || variants.empty()) throw ConfigError("attack grid is empty");
    if (fprs.empty()) throw ConfigError("plan needs at least one FPR target");
    for (double f : fprs) {
        if (!(f > 0.0 && f < 1.0)) throw ConfigError(fmt::format("FPR target {} outside (0, 1)", f));
    }
    for (double lr : learning_rates) {
        if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
    }
    if (pass_set_size == 0 || calibration_size == 0 || audit_size == 0) throw ConfigError("split sizes must be positive");
    if (attack_steps < 1) throw ConfigError("attack_steps must be >= 1");
    if (!(tau >= 0.0 && tau <= 1.0) || !(small_tau >= 0.0 && small_tau <= 1.0)) throw ConfigError("tau outside [0, 1]");
    if (timing_size < 2) throw ConfigError("timing_size must be >= 2 (one warm-up input is discarded)");
    for (int c : trend_checkpoints) {
        if (c < 1) throw ConfigError("trend checkpoints must be >= 1");
    }
    for (int c : c2_cap_candidates) {
        if (c < 1) throw ConfigError("C2 cap candidates must be >= 1");
    }
}

void to_json(nlohmann::json& j, const PlanSettings& p) {
    nlohmann::json attacks = nlohmann::json::array();
    for (auto a : p.attacks) attacks.push_back(to_string(a));
    nlohmann::json variants = nlohmann::json::array();
    for (auto v : p.variants) variants.push_back(to_string(v));
    j = {{"attacks", attacks},
         {"learning_rates", p.learning_rates},
         {"variants", variants},
         {"fprs", p.fprs},
         {"pass_set_size", p.pass_set_size},
         {"calibration_size", p.calibration_size},
         {"audit_size", p.audit_size},
         {"attack_steps", p.attack_steps},
         {"tau", p.tau},
         {"small_tau", p.small_tau},
         {"baseline_attacks", p.baseline_attacks},
         {"c2_cap_candidates", p.c2_cap_candidates},
         {"c2_probe_size", p.c2_probe_size},
         {"lambda_target", p.lambda_target},
         {"lambda_probe", p.lambda_probe},
         {"lambda_max_doublings", p.lambda_max_doublings},
         {"trend_checkpoints", p.trend_checkpoints},
         {"trend_size", p.trend_size},
         {"trend_lr", p.trend_lr},
         {"timing_size", p.timing_size},
         {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, PlanSettings& p) {
    check_keys(j,
               {"attacks", "learning_rates", "variants", "fprs", "pass_set_size", "calibration_size", "audit_size",
                "attack_steps", "tau", "small_tau", "baseline_attacks", "c2_cap_candidates", "c2_probe_size",
                "lambda_target", "lambda_probe", "lambda_max_doublings", "trend_checkpoints", "trend_size", "trend_lr",
                "timing_size", "seed"},
               "plan");
    PlanSettings out;
    if (j.contains("attacks")) {
        out.attacks.clear();
        for (const auto& a : j.at("attacks")) out.attacks.push_back(attack_kind_from_string(a.get<std::string>()));
    }
    if (j.contains("variants")) {
        out.variants.clear();
        for (const auto& v : j.at("variants")) out.variants.push_back(variant_from_string(v.get<std::string>()));
    }
    out.learning_rates = j.value("learning_rates", out.learning_rates);
    out.fprs = j.value("fprs", out.fprs);
    out.pass_set_size = j.value("pass_set_size", out.pass_set_size);
    out.calibration_size = j.value("calibration_size", out.calibration_size);
    out.audit_size = j.value("audit_size", out.audit_size);
    out.attack_steps = j.value("attack_steps", out.attack_steps);
    out.tau = j.value("tau", out.tau);
    out.small_tau = j.value("small_tau", out.small_tau);
    out.baseline_attacks = j.value("baseline_attacks", out.baseline_attacks);
    out.c2_cap_candidates = j.value("c2_cap_candidates", out.c2_cap_candidates);
    out.c2_probe_size = j.value("c2_probe_size", out.c2_probe_size);
    out.lambda_target = j.value("lambda_target", out.lambda_target);
    out.lambda_probe = j.value("lambda_probe", out.lambda_probe);
    out.lambda_max_doublings = j.value("lambda_max_doublings", out.lambda_max_doublings);
    out.trend_checkpoints = j.value("trend_checkpoints", out.trend_checkpoints);
    out.trend_size = j.value("trend_size", out.trend_size);
    out.trend_lr = j.value("trend_lr", out.trend_lr);
    out.timing_size = j.value("timing_size", out.timing_size);
    out.seed = j.value("seed", out.seed);
    out.validate();
    p = out;
}

std::filesystem::path RunConfig::resolve(const std::filesystem::path& p) const {
    if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
    return (base_dir / p).lexically_normal();
}

nlohmann::json to_json(const RunConfig& c) {
    return {{"model",
             {{"path", c.model.path.string()},
              {"hidden1", c.model.hidden1},
              {"hidden2", c.model.hidden2},
              {"dropout", c.model.dropout},
              {"training", training_json(c.model.training)}}},
            {"data",
             {{"train_images", c.data.train_images.string()},
              {"train_labels", c.data.train_labels.string()},
              {"test_images", c.data.test_images.string()},
              {"test_labels", c.data.test_labels.string()}}},
            {"detector", c.detector},
            {"attacks", c.attacks},
            {"adaptive", c.adaptive},
            {"baselines", {{"squeeze", c.squeeze}, {"artifacts", c.artifacts}}},
            {"plan", c.plan}};
}

RunConfig run_config_from_json(const nlohmann::json& j, std::filesystem::path base_dir) {
    check_keys(j, {"model", "data", "detector", "attacks", "adaptive", "baselines", "plan"}, "config");
    RunConfig c;
    c.base_dir = std::move(base_dir);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, {"path", "hidden1", "hidden2", "dropout", "training"}, "model");
        c.model.path = m.value("path", std::string{});
        c.model.hidden1 = m.value("hidden1", c.model.hidden1);
        c.model.hidden2 = m.value("hidden2", c.model.hidden2);
        c.model.dropout = m.value("dropout", c.model.dropout);
        if (m.contains("training")) c.model.training = training_from_json(m.at("training"));
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, {"train_images", "train_labels", "test_images", "test_labels"}, "data");
        c.data.train_images = d.value("train_images", std::string{});
        c.data.train_labels = d.value("train_labels", std::string{});
        c.data.test_images = d.value("test_images", std::string{});
        c.data.test_labels = d.value("test_labels", std::string{});
    }
    if (j.contains("detector")) c.detector = parse_section<DetectorConfig>(j.at("detector"), "detector");
    if (j.contains("attacks")) c.attacks = parse_section<AttackConfig>(j.at("attacks"), "attacks");
    if (j.contains("adaptive")) c.adaptive = parse_section<WhiteboxConfig>(j.at("adaptive"), "adaptive");
    if (j.contains("baselines")) {
        const auto& b = j.at("baselines");
        check_keys(b, {"squeeze", "artifacts"}, "baselines");
        if (b.contains("squeeze")) c.squeeze = parse_section<SqueezeConfig>(b.at("squeeze"), "baselines.squeeze");
        if (b.contains("artifacts")) c.artifacts = parse_section<ArtifactsConfig>(b.at("artifacts"), "baselines.artifacts");
    }
    if (j.contains("plan")) c.plan = parse_section<PlanSettings>(j.at("plan"), "plan");
    return c;
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError(fmt::format("override '{}' is not of the form key.path=value", assignment));
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json* node = &config;
    for (const auto& part : split(key, '.')) {
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError(fmt::format("override key '{}' does not exist in the config", key));
        }
        node = &(*node)[part];
    }
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    *node = value;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    // Overrides may address keys the file leaves at their defaults, so they apply to the full form.
    nlohmann::json full = to_json(run_config_from_json(j, path.parent_path()));
    full.merge_patch(j);
    for (const auto& o : overrides) apply_override(full, o);
    return run_config_from_json(full, path.parent_path());
}

std::optional<double> RateCell::rate() const {
    if (n == 0) return std::nullopt;
    return static_cast<double>(detected) / static_cast<double>(n);
}

void to_json(nlohmann::json& j, const EvaluationReport& r) {
    nlohmann::json attacks = nlohmann::json::array();
    for (const auto& a : r.attacks) {
        attacks.push_back({{"attack", to_string(a.attack)},
                           {"lr", a.lr},
                           {"variant", to_string(a.variant)},
                           {"adversary", to_string(a.adversary)},
                           {"attempted", a.attempted},
                           {"succeeded", a.succeeded},
                           {"success_rate", a.attempted ? static_cast<double>(a.succeeded) / a.attempted : 0.0},
                           {"lambda", a.lambda}});
    }
    nlohmann::json rates = nlohmann::json::array();
    for (const auto& c : r.rates) {
        const auto rate = c.rate();
        rates.push_back({{"attack", to_string(c.attack)},
                         {"lr", c.lr},
                         {"variant", to_string(c.variant)},
                         {"fpr", c.fpr},
                         {"row", c.row},
                         {"n", c.n},
                         {"detected", c.detected},
                         {"rate", rate ? nlohmann::json(*rate) : nlohmann::json(nullptr)}});
    }
    nlohmann::json audits = nlohmann::json::array();
    for (const auto& a : r.audits) {
        audits.push_back({{"row", a.row},
                          {"target", a.target},
                          {"calibration_fpr", a.calibration_fpr},
                          {"audit_fpr", a.audit_fpr},
                          {"audit_n", a.audit_n}});
    }
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& c : r.curves) {
        curves.push_back({{"attack", to_string(c.attack)},
                          {"lr", c.lr},
                          {"variant", to_string(c.variant)},
                          {"step", c.step},
                          {"L1", c.l1},
                          {"L2", c.l2},
                          {"L3", c.l3},
                          {"L4", c.l4},
                          {"total", c.total}});
    }
    nlohmann::json trend = nlohmann::json::array();
    for (const auto& t : r.trend) {
        trend.push_back({{"series", t.series},
                         {"statistic", t.statistic},
                         {"checkpoint", t.checkpoint},
                         {"n", t.n},
                         {"q30", t.q30},
                         {"median", t.median},
                         {"q70", t.q70}});
    }
    j = {{"format", "advpocket-report/1"},
         {"config_fingerprint", r.config_fingerprint},
         {"seed", r.seed},
         {"config", r.effective_config},
         {"detector_used", r.detector_used},
         {"calibration", r.calibration},
         {"lambda_search", r.lambda_search},
         {"attacks", attacks},
         {"rates", rates},
         {"fpr_audit", audits},
         {"curves", curves},
         {"trend", trend}};
}

void from_json(const nlohmann::json& j, EvaluationReport& r) {
    EvaluationReport out;
    try {
        if (j.value("format", std::string{}) != "advpocket-report/1") throw ConfigError("not an advpocket report");
        out.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        out.seed = j.at("seed").get<std::uint64_t>();
        out.effective_config = j.at("config");
        out.detector_used = j.at("detector_used");
        out.calibration = j.at("calibration");
        out.lambda_search = j.at("lambda_search");
        for (const auto& a : j.at("attacks")) {
            out.attacks.push_back({attack_kind_from_string(a.at("attack")), a.at("lr"), variant_from_string(a.at("variant")),
                                   adversary_from_string(a.at("adversary")), a.at("attempted"), a.at("succeeded"),
                                   a.at("lambda")});
        }
        for (const auto& c : j.at("rates")) {
            out.rates.push_back({attack_kind_from_string(c.at("attack")), c.at("lr"), variant_from_string(c.at("variant")),
                                 c.at("fpr"), c.at("row"), c.at("n"), c.at("detected")});
        }
        for (const auto& a : j.at("fpr_audit")) {
            out.audits.push_back({a.at("row"), a.at("target"), a.at("calibration_fpr"), a.at("audit_fpr"), a.at("audit_n")});
        }
        for (const auto& c : j.at("curves")) {
            out.curves.push_back({attack_kind_from_string(c.at("attack")), c.at("lr"), variant_from_string(c.at("variant")),
                                  c.at("step"), c.at("L1"), c.at("L2"), c.at("L3"), c.at("L4"), c.at("total")});
        }
        for (const auto& t : j.at("trend")) {
            out.trend.push_back({t.at("series"), t.at("statistic"), t.at("checkpoint"), t.at("n"), t.at("q30"),
                                 t.at("median"), t.at("q70")});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("malformed report: {}", e.what()));
    }
    r = std::move(out);
}

DetectorConfig choose_c2_caps(const Model& model, const std::vector<Tensor>& probe, DetectorConfig config,
                              const std::vector<int>& candidates, double quantile, int jobs) {
    if (candidates.empty() || probe.empty()) return config;
    std::vector<int> caps = candidates;
    std::sort(caps.begin(), caps.end());
    DetectorConfig wide = config;
    wide.c2t_attack.max_steps = caps.back();
    wide.c2u_attack.max_steps = caps.back();
    std::vector<FlipCount> kt(probe.size()), ku(probe.size());
    parallel_for(probe.size(), jobs, [&](std::size_t i) {
        kt[i] = stat_c2t(model, probe[i], wide, i);
        ku[i] = stat_c2u(model, probe[i], wide);
    });
    auto pick = [&](const std::vector<FlipCount>& k) {
        for (int cap : caps) {
            const auto within = std::count_if(k.begin(), k.end(), [&](const FlipCount& f) { return f.flipped && f.steps <= cap; });
            if (static_cast<double>(within) >= quantile * static_cast<double>(k.size()) - 1e-9) return cap;
        }
        return caps.back();
    };
    config.c2t_attack.max_steps = pick(kt);
    config.c2u_attack.max_steps = pick(ku);
    return config;
}

std::vector<TrendPoint> statistic_trend(const Model& model, const std::vector<WhiteboxCase>& cases,
                                        const WhiteboxConfig& adaptive, const DetectorConfig& detector,
                                        const std::vector<int>& checkpoints, int jobs) {
    std::vector<TrendPoint> out;
    auto summarize = [&](const std::string& series, int checkpoint, const std::vector<DetectionStats>& stats) {
        std::vector<double> d, k;
        for (const auto& s : stats) {
            d.push_back(s.delta);
            k.push_back(static_cast<double>(s.k_t));
        }
        out.push_back({series, "delta", checkpoint, d.size(), quantile_or_zero(d, 0.3), quantile_or_zero(d, 0.5),
                       quantile_or_zero(d, 0.7)});
        out.push_back({series, "k_t", checkpoint, k.size(), quantile_or_zero(k, 0.3), quantile_or_zero(k, 0.5),
                       quantile_or_zero(k, 0.7)});
    };
    std::vector<DetectionStats> clean(cases.size());
    parallel_for(cases.size(), jobs, [&](std::size_t i) { clean[i] = compute_stats(model, cases[i].x, detector, cases[i].id); });

    for (int cp : checkpoints) {
        summarize("clean", cp, clean);
        std::vector<std::optional<DetectionStats>> gray(cases.size()), white(cases.size());
        parallel_for(cases.size(), jobs, [&](std::size_t i) {
            const auto& c = cases[i];
            AttackConfig g;
            g.learning_rate = adaptive.learning_rate;
            g.max_steps = cp;
            g.tau = adaptive.tau;
            g.target = c.target;
            const AttackResult gr = run_attack(model, c.x, g);
            if (gr.success) gray[i] = compute_stats(model, gr.x_adv, detector, c.id + 7'000'000ULL);
            WhiteboxConfig w = adaptive;
            w.max_steps = cp;
            const WhiteboxResult wr = run_whitebox(model, c.x, c.label, c.target, w, c.id);
            if (wr.attack.success) white[i] = compute_stats(model, wr.attack.x_adv, detector, c.id + 8'000'000ULL);
        });
        auto collect = [](const std::vector<std::optional<DetectionStats>>& v) {
            std::vector<DetectionStats> s;
            for (const auto& o : v) {
                if (o) s.push_back(*o);
            }
            return s;
        };
        summarize("gray_box", cp, collect(gray));
        summarize("white_box", cp, collect(white));
    }
    return out;
}

std::vector<TimingRow> timing_table(const Model& model,
                                    const std::vector<std::pair<std::string, std::vector<Tensor>>>& inputs_by_kind,
                                    const DetectorConfig& detector) {
    std::vector<TimingRow> rows;
    for (const auto& [kind, inputs] : inputs_by_kind) {
        std::vector<double> t1, tt, tu;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const DetectionStats s = compute_stats(model, inputs[i], detector, 9'000'000ULL + i);
            if (i == 0) continue;
            t1.push_back(s.seconds_c1);
            tt.push_back(s.seconds_c2t);
            tu.push_back(s.seconds_c2u);
        }
        for (const auto& [name, v] : {std::pair{"C1", &t1}, std::pair{"C2t", &tt}, std::pair{"C2u", &tu}}) {
            TimingRow r{kind, name, v->size(), 0.0, 0.0};
            if (!v->empty()) {
                r.mean = std::accumulate(v->begin(), v->end(), 0.0) / static_cast<double>(v->size());
                double ss = 0.0;
                for (double x : *v) ss += (x - r.mean) * (x - r.mean);
                r.stddev = v->size() > 1 ? std::sqrt(ss / static_cast<double>(v->size() - 1)) : 0.0;
            }
            rows.push_back(r);
        }
    }
    return rows;
}

EvaluationReport run_plan(const RunConfig& config, const Model& model, const Dataset& train, const Dataset& test,
                          int jobs, const Logger& log) {
    auto say = [&](const std::string& m) {
        if (log) log(m);
    };
    const PlanSettings& plan = config.plan;
    plan.validate();

    EvaluationReport report;
    report.effective_config = to_json(config);
    report.config_fingerprint = hex64(fnv1a(report.effective_config.dump()));
    report.seed = plan.seed;

    const EvaluationSplits splits = make_splits(test, plan.calibration_size, plan.audit_size, plan.seed, &model);
    const PassSet pass = build_pass_set(model, test, plan.pass_set_size, plan.seed, splits.evaluation);
    say(fmt::format("splits: {} calibration, {} audit, {} pass", splits.calibration.size(), splits.audit.size(), pass.size()));

    DetectorConfig detector = config.detector;
    if (!plan.c2_cap_candidates.empty()) {
        std::vector<Tensor> probe;
        for (std::size_t i = 0; i < std::min(plan.c2_probe_size, splits.calibration.size()); ++i) {
            probe.push_back(test.image(splits.calibration[i]));
        }
        detector = choose_c2_caps(model, probe, detector, plan.c2_cap_candidates, 0.99, jobs);
        say(fmt::format("C2 caps: targeted {}, untargeted {}", detector.c2t_attack.max_steps, detector.c2u_attack.max_steps));
    }
    report.detector_used = detector;

    const KdeModel kde = kde_fit(model, train, config.artifacts.kde_bandwidth);
    say(fmt::format("KDE bandwidth {:.4f}", kde.bandwidth));

    auto clean_stats = [&](const std::vector<std::size_t>& idx) {
        std::vector<DetectionStats> d(idx.size());
        std::vector<BaselineStats> b(idx.size());
        parallel_for(idx.size(), jobs, [&](std::size_t i) {
            const Tensor x = test.image(idx[i]);
            d[i] = compute_stats(model, x, detector, idx[i]);
            b[i] = compute_baseline_stats(model, x, config.squeeze, kde, config.artifacts, detector.seed, idx[i]);
        });
        return std::pair{std::move(d), std::move(b)};
    };
    const auto [cal_d, cal_b] = clean_stats(splits.calibration);
    const auto [aud_d, aud_b] = clean_stats(splits.audit);
    say("clean statistics done");

    std::map<double, RowThresholds> thresholds;
    report.calibration = nlohmann::json::array();
    for (double fpr : plan.fprs) {
        RowThresholds t;
        const std::string id = fmt::format("calibration-{}", plan.seed);
        t.combined = calibrate(cal_d, detector, fpr, model.checksum(), id);
        t.c1 = calibrate(cal_d, detector, fpr, model.checksum(), id, {Criterion::c1});
        t.c2t = calibrate(cal_d, detector, fpr, model.checksum(), id, {Criterion::c2t});
        t.c2u = calibrate(cal_d, detector, fpr, model.checksum(), id, {Criterion::c2u});
        t.fs = calibrate_baseline(BaselineKind::feature_squeezing, cal_b, fpr, model.checksum());
        t.artifacts = calibrate_baseline(BaselineKind::artifacts, cal_b, fpr, model.checksum());
        report.calibration.push_back({{"fpr", fpr},
                                      {"Combined", t.combined},
                                      {"C1", t.c1},
                                      {"C2t", t.c2t},
                                      {"C2u", t.c2u},
                                      {"FS", t.fs},
                                      {"Artifacts", t.artifacts}});
        for (const auto& row : kReportRows) {
            std::size_t flagged_n = 0;
            for (std::size_t i = 0; i < aud_d.size(); ++i) flagged_n += flagged(row, t, &aud_d[i], &aud_b[i]);
            double cal_fpr = 0.0;
            if (row == "Combined") cal_fpr = t.combined.achieved_fpr;
            else if (row == "C1") cal_fpr = t.c1.achieved_fpr;
            else if (row == "C2t") cal_fpr = t.c2t.achieved_fpr;
            else if (row == "C2u") cal_fpr = t.c2u.achieved_fpr;
            else if (row == "FS") cal_fpr = t.fs.achieved_fpr;
            else cal_fpr = t.artifacts.achieved_fpr;
            report.audits.push_back({row, fpr, cal_fpr, static_cast<double>(flagged_n) / static_cast<double>(aud_d.size()),
                                     aud_d.size()});
        }
        thresholds.emplace(fpr, std::move(t));
    }

    // Pass-set cases.
    std::vector<WhiteboxCase> cases;
    for (std::size_t i = 0; i < pass.size(); ++i) {
        cases.push_back({test.image(pass.indices[i]), static_cast<std::size_t>(test.labels[pass.indices[i]]),
                         static_cast<std::size_t>(pass.targets[i]), pass.indices[i]});
    }

    auto whitebox_base = [&](AttackKind kind, double lr) {
        WhiteboxConfig w = config.adaptive;
        w.learning_rate = lr;
        w.base_loss = kind == AttackKind::pgd ? BaseLoss::pgd_ce : BaseLoss::cw_margin;
        w.max_steps = plan.attack_steps;
        w.tau = plan.tau;
        w.sigma = detector.sigma;
        w.seed = plan.seed;
        return w;
    };
    const bool needs_whitebox = std::any_of(plan.variants.begin(), plan.variants.end(), [](Variant v) { return v != Variant::gray_box; });

    // Lambda auto-escalation per (attack kind, learning rate).
    std::map<std::pair<int, double>, double> lambdas;
    report.lambda_search = nlohmann::json::array();
    if (needs_whitebox) {
        const std::vector<WhiteboxCase> probe(cases.begin(), cases.begin() + static_cast<std::ptrdiff_t>(std::min(plan.lambda_probe, cases.size())));
        for (AttackKind kind : plan.attacks) {
            for (double lr : plan.learning_rates) {
                const LambdaSearch s = escalate_lambda(model, probe, whitebox_base(kind, lr), plan.lambda_target,
                                                       plan.lambda_max_doublings, jobs);
                lambdas[{static_cast<int>(kind), lr}] = s.lambda;
                nlohmann::json tried = nlohmann::json::array();
                for (const auto& [l, r] : s.tried) tried.push_back({{"lambda", l}, {"success_rate", r}});
                report.lambda_search.push_back(
                    {{"attack", to_string(kind)}, {"lr", lr}, {"lambda", s.lambda}, {"reached", s.reached}, {"tried", tried}});
                say(fmt::format("lambda {} lr {}: {} (target reached: {})", to_string(kind), lr, s.lambda, s.reached));
            }
        }
    }

    // Clean reference for the curves: each term on the clean image, anchored at its own label.
    std::array<double, 4> clean_terms{};
    if (needs_whitebox) {
        const WhiteboxConfig w = whitebox_base(AttackKind::pgd, plan.learning_rates.front());
        std::vector<double> r1(cases.size()), r2(cases.size()), r3(cases.size()), r4(cases.size());
        parallel_for(cases.size(), jobs, [&](std::size_t i) {
            const WhiteboxCase& c = cases[i];
            Rng rng = make_rng(plan.seed, {stream::attack, 11'000'000ULL + c.id});
            r1[i] = input_gradient(model, c.x, CrossEntropyLoss{c.label}).value;
            r2[i] = loss_L2(model, c.x, w.sigma, w.mc_noise_samples, rng);
            r3[i] = loss_L3(model, c.x, c.label, w.alpha, w.mc_class_samples, rng);
            r4[i] = loss_L4(model, c.x, c.label, w.alpha);
        });
        clean_terms = {median(r1), median(r2), median(r3), median(r4)};
    }

    std::vector<Tensor> timing_pgd, timing_cw;
    std::size_t cell_index = 0;
    for (AttackKind kind : plan.attacks) {
        for (double lr : plan.learning_rates) {
            for (Variant variant : plan.variants) {
                const std::size_t cell = cell_index++;
                const std::size_t n = cases.size();
                std::vector<std::optional<Tensor>> adv(n);
                std::vector<LossTraces> traces(n);
                WhiteboxConfig w = whitebox_base(kind, lr);
                double lambda = 0.0;
                if (variant != Variant::gray_box) {
                    w.lambda = lambdas.at({static_cast<int>(kind), lr});
                    lambda = w.lambda;
                    if (variant == Variant::c1_only) w.enabled = {WhiteboxTerm::l1, WhiteboxTerm::l2};
                    if (variant == Variant::untargeted) w.targeted = false;
                    if (variant == Variant::small_radius) w.tau = plan.small_tau;
                }
                parallel_for(n, jobs, [&](std::size_t i) {
                    const auto& c = cases[i];
                    if (variant == Variant::gray_box) {
                        const AttackResult r = run_attack(model, c.x, gray_box_config(kind, lr, plan.attack_steps, plan.tau, c.target, plan.seed));
                        if (r.success) adv[i] = r.x_adv;
                    } else {
                        WhiteboxResult r = run_whitebox(model, c.x, c.label, c.target, w, c.id);
                        if (r.attack.success) adv[i] = std::move(r.attack.x_adv);
                        traces[i] = std::move(r.traces);
                    }
                });
                std::vector<std::optional<DetectionStats>> dstats(n);
                std::vector<std::optional<BaselineStats>> bstats(n);
                parallel_for(n, jobs, [&](std::size_t i) {
                    if (!adv[i]) return;
                    const std::uint64_t id = adversarial_id(cell, Adversary::detector, i);
                    dstats[i] = compute_stats(model, *adv[i], detector, id);
                    if (variant == Variant::gray_box) {
                        bstats[i] = compute_baseline_stats(model, *adv[i], config.squeeze, kde, config.artifacts, detector.seed, id);
                    }
                });
                const auto succeeded = static_cast<std::size_t>(std::count_if(adv.begin(), adv.end(), [](const auto& a) { return a.has_value(); }));
                report.attacks.push_back({kind, lr, variant, Adversary::detector, n, succeeded, lambda});
                say(fmt::format("cell {} {} lr {}: {}/{} successful", to_string(kind), to_string(variant), lr, succeeded, n));

                if (variant == Variant::gray_box && lr == plan.learning_rates.front()) {
                    auto& dst = kind == AttackKind::pgd ? timing_pgd : timing_cw;
                    for (const auto& a : adv) {
                        if (a && dst.size() < plan.timing_size) dst.push_back(*a);
                    }
                }

                // Baseline-aware adversaries for the full white-box cell.
                std::vector<std::optional<BaselineStats>> fs_stats(n), art_stats(n);
                const bool baseline_cell = plan.baseline_attacks && variant == Variant::full;
                if (baseline_cell) {
                    parallel_for(n, jobs, [&](std::size_t i) {
                        const auto& c = cases[i];
                        const AttackConfig a = gray_box_config(kind, lr, plan.attack_steps, plan.tau, c.target, plan.seed);
                        const AttackResult fr = whitebox_vs_feature_squeezing(model, c.x, c.target, config.squeeze, a);
                        if (fr.success) {
                            BaselineStats b;
                            b.fs = fs_statistic(model, fr.x_adv, config.squeeze);
                            fs_stats[i] = b;
                        }
                        const AttackResult ar = whitebox_vs_artifacts(model, c.x, c.target, kde, config.artifacts, a, c.id);
                        if (ar.success) {
                            art_stats[i] = compute_baseline_stats(model, ar.x_adv, config.squeeze, kde, config.artifacts, detector.seed,
                                                                  adversarial_id(cell, Adversary::artifacts, i));
                        }
                    });
                    const auto fs_ok = static_cast<std::size_t>(std::count_if(fs_stats.begin(), fs_stats.end(), [](const auto& s) { return s.has_value(); }));
                    const auto art_ok = static_cast<std::size_t>(std::count_if(art_stats.begin(), art_stats.end(), [](const auto& s) { return s.has_value(); }));
                    report.attacks.push_back({kind, lr, variant, Adversary::feature_squeezing, n, fs_ok, 0.0});
                    report.attacks.push_back({kind, lr, variant, Adversary::artifacts, n, art_ok, 0.0});
                }

                for (double fpr : plan.fprs) {
                    const RowThresholds& t = thresholds.at(fpr);
                    for (const auto& row : kReportRows) {
                        const bool baseline_row = row == "FS" || row == "Artifacts";
                        if (baseline_row && variant != Variant::gray_box && !baseline_cell) continue;
                        RateCell rc{kind, lr, variant, fpr, row, 0, 0};
                        for (std::size_t i = 0; i < n; ++i) {
                            if (!baseline_row) {
                                if (!dstats[i]) continue;
                                ++rc.n;
                                rc.detected += flagged(row, t, &*dstats[i], nullptr);
                            } else {
                                const auto& b = variant == Variant::gray_box ? bstats[i] : (row == "FS" ? fs_stats[i] : art_stats[i]);
                                if (!b) continue;
                                ++rc.n;
                                rc.detected += flagged(row, t, nullptr, &*b);
                            }
                        }
                        report.rates.push_back(rc);
                    }
                }

                if (variant != Variant::gray_box) {
                    const double lambda = lambdas.count({static_cast<int>(kind), lr}) ? lambdas.at({static_cast<int>(kind), lr}) : config.adaptive.lambda;
                    report.curves.push_back({kind, lr, variant, -1, clean_terms[0], clean_terms[1], clean_terms[2], clean_terms[3],
                                             lambda * clean_terms[0] + clean_terms[1] + clean_terms[2] + clean_terms[3]});
                    for (int s = 0; s < plan.attack_steps; ++s) {
                        std::vector<double> v1, v2, v3, v4, vt;
                        for (const auto& tr : traces) {
                            v1.push_back(tr.l1[static_cast<std::size_t>(s)]);
                            v2.push_back(tr.l2[static_cast<std::size_t>(s)]);
                            v3.push_back(tr.l3[static_cast<std::size_t>(s)]);
                            v4.push_back(tr.l4[static_cast<std::size_t>(s)]);
                            vt.push_back(tr.total[static_cast<std::size_t>(s)]);
                        }
                        report.curves.push_back({kind, lr, variant, s, median(v1), median(v2), median(v3), median(v4), median(vt)});
                    }
                }
            }
        }
    }

    if (!plan.trend_checkpoints.empty() && plan.trend_size > 0) {
        const std::vector<WhiteboxCase> tc(cases.begin(), cases.begin() + static_cast<std::ptrdiff_t>(std::min(plan.trend_size, cases.size())));
        WhiteboxConfig w = whitebox_base(AttackKind::pgd, plan.trend_lr);
        const auto it = lambdas.find({static_cast<int>(AttackKind::pgd), plan.trend_lr});
        if (it != lambdas.end()) w.lambda = it->second;
        report.trend = statistic_trend(model, tc, w, detector, plan.trend_checkpoints, jobs);
        say("statistic trend done");
    }

    std::vector<std::pair<std::string, std::vector<Tensor>>> timing_inputs;
    std::vector<Tensor> timing_clean;
    for (std::size_t i = 0; i < std::min(plan.timing_size, splits.calibration.size()); ++i) {
        timing_clean.push_back(test.image(splits.calibration[i]));
    }
    timing_inputs.emplace_back("clean", std::move(timing_clean));
    if (!timing_pgd.empty()) timing_inputs.emplace_back("pgd", std::move(timing_pgd));
    if (!timing_cw.empty()) timing_inputs.emplace_back("cw", std::move(timing_cw));
    report.timing = timing_table(model, timing_inputs, detector);
    return report;
}

std::string render_tables(const EvaluationReport& report) {
    std::string out;
    std::vector<AttackKind> kinds;
    std::vector<double> fprs;
    std::vector<std::pair<Variant, double>> columns;
    for (const auto& c : report.rates) {
        if (std::find(kinds.begin(), kinds.end(), c.attack) == kinds.end()) kinds.push_back(c.attack);
        if (std::find(fprs.begin(), fprs.end(), c.fpr) == fprs.end()) fprs.push_back(c.fpr);
        const std::pair col{c.variant, c.lr};
        if (std::find(columns.begin(), columns.end(), col) == columns.end()) columns.push_back(col);
    }
    for (AttackKind kind : kinds) {
        for (double fpr : fprs) {
            out += fmt::format("attack {} | FPR {}  (detection rate over successful adversarials; * = row worst case)\n",
                               to_string(kind), fpr);
            out += fmt::format("{:<10}", "row");
            for (const auto& [v, lr] : columns) out += fmt::format(" {:>18}", fmt::format("{}@{}", to_string(v), lr));
            out += "\n";
            for (const auto& row : kReportRows) {
                std::vector<std::optional<double>> vals;
                for (const auto& [v, lr] : columns) {
                    std::optional<double> r;
                    for (const auto& c : report.rates) {
                        if (c.attack == kind && c.fpr == fpr && c.row == row && c.variant == v && c.lr == lr) r = c.rate();
                    }
                    vals.push_back(r);
                }
                std::optional<double> worst;
                for (const auto& r : vals) {
                    if (r && (!worst || *r < *worst)) worst = r;
                }
                if (!worst) continue;
                out += fmt::format("{:<10}", row);
                for (const auto& r : vals) {
                    const std::string cell = r ? fmt::format("{:.3f}{}", *r, *r == *worst ? "*" : " ") : "-  ";
                    out += fmt::format(" {:>18}", cell);
                }
                out += "\n";
            }
            out += "\n";
        }
    }
    out += "attack success (successful / attempted)\n";
    for (const auto& a : report.attacks) {
        out += fmt::format("  {:<4} lr {:<5} {:<13} {:<18} {:>4}/{:<4} lambda {}\n", to_string(a.attack), a.lr,
                           to_string(a.variant), to_string(a.adversary), a.succeeded, a.attempted, a.lambda);
    }
    out += "\nclean FPR audit (target / calibration / held-out)\n";
    for (const auto& a : report.audits) {
        out += fmt::format("  {:<10} {:.2f} {:.3f} {:.3f}\n", a.row, a.target, a.calibration_fpr, a.audit_fpr);
    }
    return out;
}

std::string tables_csv(const std::vector<RateCell>& cells) {
    std::string out = "attack,lr,variant,fpr,row,n,detected,rate\n";
    for (const auto& c : cells) {
        const auto r = c.rate();
        out += fmt::format("{},{},{},{},{},{},{},{}\n", to_string(c.attack), fmt_double(c.lr), to_string(c.variant),
                           fmt_double(c.fpr), c.row, c.n, c.detected, r ? fmt_double(*r) : "");
    }
    return out;
}

std::vector<RateCell> parse_tables_csv(const std::string& csv) {
    std::vector<RateCell> cells;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) || line.rfind("attack,lr,variant,fpr,row,n,detected", 0) != 0) {
        throw DataError(DataError::Kind::bad_format, "tables.csv: missing header");
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 8) throw DataError(DataError::Kind::bad_format, fmt::format("tables.csv: bad row '{}'", line));
        try {
            cells.push_back({attack_kind_from_string(f[0]), std::stod(f[1]), variant_from_string(f[2]), std::stod(f[3]), f[4],
                             std::stoull(f[5]), std::stoull(f[6])});
        } catch (const std::logic_error&) {
            throw DataError(DataError::Kind::bad_format, fmt::format("tables.csv: bad row '{}'", line));
        }
    }
    return cells;
}

void emit_report(const EvaluationReport& report, const std::filesystem::path& dir, const std::vector<std::string>& formats) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw DataError(DataError::Kind::io, fmt::format("cannot create output directory {}", dir.string()));
    }
    auto want = [&](const char* f) { return formats.empty() || std::find(formats.begin(), formats.end(), f) != formats.end(); };
    if (want("json")) {
        nlohmann::json j = report;
        write_text(dir / "report.json", j.dump(2) + "\n");
    }
    if (want("csv")) {
        write_text(dir / "tables.csv", tables_csv(report.rates));
        std::string curves = "attack,lr,variant,step,L1,L2,L3,L4,total\n";
        for (const auto& c : report.curves) {
            curves += fmt::format("{},{},{},{},{},{},{},{},{}\n", to_string(c.attack), fmt_double(c.lr), to_string(c.variant),
                                  c.step, fmt_double(c.l1), fmt_double(c.l2), fmt_double(c.l3), fmt_double(c.l4),
                                  fmt_double(c.total));
        }
        write_text(dir / "curves.csv", curves);
        std::string trend = "series,statistic,checkpoint,n,q30,median,q70\n";
        for (const auto& t : report.trend) {
            trend += fmt::format("{},{},{},{},{},{},{}\n", t.series, t.statistic, t.checkpoint, t.n, fmt_double(t.q30),
                                 fmt_double(t.median), fmt_double(t.q70));
        }
        write_text(dir / "trend.csv", trend);
        std::string timing = "input_kind,criterion,n,mean_seconds,stddev_seconds\n";
        for (const auto& t : report.timing) {
            timing += fmt::format("{},{},{},{},{}\n", t.input_kind, t.criterion, t.n, fmt_double(t.mean), fmt_double(t.stddev));
        }
        write_text(dir / "timing.csv", timing);
    }
    if (want("txt")) write_text(dir / "tables.txt", render_tables(report));
}

EvaluationReport load_report(const std::filesystem::path& report_json) {
    std::ifstream in(report_json);
    if (!in) throw DataError(DataError::Kind::io, fmt::format("cannot open {}", report_json.string()));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(DataError::Kind::bad_format, fmt::format("{}: {}", report_json.string(), e.what()));
    }
    return j.get<EvaluationReport>();
}

}  // namespace advpocket
