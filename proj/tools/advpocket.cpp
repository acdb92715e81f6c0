#include "advpocket/adaptive.hpp"
#include "advpocket/detector.hpp"
#include "advpocket/error.hpp"
#include "advpocket/harness.hpp"
#include "advpocket/hash.hpp"
#include "advpocket/parallel.hpp"
#include "advpocket/train.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

using namespace advpocket;

namespace {

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    int jobs = 1;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    int verbosity = 1;
};

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void note(const Options& o, int level, const std::string& msg) {
    if (o.verbosity >= level) std::cerr << msg << '\n';
}

std::filesystem::path out_dir(const Options& o) {
    if (const char* env = std::getenv("ADVPOCKET_OUT"); env && *env) return env;
    return o.out;
}

RunConfig load(const Options& o) {
    if (o.config.empty()) throw UsageError("--config PATH is required");
    if (!std::filesystem::exists(o.config)) throw UsageError(fmt::format("config file {} not found", o.config));
    std::vector<std::string> overrides = o.overrides;
    if (o.seed) overrides.push_back(fmt::format("plan.seed={}", *o.seed));
    return load_run_config(o.config, overrides);
}

Dataset load_split(const RunConfig& c, bool train) {
    return train ? load_idx(c.resolve(c.data.train_images), c.resolve(c.data.train_labels))
                 : load_idx(c.resolve(c.data.test_images), c.resolve(c.data.test_labels));
}

Model load_checkpoint(const RunConfig& c) {
    if (c.model.path.empty()) throw ConfigError("model.path is not set");
    return load_model(c.resolve(c.model.path));
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError(DataError::Kind::io, fmt::format("cannot write {}", path.string()));
    out << j.dump(2) << '\n';
}

int cmd_train(const Options& o) {
    RunConfig c = load(o);
    const Dataset train_set = load_split(c, true);
    const Dataset test_set = load_split(c, false);
    const ModelSpec spec = desk_mlp_spec(c.model.hidden1, c.model.hidden2, c.model.dropout);
    note(o, 1, fmt::format("training on {} images", train_set.size()));
    const Model m = train(spec, train_set, c.model.training, &test_set, [&](int e, double loss, double acc) {
        note(o, 2, fmt::format("epoch {} loss {:.4f} test accuracy {:.4f}", e, loss, acc));
    });
    const std::filesystem::path path =
        std::getenv("ADVPOCKET_OUT") || o.out != "out" ? out_dir(o) / "model.json" : c.resolve(c.model.path);
    if (path.empty()) throw ConfigError("model.path is not set and no --out given");
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    save_model(m, path);
    std::cout << nlohmann::json{{"checkpoint", path.string()},
                                {"checksum", hex64(m.checksum())},
                                {"train_accuracy", m.metadata().train_accuracy},
                                {"test_accuracy", m.metadata().test_accuracy},
                                {"config", to_json(c)}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_attack(const Options& o, std::size_t count) {
    const RunConfig c = load(o);
    const Model m = load_checkpoint(c);
    const Dataset test = load_split(c, false);
    const PassSet pass = build_pass_set(m, test, count, c.plan.seed);
    std::vector<AttackResult> results(pass.size());
    parallel_for(pass.size(), o.jobs, [&](std::size_t i) {
        AttackConfig a = c.attacks;
        if (a.targeted()) a.target = static_cast<std::size_t>(pass.targets[i]);
        a.seed = c.plan.seed;
        results[i] = run_attack(m, test.image(pass.indices[i]), a);
    });
    Dataset adv = test.subset(pass.indices, "adversarial");
    adv.source = "attack";
    const std::size_t sz = adv.sample_size();
    std::string traces = "input_id,step,loss\n";
    for (std::size_t i = 0; i < pass.size(); ++i) {
        const auto& r = results[i];
        std::copy(r.x_adv.values().begin(), r.x_adv.values().end(), adv.images.values().begin() + static_cast<std::ptrdiff_t>(i * sz));
        for (std::size_t s = 0; s < r.loss_trace.size(); ++s) traces += fmt::format("{},{},{:.17g}\n", pass.indices[i], s, r.loss_trace[s]);
        std::cout << nlohmann::json{{"input_id", pass.indices[i]},
                                    {"label", test.labels[pass.indices[i]]},
                                    {"target", c.attacks.targeted() ? nlohmann::json(pass.targets[i]) : nlohmann::json(nullptr)},
                                    {"success", r.success},
                                    {"steps_to_first_flip", r.steps_to_first_flip ? nlohmann::json(*r.steps_to_first_flip) : nlohmann::json(nullptr)},
                                    {"prediction", r.final_prediction}}
                         .dump()
                  << '\n';
    }
    const auto dir = out_dir(o);
    std::filesystem::create_directories(dir);
    save_dataset(adv, dir / "adversarial.apds");
    std::ofstream(dir / "attack_traces.csv") << traces;
    write_json(dir / "attack_config.json", to_json(c));
    note(o, 1, fmt::format("wrote {} adversarial inputs to {}", adv.size(), (dir / "adversarial.apds").string()));
    return 0;
}

int cmd_calibrate(const Options& o, double fpr, std::size_t count) {
    const RunConfig c = load(o);
    const Model m = load_checkpoint(c);
    const Dataset test = load_split(c, false);
    const EvaluationSplits splits = make_splits(test, count, 0, c.plan.seed, &m);
    std::vector<Tensor> clean;
    for (auto i : splits.calibration) clean.push_back(test.image(i));
    note(o, 1, fmt::format("calibrating on {} clean images at FPR {}", clean.size(), fpr));
    const Thresholds t = calibrate(m, clean, c.detector, fpr, fmt::format("calibration-{}", c.plan.seed), o.jobs);
    nlohmann::json j = t;
    j["config"] = to_json(c);
    const auto path = out_dir(o) / "thresholds.json";
    write_json(path, j);
    std::cout << nlohmann::json(t).dump() << '\n';
    return 0;
}

int cmd_detect(const Options& o, const std::string& thresholds_path, const std::string& inputs,
               const std::vector<std::size_t>& test_indices) {
    const RunConfig c = load(o);
    const Model m = load_checkpoint(c);
    std::ifstream in(thresholds_path);
    if (!in) throw UsageError(fmt::format("cannot open thresholds {}", thresholds_path));
    nlohmann::json tj = nlohmann::json::parse(in);
    tj.erase("config");
    const Thresholds t = tj.get<Thresholds>();
    std::vector<std::pair<std::uint64_t, Tensor>> batch;
    if (!inputs.empty()) {
        const Dataset d = load_dataset(inputs);
        for (std::size_t i = 0; i < d.size(); ++i) batch.emplace_back(i, d.image(i));
    } else {
        const Dataset test = load_split(c, false);
        for (auto i : test_indices) {
            if (i >= test.size()) throw UsageError(fmt::format("test index {} out of range", i));
            batch.emplace_back(i, test.image(i));
        }
    }
    if (batch.empty()) throw UsageError("no inputs: pass --inputs FILE or --index N");
    std::vector<Verdict> verdicts(batch.size());
    parallel_for(batch.size(), o.jobs, [&](std::size_t i) {
        verdicts[i] = detect(m, batch[i].second, t, c.detector, 10'000'000ULL + batch[i].first);
    });
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& v = verdicts[i];
        std::string failed;
        for (auto cr : v.failed_criteria) failed += (failed.empty() ? "" : ",") + to_string(cr);
        std::cout << fmt::format("{}\t{:.6f}\t{}\t{}\t{}\t{}\n", batch[i].first, v.stats.delta, v.stats.k_t, v.stats.k_u,
                                 v.is_adversarial ? "adversarial" : "benign", failed.empty() ? "-" : failed);
    }
    return 0;
}

int cmd_evaluate(const Options& o) {
    const RunConfig c = load(o);
    const Model m = load_checkpoint(c);
    const Dataset train_set = load_split(c, true);
    const Dataset test = load_split(c, false);
    const EvaluationReport r = run_plan(c, m, train_set, test, o.jobs, [&](const std::string& s) { note(o, 1, s); });
    const auto dir = out_dir(o);
    emit_report(r, dir);
    std::cout << render_tables(r);
    note(o, 1, fmt::format("report written to {}", dir.string()));
    return 0;
}

int cmd_report(const Options& o, const std::string& report_path, const std::string& format) {
    const EvaluationReport r = load_report(report_path);
    if (format == "csv") std::cout << tables_csv(r.rates);
    else if (format == "json") std::cout << nlohmann::json(r).dump(2) << '\n';
    else std::cout << render_tables(r);
    if (o.out != "out" || std::getenv("ADVPOCKET_OUT")) emit_report(r, out_dir(o), {"txt", "csv"});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"advpocket: two-criterion adversarial example detector and evaluation harness"};
    app.require_subcommand(1);
    Options o;
    bool verbose = false, quiet = false;
    app.add_option("--config", o.config, "experiment config (JSON)");
    app.add_option("--set", o.overrides, "override a config key: section.key=value (repeatable)");
    app.add_option("--jobs", o.jobs, "parallel per-image workers (0 = all cores)")->check(CLI::NonNegativeNumber);
    app.add_option("--seed", o.seed, "overrides plan.seed");
    app.add_option("--out", o.out, "output directory (ADVPOCKET_OUT takes precedence)");
    app.add_flag("-v,--verbose", verbose, "more diagnostics on stderr");
    app.add_flag("-q,--quiet", quiet, "no diagnostics on stderr");

    auto* train_cmd = app.add_subcommand("train", "train the classifier and write a checkpoint");
    std::size_t attack_count = 20;
    auto* attack_cmd = app.add_subcommand("attack", "run the configured gray-box attack on pass-set images");
    attack_cmd->add_option("--count", attack_count, "number of pass-set images")->check(CLI::PositiveNumber);
    double fpr = 0.2;
    std::size_t cal_count = 500;
    auto* cal_cmd = app.add_subcommand("calibrate", "compute detector thresholds on clean images");
    cal_cmd->add_option("--fpr", fpr, "target false positive rate")->check(CLI::Range(0.0, 1.0));
    cal_cmd->add_option("--count", cal_count, "clean calibration images");
    std::string thresholds_path, inputs_path;
    std::vector<std::size_t> indices;
    auto* detect_cmd = app.add_subcommand("detect", "print one verdict line per input");
    detect_cmd->add_option("--thresholds", thresholds_path, "thresholds.json from calibrate")->required();
    detect_cmd->add_option("--inputs", inputs_path, "dataset file written by attack");
    detect_cmd->add_option("--index", indices, "test-set image index (repeatable)");
    auto* eval_cmd = app.add_subcommand("evaluate", "run the full evaluation plan and write the report");
    std::string report_path, format = "txt";
    auto* report_cmd = app.add_subcommand("report", "render tables from an existing report.json");
    report_cmd->add_option("report", report_path, "report.json")->required();
    report_cmd->add_option("--format", format, "txt, csv or json")->check(CLI::IsMember({"txt", "csv", "json"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    o.verbosity = quiet ? 0 : (verbose ? 2 : 1);

    try {
        if (*train_cmd) return cmd_train(o);
        if (*attack_cmd) return cmd_attack(o, attack_count);
        if (*cal_cmd) return cmd_calibrate(o, fpr, cal_count);
        if (*detect_cmd) return cmd_detect(o, thresholds_path, inputs_path, indices);
        if (*eval_cmd) return cmd_evaluate(o);
        if (*report_cmd) return cmd_report(o, report_path, format);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n' << app.help();
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const CalibrationError& e) {
        std::cerr << "calibration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
