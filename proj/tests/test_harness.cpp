#include "advpocket/error.hpp"
#include "advpocket/harness.hpp"
#include "advpocket/train.hpp"
#include "helpers.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace advpocket;
using namespace advpocket::testing;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Dataset image_blobs(std::size_t per_class, std::uint64_t seed) {
    Dataset d = synth_blobs(per_class, 4, 36, 0.8, seed);
    d.images = d.images.reshaped({d.size(), 1, 1, 36});
    return d;
}

RunConfig tiny_config() {
    RunConfig c;
    c.detector.c2t_attack.max_steps = 60;
    c.detector.c2t_attack.learning_rate = 0.01;
    c.detector.c2t_attack.tau = 1.0;
    c.detector.c2u_attack.max_steps = 60;
    c.detector.c2u_attack.learning_rate = 0.01;
    c.detector.c2u_attack.tau = 1.0;
    c.artifacts.n_dropout_masks = 4;
    c.plan.learning_rates = {0.03};
    c.plan.fprs = {0.2};
    c.plan.pass_set_size = 8;
    c.plan.calibration_size = 20;
    c.plan.audit_size = 20;
    c.plan.attack_steps = 6;
    c.plan.lambda_probe = 4;
    c.plan.lambda_max_doublings = 1;
    c.plan.trend_checkpoints = {2, 4};
    c.plan.trend_size = 3;
    c.plan.trend_lr = 0.03;
    c.plan.timing_size = 2;
    c.plan.c2_cap_candidates = {30, 60};
    c.plan.c2_probe_size = 6;
    return c;
}

}  // namespace

TEST(Config, ParsesSectionsResolvesPathsAndRejectsUnknownKeys) {
    const nlohmann::json j = {{"model", {{"path", "m.json"}}},
                              {"detector", {{"sigma", 0.05}}},
                              {"plan", {{"fprs", {0.1}}, {"variants", {"full", "gray_box"}}}}};
    const RunConfig c = run_config_from_json(j, "/base");
    EXPECT_EQ(c.resolve(c.model.path), std::filesystem::path("/base/m.json"));
    EXPECT_EQ(c.detector.sigma, 0.05);
    EXPECT_EQ(c.plan.variants, (std::vector<Variant>{Variant::full, Variant::gray_box}));
    EXPECT_THROW(run_config_from_json({{"modle", {}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"plan", {{"fprs", {1.5}}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"plan", {{"variants", {"sideways"}}}}}), ConfigError);
    const RunConfig back = run_config_from_json(to_json(c), "/base");
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, OverridesRequireExistingKeysAndParseJsonValues) {
    nlohmann::json j = to_json(RunConfig{});
    apply_override(j, "detector.sigma=0.25");
    apply_override(j, "plan.fprs=[0.05]");
    apply_override(j, "model.path=weights/x.json");
    EXPECT_EQ(j["detector"]["sigma"], 0.25);
    EXPECT_EQ(j["plan"]["fprs"], nlohmann::json::array({0.05}));
    EXPECT_EQ(j["model"]["path"], "weights/x.json");
    EXPECT_THROW(apply_override(j, "detector.sigmaa=1"), ConfigError);
    EXPECT_THROW(apply_override(j, "no_equals_sign"), ConfigError);

    const auto path = std::filesystem::temp_directory_path() / "advpocket_cfg.json";
    std::ofstream(path) << R"({"detector": {"sigma": 0.3}})";
    const RunConfig c = load_run_config(path, {"plan.seed=9", "adaptive.lambda=3"});
    EXPECT_EQ(c.detector.sigma, 0.3);
    EXPECT_EQ(c.plan.seed, 9u);
    EXPECT_EQ(c.adaptive.lambda, 3.0);
    EXPECT_THROW(load_run_config(path, {"plan.bogus=1"}), ConfigError);
}

TEST(Report, TablesCsvRoundTripAndWorstCaseMarker) {
    EvaluationReport r;
    r.rates = {{AttackKind::pgd, 0.01, Variant::full, 0.2, "C1", 10, 7},
               {AttackKind::pgd, 0.1, Variant::full, 0.2, "C1", 10, 3},
               {AttackKind::cw, 0.03, Variant::gray_box, 0.1, "FS", 0, 0}};
    EXPECT_EQ(parse_tables_csv(tables_csv(r.rates)), r.rates);
    EXPECT_FALSE(r.rates[2].rate().has_value());
    const std::string t = render_tables(r);
    EXPECT_NE(t.find("0.300*"), std::string::npos);
    EXPECT_EQ(t.find("0.700*"), std::string::npos);
    EXPECT_THROW(parse_tables_csv("nonsense\n"), DataError);
}

TEST(Harness, TinyPlanIsDeterministicAcrossJobCounts) {
    const Dataset train_set = image_blobs(30, 1);
    const Dataset test = image_blobs(25, 2);
    TrainingConfig tc;
    tc.epochs = 10;
    tc.learning_rate = 0.05;
    const Model m = train(small_mlp_spec(36, 4), train_set, tc);
    const RunConfig cfg = tiny_config();

    const EvaluationReport a = run_plan(cfg, m, train_set, test, 1);
    const EvaluationReport b = run_plan(cfg, m, train_set, test, 3);
    const auto da = std::filesystem::temp_directory_path() / "advpocket_ra";
    const auto db = std::filesystem::temp_directory_path() / "advpocket_rb";
    emit_report(a, da);
    emit_report(b, db);
    EXPECT_EQ(slurp(da / "report.json"), slurp(db / "report.json"));
    EXPECT_EQ(slurp(da / "tables.csv"), slurp(db / "tables.csv"));
    for (const char* f : {"report.json", "tables.csv", "curves.csv", "trend.csv", "tables.txt", "timing.csv"}) {
        EXPECT_TRUE(std::filesystem::exists(da / f)) << f;
    }
    EXPECT_EQ(slurp(da / "report.json").find("seconds"), std::string::npos);

    // 2 attacks x 1 lr x 5 variants x 1 fpr: 4 detector rows each, plus FS/Artifacts on full and gray_box.
    EXPECT_EQ(a.rates.size(), 2u * (5 * 4 + 2 * 2));
    // 4 white-box variants per attack: a clean reference row plus one row per step.
    EXPECT_EQ(a.curves.size(), 2u * 4 * (6 + 1));
    EXPECT_EQ(a.audits.size(), kReportRows.size());
    EXPECT_FALSE(a.timing.empty());
    for (const auto& cell : a.rates) EXPECT_LE(cell.detected, cell.n);

    const EvaluationReport loaded = load_report(da / "report.json");
    EXPECT_EQ(loaded.rates, a.rates);
    EXPECT_EQ(loaded.curves, a.curves);
    EXPECT_EQ(loaded.config_fingerprint, a.config_fingerprint);
}
