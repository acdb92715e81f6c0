// Acceptance checks on the desk model. Prints one PASS/FAIL line per criterion; exit status is the
// number of failed criteria (capped at 1).
#include "advpocket/adaptive.hpp"
#include "advpocket/attacks.hpp"
#include "advpocket/baselines.hpp"
#include "advpocket/harness.hpp"
#include "advpocket/hash.hpp"
#include "advpocket/parallel.hpp"
#include "advpocket/train.hpp"
#include "helpers.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace advpocket;
using namespace advpocket::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << fmt::format("[{}] criterion {:>2} {:<28} {}", pass ? "PASS" : "FAIL", id, name, detail) << std::endl;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- criterion 1 -----------------------------------------------------------------------------

struct GradientSummary {
    int trials = 0;
    double worst = 0.0;
    bool bpda_exact = true;
};

GradientSummary gradient_soundness() {
    GradientSummary out;
    std::mt19937_64 rng(1);
    auto record = [&](double err) {
        ++out.trials;
        out.worst = std::max(out.worst, err);
    };
    for (std::uint64_t seed = 1; seed <= 24; ++seed) {
        const Model m = random_model(seed % 2 ? small_conv_spec() : small_mlp_spec(), seed);
        const Tensor x = random_input(m.spec().input_shape, rng, 0.2, 0.8);
        const std::size_t y = m.predict(x), yt = (y + 1) % m.num_classes();
        std::vector<double> ref(m.num_classes(), 1.0 / static_cast<double>(m.num_classes()));
        ref[0] += 0.05;
        ref[1] -= 0.05;
        const std::vector<LossDescriptor> losses = {
            CrossEntropyLoss{yt}, MarginLoss{yt, 5.0, true}, MarginLoss{y, 5.0, false}, ProbabilityL1Loss{ref},
            CompositeLoss{{{1.0, CrossEntropyLoss{yt}}, {0.5, ProbabilityL1Loss{ref}}}}};
        for (const auto& loss : losses) {
            const InputGradient g = input_gradient(m, x, loss);
            const Tensor fd =
                finite_difference([&](const Tensor& p) { return evaluate_loss(loss, m.forward(p).logits).value; }, x);
            record(relative_error(g.gradient.values(), fd.values()));
        }

        // Composite white-box objective through its frozen-delta surrogate, and BPDA equality.
        WhiteboxConfig cfg;
        cfg.sigma = 0.05;
        cfg.alpha = 0.02;
        cfg.base_loss = seed % 3 ? BaseLoss::pgd_ce : BaseLoss::cw_margin;
        const PadvVector p_adv = make_p_adv(m.probabilities(x), y, yt);
        Rng r(seed);
        const WhiteboxDraw draw = draw_whitebox(m, x, yt, cfg, r);
        const FrozenDeltas frozen = inner_gradients(m, x, yt, draw);
        const WhiteboxLoss w = whitebox_surrogate(m, x, p_adv, yt, cfg, draw, frozen);
        const Tensor fd = finite_difference(
            [&](const Tensor& p) { return whitebox_surrogate(m, p, p_adv, yt, cfg, draw, frozen).total; }, x);
        record(relative_error(w.gradient.values(), fd.values()));
        out.bpda_exact = out.bpda_exact && bpda_gradient(m, x, p_adv, yt, cfg, draw).gradient == w.gradient;
    }
    // phi: class-conditional KDE density.
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> f(4);
        for (auto& v : f) v = n(rng) + i % 2;
        feats.push_back(f);
        labels.push_back(i % 2);
    }
    const KdeModel kde = kde_fit(feats, labels, 2, 1.2);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> q(4);
        for (auto& v : q) v = n(rng);
        const KdeValue kv = kde_density_with_gradient(kde, q, static_cast<std::size_t>(t % 2));
        const Tensor fd = finite_difference(
            [&](const Tensor& p) { return kde_density(kde, p.values(), static_cast<std::size_t>(t % 2)); }, Tensor::from(q));
        record(relative_error(kv.gradient, fd.values()));
    }
    return out;
}

// ---- criterion 8 -----------------------------------------------------------------------------

struct OracleSummary {
    int flip_cases = 0;
    int flip_mismatches = 0;
    double adam_worst = 0.0;
    int projection_violations = 0;
};

OracleSummary oracles() {
    OracleSummary out;
    const Dataset blobs = synth_blobs(40, 2, 6, 0.35, 5);
    TrainingConfig tc;
    tc.epochs = 5;
    tc.learning_rate = 0.05;
    const Model m = train(linear_spec(6, 2), blobs, tc);
    const auto& w = m.params().layers[0].weight;
    const auto& b = m.params().layers[0].bias;
    for (std::size_t s = 0; s < blobs.size(); ++s) {
        const Tensor x = blobs.image(s).reshaped({6});
        const std::size_t a = m.predict(x), t = 1 - a;
        AttackConfig cfg;
        cfg.loss = AttackLoss::margin_targeted;
        cfg.optimizer = Optimizer::sign_gd;
        cfg.learning_rate = 0.004;
        cfg.max_steps = 300;
        cfg.tau = s % 3 == 0 ? 0.04 : 0.25;
        cfg.target = t;
        double gap0 = b[t] - b[a];
        std::vector<double> d(6), room(6);
        for (std::size_t i = 0; i < 6; ++i) {
            d[i] = w[t * 6 + i] - w[a * 6 + i];
            gap0 += d[i] * x[i];
            room[i] = d[i] > 0 ? std::min(1.0, x[i] + cfg.tau) - x[i] : x[i] - std::max(0.0, x[i] - cfg.tau);
        }
        auto gap = [&](int k) {
            double g = gap0;
            for (std::size_t i = 0; i < 6; ++i) g += std::abs(d[i]) * std::min(k * cfg.learning_rate, room[i]);
            return g;
        };
        FlipCount expected{cfg.max_steps, false};
        for (int k = 1; k <= cfg.max_steps; ++k) {
            if (gap(k) > 0.0) {
                expected = {k, true};
                break;
            }
        }
        if (std::abs(gap(expected.steps)) < 1e-9 || std::abs(gap(expected.steps - 1)) < 1e-9) continue;
        ++out.flip_cases;
        out.flip_mismatches += !(steps_to_flip(m, x, {t, true}, cfg) == expected);
    }

    std::vector<double> xa = {3.0, 1.0, -1.0, 2.0};
    const std::vector<double> qa = {1.0, 10.0, 0.1, 3.0};
    std::vector<long double> rx(xa.begin(), xa.end()), rm(4, 0.0L), rv(4, 0.0L);
    AdamState st;
    for (int step = 1; step <= 300; ++step) {
        std::vector<double> g(4);
        for (int i = 0; i < 4; ++i) g[i] = qa[i] * xa[i];
        adam_update(st, xa, g, 0.05);
        for (int i = 0; i < 4; ++i) {
            const long double gi = qa[i] * rx[i];
            rm[i] = 0.9L * rm[i] + 0.1L * gi;
            rv[i] = 0.999L * rv[i] + 0.001L * gi * gi;
            const long double mh = rm[i] / (1 - std::pow(0.9L, static_cast<long double>(step)));
            const long double vh = rv[i] / (1 - std::pow(0.999L, static_cast<long double>(step)));
            rx[i] -= 0.05L * mh / (std::sqrt(vh) + 1e-8L);
            out.adam_worst = std::max(out.adam_worst, static_cast<double>(std::abs(xa[i] - rx[i])));
        }
    }

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-0.5, 1.5), unit(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor origin({32}), cand({32});
        for (auto& v : origin.values()) v = unit(rng);
        for (auto& v : cand.values()) v = u(rng);
        const double tau = 0.5 * unit(rng);
        const Tensor p = project_linf_and_box(cand, origin, tau);
        out.projection_violations += !(project_linf_and_box(p, origin, tau) == p);
    }
    return out;
}

// ---- report helpers ----------------------------------------------------------------------------

std::optional<double> rate(const EvaluationReport& r, AttackKind k, double lr, Variant v, double fpr, const std::string& row) {
    for (const auto& c : r.rates) {
        if (c.attack == k && c.lr == lr && c.variant == v && c.fpr == fpr && c.row == row) return c.rate();
    }
    return std::nullopt;
}

struct CurveRow {
    std::string attack, variant;
    double lr = 0.0;
    int step = 0;
    double l1 = 0, l2 = 0, l3 = 0, l4 = 0;
};

std::vector<CurveRow> read_curves(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<CurveRow> rows;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string f;
        std::vector<std::string> v;
        while (std::getline(ss, f, ',')) v.push_back(f);
        if (v.size() < 9) continue;
        rows.push_back({v[0], v[2], std::stod(v[1]), std::stoi(v[3]), std::stod(v[4]), std::stod(v[5]), std::stod(v[6]),
                        std::stod(v[7])});
    }
    return rows;
}

}  // namespace

int main(int argc, char** argv) {
    fs::path repo = ".", work = "acceptance_work", cli;
    bool prepare_only = false;
    int jobs = 0;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--repo" && i + 1 < argc) repo = argv[++i];
        else if (a == "--work" && i + 1 < argc) work = argv[++i];
        else if (a == "--cli" && i + 1 < argc) cli = argv[++i];
        else if (a == "--jobs" && i + 1 < argc) jobs = std::atoi(argv[++i]);
        else if (a == "--prepare-only") prepare_only = true;
        else {
            std::cerr << "usage: advpocket_acceptance [--repo DIR] [--work DIR] [--cli PATH] [--jobs N] [--prepare-only]\n";
            return 2;
        }
    }
    fs::create_directories(work);
    const fs::path model_path = fs::absolute(work / "desk_model.json");
    const fs::path config_path = repo / "configs" / "desk.json";
    const std::string model_override = "model.path=\"" + model_path.string() + "\"";
    RunConfig config = load_run_config(config_path, {model_override});
    const Dataset train_set = load_idx(config.resolve(config.data.train_images), config.resolve(config.data.train_labels));
    const Dataset test = load_idx(config.resolve(config.data.test_images), config.resolve(config.data.test_labels));

    if (!fs::exists(model_path)) {
        std::cout << "training desk model into " << model_path << std::endl;
        const Model trained = train(desk_mlp_spec(config.model.hidden1, config.model.hidden2, config.model.dropout), train_set,
                                    config.model.training, &test);
        save_model(trained, model_path);
    }
    const Model model = load_model(model_path);
    std::cout << fmt::format("desk model {} test accuracy {:.4f}", hex64(model.checksum()), model.metadata().test_accuracy)
              << std::endl;
    if (prepare_only) return 0;

    // 1. Gradient soundness.
    {
        const auto t0 = Clock::now();
        const GradientSummary g = gradient_soundness();
        const double secs = seconds_since(t0);
        verdict(1, "gradient soundness", g.trials >= 100 && g.worst <= 1e-5 && g.bpda_exact && secs < 60.0,
                fmt::format("{} trials, worst rel err {:.2e} (<= 1e-5), BPDA == frozen surrogate: {}, {:.1f}s (< 60s)",
                            g.trials, g.worst, g.bpda_exact, secs));
    }

    // The full evaluation grid feeds criteria 2-7 and 10.
    const auto t_eval = Clock::now();
    const EvaluationReport report = run_plan(config, model, train_set, test, jobs, [](const std::string& s) {
        std::cout << "  " << s << std::endl;
    });
    const fs::path report_dir = work / "report";
    emit_report(report, report_dir);
    const double eval_secs = seconds_since(t_eval);
    std::cout << fmt::format("evaluation grid finished in {:.0f}s; report in {}", eval_secs, report_dir.string()) << std::endl;
    const PlanSettings& plan = config.plan;

    // 2. Attack feasibility and success.
    {
        const auto t0 = Clock::now();
        const EvaluationSplits splits = make_splits(test, plan.calibration_size, plan.audit_size, plan.seed, &model);
        const PassSet pass = build_pass_set(model, test, plan.pass_set_size, plan.seed, splits.evaluation);
        std::vector<char> ok(pass.size()), feasible(pass.size());
        parallel_for(pass.size(), jobs, [&](std::size_t i) {
            const Tensor x = test.image(pass.indices[i]);
            AttackConfig a;
            a.tau = 0.1;
            a.max_steps = 50;
            a.learning_rate = plan.learning_rates.front();
            a.target = static_cast<std::size_t>(pass.targets[i]);
            const AttackResult r = run_attack(model, x, a);
            ok[i] = r.success;
            bool f = true;
            for (std::size_t k = 0; k < x.size(); ++k) {
                f = f && r.x_adv[k] >= 0.0 && r.x_adv[k] <= 1.0 && std::abs(r.x_adv[k] - x[k]) <= a.tau;
            }
            WhiteboxConfig w = config.adaptive;
            w.max_steps = 10;
            w.seed = plan.seed;
            const WhiteboxResult wr = run_whitebox(model, x, static_cast<std::size_t>(test.labels[pass.indices[i]]), *a.target, w, i);
            for (std::size_t k = 0; k < x.size(); ++k) {
                f = f && wr.attack.x_adv[k] >= 0.0 && wr.attack.x_adv[k] <= 1.0 && std::abs(wr.attack.x_adv[k] - x[k]) <= w.tau;
            }
            feasible[i] = f;
        });
        const double gray = static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
        const bool all_feasible = std::count(feasible.begin(), feasible.end(), 1) == static_cast<long>(feasible.size());
        double white_min = 1.0;
        std::string white_detail;
        for (const auto& c : report.attacks) {
            if (c.variant != Variant::full || c.adversary != Adversary::detector) continue;
            const double s = static_cast<double>(c.succeeded) / static_cast<double>(c.attempted);
            white_min = std::min(white_min, s);
            white_detail += fmt::format(" {}@{}:{:.2f}(lambda {})", to_string(c.attack), c.lr, s, c.lambda);
        }
        const double secs = seconds_since(t0);
        verdict(2, "attack feasibility/success", all_feasible && gray >= 0.99 && white_min >= 0.95 && secs < 600.0,
                fmt::format("constraints exact: {}; gray-box PGD success {:.3f} (>= 0.99); white-box min success {:.3f} "
                            "(>= 0.95) [{} ]; {:.0f}s",
                            all_feasible, gray, white_min, white_detail, secs));
    }

    // 3. Calibration.
    {
        bool pass = true;
        std::string detail;
        for (const auto& a : report.audits) {
            if (a.row != "Combined") continue;
            const double err = std::abs(a.audit_fpr - a.target);
            pass = pass && err <= 0.03 && a.audit_n >= 500;
            detail += fmt::format(" target {:.2f}: held-out {:.3f} (|err| {:.3f} <= 0.03, n={});", a.target, a.audit_fpr, err, a.audit_n);
        }
        verdict(3, "calibration", pass && !detail.empty(), detail);
    }

    const double fpr = 0.2;
    // 4. Gray-box separation.
    {
        double worst_comb = 1.0, worst_c1 = 1.0;
        for (double lr : plan.learning_rates) {
            worst_comb = std::min(worst_comb, rate(report, AttackKind::pgd, lr, Variant::gray_box, fpr, "Combined").value_or(0.0));
            worst_c1 = std::min(worst_c1, rate(report, AttackKind::pgd, lr, Variant::gray_box, fpr, "C1").value_or(0.0));
        }
        verdict(4, "gray-box separation", worst_comb >= 0.9 && worst_c1 >= 0.8,
                fmt::format("gray-box PGD at FPR 0.2 over lr grid: combined min {:.3f} (>= 0.90), C1 min {:.3f} (>= 0.80)",
                            worst_comb, worst_c1));
    }

    // 5. Trade-off trend.
    {
        bool each = true;
        double comb_worst = 1.0, fs_worst = 1.0, cell_min = 1.0;
        for (AttackKind k : plan.attacks) {
            for (double lr : plan.learning_rates) {
                const double c1 = rate(report, k, lr, Variant::full, fpr, "C1").value_or(0.0);
                const double c2t = rate(report, k, lr, Variant::full, fpr, "C2t").value_or(0.0);
                cell_min = std::min(cell_min, std::max(c1, c2t));
                each = each && std::max(c1, c2t) >= 0.3;
                comb_worst = std::min(comb_worst, rate(report, k, lr, Variant::full, fpr, "Combined").value_or(0.0));
                fs_worst = std::min(fs_worst, rate(report, k, lr, Variant::full, fpr, "FS").value_or(1.0));
            }
        }
        verdict(5, "trade-off trend", each && comb_worst > fs_worst,
                fmt::format("min over white-box cells of max(C1,C2t) {:.3f} (>= 0.30); combined worst {:.3f} > FS worst {:.3f} "
                            "(margin {:+.3f})",
                            cell_min, comb_worst, fs_worst, comb_worst - fs_worst));
    }

    // 6. Baseline evasion.
    {
        double fs_max = 0.0, art_max = 0.0;
        for (AttackKind k : plan.attacks) {
            for (double lr : plan.learning_rates) {
                fs_max = std::max(fs_max, rate(report, k, lr, Variant::full, fpr, "FS").value_or(1.0));
                art_max = std::max(art_max, rate(report, k, lr, Variant::full, fpr, "Artifacts").value_or(1.0));
            }
        }
        verdict(6, "baseline evasion", fs_max < 0.15 && art_max < 0.15,
                fmt::format("adaptive attacks at FPR 0.2: FS max {:.3f} (< 0.15), Artifacts max {:.3f} (< 0.15)", fs_max, art_max));
    }

    // 7. Loss-curve shape, read back from curves.csv.
    {
        const auto rows = read_curves(report_dir / "curves.csv");
        std::map<std::pair<std::string, double>, std::vector<CurveRow>> runs;
        for (const auto& r : rows) {
            if (r.variant == "full") runs[{r.attack, r.lr}].push_back(r);
        }
        bool pass = !runs.empty();
        std::string detail;
        for (const auto& [key, v] : runs) {
            // Row with step -1 is the clean reference (terms anchored at the image's own label).
            const auto ref = std::find_if(v.begin(), v.end(), [](const CurveRow& r) { return r.step == -1; });
            const auto first = std::find_if(v.begin(), v.end(), [](const CurveRow& r) { return r.step == 0; });
            if (ref == v.end() || first == v.end()) {
                pass = false;
                detail += fmt::format(" {}@{}: missing rows;", key.first, key.second);
                continue;
            }
            const CurveRow& last = v.back();
            const bool ok = last.l1 < first->l1 && last.l2 <= 2.0 * std::max(first->l2, 1e-12) && last.l3 > ref->l3;
            pass = pass && ok;
            detail += fmt::format(" {}@{}: L1 {:.3g}->{:.3g}, L2 {:.3g}->{:.3g}, L3 final {:.3g} vs clean {:.3g}{};", key.first,
                                  key.second, first->l1, last.l1, first->l2, last.l2, last.l3, ref->l3, ok ? "" : " (X)");
        }
        verdict(7, "loss-curve shape", pass, detail);
    }

    // 8. Oracles.
    {
        const OracleSummary o = oracles();
        verdict(8, "oracles",
                o.flip_cases >= 50 && o.flip_mismatches == 0 && o.adam_worst <= 1e-10 && o.projection_violations == 0,
                fmt::format("steps_to_flip closed form {}/{} cases; Adam max deviation {:.1e} (<= 1e-10); projection "
                            "idempotence violations {}",
                            o.flip_cases - o.flip_mismatches, o.flip_cases, o.adam_worst, o.projection_violations));
    }

    // 9. Determinism of the evaluate command under different --jobs values.
    {
        const std::vector<std::string> small = {
            "--set", "plan.pass_set_size=20", "--set", "plan.learning_rates=[0.03]", "--set", "plan.lambda_probe=8",
            "--set", "plan.lambda_max_doublings=1", "--set", "plan.trend_checkpoints=[5,10]", "--set", "plan.trend_size=5",
            "--set", "plan.timing_size=3", "--set", "plan.attack_steps=20", "--set", "baselines.artifacts.n_dropout_masks=10"};
        std::string common;
        for (const auto& s : small) common += " '" + s + "'";
        bool pass = false;
        std::string detail;
        if (!cli.empty()) {
            auto run = [&](int j, const fs::path& out) {
                const std::string cmd = fmt::format("'{}' --config '{}' --set '{}' --jobs {} --seed 7 --out '{}' -q{} evaluate > /dev/null",
                                                    cli.string(), config_path.string(), model_override, j, out.string(), common);
                return std::system(cmd.c_str());
            };
            const int a = run(1, work / "det1");
            const int b = run(jobs == 1 ? 2 : std::max(jobs, 2), work / "det2");
            const std::string ra = slurp(work / "det1" / "report.json"), rb = slurp(work / "det2" / "report.json");
            pass = a == 0 && b == 0 && !ra.empty() && ra == rb;
            detail = fmt::format("two evaluate runs, seed 7, --jobs 1 vs --jobs {}: exit {}/{}, report.json {} bytes, identical: {}",
                                 jobs == 1 ? 2 : std::max(jobs, 2), a, b, ra.size(), ra == rb);
        } else {
            detail = "no --cli given";
        }
        verdict(9, "determinism", pass, detail);
    }

    // 10. Timing table.
    {
        double c1 = 0.0, c2u = 0.0;
        std::size_t n = 0;
        for (const auto& t : report.timing) {
            if (t.input_kind != "clean") continue;
            if (t.criterion == "C1") {
                c1 = t.mean;
                n = t.n;
            }
            if (t.criterion == "C2u") c2u = t.mean;
        }
        const bool emitted = fs::exists(report_dir / "timing.csv");
        verdict(10, "timing table", emitted && n > 0 && c1 < c2u,
                fmt::format("timing.csv emitted: {}; clean C1 mean {:.2e}s < C2u mean {:.2e}s (n={})", emitted, c1, c2u, n));
    }

    std::cout << fmt::format("{} of 10 criteria failed", failures) << std::endl;
    return failures == 0 ? 0 : 1;
}
