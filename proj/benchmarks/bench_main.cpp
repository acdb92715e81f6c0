// Microbenchmarks on a desk-sized MLP with freshly initialized weights and 28x28 inputs.
#include "advpocket/adaptive.hpp"
#include "advpocket/attacks.hpp"
#include "advpocket/baselines.hpp"
#include "advpocket/detector.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace advpocket;

namespace {

const Model& desk_model() {
    static const Model m(desk_mlp_spec(), initialize_params(desk_mlp_spec(), 1));
    return m;
}

Tensor image(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor x({1, 28, 28});
    for (auto& v : x.values()) v = u(rng);
    return x;
}

void BM_Forward(benchmark::State& state) {
    const Model& m = desk_model();
    const Tensor x = image(1);
    for (auto _ : state) benchmark::DoNotOptimize(m.forward(x).logits);
}
BENCHMARK(BM_Forward);

void BM_InputGradient(benchmark::State& state) {
    const Model& m = desk_model();
    const Tensor x = image(2);
    for (auto _ : state) benchmark::DoNotOptimize(input_gradient(m, x, CrossEntropyLoss{3}).gradient);
}
BENCHMARK(BM_InputGradient);

void BM_StepsToFlip(benchmark::State& state) {
    const Model& m = desk_model();
    const Tensor x = image(3);
    AttackConfig cfg;
    cfg.tau = 0.3;
    cfg.learning_rate = 0.01;
    cfg.max_steps = static_cast<int>(state.range(0));
    const std::size_t target = (m.predict(x) + 1) % m.num_classes();
    cfg.target = target;
    for (auto _ : state) benchmark::DoNotOptimize(steps_to_flip(m, x, {target, true}, cfg));
}
BENCHMARK(BM_StepsToFlip)->Arg(50)->Arg(500)->Unit(benchmark::kMillisecond);

void BM_StatC1(benchmark::State& state) {
    const Model& m = desk_model();
    const Tensor x = image(4);
    Rng rng(4);
    for (auto _ : state) benchmark::DoNotOptimize(stat_c1(m, x, 0.1, 1, rng));
}
BENCHMARK(BM_StatC1);

void BM_WhiteboxStep(benchmark::State& state) {
    const Model& m = desk_model();
    const Tensor x = image(5);
    const std::size_t y = m.predict(x), yt = (y + 1) % m.num_classes();
    WhiteboxConfig cfg;
    const PadvVector p = make_p_adv(m.probabilities(x), y, yt);
    Rng rng(5);
    for (auto _ : state) {
        const WhiteboxDraw d = draw_whitebox(m, x, yt, cfg, rng);
        benchmark::DoNotOptimize(bpda_gradient(m, x, p, yt, cfg, d).gradient);
    }
}
BENCHMARK(BM_WhiteboxStep);

void BM_NonLocalMeans(benchmark::State& state) {
    const Tensor x = image(6);
    NlmParams p;
    for (auto _ : state) benchmark::DoNotOptimize(non_local_means(x, p));
}
BENCHMARK(BM_NonLocalMeans)->Unit(benchmark::kMillisecond);

void BM_KdeDensity(benchmark::State& state) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 1.0);
    const auto per_class = static_cast<std::size_t>(state.range(0));
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (std::size_t i = 0; i < per_class * 10; ++i) {
        std::vector<double> f(128);
        for (auto& v : f) v = n(rng);
        feats.push_back(std::move(f));
        labels.push_back(static_cast<int>(i % 10));
    }
    const KdeModel kde = kde_fit(feats, labels, 10, 0.0);
    const std::vector<double> q = feats.front();
    for (auto _ : state) benchmark::DoNotOptimize(kde_density(kde, q, 0));
}
BENCHMARK(BM_KdeDensity)->Arg(100)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
