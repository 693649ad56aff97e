#include <benchmark/benchmark.h>

#include <random>

#include "introspect/feat/describe.hpp"
#include "introspect/lm/decode.hpp"
#include "introspect/lm/train.hpp"
#include "introspect/patch/patch.hpp"

using namespace introspect::lm;

namespace {

ModelConfig bench_config(int hidden) {
    ModelConfig c;
    c.layers = 8;
    c.hidden = hidden;
    c.heads = 4;
    c.vocab = 160;
    c.context = 64;
    return c;
}

std::vector<std::vector<int>> corpus(std::size_t n, std::size_t len) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> d(1, 159);
    std::vector<std::vector<int>> out(n, std::vector<int>(len));
    for (auto& s : out) {
        for (auto& v : s) v = d(rng);
    }
    return out;
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
    Model m(bench_config(static_cast<int>(state.range(0))));
    const auto seqs = corpus(1, static_cast<std::size_t>(state.range(1)));
    for (auto _ : state) benchmark::DoNotOptimize(m.forward({.ids = seqs[0]}, all_layers(8)));
}
BENCHMARK(BM_Forward)->Args({64, 16})->Args({64, 32})->Unit(benchmark::kMicrosecond);

static void BM_TrainStep(benchmark::State& state) {
    Model m(bench_config(static_cast<int>(state.range(0))));
    const auto seqs = corpus(64, static_cast<std::size_t>(state.range(1)));
    OptimizerConfig opt;
    opt.steps = 1;
    opt.batch_size = 16;
    for (auto _ : state) benchmark::DoNotOptimize(train_lm(m, seqs, opt));
}
BENCHMARK(BM_TrainStep)->Args({64, 16})->Args({64, 32})->Unit(benchmark::kMillisecond);

static void BM_GreedyDecode(benchmark::State& state) {
    Model m(bench_config(64));
    const auto seqs = corpus(1, 16);
    for (auto _ : state) benchmark::DoNotOptimize(greedy_decode(m, {.ids = seqs[0]}, 6, 0));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMicrosecond);
// Closed-form labeling of one direction against every label in the grammar.
static void BM_LabelFeature(benchmark::State& state) {
    const auto world = introspect::pipeline::gen_world({});
    const introspect::feat::LabelGrammar g(world.vocab);
    ModelConfig c = bench_config(64);
    c.vocab = world.vocab.size();
    const Model m(c);
    const std::vector<std::vector<int>> text(world.text.begin(), world.text.begin() + 300);
    const introspect::feat::ActivationBank bank(m, text, {4});
    std::vector<float> v(64, 0.125f);
    for (auto _ : state) benchmark::DoNotOptimize(introspect::feat::label_feature(bank, g, v, 4, g.labels()));
}
BENCHMARK(BM_LabelFeature)->Unit(benchmark::kMillisecond);

static void BM_PatchOutcome(benchmark::State& state) {
    const auto world = introspect::pipeline::gen_world({});
    ModelConfig c = bench_config(64);
    c.vocab = world.vocab.size();
    const Model m(c);
    const auto pairs = introspect::patch::make_counterfactual_pairs(world, 1);
    const auto chunks = introspect::patch::layer_chunks(c.layers);
    for (auto _ : state) {
        benchmark::DoNotOptimize(introspect::patch::patch_outcome(m, pairs[0].x, pairs[0].x_prime, 1, chunks[1]));
    }
}
BENCHMARK(BM_PatchOutcome)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
