#include <benchmark/benchmark.h>

#include "smmini/evalharness.hpp"
#include "smmini/model.hpp"
#include "smmini/quant.hpp"
#include "smmini/rng.hpp"

namespace {

using namespace smmini;

Matrix random_matrix(std::size_t r, std::size_t c) {
    Rng rng(1);
    Matrix m(r, c);
    for (double& x : m.values()) x = rng.normal();
    return m;
}

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.max_sequence_length = 256;
    cfg.lora_r = 16;
    return cfg;
}

std::vector<TokenId> bench_tokens(std::size_t n) {
    std::vector<TokenId> t{ByteVocab::bos};
    Rng rng(2);
    while (t.size() < n) t.push_back(static_cast<TokenId>(32 + rng.below(90)));
    return t;
}

void BM_Quantize(benchmark::State& state) {
    const Matrix w = random_matrix(256, 256);
    const auto mode = static_cast<QuantMode>(state.range(1));
    for (auto _ : state) {
        benchmark::DoNotOptimize(quantize_blockwise(w, static_cast<std::size_t>(state.range(0)), mode));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_Quantize)->ArgsProduct({{32, 64, 128}, {0, 1}});

void BM_Dequantize(benchmark::State& state) {
    const auto q = quantize_blockwise(random_matrix(256, 256), 64);
    for (auto _ : state) {
        benchmark::DoNotOptimize(dequantize(q));
    }
    state.SetItemsProcessed(state.iterations() * 256 * 256);
}
BENCHMARK(BM_Dequantize);

void BM_Forward(benchmark::State& state) {
    const Parameters p = init_model(bench_config(), 3);
    const auto tokens = bench_tokens(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(p, tokens));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Backward(benchmark::State& state) {
    const Parameters p = init_model(bench_config(), 3);
    const auto tokens = bench_tokens(static_cast<std::size_t>(state.range(0)));
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(backward(p, tokens, mask, 7));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Backward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ScoreOption(benchmark::State& state) {
    const TransformerScorer scorer(init_model(bench_config(), 3));
    const EvalItem item{"bench", "A 54-year-old man presents with crushing chest pain radiating to the left arm.",
                        "What is the most likely diagnosis?",
                        {"Myocardial infarction", "Pericarditis", "Aortic dissection", "Pulmonary embolism"},
                        0};
    for (auto _ : state) {
        benchmark::DoNotOptimize(predict(scorer, item));
    }
}
BENCHMARK(BM_ScoreOption)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
