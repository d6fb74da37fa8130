// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mergeforge/algorithms.hpp"
#include "mergeforge/kernels.hpp"

using namespace mergeforge;

namespace {

Tensor random_tensor(std::int64_t n, std::uint64_t seed, float scale = 1.0f) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, scale);
    std::vector<float> v(static_cast<std::size_t>(n));
    for (auto& x : v)
        x = dist(rng);
    return Tensor::from_floats({n}, v);
}

std::vector<Tensor> deltas(std::int64_t n, std::size_t tasks) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < tasks; ++i)
        out.push_back(random_tensor(n, 100 + i, 0.01f));
    return out;
}

void BM_Axpy(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor a = random_tensor(n, 1), b = random_tensor(n, 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(axpy_accumulate(a, b, 0.5f));
    state.SetBytesProcessed(state.iterations() * n * 4 * 3);
}
BENCHMARK(BM_Axpy)->Range(1 << 12, 1 << 24);

void BM_TopK(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor t = random_tensor(n, 3);
    for (auto _ : state)
        benchmark::DoNotOptimize(topk_magnitude_mask(t, 0.2));
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_TopK)->Range(1 << 12, 1 << 24);

void BM_Ties(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor pre = random_tensor(n, 4);
    const auto d = deltas(n, 5);
    for (auto _ : state)
        benchmark::DoNotOptimize(ties_merge(pre, d, 0.2, 1.0f));
    state.SetItemsProcessed(state.iterations() * n * 5);
}
BENCHMARK(BM_Ties)->Range(1 << 14, 1 << 22);

void BM_Dare(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor pre = random_tensor(n, 5);
    const auto d = deltas(n, 5);
    for (auto _ : state)
        benchmark::DoNotOptimize(dare_merge("bench.weight", pre, d, 0.9, 1.0f, 0));
    state.SetItemsProcessed(state.iterations() * n * 5);
}
BENCHMARK(BM_Dare)->Range(1 << 14, 1 << 22);

void BM_Consensus(benchmark::State& state) {
    const auto n = state.range(0);
    const Tensor pre = random_tensor(n, 6);
    const auto d = deltas(n, 5);
    const std::vector<double> lambdas(5, 0.4);
    for (auto _ : state)
        benchmark::DoNotOptimize(consensus_ta(pre, d, 0.5f, lambdas));
    state.SetItemsProcessed(state.iterations() * n * 5);
}
BENCHMARK(BM_Consensus)->Range(1 << 14, 1 << 22);

void BM_RegMean(benchmark::State& state) {
    const auto dim = state.range(0);
    std::vector<Tensor> weights, grams;
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor w = random_tensor(dim * dim, 10 + i);
        weights.push_back(Tensor::from_floats({dim, dim}, w.to_vector()));
        Tensor g({dim, dim});
        for (std::int64_t c = 0; c < dim; ++c)
            g.f32()[static_cast<std::size_t>(c * dim + c)] = 1.0f + static_cast<float>(i);
        grams.push_back(std::move(g));
    }
    for (auto _ : state)
        benchmark::DoNotOptimize(regmean_merge("bench.weight", weights, grams, 0.9));
}
BENCHMARK(BM_RegMean)->RangeMultiplier(2)->Range(64, 512);

} // namespace

BENCHMARK_MAIN();
