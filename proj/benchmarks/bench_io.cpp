// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "mergeforge/checkpoint.hpp"

using namespace mergeforge;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    std::string tmpl = (fs::temp_directory_path() / "mergeforge-bench-XXXXXX").string();
    return mkdtemp(tmpl.data());
}

std::vector<std::pair<std::string, Tensor>> model(std::int64_t tensors, std::int64_t elements, DType dtype) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::int64_t i = 0; i < tensors; ++i)
        out.emplace_back("layers." + std::to_string(i) + ".weight", Tensor::filled({elements}, 0.5f).cast(dtype));
    return out;
}

void BM_WriteCheckpoint(benchmark::State& state) {
    const fs::path dir = scratch_dir();
    const auto tensors = model(8, state.range(0), DType::BF16);
    for (auto _ : state)
        write_checkpoint(tensors, dir / "out");
    state.SetBytesProcessed(state.iterations() * 8 * state.range(0) * 2);
    fs::remove_all(dir);
}
BENCHMARK(BM_WriteCheckpoint)->Range(1 << 16, 1 << 22);

void BM_StreamGroups(benchmark::State& state) {
    const fs::path dir = scratch_dir();
    const auto tensors = model(8, state.range(0), DType::BF16);
    CheckpointManifest pre = write_checkpoint(tensors, dir / "pre");
    std::vector<CheckpointManifest> fts;
    for (int i = 0; i < 3; ++i)
        fts.push_back(write_checkpoint(tensors, dir / ("ft" + std::to_string(i))));
    const CheckpointSet set = validate_set(std::move(pre), std::move(fts));
    for (auto _ : state) {
        GroupStream stream(set);
        while (auto group = stream.next())
            benchmark::DoNotOptimize(group->pretrained.bytes().data());
    }
    state.SetBytesProcessed(state.iterations() * 4 * 8 * state.range(0) * 2);
    fs::remove_all(dir);
}
BENCHMARK(BM_StreamGroups)->Range(1 << 16, 1 << 22);

} // namespace

BENCHMARK_MAIN();
