// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/pipeline.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mergeforge/algorithms.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/memory.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/stats.hpp"

namespace mergeforge {

namespace {

constexpr const char* kToolVersion = "0.3.0";

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream out;
    out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return out.str();
}

nlohmann::json conventions(Method method) {
    nlohmann::json c = {
        {"accumulation", "float32, task order"},
        {"output_dtype", "pretrained dtype per tensor"},
    };
    switch (method) {
    case Method::TIES:
        c["topk_scope"] = "per_tensor";
        c["topk_ties"] = "lower_flat_index_first";
        c["sparsity"] = "kept_fraction";
        c["sign_election"] = "sum_of_trimmed_values; zero_mass_elects_positive";
        c["disjoint_mean"] = "mean_over_sign_aligned_nonzero_entries";
        break;
    case Method::LSDataless:
        c["topk_scope"] = "per_tensor";
        c["topk_ties"] = "lower_flat_index_first";
        c["sparsity"] = "kept_fraction";
        break;
    case Method::DARE:
        c["rng"] = "philox4x32-10 keyed by (seed, task, parameter, element)";
        c["drop_rule"] = "drop when u < p";
        break;
    case Method::Fisher:
        c["fisher_epsilon"] = "1e-10 * max position Fisher sum, floored at FLT_MIN";
        break;
    case Method::RegMean:
        c["gram_normalization"] = "divided by task sample_count";
        c["solver"] = "cholesky in float64, one diagonal jitter of 1e-6 * trace / dim";
        c["fallback"] = "model_soup for non-2D or uncovered parameters";
        break;
    case Method::ConsensusTA:
        c["consensus_threshold"] = "at least two task masks";
        break;
    default:
        break;
    }
    return c;
}

} // namespace

nlohmann::json run_metadata(const CheckpointSet& set, const MergeSummary& summary) {
    nlohmann::json finetuned = nlohmann::json::array();
    for (const auto& m : set.finetuned)
        finetuned.push_back(m.root.string());
    nlohmann::json shards = nlohmann::json::array();
    for (const auto& s : summary.output.shards)
        shards.push_back(s.filename().string());
    return {
        {"tool", "mergeforge"},
        {"version", kToolVersion},
        {"method", std::string(to_string(summary.recipe.method))},
        {"recipe", summary.recipe},
        {"conventions", conventions(summary.recipe.method)},
        {"inputs", {{"pretrained", set.pretrained.root.string()}, {"finetuned", finetuned}}},
        {"output", {{"shards", shards}, {"parameters", summary.output.total_params},
                    {"tensors", summary.output.entries.size()}}},
        {"timing",
         {{"wall_seconds", summary.wall_seconds},
          {"peak_tensor_bytes", summary.peak_tensor_bytes},
          {"threads", thread_count()},
          {"finished_at", utc_timestamp()}}},
    };
}

MergeSummary merge_checkpoints(const CheckpointSet& set, const MergeRecipe& recipe, const MergeOptions& options,
                               const StatsBundle* stats) {
    const auto started = std::chrono::steady_clock::now();
    MergeSummary summary;
    summary.recipe = recipe.with_defaults();
    summary.recipe.validate(set.n());

    std::optional<StatsBundle> loaded;
    if (const auto kind = required_stats(summary.recipe.method); kind && stats == nullptr) {
        loaded = load_stats(*summary.recipe.stats_path, *kind, set.pretrained);
        stats = &*loaded;
    }

    std::vector<TensorSpec> specs;
    specs.reserve(set.pretrained.entries.size());
    for (const auto& [key, entry] : set.pretrained.entries)
        specs.push_back({key, entry.shape, entry.dtype});

    const std::uint64_t resident_before = memory::resident_bytes();
    memory::reset_peak();

    std::map<std::string, std::string> metadata{{"format", "pt"}, {"merge_method", summary.recipe.describe()}};
    CheckpointWriter writer(options.output, std::move(specs), options.shard_bytes_limit, std::move(metadata));
    GroupStream stream(set);
    while (auto group = stream.next()) {
        merge_group(summary.recipe, *group, stats);
        writer.write(group->key, group->pretrained);
        ++summary.groups;
    }
    summary.output = writer.finish();
    summary.peak_tensor_bytes = memory::peak_bytes() - resident_before;

    if (options.copy_auxiliary)
        copy_auxiliary_files(set.pretrained.root, options.output);
    summary.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (options.write_run_metadata) {
        const auto path = options.output / kRunMetadataFileName;
        std::ofstream out(path);
        out << run_metadata(set, summary).dump(2) << '\n';
        if (!out)
            throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
    return summary;
}

} // namespace mergeforge
