// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/recipe.hpp"

namespace mergeforge {

class StatsBundle;

/// Name of the JSON sidecar written next to the merged weights.
inline constexpr const char* kRunMetadataFileName = "mergeforge_run.json";

struct MergeOptions {
    std::filesystem::path output;
    std::uint64_t shard_bytes_limit = kDefaultShardBytes;
    /// Copy config/tokenizer files from the pretrained checkpoint directory.
    bool copy_auxiliary = true;
    bool write_run_metadata = true;
};

struct MergeSummary {
    CheckpointManifest output;
    /// The recipe actually applied, with defaults filled in.
    MergeRecipe recipe;
    std::size_t groups = 0;
    double wall_seconds = 0.0;
    /// High-water mark of tracked tensor memory during the merge.
    std::uint64_t peak_tensor_bytes = 0;
};

/// Streams every parameter group of `set` through merge_group and writes the
/// result with the pretrained model's dtypes. Peak tensor memory is about
/// (n + 1) times the largest parameter plus fixed staging buffers.
///
/// For methods that need statistics, `stats` is used when given; otherwise
/// the bundle at recipe.stats_path is loaded and validated against the
/// pretrained manifest.
MergeSummary merge_checkpoints(const CheckpointSet& set, const MergeRecipe& recipe, const MergeOptions& options,
                               const StatsBundle* stats = nullptr);

/// The run-metadata document for a finished merge. Everything except the
/// "timing" object is a pure function of the inputs.
nlohmann::json run_metadata(const CheckpointSet& set, const MergeSummary& summary);

} // namespace mergeforge
