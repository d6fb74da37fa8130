// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

/// stats/manifest.json
struct StatsManifest {
    StatsKind kind = StatsKind::FisherDiag;
    std::vector<std::string> task_names;
    /// One count per task (a single number in the JSON applies to all tasks).
    std::vector<std::int64_t> sample_counts;
    std::uint64_t base_model_fingerprint = 0;
    /// Free-form tag from the extractor ("empirical", ...); not interpreted.
    std::string fisher_mode;
};

void to_json(nlohmann::json& j, const StatsManifest& m);
void from_json(const nlohmann::json& j, StatsManifest& m);

/// 64-bit FNV-1a over "key:shape;" for every entry in key order. Binds a stats
/// bundle to the base model it was computed against.
std::uint64_t manifest_fingerprint(const CheckpointManifest& manifest);

/// Auxiliary per-task statistics on disk:
///
///     <root>/manifest.json
///     <root>/<task_name>/<kind>.safetensors     (kind = FisherDiag | Gram | Mask)
///
/// Tensors are keyed by the parameter they describe. Fisher diagonals and
/// masks are parameter-shaped (masks stored as U8 0/1); Gram matrices are
/// [in, in] for a 2-D parameter of shape [out, in], stored as raw sums over
/// samples.
class StatsBundle {
public:
    const StatsManifest& manifest() const noexcept { return mManifest; }
    StatsKind kind() const noexcept { return mManifest.kind; }
    std::size_t task_count() const noexcept { return mManifest.task_names.size(); }
    const std::filesystem::path& root() const noexcept { return mRoot; }

    /// True when every task has an entry for `key`.
    bool covers(const std::string& key) const;
    /// Per-task tensors for `key` as F32 (masks become 0/1 floats). Gram
    /// matrices are divided by the task's sample count.
    std::vector<Tensor> load(const std::string& key) const;
    std::vector<BinaryMask> load_masks(const std::string& key) const;

private:
    friend StatsBundle load_stats(const std::filesystem::path&, StatsKind, const CheckpointManifest&);

    std::filesystem::path mRoot;
    StatsManifest mManifest;
    std::vector<SafetensorsHeader> mTasks;
};

/// Opens and fully validates a bundle against the checkpoint it will be
/// applied to: kind, base fingerprint, keys and shapes, non-negative Fisher
/// values, Gram symmetry (1e-4 relative), mask values in {0, 1}. Fisher and
/// Mask bundles must cover every parameter; Gram bundles may cover a subset
/// (uncovered parameters fall back to averaging).
StatsBundle load_stats(const std::filesystem::path& root, StatsKind expected, const CheckpointManifest& checkpoint);

/// Writes a bundle in the layout above. `per_task[i]` holds the tensors of
/// task i; mask tensors are stored as U8 whatever their input dtype.
void write_stats_bundle(const std::filesystem::path& root, const StatsManifest& manifest,
                        const std::vector<std::vector<std::pair<std::string, Tensor>>>& per_task);

} // namespace mergeforge
