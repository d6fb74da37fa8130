// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/metrics.hpp"
#include "mergeforge/pipeline.hpp"
#include "mergeforge/recipe.hpp"

namespace mergeforge {

/// Replacements for the default grids. Unset fields keep the defaults:
///
///   lambdas        0.1, 0.2, ..., 1.0     (TA, TIES, DARE, ConsensusTA)
///   alphas         0.1, 0.3, 0.5, 0.7, 0.9 (RegMean)
///   sparsities     0.1, 0.2, 0.3           (TIES, DARE; kept fraction)
///   ls_sparsities  0.1, 0.2, ..., 0.5      (LSDataless; kept fraction)
///   task_lambdas   0.2, 0.3, ..., 0.6      (ConsensusTA, per task)
///
/// DARE keeps a fraction s of each task vector, so its drop rate is 1 - s.
struct PlanOverrides {
    std::optional<std::vector<double>> lambdas;
    std::optional<std::vector<double>> alphas;
    std::optional<std::vector<double>> sparsities;
    std::optional<std::vector<double>> ls_sparsities;
    std::optional<std::vector<double>> task_lambdas;
    /// Number of tasks for the ConsensusTA per-task stages (default 5).
    std::optional<std::size_t> tasks;
    /// ConsensusTA: per-task threshold for tasks not yet tuned (default 0.4).
    std::optional<double> hold_task_lambda;
    /// ConsensusTA: scaling coefficient used while tuning thresholds (default 0.5).
    std::optional<double> stage_lambda;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> stats_path;
};

enum class Schedule { Joint, SequentialConsensus };

std::string_view to_string(Schedule schedule);

struct Candidate {
    MergeRecipe recipe;
    /// 0 for joint grids. In the sequential schedule stages 1..n tune the
    /// threshold of task stage-1, and stage n+1 tunes lambda.
    std::size_t stage = 0;
    /// Task whose threshold this candidate varies (sequential stages only).
    std::optional<std::size_t> tuned_task;
};

struct SearchPlan {
    Method method = Method::ModelSoup;
    std::vector<Candidate> grid;
    Schedule schedule = Schedule::Joint;

    std::size_t size() const noexcept { return grid.size(); }
};

/// Grid for `method`. Methods without tunable hyperparameters get an empty
/// grid.
SearchPlan build_plan(Method method, const PlanOverrides& overrides = {});

/// Evaluates one merged candidate and returns its validation scores. Throwing
/// marks the candidate failed.
using EvalHook = std::function<ScoreTable(const std::filesystem::path& checkpoint, std::size_t index,
                                          const MergeRecipe& recipe)>;

/// Runs a shell command per candidate; "{checkpoint}" (shell-quoted),
/// "{index}" and "{method}" are substituted. The command must exit 0 and
/// print a ScoreTable as JSON on stdout.
EvalHook command_hook(std::string command_template);

/// Reads a precomputed ScoreTable per candidate from `pattern` after
/// substituting "{index}" (and "{checkpoint}").
EvalHook score_file_hook(std::string pattern);

using MergeFunction = std::function<MergeSummary(const CheckpointSet&, const MergeRecipe&, const MergeOptions&)>;

struct SearchOptions {
    /// Receives best/, candidates/ and search_log.json.
    std::filesystem::path output;
    std::uint64_t shard_bytes_limit = kDefaultShardBytes;
    /// Keep every candidate checkpoint instead of only the running best.
    bool keep_all = false;
    /// Finetuned reference scores used when a hook table has none.
    std::map<std::string, double> reference_finetuned;
    /// Defaults to merge_checkpoints.
    MergeFunction merge;
};

struct CandidateResult {
    std::size_t index = 0;
    std::size_t stage = 0;
    MergeRecipe recipe;
    bool ok = false;
    std::optional<double> score;
    std::string error;
    double merge_seconds = 0.0;
    double eval_seconds = 0.0;
};

struct SearchResult {
    MergeRecipe best;
    std::size_t best_index = 0;
    double best_score = 0.0;
    std::filesystem::path best_checkpoint;
    std::vector<CandidateResult> log;
    std::vector<TimingEntry> timings;
    RuntimeReport runtime;
};

void to_json(nlohmann::json& j, const SearchResult& result);

/// Merges and evaluates every grid entry in order and selects the highest
/// normalized performance, the earliest candidate winning ties. In the
/// sequential ConsensusTA schedule, each stage's best threshold replaces the
/// hold value for later stages. Failed candidates are logged and skipped;
/// SearchFailed is thrown when all fail or the grid is empty.
SearchResult run_search(const SearchPlan& plan, const CheckpointSet& set, const EvalHook& hook,
                        const SearchOptions& options);

} // namespace mergeforge
