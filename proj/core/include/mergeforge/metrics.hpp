// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mergeforge {

/// Per-task scores produced by an external evaluator.
///
/// JSON form:
///
///     {"tasks": [...], "merged": {...}, "finetuned": {...},
///      "base": {...}, "generalization": {...}}
///
/// `merged` must cover every task. `finetuned` may be omitted (only the
/// average accuracy is then defined) but, if present, must cover every task
/// with positive scores. `generalization` holds the merged model's scores on
/// held-out tasks and `base` the base model's scores on those same tasks.
struct ScoreTable {
    std::vector<std::string> tasks;
    std::map<std::string, double> merged;
    std::map<std::string, double> finetuned;
    std::map<std::string, double> base;
    std::map<std::string, double> generalization;

    bool has_finetuned() const noexcept { return !finetuned.empty(); }
    bool has_generalization() const noexcept { return !generalization.empty(); }

    /// Throws InvalidScoreTable / MissingScore / ZeroFinetunedScore.
    void validate() const;
};

void to_json(nlohmann::json& j, const ScoreTable& table);
/// Parses and validates. Unknown top-level fields are rejected.
void from_json(const nlohmann::json& j, ScoreTable& table);

ScoreTable parse_score_table(const std::string& text);
ScoreTable load_score_table(const std::filesystem::path& path);

/// 100 * mean_i merged_i / finetuned_i.
double normalized_performance(const ScoreTable& table);

/// Plain mean of the merged scores ("Avg. Acc").
double average_accuracy(const ScoreTable& table);

/// 100 * mean_j generalization_j / base_j over the generalization tasks.
double forgetting_score(const ScoreTable& table);

/// Wall-clock cost of one merge and, when it was a search candidate, of its
/// evaluation.
struct TimingEntry {
    std::string method;
    std::string label;
    double algorithm_seconds = 0.0;
    double validation_seconds = 0.0;
    bool evaluated = false;
};

struct RuntimeRow {
    std::string method;
    std::size_t merges = 0;
    std::size_t validation_runs = 0;
    double algorithm_seconds = 0.0;
    double validation_seconds = 0.0;

    double total_seconds() const noexcept { return algorithm_seconds + validation_seconds; }
};

struct RuntimeReport {
    std::vector<RuntimeRow> rows;

    std::string to_text() const;
};

void to_json(nlohmann::json& j, const RuntimeReport& report);
void from_json(const nlohmann::json& j, RuntimeReport& report);
void to_json(nlohmann::json& j, const TimingEntry& entry);
void from_json(const nlohmann::json& j, TimingEntry& entry);

/// Aggregates entries per method, in order of first appearance.
RuntimeReport runtime_report(std::span<const TimingEntry> timings);

} // namespace mergeforge
