// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mergeforge {

enum class Method {
    ModelSoup,
    TaskArithmetic,
    Fisher,
    RegMean,
    TIES,
    DARE,
    ConsensusTA,
    LSDataless,
    LSTrained,
};

inline constexpr Method kAllMethods[] = {
    Method::ModelSoup, Method::TaskArithmetic, Method::Fisher,      Method::RegMean,   Method::TIES,
    Method::DARE,      Method::ConsensusTA,    Method::LSDataless,  Method::LSTrained,
};

std::string_view to_string(Method method);
/// Accepts the canonical names above, case-insensitively, with or without
/// underscores/dashes ("task_arithmetic", "ties", "ls-dataless", ...).
std::optional<Method> parse_method(std::string_view name);

enum class StatsKind { FisherDiag, Gram, Mask };

std::string_view to_string(StatsKind kind);
std::optional<StatsKind> parse_stats_kind(std::string_view name);

/// Statistics a method consumes, if any.
std::optional<StatsKind> required_stats(Method method);

/// A merging algorithm plus exactly the hyperparameters it uses.
///
/// | method         | fields                                    |
/// |----------------|-------------------------------------------|
/// | ModelSoup      | -                                         |
/// | TaskArithmetic | lambda                                    |
/// | Fisher         | stats_path                                |
/// | RegMean        | alpha, stats_path                         |
/// | TIES           | sparsity (kept fraction), lambda          |
/// | DARE           | drop_rate, lambda, seed (default 0)       |
/// | ConsensusTA    | lambda, per_task_lambda                   |
/// | LSDataless     | sparsity (kept fraction)                  |
/// | LSTrained      | stats_path                                |
struct MergeRecipe {
    Method method = Method::ModelSoup;
    std::optional<double> lambda;
    std::optional<std::vector<double>> per_task_lambda;
    std::optional<double> drop_rate;
    std::optional<double> sparsity;
    std::optional<double> alpha;
    std::optional<std::filesystem::path> stats_path;
    std::optional<std::uint64_t> seed;

    static MergeRecipe model_soup();
    static MergeRecipe task_arithmetic(double lambda);
    static MergeRecipe fisher(std::filesystem::path stats);
    static MergeRecipe regmean(double alpha, std::filesystem::path stats);
    static MergeRecipe ties(double keep_fraction, double lambda);
    static MergeRecipe dare(double drop_rate, double lambda, std::uint64_t seed = 0);
    static MergeRecipe consensus_ta(double lambda, std::vector<double> task_lambdas);
    static MergeRecipe ls_dataless(double keep_fraction);
    static MergeRecipe ls_trained(std::filesystem::path stats);

    /// Throws InvalidRecipe when a required field is missing, a field the
    /// method does not use is set, or a value is out of range. When `tasks`
    /// is given, per-task lists must have that length and methods needing
    /// two tasks are checked.
    void validate(std::optional<std::size_t> tasks = std::nullopt) const;

    /// Copy with documented defaults filled in (DARE seed = 0).
    MergeRecipe with_defaults() const;

    /// Compact "TIES(sparsity=0.2, lambda=0.5)" label.
    std::string describe() const;

    friend bool operator==(const MergeRecipe&, const MergeRecipe&) = default;
};

void to_json(nlohmann::json& j, const MergeRecipe& recipe);
void from_json(const nlohmann::json& j, MergeRecipe& recipe);

} // namespace mergeforge
