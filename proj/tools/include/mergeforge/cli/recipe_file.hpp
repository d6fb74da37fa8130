// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mergeforge/recipe.hpp"
#include "mergeforge/search.hpp"

namespace mergeforge::cli {

struct SearchSection {
    /// Shell command template; see command_hook.
    std::optional<std::string> hook;
    /// Score-file path pattern; see score_file_hook.
    std::optional<std::string> score_files;
    /// ScoreTable whose finetuned block is used when hook output has none.
    std::optional<std::filesystem::path> finetuned_scores;
    bool keep_all = false;
    PlanOverrides overrides;
};

/// A TOML recipe:
///
///     [models]   pretrained = "...", finetuned = ["...", ...]
///     [method]   name = "ties", sparsity = 0.2, lambda = 0.5, ...
///     [stats]    path = "..."                       (optional)
///     [output]   path = "...", shard_bytes_limit = N
///     [search]   hook = "...", keep_all = false, lambdas = [...], ...
///
/// Relative paths resolve against the recipe file's directory. Unknown
/// tables and keys are rejected.
struct RecipeFile {
    std::filesystem::path source;
    std::filesystem::path pretrained;
    std::vector<std::filesystem::path> finetuned;
    /// Method plus whatever hyperparameters [method] sets; [stats] path is
    /// folded in. Validated only when a plain merge is requested.
    MergeRecipe recipe;
    std::filesystem::path output;
    std::uint64_t shard_bytes_limit = kDefaultShardBytes;
    std::optional<SearchSection> search;
};

RecipeFile parse_recipe_text(const std::string& text, const std::filesystem::path& base_dir,
                             const std::string& source_name = "<recipe>");
RecipeFile parse_recipe_file(const std::filesystem::path& path);

} // namespace mergeforge::cli
