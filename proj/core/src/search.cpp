// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/search.hpp"

#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace {

std::vector<double> decimal_range(int first, int last, int step = 1) {
    std::vector<double> out;
    for (int i = first; i <= last; i += step)
        out.push_back(i / 10.0);
    return out;
}

std::string replace_all(std::string text, std::string_view token, std::string_view value) {
    for (std::size_t pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + value.size()))
        text.replace(pos, token.size(), value);
    return text;
}

std::string shell_quote(const std::string& s) {
    return "'" + replace_all(s, "'", "'\\''") + "'";
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::filesystem::path candidate_dir(const std::filesystem::path& root, std::size_t index) {
    char name[32];
    std::snprintf(name, sizeof name, "candidate-%03zu", index);
    return root / "candidates" / name;
}

void remove_tree(const std::filesystem::path& p) {
    std::error_code ec;
    std::filesystem::remove_all(p, ec);
    if (ec)
        throw Error(ErrorCode::Io, "cannot remove " + p.string() + ": " + ec.message(), p.string());
}

} // namespace

std::string_view to_string(Schedule schedule) {
    return schedule == Schedule::Joint ? "joint" : "sequential_consensus";
}

SearchPlan build_plan(Method method, const PlanOverrides& o) {
    SearchPlan plan;
    plan.method = method;
    const auto lambdas = o.lambdas.value_or(decimal_range(1, 10));
    const auto sparsities = o.sparsities.value_or(decimal_range(1, 3));
    const auto seed = o.seed.value_or(0);

    switch (method) {
    case Method::ModelSoup:
    case Method::Fisher:
    case Method::LSTrained:
        break;
    case Method::TaskArithmetic:
        for (double l : lambdas)
            plan.grid.push_back(Candidate{MergeRecipe::task_arithmetic(l), 0, std::nullopt});
        break;
    case Method::RegMean:
        for (double a : o.alphas.value_or(decimal_range(1, 9, 2))) {
            MergeRecipe r;
            r.method = Method::RegMean;
            r.alpha = a;
            r.stats_path = o.stats_path;
            plan.grid.push_back(Candidate{r, 0, std::nullopt});
        }
        break;
    case Method::TIES:
        for (double s : sparsities)
            for (double l : lambdas)
                plan.grid.push_back(Candidate{MergeRecipe::ties(s, l), 0, std::nullopt});
        break;
    case Method::DARE:
        for (double s : sparsities)
            for (double l : lambdas)
                plan.grid.push_back(Candidate{MergeRecipe::dare(1.0 - s, l, seed), 0, std::nullopt});
        break;
    case Method::LSDataless:
        for (double s : o.ls_sparsities.value_or(decimal_range(1, 5)))
            plan.grid.push_back(Candidate{MergeRecipe::ls_dataless(s), 0, std::nullopt});
        break;
    case Method::ConsensusTA: {
        plan.schedule = Schedule::SequentialConsensus;
        const std::size_t tasks = o.tasks.value_or(5);
        const double hold = o.hold_task_lambda.value_or(0.4);
        const double stage_lambda = o.stage_lambda.value_or(0.5);
        const auto values = o.task_lambdas.value_or(decimal_range(2, 6));
        for (std::size_t t = 0; t < tasks; ++t) {
            for (double v : values) {
                std::vector<double> per_task(tasks, hold);
                per_task[t] = v;
                plan.grid.push_back({MergeRecipe::consensus_ta(stage_lambda, per_task), t + 1, t});
            }
        }
        for (double l : lambdas)
            plan.grid.push_back(
                Candidate{MergeRecipe::consensus_ta(l, std::vector<double>(tasks, hold)), tasks + 1, std::nullopt});
        break;
    }
    }
    return plan;
}

EvalHook command_hook(std::string command_template) {
    return [command_template = std::move(command_template)](const std::filesystem::path& checkpoint, std::size_t index,
                                                             const MergeRecipe& recipe) {
        std::string command = replace_all(command_template, "{checkpoint}", shell_quote(checkpoint.string()));
        command = replace_all(command, "{index}", std::to_string(index));
        command = replace_all(command, "{method}", std::string(to_string(recipe.method)));
        FILE* pipe = ::popen(command.c_str(), "r");
        if (pipe == nullptr)
            throw Error(ErrorCode::HookFailure, "cannot start evaluation hook: " + command);
        std::string output;
        std::array<char, 4096> buf{};
        while (std::size_t got = std::fread(buf.data(), 1, buf.size(), pipe))
            output.append(buf.data(), got);
        const int status = ::pclose(pipe);
        if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
            throw Error(ErrorCode::HookFailure, "evaluation hook failed (status " + std::to_string(status) +
                                                    ") for candidate " + std::to_string(index));
        try {
            return parse_score_table(output);
        } catch (const Error& e) {
            throw Error(ErrorCode::HookFailure, std::string("evaluation hook output unusable: ") + e.what());
        }
    };
}

EvalHook score_file_hook(std::string pattern) {
    return [pattern = std::move(pattern)](const std::filesystem::path& checkpoint, std::size_t index,
                                          const MergeRecipe&) {
        std::string path = replace_all(pattern, "{index}", std::to_string(index));
        path = replace_all(path, "{checkpoint}", checkpoint.string());
        return load_score_table(path);
    };
}

SearchResult run_search(const SearchPlan& plan, const CheckpointSet& set, const EvalHook& hook,
                        const SearchOptions& options) {
    if (plan.grid.empty())
        throw Error(ErrorCode::SearchFailed,
                    std::string(to_string(plan.method)) + " has no hyperparameters to search; run a plain merge");
    const MergeFunction merge = options.merge ? options.merge
                                              : MergeFunction([](const CheckpointSet& s, const MergeRecipe& r,
                                                                 const MergeOptions& m) {
                                                    return merge_checkpoints(s, r, m);
                                                });
    const auto best_dir = options.output / "best";
    remove_tree(best_dir);
    remove_tree(options.output / "candidates");

    SearchResult result;
    std::optional<std::size_t> best;
    std::map<std::size_t, double> tuned;
    std::optional<std::size_t> stage_best;

    for (std::size_t i = 0; i < plan.grid.size(); ++i) {
        const Candidate& candidate = plan.grid[i];
        CandidateResult entry;
        entry.index = i;
        entry.stage = candidate.stage;
        entry.recipe = candidate.recipe;
        if (plan.schedule == Schedule::SequentialConsensus && entry.recipe.per_task_lambda) {
            for (const auto& [task, value] : tuned)
                if (task != candidate.tuned_task && task < entry.recipe.per_task_lambda->size())
                    (*entry.recipe.per_task_lambda)[task] = value;
        }

        const auto dir = candidate_dir(options.output, i);
        MergeOptions merge_options;
        merge_options.output = dir;
        merge_options.shard_bytes_limit = options.shard_bytes_limit;
        const auto merge_start = std::chrono::steady_clock::now();
        merge(set, entry.recipe, merge_options);
        entry.merge_seconds = seconds_since(merge_start);

        const auto eval_start = std::chrono::steady_clock::now();
        try {
            ScoreTable table = hook(dir, i, entry.recipe);
            if (!table.has_finetuned() && !options.reference_finetuned.empty()) {
                table.finetuned = options.reference_finetuned;
                table.validate();
            }
            entry.score = normalized_performance(table);
            entry.ok = true;
        } catch (const std::exception& e) {
            entry.error = e.what();
        }
        entry.eval_seconds = seconds_since(eval_start);

        const bool new_best = entry.ok && (!best || *entry.score > *result.log[*best].score);
        if (new_best) {
            if (best && !options.keep_all)
                remove_tree(candidate_dir(options.output, *best));
            best = i;
        } else if (!options.keep_all) {
            remove_tree(dir);
        }
        if (candidate.tuned_task && entry.ok &&
            (!stage_best || *entry.score > *result.log[*stage_best].score))
            stage_best = i;

        result.timings.push_back({std::string(to_string(plan.method)), entry.recipe.describe(), entry.merge_seconds,
                                  entry.eval_seconds, true});
        result.log.push_back(std::move(entry));

        const bool stage_ends = i + 1 == plan.grid.size() || plan.grid[i + 1].stage != candidate.stage;
        if (candidate.tuned_task && stage_ends) {
            if (stage_best)
                tuned[*candidate.tuned_task] = (*result.log[*stage_best].recipe.per_task_lambda)[*candidate.tuned_task];
            stage_best.reset();
        }
    }

    if (!best)
        throw Error(ErrorCode::SearchFailed, "every search candidate failed; first error: " + result.log.front().error);

    result.best_index = *best;
    result.best = result.log[*best].recipe;
    result.best_score = *result.log[*best].score;
    std::filesystem::create_directories(options.output);
    std::error_code ec;
    std::filesystem::rename(candidate_dir(options.output, *best), best_dir, ec);
    if (ec)
        throw Error(ErrorCode::Io, "cannot move best candidate to " + best_dir.string() + ": " + ec.message());
    if (!options.keep_all)
        remove_tree(options.output / "candidates");
    result.best_checkpoint = best_dir;
    result.runtime = runtime_report(result.timings);

    std::ofstream log(options.output / "search_log.json");
    log << nlohmann::json(result).dump(2) << '\n';
    if (!log)
        throw Error(ErrorCode::Io, "cannot write search log in " + options.output.string());
    return result;
}

void to_json(nlohmann::json& j, const SearchResult& result) {
    nlohmann::json candidates = nlohmann::json::array();
    for (const auto& c : result.log) {
        nlohmann::json e = {{"index", c.index},
                            {"stage", c.stage},
                            {"recipe", c.recipe},
                            {"ok", c.ok},
                            {"merge_seconds", c.merge_seconds},
                            {"eval_seconds", c.eval_seconds}};
        if (c.score)
            e["normalized_performance"] = *c.score;
        if (!c.ok)
            e["error"] = c.error;
        candidates.push_back(std::move(e));
    }
    j = {{"best", {{"index", result.best_index},
                   {"recipe", result.best},
                   {"normalized_performance", result.best_score},
                   {"checkpoint", result.best_checkpoint.string()}}},
         {"candidates", std::move(candidates)},
         {"runtime", result.runtime}};
}

} // namespace mergeforge
