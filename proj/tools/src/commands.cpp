// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/cli/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/cli/recipe_file.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/metrics.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/pipeline.hpp"
#include "mergeforge/search.hpp"
#include "mergeforge/stats.hpp"

namespace mergeforge::cli {

namespace {

int exit_code_for(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::Io:
        return kExitIo;
    case ErrorCategory::Stats:
        return kExitStats;
    default:
        return kExitValidation;
    }
}

int report(std::ostream& err, const Error& e, int code) {
    err << "mergeforge: error: " << e.what() << '\n';
    if (!e.key().empty())
        err << "  key: " << e.key() << '\n';
    for (const auto& d : e.details())
        err << "  detail: " << d << '\n';
    err << "  exit: " << code << '\n';
    return code;
}

/// Runs `body`, translating failures into an exit status. Errors raised while
/// `stats_phase` is set are reported as statistics failures whatever their code.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
    bool stats_phase = false;
    try {
        return body(stats_phase);
    } catch (const Error& e) {
        return report(err, e, stats_phase ? kExitStats : exit_code_for(category_of(e.code())));
    } catch (const std::filesystem::filesystem_error& e) {
        return report(err, Error(ErrorCode::Io, e.what(), e.path1().string()), stats_phase ? kExitStats : kExitIo);
    } catch (const std::exception& e) {
        return report(err, Error(ErrorCode::InvalidArgument, e.what()), kExitValidation);
    }
}

void require_exists(const std::filesystem::path& p, const char* role) {
    if (!std::filesystem::exists(p))
        throw Error(ErrorCode::InvalidRecipe, std::string(role) + " path does not exist: " + p.string(), p.string());
}

CheckpointSet open_set(const RecipeFile& file) {
    require_exists(file.pretrained, "pretrained");
    for (const auto& f : file.finetuned)
        require_exists(f, "finetuned");
    CheckpointManifest pre = open_checkpoint(file.pretrained);
    std::vector<CheckpointManifest> fts;
    for (const auto& f : file.finetuned)
        fts.push_back(open_checkpoint(f));
    return validate_set(std::move(pre), std::move(fts));
}

std::optional<StatsBundle> open_stats(const MergeRecipe& recipe, const CheckpointSet& set, bool& stats_phase) {
    const auto kind = required_stats(recipe.method);
    if (!kind)
        return std::nullopt;
    stats_phase = true;
    StatsBundle bundle = load_stats(*recipe.stats_path, *kind, set.pretrained);
    if (bundle.task_count() != set.n())
        throw Error(ErrorCode::MissingStats,
                    "stats bundle holds " + std::to_string(bundle.task_count()) + " tasks but the recipe lists " +
                        std::to_string(set.n()) + " finetuned models");
    stats_phase = false;
    return bundle;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void print_summary(std::ostream& out, const MergeSummary& s, const std::filesystem::path& dir) {
    out << "merged " << s.groups << " tensors (" << s.output.total_params << " parameters) with "
        << s.recipe.describe() << '\n'
        << "output: " << dir.string() << " (" << s.output.shards.size() << " shard"
        << (s.output.shards.size() == 1 ? "" : "s") << ")\n"
        << "wall time: " << fixed(s.wall_seconds, 3) << " s, peak tensor memory: " << s.peak_tensor_bytes
        << " bytes\n";
}

std::vector<TimingEntry> timings_from_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorCode::Io, "cannot open runtime log " + path.string(), path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidScoreTable, path.string() + " is not valid JSON: " + e.what(), path.string());
    }
    std::vector<TimingEntry> out;
    try {
        if (j.contains("candidates")) {
            const std::string method = j.at("best").at("recipe").at("method").get<std::string>();
            for (const auto& c : j.at("candidates"))
                out.push_back({method, c.at("recipe").at("method").get<std::string>(),
                               c.at("merge_seconds").get<double>(), c.at("eval_seconds").get<double>(), true});
            if (j.contains("final_merge_seconds"))
                out.push_back({method, "final", j.at("final_merge_seconds").get<double>(), 0.0, false});
        } else if (j.contains("timing") && j.contains("method")) {
            out.push_back({j.at("method").get<std::string>(), "merge", j.at("timing").at("wall_seconds").get<double>(),
                           0.0, false});
        } else {
            throw Error(ErrorCode::InvalidScoreTable,
                        path.string() + " is neither a search log nor a merge run-metadata file", path.string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidScoreTable, path.string() + ": " + e.what(), path.string());
    }
    return out;
}

} // namespace

int cmd_merge(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err) {
    return guarded(err, [&](bool& stats_phase) {
        const RecipeFile file = parse_recipe_file(recipe_file);
        const CheckpointSet set = open_set(file);
        const MergeRecipe recipe = file.recipe.with_defaults();
        recipe.validate(set.n());
        auto stats = open_stats(recipe, set, stats_phase);

        MergeOptions options;
        options.output = file.output;
        options.shard_bytes_limit = file.shard_bytes_limit;
        const MergeSummary summary = merge_checkpoints(set, recipe, options, stats ? &*stats : nullptr);
        print_summary(out, summary, file.output);
        return static_cast<int>(kExitOk);
    });
}

int cmd_search(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err) {
    return guarded(err, [&](bool& stats_phase) {
        const RecipeFile file = parse_recipe_file(recipe_file);
        if (!file.search)
            throw Error(ErrorCode::InvalidRecipe, "recipe has no [search] table", recipe_file.string());
        const SearchSection& section = *file.search;
        const CheckpointSet set = open_set(file);

        PlanOverrides overrides = section.overrides;
        if (!overrides.tasks)
            overrides.tasks = set.n();
        const SearchPlan plan = build_plan(file.recipe.method, overrides);

        SearchOptions options;
        options.output = file.output;
        options.shard_bytes_limit = file.shard_bytes_limit;
        options.keep_all = section.keep_all;
        if (section.finetuned_scores)
            options.reference_finetuned = load_score_table(*section.finetuned_scores).finetuned;

        if (plan.grid.empty()) {
            const MergeRecipe recipe = file.recipe.with_defaults();
            recipe.validate(set.n());
            auto stats = open_stats(recipe, set, stats_phase);
            MergeOptions merge_options;
            merge_options.output = file.output / "best";
            merge_options.shard_bytes_limit = file.shard_bytes_limit;
            const MergeSummary summary =
                merge_checkpoints(set, recipe, merge_options, stats ? &*stats : nullptr);
            nlohmann::json log = {
                {"best", {{"index", nullptr}, {"recipe", summary.recipe},
                          {"checkpoint", merge_options.output.string()}}},
                {"candidates", nlohmann::json::array()},
                {"final_merge_seconds", summary.wall_seconds},
            };
            std::ofstream(file.output / "search_log.json") << log.dump(2) << '\n';
            out << to_string(plan.method) << " has no hyperparameters to tune; merged once\n";
            print_summary(out, summary, merge_options.output);
            return static_cast<int>(kExitOk);
        }

        std::optional<StatsBundle> stats;
        if (const auto kind = required_stats(plan.method)) {
            stats = open_stats(plan.grid.front().recipe, set, stats_phase);
            options.merge = [&stats](const CheckpointSet& s, const MergeRecipe& r, const MergeOptions& m) {
                return merge_checkpoints(s, r, m, &*stats);
            };
        }
        for (const auto& c : plan.grid)
            c.recipe.with_defaults().validate(set.n());

        const EvalHook hook = section.hook ? command_hook(*section.hook) : score_file_hook(*section.score_files);
        const SearchResult result = run_search(plan, set, hook, options);

        out << "searched " << result.log.size() << " candidates for " << to_string(plan.method) << " ("
            << to_string(plan.schedule) << " schedule)\n";
        std::size_t failed = 0;
        for (const auto& c : result.log) {
            out << "  [" << c.index << "] " << c.recipe.describe() << "  ";
            if (c.ok) {
                out << "norm " << fixed(*c.score, 2);
            } else {
                out << "FAILED: " << c.error;
                ++failed;
            }
            out << '\n';
        }
        out << "best: [" << result.best_index << "] " << result.best.describe() << " norm "
            << fixed(result.best_score, 2) << '\n'
            << "checkpoint: " << result.best_checkpoint.string() << '\n';
        if (failed > 0)
            out << failed << " candidate(s) failed evaluation\n";
        out << result.runtime.to_text();
        return static_cast<int>(kExitOk);
    });
}

int cmd_validate(const std::filesystem::path& recipe_file, std::ostream& out, std::ostream& err) {
    return guarded(err, [&](bool& stats_phase) {
        const RecipeFile file = parse_recipe_file(recipe_file);
        const CheckpointSet set = open_set(file);
        out << "checkpoint set OK: " << set.n() << " finetuned models, " << set.pretrained.entries.size()
            << " tensors, " << set.pretrained.total_params << " parameters\n";
        if (!file.search) {
            const MergeRecipe recipe = file.recipe.with_defaults();
            recipe.validate(set.n());
            out << "recipe OK: " << recipe.describe() << '\n';
        }
        if (file.recipe.stats_path && required_stats(file.recipe.method)) {
            auto stats = open_stats(file.recipe, set, stats_phase);
            out << "stats OK: " << to_string(stats->kind()) << " for " << stats->task_count() << " tasks\n";
        }
        return static_cast<int>(kExitOk);
    });
}

int cmd_report(const ReportOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, [&](bool&) {
        if (options.score_tables.empty() && options.runtime_logs.empty())
            throw Error(ErrorCode::InvalidArgument, "report needs at least one score table or --runtime log");
        nlohmann::json doc = nlohmann::json::array();
        for (const auto& path : options.score_tables) {
            const ScoreTable table = load_score_table(path);
            nlohmann::json entry = {{"table", path.string()}, {"avg_acc", average_accuracy(table)}};
            out << "== " << path.string() << '\n';
            char line[200];
            std::snprintf(line, sizeof line, "  %-24s %10s %10s %10s\n", "task", "merged", "finetuned", "norm");
            out << line;
            for (const auto& t : table.tasks) {
                const double m = table.merged.at(t);
                if (table.has_finetuned()) {
                    const double f = table.finetuned.at(t);
                    std::snprintf(line, sizeof line, "  %-24s %10s %10s %10s\n", t.c_str(), fixed(m, 2).c_str(),
                                  fixed(f, 2).c_str(), fixed(100.0 * m / f, 1).c_str());
                } else {
                    std::snprintf(line, sizeof line, "  %-24s %10s %10s %10s\n", t.c_str(), fixed(m, 2).c_str(), "-",
                                  "-");
                }
                out << line;
            }
            out << "  Avg. Acc   " << fixed(average_accuracy(table), 1) << '\n';
            if (table.has_finetuned()) {
                const double norm = normalized_performance(table);
                entry["avg_norm"] = norm;
                out << "  Avg. Norm  " << fixed(norm, 1) << '\n';
            } else {
                out << "  Avg. Norm  n/a (no finetuned scores)\n";
            }
            if (options.forgetting || table.has_generalization()) {
                const double forgetting = forgetting_score(table);
                entry["forgetting"] = forgetting;
                out << "  Forgetting " << fixed(forgetting, 1) << '\n';
            }
            doc.push_back(std::move(entry));
        }
        if (!options.runtime_logs.empty()) {
            std::vector<TimingEntry> timings;
            for (const auto& p : options.runtime_logs) {
                auto t = timings_from_log(p);
                timings.insert(timings.end(), t.begin(), t.end());
            }
            const RuntimeReport rt = runtime_report(timings);
            out << "== runtime\n" << rt.to_text();
            doc.push_back({{"runtime", rt}});
        }
        if (options.json)
            out << doc.dump(2) << '\n';
        return static_cast<int>(kExitOk);
    });
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"mergeforge: merge finetuned checkpoints that share a pretrained base"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (default: logical cores; MERGEFORGE_THREADS overrides)")
        ->check(CLI::PositiveNumber);

    std::filesystem::path recipe;
    auto* merge = app.add_subcommand("merge", "Merge checkpoints as described by a TOML recipe");
    merge->add_option("recipe", recipe, "Recipe file")->required();
    auto* search = app.add_subcommand("search", "Grid-search hyperparameters with an evaluation hook");
    search->add_option("recipe", recipe, "Recipe file with a [search] table")->required();
    auto* validate = app.add_subcommand("validate", "Check that a recipe's checkpoints (and stats) are compatible");
    validate->add_option("recipe", recipe, "Recipe file")->required();

    ReportOptions report_options;
    auto* report = app.add_subcommand("report", "Print normalized performance, forgetting and runtime tables");
    report->add_option("score_tables", report_options.score_tables, "ScoreTable JSON files");
    report->add_flag("--forgetting", report_options.forgetting, "Require and print the forgetting score");
    report->add_option("--runtime", report_options.runtime_logs, "search_log.json or mergeforge_run.json files");
    report->add_flag("--json", report_options.json, "Also print the results as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitValidation;
    }

    if (const char* env = std::getenv("MERGEFORGE_THREADS"); env != nullptr && *env != '\0') {
        char* end = nullptr;
        const long value = std::strtol(env, &end, 10);
        if (*end != '\0' || value <= 0) {
            err << "mergeforge: error: MERGEFORGE_THREADS must be a positive integer, got \"" << env << "\"\n";
            return kExitValidation;
        }
        threads = static_cast<int>(value);
    }
    if (threads > 0)
        set_thread_count(threads);

    if (*merge)
        return cmd_merge(recipe, out, err);
    if (*search)
        return cmd_search(recipe, out, err);
    if (*validate)
        return cmd_validate(recipe, out, err);
    return cmd_report(report_options, out, err);
}

} // namespace mergeforge::cli
