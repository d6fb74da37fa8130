// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/cli/recipe_file.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge::cli {

namespace {

[[noreturn]] void fail(const std::string& message, const std::string& key = {}) {
    throw Error(ErrorCode::InvalidRecipe, message, key);
}

const toml::table* table_at(const toml::table& root, std::string_view name, bool required) {
    const toml::node* node = root.get(name);
    if (node == nullptr) {
        if (required)
            fail("missing [" + std::string(name) + "] table", std::string(name));
        return nullptr;
    }
    if (!node->is_table())
        fail("\"" + std::string(name) + "\" must be a table", std::string(name));
    return node->as_table();
}

void reject_unknown(const toml::table& t, std::string_view where, const std::set<std::string_view>& known) {
    for (auto&& [key, value] : t)
        if (!known.count(key.str()))
            fail("unknown key \"" + std::string(key.str()) + "\" in [" + std::string(where) + "]",
                 std::string(key.str()));
}

std::string qualified(std::string_view where, std::string_view key) {
    return std::string(where) + "." + std::string(key);
}

std::optional<double> number(const toml::table& t, std::string_view where, std::string_view key) {
    const toml::node* node = t.get(key);
    if (node == nullptr)
        return std::nullopt;
    if (auto v = node->value<double>(); v && (node->is_floating_point() || node->is_integer()))
        return v;
    fail(qualified(where, key) + " must be a number", qualified(where, key));
}

std::optional<std::int64_t> integer(const toml::table& t, std::string_view where, std::string_view key) {
    const toml::node* node = t.get(key);
    if (node == nullptr)
        return std::nullopt;
    if (!node->is_integer())
        fail(qualified(where, key) + " must be an integer", qualified(where, key));
    return node->value<std::int64_t>();
}

std::optional<std::string> string(const toml::table& t, std::string_view where, std::string_view key) {
    const toml::node* node = t.get(key);
    if (node == nullptr)
        return std::nullopt;
    if (!node->is_string())
        fail(qualified(where, key) + " must be a string", qualified(where, key));
    return node->value<std::string>();
}

std::optional<bool> boolean(const toml::table& t, std::string_view where, std::string_view key) {
    const toml::node* node = t.get(key);
    if (node == nullptr)
        return std::nullopt;
    if (!node->is_boolean())
        fail(qualified(where, key) + " must be true or false", qualified(where, key));
    return node->value<bool>();
}

std::optional<std::vector<double>> numbers(const toml::table& t, std::string_view where, std::string_view key) {
    const toml::node* node = t.get(key);
    if (node == nullptr)
        return std::nullopt;
    const toml::array* arr = node->as_array();
    if (arr == nullptr || arr->empty())
        fail(qualified(where, key) + " must be a non-empty array of numbers", qualified(where, key));
    std::vector<double> out;
    for (const auto& item : *arr) {
        if (!item.is_floating_point() && !item.is_integer())
            fail(qualified(where, key) + " must contain only numbers", qualified(where, key));
        out.push_back(*item.value<double>());
    }
    return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::uint64_t non_negative(std::int64_t v, const std::string& what) {
    if (v < 0)
        fail(what + " must be non-negative", what);
    return static_cast<std::uint64_t>(v);
}

} // namespace

RecipeFile parse_recipe_text(const std::string& text, const std::filesystem::path& base_dir,
                             const std::string& source_name) {
    toml::table root;
    try {
        root = toml::parse(text, source_name);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << source_name << ":" << e.source().begin.line << ":" << e.source().begin.column << ": "
            << e.description();
        fail(msg.str());
    }
    reject_unknown(root, "recipe", {"models", "method", "stats", "output", "search"});

    RecipeFile file;
    file.source = source_name;

    const toml::table& models = *table_at(root, "models", true);
    reject_unknown(models, "models", {"pretrained", "finetuned"});
    const auto pretrained = string(models, "models", "pretrained");
    if (!pretrained)
        fail("[models] needs \"pretrained\"", "models.pretrained");
    file.pretrained = resolve(base_dir, *pretrained);
    const toml::array* ft = models.get_as<toml::array>("finetuned");
    if (ft == nullptr || ft->empty())
        fail("[models] needs a non-empty \"finetuned\" array", "models.finetuned");
    for (const auto& item : *ft) {
        if (!item.is_string())
            fail("models.finetuned must contain only strings", "models.finetuned");
        file.finetuned.push_back(resolve(base_dir, *item.value<std::string>()));
    }

    const toml::table& method = *table_at(root, "method", true);
    reject_unknown(method, "method",
                   {"name", "lambda", "per_task_lambda", "drop_rate", "sparsity", "alpha", "seed"});
    const auto name = string(method, "method", "name");
    if (!name)
        fail("[method] needs \"name\"", "method.name");
    const auto parsed = parse_method(*name);
    if (!parsed)
        throw Error(ErrorCode::UnknownMethod, "unknown merging method \"" + *name + "\"", "method.name");
    file.recipe.method = *parsed;
    file.recipe.lambda = number(method, "method", "lambda");
    file.recipe.per_task_lambda = numbers(method, "method", "per_task_lambda");
    file.recipe.drop_rate = number(method, "method", "drop_rate");
    file.recipe.sparsity = number(method, "method", "sparsity");
    file.recipe.alpha = number(method, "method", "alpha");
    if (const auto seed = integer(method, "method", "seed"))
        file.recipe.seed = non_negative(*seed, "method.seed");

    if (const toml::table* stats = table_at(root, "stats", false)) {
        reject_unknown(*stats, "stats", {"path"});
        const auto path = string(*stats, "stats", "path");
        if (!path)
            fail("[stats] needs \"path\"", "stats.path");
        file.recipe.stats_path = resolve(base_dir, *path);
    }

    const toml::table& output = *table_at(root, "output", true);
    reject_unknown(output, "output", {"path", "shard_bytes_limit"});
    const auto out_path = string(output, "output", "path");
    if (!out_path)
        fail("[output] needs \"path\"", "output.path");
    file.output = resolve(base_dir, *out_path);
    if (const auto limit = integer(output, "output", "shard_bytes_limit")) {
        if (*limit <= 0)
            fail("output.shard_bytes_limit must be positive", "output.shard_bytes_limit");
        file.shard_bytes_limit = static_cast<std::uint64_t>(*limit);
    }

    if (const toml::table* search = table_at(root, "search", false)) {
        reject_unknown(*search, "search",
                       {"hook", "score_files", "finetuned_scores", "keep_all", "lambdas", "alphas", "sparsities",
                        "ls_sparsities", "task_lambdas", "tasks", "hold_task_lambda", "stage_lambda"});
        SearchSection s;
        s.hook = string(*search, "search", "hook");
        if (const auto pattern = string(*search, "search", "score_files"))
            s.score_files = resolve(base_dir, *pattern).string();
        if (s.hook.has_value() == s.score_files.has_value())
            fail("[search] needs exactly one of \"hook\" or \"score_files\"", "search");
        if (const auto ref = string(*search, "search", "finetuned_scores"))
            s.finetuned_scores = resolve(base_dir, *ref);
        s.keep_all = boolean(*search, "search", "keep_all").value_or(false);
        auto& o = s.overrides;
        o.lambdas = numbers(*search, "search", "lambdas");
        o.alphas = numbers(*search, "search", "alphas");
        o.sparsities = numbers(*search, "search", "sparsities");
        o.ls_sparsities = numbers(*search, "search", "ls_sparsities");
        o.task_lambdas = numbers(*search, "search", "task_lambdas");
        if (const auto tasks = integer(*search, "search", "tasks"))
            o.tasks = non_negative(*tasks, "search.tasks");
        o.hold_task_lambda = number(*search, "search", "hold_task_lambda");
        o.stage_lambda = number(*search, "search", "stage_lambda");
        o.seed = file.recipe.seed;
        o.stats_path = file.recipe.stats_path;
        file.search = std::move(s);
    }
    return file;
}

RecipeFile parse_recipe_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorCode::InvalidRecipe, "cannot read recipe file " + path.string(), path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_recipe_text(buf.str(), path.parent_path().empty() ? "." : path.parent_path(), path.string());
}

} // namespace mergeforge::cli
