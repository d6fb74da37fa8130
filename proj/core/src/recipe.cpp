// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/recipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace {

std::string normalise(std::string_view name) {
    std::string out;
    for (char c : name)
        if (c != '_' && c != '-' && c != ' ')
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    return out;
}

[[noreturn]] void invalid(Method m, const std::string& what) {
    throw Error(ErrorCode::InvalidRecipe, std::string(to_string(m)) + ": " + what);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

} // namespace

std::string_view to_string(Method method) {
    switch (method) {
    case Method::ModelSoup: return "ModelSoup";
    case Method::TaskArithmetic: return "TaskArithmetic";
    case Method::Fisher: return "Fisher";
    case Method::RegMean: return "RegMean";
    case Method::TIES: return "TIES";
    case Method::DARE: return "DARE";
    case Method::ConsensusTA: return "ConsensusTA";
    case Method::LSDataless: return "LSDataless";
    case Method::LSTrained: return "LSTrained";
    }
    return "?";
}

std::optional<Method> parse_method(std::string_view name) {
    const std::string n = normalise(name);
    for (Method m : kAllMethods)
        if (normalise(to_string(m)) == n)
            return m;
    if (n == "soup" || n == "modelsoups") return Method::ModelSoup;
    if (n == "ta") return Method::TaskArithmetic;
    if (n == "fishermerging" || n == "fishermerge") return Method::Fisher;
    if (n == "tiesmerging") return Method::TIES;
    if (n == "consensus" || n == "consensustaskarithmetic") return Method::ConsensusTA;
    if (n == "datalesslocalizeandstitch" || n == "datalessls") return Method::LSDataless;
    if (n == "localizeandstitch" || n == "ls") return Method::LSTrained;
    return std::nullopt;
}

std::string_view to_string(StatsKind kind) {
    switch (kind) {
    case StatsKind::FisherDiag: return "FisherDiag";
    case StatsKind::Gram: return "Gram";
    case StatsKind::Mask: return "Mask";
    }
    return "?";
}

std::optional<StatsKind> parse_stats_kind(std::string_view name) {
    if (name == "FisherDiag") return StatsKind::FisherDiag;
    if (name == "Gram") return StatsKind::Gram;
    if (name == "Mask") return StatsKind::Mask;
    return std::nullopt;
}

std::optional<StatsKind> required_stats(Method method) {
    switch (method) {
    case Method::Fisher: return StatsKind::FisherDiag;
    case Method::RegMean: return StatsKind::Gram;
    case Method::LSTrained: return StatsKind::Mask;
    default: return std::nullopt;
    }
}

MergeRecipe MergeRecipe::model_soup() { return {}; }

MergeRecipe MergeRecipe::task_arithmetic(double lambda) {
    MergeRecipe r;
    r.method = Method::TaskArithmetic;
    r.lambda = lambda;
    return r;
}

MergeRecipe MergeRecipe::fisher(std::filesystem::path stats) {
    MergeRecipe r;
    r.method = Method::Fisher;
    r.stats_path = std::move(stats);
    return r;
}

MergeRecipe MergeRecipe::regmean(double alpha, std::filesystem::path stats) {
    MergeRecipe r;
    r.method = Method::RegMean;
    r.alpha = alpha;
    r.stats_path = std::move(stats);
    return r;
}

MergeRecipe MergeRecipe::ties(double keep_fraction, double lambda) {
    MergeRecipe r;
    r.method = Method::TIES;
    r.sparsity = keep_fraction;
    r.lambda = lambda;
    return r;
}

MergeRecipe MergeRecipe::dare(double drop_rate, double lambda, std::uint64_t seed) {
    MergeRecipe r;
    r.method = Method::DARE;
    r.drop_rate = drop_rate;
    r.lambda = lambda;
    r.seed = seed;
    return r;
}

MergeRecipe MergeRecipe::consensus_ta(double lambda, std::vector<double> task_lambdas) {
    MergeRecipe r;
    r.method = Method::ConsensusTA;
    r.lambda = lambda;
    r.per_task_lambda = std::move(task_lambdas);
    return r;
}

MergeRecipe MergeRecipe::ls_dataless(double keep_fraction) {
    MergeRecipe r;
    r.method = Method::LSDataless;
    r.sparsity = keep_fraction;
    return r;
}

MergeRecipe MergeRecipe::ls_trained(std::filesystem::path stats) {
    MergeRecipe r;
    r.method = Method::LSTrained;
    r.stats_path = std::move(stats);
    return r;
}

void MergeRecipe::validate(std::optional<std::size_t> tasks) const {
    const bool uses_lambda = method == Method::TaskArithmetic || method == Method::TIES || method == Method::DARE ||
                             method == Method::ConsensusTA;
    const bool uses_sparsity = method == Method::TIES || method == Method::LSDataless;
    const bool uses_stats = required_stats(method).has_value();

    auto check_presence = [&](bool used, bool present, const char* field) {
        if (used && !present)
            invalid(method, std::string("missing required field '") + field + "'");
        if (!used && present)
            invalid(method, std::string("field '") + field + "' does not apply to this method");
    };
    check_presence(uses_lambda, lambda.has_value(), "lambda");
    check_presence(method == Method::ConsensusTA, per_task_lambda.has_value(), "per_task_lambda");
    check_presence(method == Method::DARE, drop_rate.has_value(), "drop_rate");
    check_presence(uses_sparsity, sparsity.has_value(), "sparsity");
    check_presence(method == Method::RegMean, alpha.has_value(), "alpha");
    check_presence(uses_stats, stats_path.has_value(), "stats_path");
    if (method != Method::DARE && seed.has_value())
        invalid(method, "field 'seed' does not apply to this method");

    if (lambda && !(std::isfinite(*lambda) && *lambda > 0.0))
        invalid(method, "lambda must be > 0");
    if (drop_rate && !(*drop_rate >= 0.0 && *drop_rate < 1.0))
        invalid(method, "drop_rate must lie in [0, 1)");
    if (sparsity && !(*sparsity > 0.0 && *sparsity <= 1.0))
        invalid(method, "sparsity must lie in (0, 1]");
    if (alpha && !(*alpha > 0.0 && *alpha <= 1.0))
        invalid(method, "alpha must lie in (0, 1]");
    if (per_task_lambda) {
        for (double l : *per_task_lambda)
            if (!(std::isfinite(l) && l >= 0.0))
                invalid(method, "per_task_lambda entries must be >= 0");
        if (tasks && per_task_lambda->size() != *tasks)
            invalid(method, "per_task_lambda has " + std::to_string(per_task_lambda->size()) + " entries for " +
                                std::to_string(*tasks) + " tasks");
    }
    if (tasks && *tasks == 0)
        invalid(method, "at least one finetuned model is required");
    if (tasks && method == Method::ConsensusTA && *tasks < 2)
        throw Error(ErrorCode::ConsensusRequiresTwoTasks, "ConsensusTA needs at least two finetuned models");
}

MergeRecipe MergeRecipe::with_defaults() const {
    MergeRecipe r = *this;
    if (r.method == Method::DARE && !r.seed)
        r.seed = 0;
    return r;
}

std::string MergeRecipe::describe() const {
    std::vector<std::string> parts;
    if (sparsity) parts.push_back("sparsity=" + fmt_double(*sparsity));
    if (drop_rate) parts.push_back("drop_rate=" + fmt_double(*drop_rate));
    if (alpha) parts.push_back("alpha=" + fmt_double(*alpha));
    if (per_task_lambda) {
        std::string s = "per_task_lambda=[";
        for (std::size_t i = 0; i < per_task_lambda->size(); ++i)
            s += (i ? "," : "") + fmt_double((*per_task_lambda)[i]);
        parts.push_back(s + "]");
    }
    if (lambda) parts.push_back("lambda=" + fmt_double(*lambda));
    if (seed) parts.push_back("seed=" + std::to_string(*seed));
    std::string out(to_string(method));
    out += "(";
    for (std::size_t i = 0; i < parts.size(); ++i)
        out += (i ? ", " : "") + parts[i];
    return out + ")";
}

void to_json(nlohmann::json& j, const MergeRecipe& r) {
    j = nlohmann::json::object();
    j["method"] = std::string(to_string(r.method));
    if (r.lambda) j["lambda"] = *r.lambda;
    if (r.per_task_lambda) j["per_task_lambda"] = *r.per_task_lambda;
    if (r.drop_rate) j["drop_rate"] = *r.drop_rate;
    if (r.sparsity) j["sparsity"] = *r.sparsity;
    if (r.alpha) j["alpha"] = *r.alpha;
    if (r.stats_path) j["stats_path"] = r.stats_path->string();
    if (r.seed) j["seed"] = *r.seed;
}

void from_json(const nlohmann::json& j, MergeRecipe& r) {
    if (!j.is_object() || !j.contains("method") || !j["method"].is_string())
        throw Error(ErrorCode::InvalidRecipe, "recipe JSON needs a string 'method'");
    const auto method = parse_method(j["method"].get<std::string>());
    if (!method)
        throw Error(ErrorCode::UnknownMethod, "unknown method '" + j["method"].get<std::string>() + "'");
    r = MergeRecipe{};
    r.method = *method;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        try {
            if (k == "method") continue;
            else if (k == "lambda") r.lambda = it.value().get<double>();
            else if (k == "per_task_lambda") r.per_task_lambda = it.value().get<std::vector<double>>();
            else if (k == "drop_rate") r.drop_rate = it.value().get<double>();
            else if (k == "sparsity") r.sparsity = it.value().get<double>();
            else if (k == "alpha") r.alpha = it.value().get<double>();
            else if (k == "stats_path") r.stats_path = it.value().get<std::string>();
            else if (k == "seed") r.seed = it.value().get<std::uint64_t>();
            else throw Error(ErrorCode::InvalidRecipe, "unknown recipe field '" + k + "'");
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidRecipe, "bad value for '" + k + "': " + e.what());
        }
    }
}

} // namespace mergeforge
