// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace {

std::map<std::string, double> score_map(const nlohmann::json& j, const char* field) {
    std::map<std::string, double> out;
    if (!j.contains(field))
        return out;
    const auto& block = j.at(field);
    if (!block.is_object())
        throw Error(ErrorCode::InvalidScoreTable, std::string("\"") + field + "\" must be an object of task scores");
    for (const auto& [task, value] : block.items()) {
        if (!value.is_number())
            throw Error(ErrorCode::InvalidScoreTable,
                        std::string("score \"") + field + "." + task + "\" is not a number", task);
        const double v = value.get<double>();
        if (!std::isfinite(v))
            throw Error(ErrorCode::InvalidScoreTable, std::string("score \"") + field + "." + task + "\" is not finite",
                        task);
        out.emplace(task, v);
    }
    return out;
}

double ratio_mean(const std::map<std::string, double>& numerators, const std::map<std::string, double>& denominators,
                  const std::vector<std::string>& keys, ErrorCode missing, const char* what) {
    double sum = 0.0;
    for (const auto& k : keys) {
        const auto num = numerators.find(k);
        const auto den = denominators.find(k);
        if (num == numerators.end() || den == denominators.end())
            throw Error(missing, std::string("no ") + what + " score for task '" + k + "'", k);
        if (den->second == 0.0)
            throw Error(ErrorCode::ZeroFinetunedScore, std::string(what) + " score of task '" + k + "' is zero", k);
        sum += num->second / den->second;
    }
    return 100.0 * sum / static_cast<double>(keys.size());
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

} // namespace

void ScoreTable::validate() const {
    if (tasks.empty())
        throw Error(ErrorCode::InvalidScoreTable, "score table lists no tasks");
    std::set<std::string> seen;
    for (const auto& t : tasks) {
        if (!seen.insert(t).second)
            throw Error(ErrorCode::InvalidScoreTable, "task '" + t + "' is listed twice", t);
        if (!merged.count(t))
            throw Error(ErrorCode::MissingScore, "no merged score for task '" + t + "'", t);
    }
    if (has_finetuned()) {
        for (const auto& t : tasks) {
            const auto it = finetuned.find(t);
            if (it == finetuned.end())
                throw Error(ErrorCode::MissingScore, "no finetuned score for task '" + t + "'", t);
            if (!(it->second > 0.0))
                throw Error(ErrorCode::ZeroFinetunedScore,
                            "finetuned score for task '" + t + "' must be positive", t);
        }
    }
}

void to_json(nlohmann::json& j, const ScoreTable& table) {
    j = nlohmann::json{{"tasks", table.tasks}, {"merged", table.merged}};
    if (table.has_finetuned())
        j["finetuned"] = table.finetuned;
    if (!table.base.empty())
        j["base"] = table.base;
    if (table.has_generalization())
        j["generalization"] = table.generalization;
}

void from_json(const nlohmann::json& j, ScoreTable& table) {
    if (!j.is_object())
        throw Error(ErrorCode::InvalidScoreTable, "score table must be a JSON object");
    static const std::set<std::string> known{"tasks", "merged", "finetuned", "base", "generalization"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key))
            throw Error(ErrorCode::InvalidScoreTable, "unknown score table field \"" + key + "\"", key);
    if (!j.contains("tasks") || !j.at("tasks").is_array())
        throw Error(ErrorCode::InvalidScoreTable, "score table needs a \"tasks\" array");
    ScoreTable out;
    for (const auto& t : j.at("tasks")) {
        if (!t.is_string())
            throw Error(ErrorCode::InvalidScoreTable, "task names must be strings");
        out.tasks.push_back(t.get<std::string>());
    }
    out.merged = score_map(j, "merged");
    out.finetuned = score_map(j, "finetuned");
    out.base = score_map(j, "base");
    out.generalization = score_map(j, "generalization");
    out.validate();
    table = std::move(out);
}

ScoreTable parse_score_table(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::InvalidScoreTable, std::string("score table is not valid JSON: ") + e.what());
    }
    return j.get<ScoreTable>();
}

ScoreTable load_score_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorCode::Io, "cannot open score table " + path.string(), path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_score_table(buf.str());
    } catch (const Error& e) {
        throw Error(e.code(), path.string() + ": " + e.what(), e.key());
    }
}

double normalized_performance(const ScoreTable& table) {
    if (table.tasks.empty())
        throw Error(ErrorCode::InvalidScoreTable, "score table lists no tasks");
    if (!table.has_finetuned())
        throw Error(ErrorCode::MissingScore, "normalized performance needs finetuned scores");
    for (const auto& t : table.tasks)
        if (auto it = table.finetuned.find(t); it != table.finetuned.end() && it->second == 0.0)
            throw Error(ErrorCode::ZeroFinetunedScore, "finetuned score of task '" + t + "' is zero", t);
    return ratio_mean(table.merged, table.finetuned, table.tasks, ErrorCode::MissingScore, "finetuned");
}

double average_accuracy(const ScoreTable& table) {
    if (table.tasks.empty())
        throw Error(ErrorCode::InvalidScoreTable, "score table lists no tasks");
    double sum = 0.0;
    for (const auto& t : table.tasks) {
        const auto it = table.merged.find(t);
        if (it == table.merged.end())
            throw Error(ErrorCode::MissingScore, "no merged score for task '" + t + "'", t);
        sum += it->second;
    }
    return sum / static_cast<double>(table.tasks.size());
}

double forgetting_score(const ScoreTable& table) {
    if (!table.has_generalization())
        throw Error(ErrorCode::MissingScore, "forgetting score needs generalization scores");
    std::vector<std::string> keys;
    for (const auto& [task, score] : table.generalization)
        keys.push_back(task);
    for (const auto& k : keys) {
        const auto it = table.base.find(k);
        if (it == table.base.end())
            throw Error(ErrorCode::MissingScore, "no base score for generalization task '" + k + "'", k);
        if (it->second == 0.0)
            throw Error(ErrorCode::InvalidScoreTable, "base score of generalization task '" + k + "' is zero", k);
    }
    return ratio_mean(table.generalization, table.base, keys, ErrorCode::MissingScore, "base");
}

RuntimeReport runtime_report(std::span<const TimingEntry> timings) {
    RuntimeReport report;
    std::map<std::string, std::size_t> index;
    for (const auto& t : timings) {
        auto [it, inserted] = index.emplace(t.method, report.rows.size());
        if (inserted)
            report.rows.push_back(RuntimeRow{t.method});
        auto& row = report.rows[it->second];
        ++row.merges;
        row.algorithm_seconds += t.algorithm_seconds;
        if (t.evaluated) {
            ++row.validation_runs;
            row.validation_seconds += t.validation_seconds;
        }
    }
    return report;
}

std::string RuntimeReport::to_text() const {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %7s %14s %11s %15s %11s\n", "method", "merges", "algorithm [s]",
                  "val. runs", "validation [s]", "total [s]");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-16s %7zu %14s %11zu %15s %11s\n", r.method.c_str(), r.merges,
                      fixed(r.algorithm_seconds, 3).c_str(), r.validation_runs, fixed(r.validation_seconds, 3).c_str(),
                      fixed(r.total_seconds(), 3).c_str());
        out << line;
    }
    return out.str();
}

void to_json(nlohmann::json& j, const TimingEntry& entry) {
    j = {{"method", entry.method},
         {"label", entry.label},
         {"algorithm_seconds", entry.algorithm_seconds},
         {"validation_seconds", entry.validation_seconds},
         {"evaluated", entry.evaluated}};
}

void from_json(const nlohmann::json& j, TimingEntry& entry) {
    entry.method = j.at("method").get<std::string>();
    entry.label = j.value("label", std::string{});
    entry.algorithm_seconds = j.value("algorithm_seconds", 0.0);
    entry.validation_seconds = j.value("validation_seconds", 0.0);
    entry.evaluated = j.value("evaluated", entry.validation_seconds > 0.0);
}

void to_json(nlohmann::json& j, const RuntimeReport& report) {
    j = nlohmann::json::array();
    for (const auto& r : report.rows)
        j.push_back({{"method", r.method},
                     {"merges", r.merges},
                     {"validation_runs", r.validation_runs},
                     {"algorithm_seconds", r.algorithm_seconds},
                     {"validation_seconds", r.validation_seconds},
                     {"total_seconds", r.total_seconds()}});
}

void from_json(const nlohmann::json& j, RuntimeReport& report) {
    report.rows.clear();
    for (const auto& r : j) {
        RuntimeRow row;
        row.method = r.at("method").get<std::string>();
        row.merges = r.value("merges", std::size_t{0});
        row.validation_runs = r.value("validation_runs", std::size_t{0});
        row.algorithm_seconds = r.value("algorithm_seconds", 0.0);
        row.validation_seconds = r.value("validation_seconds", 0.0);
        report.rows.push_back(std::move(row));
    }
}

} // namespace mergeforge
