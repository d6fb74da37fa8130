// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/metrics.hpp"

using namespace mergeforge;

namespace {

ScoreTable table(std::vector<std::string> tasks, std::vector<double> merged, std::vector<double> finetuned) {
    ScoreTable t;
    t.tasks = tasks;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        t.merged[tasks[i]] = merged[i];
        if (!finetuned.empty())
            t.finetuned[tasks[i]] = finetuned[i];
    }
    return t;
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no mergeforge::Error thrown";
    return ErrorCode::InvalidArgument;
}

} // namespace

TEST(NormalizedPerformance, Examples) {
    EXPECT_DOUBLE_EQ(normalized_performance(table({"a", "b", "c"}, {70, 80, 90}, {70, 80, 90})), 100.0);
    EXPECT_DOUBLE_EQ(normalized_performance(table({"a", "b"}, {50, 30}, {100, 60})), 50.0);
    EXPECT_NEAR(normalized_performance(table({"a"}, {76.8}, {100})), 76.8, 1e-12);
}

TEST(NormalizedPerformance, Errors) {
    EXPECT_EQ(code_of([] { normalized_performance(table({"a"}, {1}, {0})); }), ErrorCode::ZeroFinetunedScore);
    EXPECT_EQ(code_of([] { normalized_performance(table({"a"}, {1}, {})); }), ErrorCode::MissingScore);
}

TEST(NormalizedPerformance, InvariantUnderTaskScalingAndOrder) {
    testkit::Rng rng(11);
    std::uniform_real_distribution<double> score(1.0, 100.0), factor(0.1, 10.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
        std::vector<std::string> tasks;
        std::vector<double> merged, ft;
        for (std::size_t i = 0; i < n; ++i) {
            tasks.push_back("t" + std::to_string(i));
            merged.push_back(score(rng));
            ft.push_back(score(rng));
        }
        const double base = normalized_performance(table(tasks, merged, ft));
        auto scaled_m = merged, scaled_f = ft;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = factor(rng);
            scaled_m[i] *= c;
            scaled_f[i] *= c;
        }
        EXPECT_NEAR(normalized_performance(table(tasks, scaled_m, scaled_f)), base, 1e-9 * base);
        auto order = tasks;
        std::shuffle(order.begin(), order.end(), rng);
        ScoreTable t = table(tasks, merged, ft);
        t.tasks = order;
        EXPECT_NEAR(normalized_performance(t), base, 1e-9 * base);
    }
}

TEST(AverageAccuracy, ModelSoupRow) {
    const auto t = table({"if", "math", "ml", "code", "safety"}, {19.6, 25.2, 47.9, 30.3, 52.4}, {});
    EXPECT_NEAR(average_accuracy(t), 35.08, 1e-9);
}

TEST(ForgettingScore, Examples) {
    ScoreTable t = table({"a"}, {1}, {1});
    t.generalization = {{"g1", 50}, {"g2", 20}};
    t.base = {{"g1", 50}, {"g2", 20}};
    EXPECT_DOUBLE_EQ(forgetting_score(t), 100.0);
    t.generalization = {{"g1", 40}, {"g2", 60}};
    t.base = {{"g1", 80}, {"g2", 60}};
    EXPECT_DOUBLE_EQ(forgetting_score(t), 75.0);
}

TEST(ForgettingScore, Errors) {
    ScoreTable t = table({"a"}, {1}, {1});
    EXPECT_EQ(code_of([&] { forgetting_score(t); }), ErrorCode::MissingScore);
    t.generalization = {{"g1", 40}};
    EXPECT_EQ(code_of([&] { forgetting_score(t); }), ErrorCode::MissingScore);
}

TEST(ScoreTableParsing, RoundTripAndOptionalBlocks) {
    const auto t = parse_score_table(R"({"tasks": ["a", "b"], "merged": {"a": 1, "b": 2}})");
    EXPECT_FALSE(t.has_finetuned());
    EXPECT_EQ(t.merged.at("b"), 2.0);
    ScoreTable full = table({"a", "b"}, {1, 2}, {3, 4});
    full.base = {{"g", 5}};
    full.generalization = {{"g", 6}};
    const auto back = parse_score_table(nlohmann::json(full).dump());
    EXPECT_EQ(back.tasks, full.tasks);
    EXPECT_EQ(back.finetuned, full.finetuned);
    EXPECT_EQ(back.generalization, full.generalization);
}

TEST(ScoreTableParsing, Errors) {
    EXPECT_EQ(code_of([] { parse_score_table("{"); }), ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] { parse_score_table("[]"); }), ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] { parse_score_table(R"({"tasks": ["a"], "merged": {"a": 1}, "extra": 1})"); }),
              ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] { parse_score_table(R"({"tasks": ["a", "b"], "merged": {"a": 1}})"); }),
              ErrorCode::MissingScore);
    EXPECT_EQ(code_of([] { parse_score_table(R"({"tasks": ["a"], "merged": {"a": "x"}})"); }),
              ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] { parse_score_table(R"({"tasks": [], "merged": {}})"); }), ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] { parse_score_table(R"({"tasks": ["a", "a"], "merged": {"a": 1}})"); }),
              ErrorCode::InvalidScoreTable);
    EXPECT_EQ(code_of([] {
                  parse_score_table(R"({"tasks": ["a", "b"], "merged": {"a": 1, "b": 1}, "finetuned": {"a": 1}})");
              }),
              ErrorCode::MissingScore);
    EXPECT_EQ(code_of([] {
                  parse_score_table(R"({"tasks": ["a"], "merged": {"a": 1}, "finetuned": {"a": 0}})");
              }),
              ErrorCode::ZeroFinetunedScore);
    EXPECT_EQ(code_of([] { load_score_table("/nonexistent/scores.json"); }), ErrorCode::Io);
}

TEST(ScoreTableParsing, LoadsFile) {
    testkit::TempDir dir;
    std::ofstream(dir / "s.json") << R"({"tasks": ["a"], "merged": {"a": 76.8}, "finetuned": {"a": 100}})";
    EXPECT_NEAR(normalized_performance(load_score_table(dir / "s.json")), 76.8, 1e-12);
}

TEST(RuntimeReport, SingleMergeHasNoValidationTime) {
    const std::vector<TimingEntry> entries{{"TaskArithmetic", "TaskArithmetic(lambda=0.3)", 1.5, 0.0, false}};
    const auto report = runtime_report(entries);
    ASSERT_EQ(report.rows.size(), 1u);
    EXPECT_EQ(report.rows[0].merges, 1u);
    EXPECT_EQ(report.rows[0].validation_runs, 0u);
    EXPECT_EQ(report.rows[0].validation_seconds, 0.0);
    EXPECT_EQ(report.rows[0].total_seconds(), 1.5);
}

TEST(RuntimeReport, ValidationTimeIsSumOverConfigs) {
    std::vector<TimingEntry> entries;
    double expected = 0.0;
    for (int i = 0; i < 10; ++i) {
        entries.push_back({"TaskArithmetic", "c" + std::to_string(i), 0.25, 1.0 + i, true});
        expected += 1.0 + i;
    }
    for (int i = 0; i < 30; ++i)
        entries.push_back({"TIES", "t" + std::to_string(i), 0.5, 2.0, true});
    const auto report = runtime_report(entries);
    ASSERT_EQ(report.rows.size(), 2u);
    EXPECT_EQ(report.rows[0].method, "TaskArithmetic");
    EXPECT_EQ(report.rows[0].validation_runs, 10u);
    EXPECT_DOUBLE_EQ(report.rows[0].validation_seconds, expected);
    EXPECT_DOUBLE_EQ(report.rows[0].algorithm_seconds, 2.5);
    EXPECT_EQ(report.rows[1].merges, 30u);
    EXPECT_DOUBLE_EQ(report.rows[1].validation_seconds, 60.0);

    const auto text = report.to_text();
    EXPECT_NE(text.find("TaskArithmetic"), std::string::npos);
    EXPECT_NE(text.find("60.000"), std::string::npos);

    const RuntimeReport back = nlohmann::json(report).get<RuntimeReport>();
    ASSERT_EQ(back.rows.size(), 2u);
    EXPECT_EQ(back.rows[1].validation_runs, 30u);
    EXPECT_DOUBLE_EQ(back.rows[0].validation_seconds, expected);
}

TEST(RuntimeReport, TimingEntryJson) {
    const TimingEntry e{"DARE", "x", 0.1, 0.2, true};
    const TimingEntry back = nlohmann::json(e).get<TimingEntry>();
    EXPECT_EQ(back.method, "DARE");
    EXPECT_TRUE(back.evaluated);
    EXPECT_DOUBLE_EQ(back.validation_seconds, 0.2);
}
