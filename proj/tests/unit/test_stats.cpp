// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "mergeforge/algorithms.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/pipeline.hpp"
#include "mergeforge/stats.hpp"

using namespace mergeforge;
namespace fs = std::filesystem;

namespace {

using TaskTensors = std::vector<std::pair<std::string, Tensor>>;

const std::vector<std::pair<std::string, Shape>> kLayout{
    {"layer.bias", {4}},
    {"layer.weight", {4, 3}},
    {"proj.weight", {2, 4}},
};

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

class StatsTest : public ::testing::Test {
protected:
    void SetUp() override {
        synthetic = testkit::synthetic_set(rng, kLayout, 2);
        set = testkit::write_set(synthetic, dir.path() / "models");
    }

    StatsManifest manifest(StatsKind kind, std::vector<std::int64_t> counts = {1, 1}) const {
        StatsManifest m;
        m.kind = kind;
        m.task_names = {"alpha", "beta"};
        m.sample_counts = std::move(counts);
        m.base_model_fingerprint = manifest_fingerprint(set.pretrained);
        return m;
    }

    std::vector<TaskTensors> fisher_tensors() {
        std::vector<TaskTensors> out(2);
        for (auto& task : out)
            for (const auto& [key, shape] : kLayout) {
                auto v = testkit::random_values(rng, static_cast<std::size_t>(element_count(shape)));
                for (auto& x : v)
                    x = std::fabs(x) + 0.01f;
                task.emplace_back(key, Tensor::from_floats(shape, v));
            }
        return out;
    }

    /// Symmetric positive definite Grams for every 2-D parameter.
    std::vector<TaskTensors> gram_tensors() {
        std::vector<TaskTensors> out(2);
        for (auto& task : out)
            for (const auto& [key, shape] : kLayout) {
                if (shape.size() != 2)
                    continue;
                const std::int64_t in = shape[1];
                const std::int64_t samples = in + 3;
                const auto x = testkit::random_values(rng, static_cast<std::size_t>(samples * in));
                Tensor g({in, in});
                auto gv = g.f32();
                for (std::int64_t r = 0; r < in; ++r)
                    for (std::int64_t c = 0; c < in; ++c) {
                        double acc = 0.0;
                        for (std::int64_t s = 0; s < samples; ++s)
                            acc += double(x[static_cast<std::size_t>(s * in + r)]) * x[static_cast<std::size_t>(s * in + c)];
                        gv[static_cast<std::size_t>(r * in + c)] = static_cast<float>(acc);
                    }
                task.emplace_back(key, std::move(g));
            }
        return out;
    }

    std::vector<TaskTensors> mask_tensors() {
        std::vector<TaskTensors> out(2);
        for (auto& task : out)
            for (const auto& [key, shape] : kLayout) {
                std::vector<float> v(static_cast<std::size_t>(element_count(shape)));
                for (auto& x : v)
                    x = std::bernoulli_distribution(0.5)(rng) ? 1.0f : 0.0f;
                task.emplace_back(key, Tensor::from_floats(shape, v));
            }
        return out;
    }

    Tensor finetuned(std::size_t task, const std::string& key) const {
        for (const auto& [k, t] : synthetic.finetuned[task])
            if (k == key)
                return t;
        throw std::logic_error("no key " + key);
    }
    Tensor pretrained(const std::string& key) const {
        for (const auto& [k, t] : synthetic.pretrained)
            if (k == key)
                return t;
        throw std::logic_error("no key " + key);
    }

    testkit::Rng rng{7};
    testkit::TempDir dir;
    testkit::SyntheticSet synthetic;
    CheckpointSet set;
};

} // namespace

TEST_F(StatsTest, ManifestJsonRoundTrip) {
    StatsManifest m = manifest(StatsKind::Gram, {10, 20});
    m.fisher_mode = "empirical";
    const nlohmann::json j = m;
    EXPECT_TRUE(j.at("sample_count").is_array());
    EXPECT_EQ(j.at("kind"), "Gram");
    const auto back = j.get<StatsManifest>();
    EXPECT_EQ(back.task_names, m.task_names);
    EXPECT_EQ(back.sample_counts, m.sample_counts);
    EXPECT_EQ(back.base_model_fingerprint, m.base_model_fingerprint);
    EXPECT_EQ(back.fisher_mode, "empirical");

    const nlohmann::json uniform = manifest(StatsKind::Mask, {5, 5});
    EXPECT_EQ(uniform.at("sample_count"), 5);
    EXPECT_EQ(uniform.get<StatsManifest>().sample_counts, (std::vector<std::int64_t>{5, 5}));
}

TEST_F(StatsTest, ManifestRejectsBadFields) {
    const nlohmann::json base = manifest(StatsKind::FisherDiag);
    for (const char* field : {"kind", "task_names", "sample_count", "base_model_fingerprint"}) {
        auto j = base;
        j.erase(field);
        EXPECT_EQ(code_of([&] { (void)j.get<StatsManifest>(); }), ErrorCode::KindMismatch) << field;
    }
    auto j = base;
    j["kind"] = "Hessian";
    EXPECT_EQ(code_of([&] { (void)j.get<StatsManifest>(); }), ErrorCode::KindMismatch);
    j = base;
    j["sample_count"] = 0;
    EXPECT_EQ(code_of([&] { (void)j.get<StatsManifest>(); }), ErrorCode::KindMismatch);
    j = base;
    j["sample_count"] = {1, 2, 3};
    EXPECT_EQ(code_of([&] { (void)j.get<StatsManifest>(); }), ErrorCode::KindMismatch);
}

TEST_F(StatsTest, FingerprintDependsOnKeysAndShapes) {
    const auto fp = manifest_fingerprint(set.pretrained);
    EXPECT_EQ(fp, manifest_fingerprint(set.finetuned[0]));
    testkit::SyntheticSet other = testkit::synthetic_set(rng, {{"layer.bias", {5}}}, 1);
    const auto m = write_checkpoint(other.pretrained, dir.path() / "other");
    EXPECT_NE(fp, manifest_fingerprint(m));
}

TEST_F(StatsTest, FisherBundleLoads) {
    const auto tensors = fisher_tensors();
    write_stats_bundle(dir.path() / "fisher", manifest(StatsKind::FisherDiag), tensors);
    const StatsBundle b = load_stats(dir.path() / "fisher", StatsKind::FisherDiag, set.pretrained);
    EXPECT_EQ(b.task_count(), 2u);
    EXPECT_TRUE(b.covers("layer.weight"));
    const auto loaded = b.load("layer.weight");
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded[1].to_vector(), tensors[1][1].second.to_vector());
}

TEST_F(StatsTest, GramsAreDividedBySampleCount) {
    const auto tensors = gram_tensors();
    write_stats_bundle(dir.path() / "gram", manifest(StatsKind::Gram, {4, 8}), tensors);
    const StatsBundle b = load_stats(dir.path() / "gram", StatsKind::Gram, set.pretrained);
    EXPECT_FALSE(b.covers("layer.bias"));
    EXPECT_TRUE(b.covers("proj.weight"));
    const auto loaded = b.load("proj.weight");
    const auto raw0 = tensors[0][1].second.to_vector();
    const auto raw1 = tensors[1][1].second.to_vector();
    for (std::size_t i = 0; i < raw0.size(); ++i) {
        EXPECT_FLOAT_EQ(loaded[0].at(static_cast<std::int64_t>(i)), raw0[i] / 4.0f);
        EXPECT_FLOAT_EQ(loaded[1].at(static_cast<std::int64_t>(i)), raw1[i] / 8.0f);
    }
    EXPECT_EQ(code_of([&] { (void)b.load("layer.bias"); }), ErrorCode::MissingStats);
}

TEST_F(StatsTest, MasksRoundTripAsU8) {
    const auto tensors = mask_tensors();
    write_stats_bundle(dir.path() / "mask", manifest(StatsKind::Mask), tensors);
    const StatsBundle b = load_stats(dir.path() / "mask", StatsKind::Mask, set.pretrained);
    const auto masks = b.load_masks("layer.weight");
    const auto expected = tensors[0][1].second.to_vector();
    for (std::size_t i = 0; i < expected.size(); ++i)
        EXPECT_EQ(masks[0].test(static_cast<std::int64_t>(i)), expected[i] != 0.0f);
}

TEST_F(StatsTest, KindMismatch) {
    write_stats_bundle(dir.path() / "fisher", manifest(StatsKind::FisherDiag), fisher_tensors());
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "fisher", StatsKind::Gram, set.pretrained); }),
              ErrorCode::KindMismatch);
}

TEST_F(StatsTest, BaseModelMismatch) {
    auto m = manifest(StatsKind::FisherDiag);
    m.base_model_fingerprint ^= 1;
    write_stats_bundle(dir.path() / "fisher", m, fisher_tensors());
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "fisher", StatsKind::FisherDiag, set.pretrained); }),
              ErrorCode::BaseModelMismatch);
}

TEST_F(StatsTest, NegativeFisher) {
    auto tensors = fisher_tensors();
    auto v = tensors[1][0].second.to_vector();
    v[2] = -1e-3f;
    tensors[1][0].second = Tensor::from_floats({4}, v);
    write_stats_bundle(dir.path() / "fisher", manifest(StatsKind::FisherDiag), tensors);
    try {
        load_stats(dir.path() / "fisher", StatsKind::FisherDiag, set.pretrained);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NegativeFisher);
        EXPECT_EQ(e.key(), "layer.bias");
    }
}

TEST_F(StatsTest, AsymmetricGram) {
    auto tensors = gram_tensors();
    auto v = tensors[0][0].second.to_vector();
    v[1] += 1.0f + std::fabs(v[1]);
    tensors[0][0].second = Tensor::from_floats({3, 3}, v);
    write_stats_bundle(dir.path() / "gram", manifest(StatsKind::Gram), tensors);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "gram", StatsKind::Gram, set.pretrained); }),
              ErrorCode::AsymmetricGram);
}

TEST_F(StatsTest, GramShapeMismatch) {
    std::vector<TaskTensors> tensors(2);
    for (auto& t : tensors)
        t.emplace_back("layer.weight", Tensor::filled({4, 4}, 1.0f));
    write_stats_bundle(dir.path() / "gram", manifest(StatsKind::Gram), tensors);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "gram", StatsKind::Gram, set.pretrained); }),
              ErrorCode::GramShapeMismatch);

    for (auto& t : tensors)
        t = {{"layer.bias", Tensor::filled({4, 4}, 1.0f)}};
    write_stats_bundle(dir.path() / "gram_bias", manifest(StatsKind::Gram), tensors);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "gram_bias", StatsKind::Gram, set.pretrained); }),
              ErrorCode::GramShapeMismatch);
}

TEST_F(StatsTest, InvalidMask) {
    auto tensors = mask_tensors();
    Tensor raw = tensors[0][2].second.cast(DType::U8);
    raw.bytes()[0] = std::byte{2};
    tensors[0][2].second = raw;
    write_stats_bundle(dir.path() / "mask", manifest(StatsKind::Mask), tensors);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "mask", StatsKind::Mask, set.pretrained); }),
              ErrorCode::InvalidMask);
}

TEST_F(StatsTest, MissingStatsCases) {
    // A parameter absent from every task of a Fisher bundle.
    auto partial = fisher_tensors();
    for (auto& t : partial)
        t.pop_back();
    write_stats_bundle(dir.path() / "partial", manifest(StatsKind::FisherDiag), partial);
    try {
        load_stats(dir.path() / "partial", StatsKind::FisherDiag, set.pretrained);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingStats);
        EXPECT_EQ(e.key(), "proj.weight");
    }

    // Present for one task only.
    auto uneven = gram_tensors();
    uneven[1].pop_back();
    write_stats_bundle(dir.path() / "uneven", manifest(StatsKind::Gram), uneven);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "uneven", StatsKind::Gram, set.pretrained); }),
              ErrorCode::MissingStats);

    // Task file deleted.
    write_stats_bundle(dir.path() / "gone", manifest(StatsKind::FisherDiag), fisher_tensors());
    fs::remove(dir.path() / "gone" / "beta" / "FisherDiag.safetensors");
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "gone", StatsKind::FisherDiag, set.pretrained); }),
              ErrorCode::MissingStats);

    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "nowhere", StatsKind::FisherDiag, set.pretrained); }),
              ErrorCode::Io);
}

TEST_F(StatsTest, UnknownKeyAndWrongShape) {
    auto extra = fisher_tensors();
    for (auto& t : extra)
        t.emplace_back("zzz.weight", Tensor::filled({1}, 1.0f));
    write_stats_bundle(dir.path() / "extra", manifest(StatsKind::FisherDiag), extra);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "extra", StatsKind::FisherDiag, set.pretrained); }),
              ErrorCode::KeyMismatch);

    auto shaped = fisher_tensors();
    shaped[0][0].second = Tensor::filled({5}, 1.0f);
    write_stats_bundle(dir.path() / "shaped", manifest(StatsKind::FisherDiag), shaped);
    EXPECT_EQ(code_of([&] { load_stats(dir.path() / "shaped", StatsKind::FisherDiag, set.pretrained); }),
              ErrorCode::ShapeMismatch);
}

TEST_F(StatsTest, FisherMergeEndToEnd) {
    const auto tensors = fisher_tensors();
    write_stats_bundle(dir.path() / "fisher", manifest(StatsKind::FisherDiag), tensors);
    const auto summary = merge_checkpoints(set, MergeRecipe::fisher(dir.path() / "fisher"),
                                           {.output = dir.path() / "out"});
    CheckpointReader reader(summary.output);
    for (std::size_t p = 0; p < kLayout.size(); ++p) {
        const auto& key = kLayout[p].first;
        const auto expected = oracle::weighted_mean({finetuned(0, key).to_vector(), finetuned(1, key).to_vector()},
                                                    {tensors[0][p].second.to_vector(), tensors[1][p].second.to_vector()});
        const Tensor out = reader.read_f32(key);
        for (std::size_t j = 0; j < expected.size(); ++j)
            EXPECT_NEAR(out.at(static_cast<std::int64_t>(j)), expected[j], 1e-6 * std::max(1.0, std::fabs(expected[j])));
    }
}

TEST_F(StatsTest, RegMeanEndToEndFallsBackForUncoveredKeys) {
    const auto tensors = gram_tensors();
    write_stats_bundle(dir.path() / "gram", manifest(StatsKind::Gram, {6, 7}), tensors);
    const auto summary = merge_checkpoints(set, MergeRecipe::regmean(0.9, dir.path() / "gram"),
                                           {.output = dir.path() / "out"});
    CheckpointReader reader(summary.output);

    const Tensor bias = reader.read_f32("layer.bias");
    const Tensor soup = model_soup(std::vector<Tensor>{finetuned(0, "layer.bias"), finetuned(1, "layer.bias")});
    EXPECT_EQ(bias.to_vector(), soup.to_vector());

    const StatsBundle b = load_stats(dir.path() / "gram", StatsKind::Gram, set.pretrained);
    const Tensor expected = regmean_merge("proj.weight",
                                          std::vector<Tensor>{finetuned(0, "proj.weight"), finetuned(1, "proj.weight")},
                                          b.load("proj.weight"), 0.9);
    EXPECT_EQ(reader.read_f32("proj.weight").to_vector(), expected.to_vector());
}

TEST_F(StatsTest, LsTrainedEndToEnd) {
    const auto tensors = mask_tensors();
    write_stats_bundle(dir.path() / "mask", manifest(StatsKind::Mask), tensors);
    const auto summary = merge_checkpoints(set, MergeRecipe::ls_trained(dir.path() / "mask"),
                                           {.output = dir.path() / "out"});
    CheckpointReader reader(summary.output);
    for (std::size_t p = 0; p < kLayout.size(); ++p) {
        const auto& key = kLayout[p].first;
        const auto pre = pretrained(key).to_vector();
        std::vector<oracle::Vec> deltas;
        std::vector<std::vector<bool>> masks;
        for (std::size_t i = 0; i < 2; ++i) {
            auto d = finetuned(i, key).to_vector();
            for (std::size_t j = 0; j < d.size(); ++j)
                d[j] -= pre[j];
            deltas.push_back(d);
            std::vector<bool> m;
            for (float x : tensors[i][p].second.to_vector())
                m.push_back(x != 0.0f);
            masks.push_back(m);
        }
        EXPECT_EQ(reader.read_f32(key).to_vector(), oracle::stitch(pre, deltas, masks)) << key;
    }
}

TEST_F(StatsTest, TaskCountMustMatchCheckpointSet) {
    auto m = manifest(StatsKind::FisherDiag);
    m.task_names.push_back("gamma");
    m.sample_counts.push_back(1);
    auto tensors = fisher_tensors();
    tensors.push_back(tensors[0]);
    write_stats_bundle(dir.path() / "fisher", m, tensors);
    EXPECT_EQ(code_of([&] {
                  merge_checkpoints(set, MergeRecipe::fisher(dir.path() / "fisher"), {.output = dir.path() / "out"});
              }),
              ErrorCode::MissingStats);
}
