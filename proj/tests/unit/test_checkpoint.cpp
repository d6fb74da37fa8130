// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "mergeforge/checkpoint.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/safetensors.hpp"

using namespace mergeforge;
using mergeforge::testkit::TempDir;

namespace {

// Hand-assembles a safetensors file from a header JSON and a data blob,
// without going through the library's encoder.
void write_raw(const std::filesystem::path& file, const std::string& header, const std::string& data,
               std::optional<std::uint64_t> declared_length = std::nullopt) {
    std::ofstream out(file, std::ios::binary);
    const std::uint64_t n = declared_length.value_or(header.size());
    unsigned char len[8];
    for (int i = 0; i < 8; ++i)
        len[i] = static_cast<unsigned char>(n >> (8 * i));
    out.write(reinterpret_cast<const char*>(len), 8);
    out << header << data;
}

std::string floats(std::initializer_list<float> values) {
    std::string out(values.size() * 4, '\0');
    std::memcpy(out.data(), std::data(values), out.size());
    return out;
}

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no mergeforge::Error thrown";
    return ErrorCode::InvalidArgument;
}

} // namespace

TEST(Safetensors, ParsesHandWrittenFile) {
    TempDir dir;
    const auto file = dir / "model.safetensors";
    write_raw(file,
              R"({"__metadata__":{"format":"pt"},"b":{"dtype":"F32","shape":[2],"data_offsets":[8,16]},)"
              R"("a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})",
              floats({1, 2, 3, 4}));
    const auto header = read_safetensors_header(file);
    ASSERT_EQ(header.entries.size(), 2u);
    EXPECT_EQ(header.metadata.at("format"), "pt");
    const auto m = open_checkpoint(dir.path());
    EXPECT_EQ(m.total_params, 4);
    CheckpointReader reader(m);
    EXPECT_EQ(reader.read("a").to_vector(), (std::vector<float>{1, 2}));
    EXPECT_EQ(reader.read("b").to_vector(), (std::vector<float>{3, 4}));
}

TEST(Safetensors, RejectsMalformedFiles) {
    TempDir dir;
    const auto file = dir / "x.safetensors";
    const std::string ok = R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";

    write_raw(file, ok, floats({1, 2}), 1'000'000);
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::MalformedHeader);

    write_raw(file, "{not json", "");
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::MalformedHeader);

    write_raw(file, ok, floats({1}));
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::MalformedHeader);

    write_raw(file, R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", floats({1, 2}));
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::MalformedHeader);

    write_raw(file,
              R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
              R"("b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
              floats({1, 2, 3}));
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::OverlappingRanges);

    write_raw(file, R"({"a":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}})", floats({1, 2}));
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::UnsupportedDtype);

    {
        std::ofstream out(file, std::ios::binary);
        out << "abc";
    }
    EXPECT_EQ(code_of([&] { read_safetensors_header(file); }), ErrorCode::MalformedHeader);
}

TEST(Safetensors, EncodedHeaderIsPaddedAndParsable) {
    const std::vector<TensorSpec> specs{{"w", {3, 5}, DType::BF16}, {"b", {3}, DType::F32}};
    const std::string header = encode_safetensors_header(specs, {{"format", "pt"}});
    std::uint64_t n = 0;
    std::memcpy(&n, header.data(), 8);
    EXPECT_EQ(n + 8, header.size());
    EXPECT_EQ(n % 8, 0u);
    const auto doc = nlohmann::json::parse(header.substr(8));
    EXPECT_EQ(doc["w"]["data_offsets"], nlohmann::json::array({0, 30}));
    EXPECT_EQ(doc["b"]["data_offsets"], nlohmann::json::array({30, 42}));
    const std::vector<TensorSpec> dup{{"w", {1}, DType::F32}, {"w", {1}, DType::F32}};
    EXPECT_EQ(code_of([&] { encode_safetensors_header(dup, {}); }), ErrorCode::DuplicateKey);
}

TEST(Checkpoint, SingleFileRoundTrip) {
    TempDir dir;
    testkit::Rng rng(1);
    const testkit::Model model{{"b", testkit::random_tensor(rng, {7})},
                               {"a", testkit::random_tensor(rng, {3, 4}, 1.0f, DType::F16)}};
    const auto m = write_checkpoint(model, dir / "ckpt");
    EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / kSingleFileName));
    EXPECT_FALSE(std::filesystem::exists(dir / "ckpt" / kIndexFileName));
    ASSERT_EQ(m.entries.size(), 2u);
    EXPECT_EQ(m.entries.begin()->first, "a");
    EXPECT_EQ(m.at("a").dtype, DType::F16);
    CheckpointReader reader(m);
    for (const auto& [key, t] : model) {
        const Tensor back = reader.read(key);
        EXPECT_EQ(back.dtype(), t.dtype());
        EXPECT_EQ(back.shape(), t.shape());
        EXPECT_EQ(std::memcmp(back.bytes().data(), t.bytes().data(), t.nbytes()), 0);
    }
}

TEST(Checkpoint, ShardedIndexRoundTrip) {
    TempDir dir;
    testkit::Rng rng(2);
    const testkit::Model model{{"k1", testkit::random_tensor(rng, {16})},
                               {"k2", testkit::random_tensor(rng, {16})},
                               {"k3", testkit::random_tensor(rng, {16})}};
    const auto m = write_checkpoint(model, dir / "ckpt", 128);
    EXPECT_EQ(m.shards.size(), 2u);
    EXPECT_EQ(m.entries.size(), 3u);
    EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "model-00001-of-00002.safetensors"));
    const auto index = nlohmann::json::parse(testkit::read_file(dir / "ckpt" / kIndexFileName));
    EXPECT_EQ(index["metadata"]["total_size"], 192);
    EXPECT_EQ(index["weight_map"]["k3"], "model-00002-of-00002.safetensors");
    const auto reopened = open_checkpoint(dir / "ckpt" / kIndexFileName);
    EXPECT_EQ(reopened.entries.size(), 3u);
}

TEST(Checkpoint, RandomRoundTrips) {
    testkit::Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        TempDir dir;
        testkit::Model model;
        const int count = std::uniform_int_distribution<int>(1, 6)(rng);
        for (int i = 0; i < count; ++i) {
            const DType dtype = std::array{DType::F32, DType::F16, DType::BF16}[static_cast<std::size_t>(i % 3)];
            model.emplace_back("layer." + std::to_string(i) + ".weight",
                               testkit::random_tensor(rng, testkit::random_shape(rng, 20), 1.0f, dtype));
        }
        const std::uint64_t limit = trial % 2 == 0 ? kDefaultShardBytes : 256;
        const auto m = write_checkpoint(model, dir / "c", limit);
        const auto reopened = open_checkpoint(dir / "c");
        ASSERT_EQ(reopened.entries.size(), model.size());
        CheckpointReader reader(reopened);
        for (const auto& [key, t] : model) {
            const Tensor back = reader.read(key);
            ASSERT_EQ(back.shape(), t.shape());
            ASSERT_EQ(back.dtype(), t.dtype());
            ASSERT_EQ(std::memcmp(back.bytes().data(), t.bytes().data(), t.nbytes()), 0) << key;
        }
    }
}

TEST(Checkpoint, OpenErrors) {
    TempDir dir;
    EXPECT_EQ(code_of([&] { open_checkpoint(dir / "missing"); }), ErrorCode::Io);
    std::filesystem::create_directories(dir / "empty");
    EXPECT_EQ(code_of([&] { open_checkpoint(dir / "empty"); }), ErrorCode::MissingShard);

    testkit::Rng rng(4);
    write_checkpoint({{"a", testkit::random_tensor(rng, {64})}, {"b", testkit::random_tensor(rng, {64})}}, dir / "s",
                     300);
    std::filesystem::remove(dir / "s" / "model-00002-of-00002.safetensors");
    EXPECT_EQ(code_of([&] { open_checkpoint(dir / "s"); }), ErrorCode::MissingShard);

    std::filesystem::create_directories(dir / "u8");
    write_raw(dir / "u8" / "model.safetensors", R"({"m":{"dtype":"U8","shape":[2],"data_offsets":[0,2]}})",
              std::string("\x01\x00", 2));
    EXPECT_EQ(code_of([&] { open_checkpoint(dir / "u8"); }), ErrorCode::UnsupportedDtype);
}

TEST(Checkpoint, ValidateSetReportsMismatches) {
    TempDir dir;
    testkit::Rng rng(5);
    const auto pre = write_checkpoint({{"a", Tensor({2})}, {"b", Tensor({3})}}, dir / "pre");
    const auto same = write_checkpoint({{"a", Tensor({2})}, {"b", Tensor({3})}}, dir / "same");
    const auto missing = write_checkpoint({{"a", Tensor({2})}}, dir / "missing");
    const auto shaped = write_checkpoint({{"a", Tensor({2})}, {"b", Tensor({4})}}, dir / "shaped");
    const auto typed = write_checkpoint({{"a", Tensor({2})}, {"b", Tensor({3}, DType::BF16)}}, dir / "typed");

    EXPECT_EQ(validate_set(pre, {same, same}).n(), 2u);
    EXPECT_EQ(code_of([&] { validate_set(pre, {}); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { validate_set(pre, {same, missing}); }), ErrorCode::KeyMismatch);
    EXPECT_EQ(code_of([&] { validate_set(pre, {shaped}); }), ErrorCode::ShapeMismatch);
    EXPECT_EQ(code_of([&] { validate_set(pre, {typed}); }), ErrorCode::DtypeMismatch);
}

TEST(Checkpoint, ValidateSetListsAtMostTenKeys) {
    TempDir dir;
    testkit::Model a, b;
    for (int i = 0; i < 25; ++i) {
        a.emplace_back("k" + std::to_string(100 + i), Tensor({2}));
        b.emplace_back("k" + std::to_string(100 + i), Tensor({3}));
    }
    const auto pre = write_checkpoint(a, dir / "a");
    const auto ft = write_checkpoint(b, dir / "b");
    try {
        validate_set(pre, {ft});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
        EXPECT_LE(e.details().size(), 11u);
        EXPECT_GE(e.details().size(), 10u);
        EXPECT_NE(std::string(e.what()).find("k100"), std::string::npos);
    }
}

TEST(Checkpoint, GroupStreamYieldsEachKeyOnceInOrder) {
    TempDir dir;
    testkit::Rng rng(6);
    const auto set = testkit::write_set(
        testkit::synthetic_set(rng, {{"z", {3}}, {"a", {2, 2}}, {"m", {5}}}, 3, 0.1f, DType::BF16), dir.path(), 40);
    GroupStream stream(set);
    std::vector<std::string> keys;
    while (auto g = stream.next()) {
        keys.push_back(g->key);
        EXPECT_EQ(g->pretrained.dtype(), DType::F32);
        EXPECT_EQ(g->finetuned.size(), 3u);
    }
    EXPECT_EQ(keys, (std::vector<std::string>{"a", "m", "z"}));
}

TEST(Checkpoint, WriterEnforcesOrderAndCompleteness) {
    TempDir dir;
    {
        CheckpointWriter w(dir / "o", {{"a", {1}, DType::F32}, {"b", {1}, DType::F32}});
        EXPECT_EQ(code_of([&] { w.write("b", Tensor({1})); }), ErrorCode::InvalidArgument);
    }
    {
        CheckpointWriter w(dir / "o", {{"a", {1}, DType::F32}, {"b", {1}, DType::F32}});
        w.write("a", Tensor({1}));
        EXPECT_EQ(code_of([&] { w.finish(); }), ErrorCode::InvalidArgument);
    }
    EXPECT_EQ(code_of([&] {
                  CheckpointWriter w(dir / "o", {{"a", {1}, DType::F32}, {"a", {2}, DType::F32}});
              }),
              ErrorCode::DuplicateKey);
}

TEST(Checkpoint, WriterReplacesStaleShards) {
    TempDir dir;
    testkit::Rng rng(8);
    write_checkpoint({{"a", testkit::random_tensor(rng, {64})}, {"b", testkit::random_tensor(rng, {64})}}, dir / "o",
                     300);
    const auto m = write_checkpoint({{"a", testkit::random_tensor(rng, {4})}}, dir / "o");
    EXPECT_EQ(m.entries.size(), 1u);
    EXPECT_FALSE(std::filesystem::exists(dir / "o" / kIndexFileName));
    EXPECT_FALSE(std::filesystem::exists(dir / "o" / "model-00001-of-00002.safetensors"));
}

TEST(Checkpoint, CopiesAuxiliaryFiles) {
    TempDir dir;
    write_checkpoint({{"a", Tensor({1})}}, dir / "src");
    std::ofstream(dir / "src" / "config.json") << R"({"hidden": 4})";
    std::ofstream(dir / "src" / "tokenizer.json") << "{}";
    std::filesystem::create_directories(dir / "dst");
    copy_auxiliary_files(dir / "src", dir / "dst");
    EXPECT_TRUE(std::filesystem::exists(dir / "dst" / "config.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "dst" / "tokenizer.json"));
    EXPECT_FALSE(std::filesystem::exists(dir / "dst" / kSingleFileName));
}
