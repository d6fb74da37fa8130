// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

namespace mergeforge::testkit {

TempDir::TempDir(const std::string& prefix) {
    std::string pattern = (std::filesystem::temp_directory_path() / (prefix + "-XXXXXX")).string();
    if (::mkdtemp(pattern.data()) == nullptr)
        throw std::runtime_error("mkdtemp failed for " + pattern);
    mPath = pattern;
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(mPath, ec);
}

std::vector<float> random_values(Rng& rng, std::size_t n, float scale) {
    std::normal_distribution<float> dist(0.0f, scale);
    std::vector<float> out(n);
    for (auto& v : out)
        v = dist(rng);
    return out;
}

Tensor random_tensor(Rng& rng, const Shape& shape, float scale, DType dtype) {
    const auto values = random_values(rng, static_cast<std::size_t>(element_count(shape)), scale);
    return Tensor::from_floats(shape, values, dtype);
}

Shape random_shape(Rng& rng, std::int64_t max_dim) {
    std::uniform_int_distribution<std::int64_t> dim(1, max_dim);
    if (std::bernoulli_distribution(0.5)(rng))
        return {dim(rng)};
    return {dim(rng), dim(rng)};
}

SyntheticSet synthetic_set(Rng& rng, const std::vector<std::pair<std::string, Shape>>& layout, std::size_t n,
                           float delta_scale, DType dtype) {
    SyntheticSet set;
    set.finetuned.resize(n);
    for (const auto& [key, shape] : layout) {
        const Tensor pre = random_tensor(rng, shape, 1.0f, DType::F32);
        set.pretrained.emplace_back(key, pre.cast(dtype));
        for (std::size_t i = 0; i < n; ++i) {
            const auto delta = random_values(rng, static_cast<std::size_t>(pre.numel()), delta_scale);
            auto values = pre.to_vector();
            for (std::size_t j = 0; j < values.size(); ++j)
                values[j] += delta[j];
            set.finetuned[i].emplace_back(key, Tensor::from_floats(shape, values, dtype));
        }
    }
    return set;
}

CheckpointSet write_set(const SyntheticSet& set, const std::filesystem::path& root, std::uint64_t shard_bytes_limit) {
    CheckpointManifest pre = write_checkpoint(set.pretrained, root / "pretrained", shard_bytes_limit);
    std::vector<CheckpointManifest> fts;
    for (std::size_t i = 0; i < set.finetuned.size(); ++i)
        fts.push_back(write_checkpoint(set.finetuned[i], root / ("ft" + std::to_string(i)), shard_bytes_limit));
    return validate_set(std::move(pre), std::move(fts));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<float> values_of(const Tensor& t) {
    return t.to_vector();
}

} // namespace mergeforge::testkit
