// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge::testkit {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& prefix = "mergeforge");
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return mPath; }
    std::filesystem::path operator/(const std::string& name) const { return mPath / name; }

private:
    std::filesystem::path mPath;
};

using Rng = std::mt19937_64;

std::vector<float> random_values(Rng& rng, std::size_t n, float scale = 1.0f);
Tensor random_tensor(Rng& rng, const Shape& shape, float scale = 1.0f, DType dtype = DType::F32);
/// Random shape with rank 1 or 2 and each dimension in [1, max_dim].
Shape random_shape(Rng& rng, std::int64_t max_dim);

/// In-memory model: key -> tensor.
using Model = std::vector<std::pair<std::string, Tensor>>;

/// Pretrained model with the given layout plus `n` finetuned copies that add
/// random task vectors of magnitude `delta_scale`.
struct SyntheticSet {
    Model pretrained;
    std::vector<Model> finetuned;
};

SyntheticSet synthetic_set(Rng& rng, const std::vector<std::pair<std::string, Shape>>& layout, std::size_t n,
                           float delta_scale = 0.1f, DType dtype = DType::F32);

/// Writes a synthetic set as <root>/pretrained and <root>/ft<i> and opens it.
CheckpointSet write_set(const SyntheticSet& set, const std::filesystem::path& root,
                        std::uint64_t shard_bytes_limit = kDefaultShardBytes);

/// Reads a whole file.
std::string read_file(const std::filesystem::path& path);

std::vector<float> values_of(const Tensor& t);

} // namespace mergeforge::testkit
