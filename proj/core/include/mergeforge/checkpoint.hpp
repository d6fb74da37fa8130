// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mergeforge/safetensors.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

inline constexpr const char* kSingleFileName = "model.safetensors";
inline constexpr const char* kIndexFileName = "model.safetensors.index.json";
inline constexpr std::uint64_t kDefaultShardBytes = 5'000'000'000ull;

/// Every tensor of a checkpoint located on disk; no tensor data is held.
struct CheckpointManifest {
    /// Directory (or single file) the checkpoint was opened from.
    std::filesystem::path root;
    /// Keyed and iterated in lexicographic order.
    std::map<std::string, TensorEntry> entries;
    /// Total element count over all entries (d).
    std::int64_t total_params = 0;
    std::vector<std::filesystem::path> shards;
    std::map<std::string, std::string> metadata;

    bool contains(const std::string& key) const { return entries.count(key) != 0; }
    const TensorEntry& at(const std::string& key) const;
    std::uint64_t max_tensor_bytes() const;
    std::uint64_t total_bytes() const;
};

/// Opens a checkpoint given a `.safetensors` file, a shard index JSON, or a
/// directory holding either. Validates every header (see
/// read_safetensors_header) and rejects dtypes other than F32/F16/BF16.
CheckpointManifest open_checkpoint(const std::filesystem::path& path);

/// One pretrained manifest plus n >= 1 finetuned manifests sharing its keys,
/// shapes and dtypes.
struct CheckpointSet {
    CheckpointManifest pretrained;
    std::vector<CheckpointManifest> finetuned;

    std::size_t n() const noexcept { return finetuned.size(); }
};

/// Checks that every finetuned manifest matches the pretrained one key for
/// key. On failure throws KeyMismatch / ShapeMismatch / DtypeMismatch (the
/// code of the first problem found) with up to 10 offending keys in details().
CheckpointSet validate_set(CheckpointManifest pretrained, std::vector<CheckpointManifest> finetuned);

/// Aligned tensors for one parameter across the N+1 models, decoded to F32.
struct ParamGroup {
    std::string key;
    Tensor pretrained;
    std::vector<Tensor> finetuned;
};

/// Random access to tensors of one manifest; shard files are opened lazily
/// and kept open.
class CheckpointReader {
public:
    explicit CheckpointReader(const CheckpointManifest& manifest);

    Tensor read(const std::string& key) const;
    Tensor read_f32(const std::string& key) const;

private:
    const FileHandle& handle(const std::filesystem::path& file) const;

    const CheckpointManifest* mManifest;
    mutable std::map<std::filesystem::path, FileHandle> mFiles;
};

/// Yields each parameter group exactly once in lexicographic key order. Only
/// the current group is resident: n+1 F32 tensors plus a fixed staging buffer.
class GroupStream {
public:
    explicit GroupStream(const CheckpointSet& set);

    std::optional<ParamGroup> next();
    std::size_t size() const noexcept { return mSet->pretrained.entries.size(); }

private:
    const CheckpointSet* mSet;
    CheckpointReader mPretrained;
    std::vector<CheckpointReader> mFinetuned;
    std::map<std::string, TensorEntry>::const_iterator mNext;
};

/// Streams tensors into a (possibly sharded) safetensors checkpoint.
///
/// The full list of tensor specs is fixed up front so that every shard
/// header can be written before its data. Tensors must then be supplied in
/// lexicographic key order; F32 input is converted to each spec's dtype.
/// Shards are split greedily so no shard exceeds `shard_bytes_limit` unless a
/// single tensor does. With more than one shard, tensors go to
/// model-XXXXX-of-YYYYY.safetensors and a model.safetensors.index.json is
/// written; otherwise to model.safetensors.
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path directory, std::vector<TensorSpec> specs,
                     std::uint64_t shard_bytes_limit = kDefaultShardBytes,
                     std::map<std::string, std::string> metadata = {});
    ~CheckpointWriter();

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    void write(const std::string& key, const Tensor& tensor);
    /// Flushes, writes the index when sharded, and re-opens the result.
    CheckpointManifest finish();

    std::size_t shard_count() const noexcept { return mShardNames.size(); }

private:
    void open_shard(std::size_t shard);
    void close_shard();

    std::filesystem::path mDirectory;
    std::vector<TensorSpec> mSpecs;
    std::vector<std::size_t> mShardOf;
    std::vector<std::string> mShardNames;
    std::map<std::string, std::string> mMetadata;
    std::size_t mNextTensor = 0;
    std::optional<std::size_t> mOpenShard;
    std::ofstream mOut;
    bool mFinished = false;
};

/// Writes an in-memory set of tensors (each kept in its own dtype). Keys are
/// sorted; a repeated key throws DuplicateKey before anything is written.
CheckpointManifest write_checkpoint(std::vector<std::pair<std::string, Tensor>> tensors,
                                    const std::filesystem::path& directory,
                                    std::uint64_t shard_bytes_limit = kDefaultShardBytes,
                                    std::map<std::string, std::string> metadata = {});

/// Copies top-level non-weight files (config, tokenizer, ...) verbatim from
/// `from` to `to`. No-op when `from` is not a directory.
void copy_auxiliary_files(const std::filesystem::path& from, const std::filesystem::path& to);

} // namespace mergeforge
