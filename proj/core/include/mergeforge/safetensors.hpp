// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/tensor.hpp"

namespace mergeforge {

/// Location of one tensor inside a safetensors file. `offset` is absolute
/// (counted from the start of the file).
struct TensorEntry {
    Shape shape;
    DType dtype = DType::F32;
    std::filesystem::path file;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;

    std::int64_t numel() const { return element_count(shape); }
};

/// Parsed and validated header of a single safetensors file.
struct SafetensorsHeader {
    std::uint64_t header_size = 0;
    std::uint64_t data_start = 0;
    std::map<std::string, TensorEntry> entries;
    std::map<std::string, std::string> metadata;
};

/// Reads the 8-byte length prefix and JSON header of `file` and checks every
/// entry: known dtype, positive dims, byte range inside the file with length
/// numel * width, and no two ranges overlapping. Tensor data is not read.
SafetensorsHeader read_safetensors_header(const std::filesystem::path& file);

/// Key, shape and storage dtype of a tensor to be written.
struct TensorSpec {
    std::string key;
    Shape shape;
    DType dtype = DType::F32;

    std::uint64_t nbytes() const { return static_cast<std::uint64_t>(element_count(shape)) * byte_width(dtype); }
};

/// Serialises a safetensors header for `specs` laid out back to back in the
/// given order (the order must be lexicographic for byte-stable output). The
/// result includes the 8-byte length prefix and is space-padded so that the
/// data section starts on an 8-byte boundary.
std::string encode_safetensors_header(std::span<const TensorSpec> specs,
                                      const std::map<std::string, std::string>& metadata);

/// Read-only POSIX file handle with positional reads.
class FileHandle {
public:
    FileHandle() = default;
    explicit FileHandle(const std::filesystem::path& path);
    FileHandle(const FileHandle&) = delete;
    FileHandle& operator=(const FileHandle&) = delete;
    FileHandle(FileHandle&& other) noexcept;
    FileHandle& operator=(FileHandle&& other) noexcept;
    ~FileHandle();

    /// Fills `out` from `offset`; throws Io on short reads.
    void read_at(std::uint64_t offset, std::span<std::byte> out) const;
    std::uint64_t size() const;
    const std::filesystem::path& path() const noexcept { return mPath; }

private:
    int mFd = -1;
    std::filesystem::path mPath;
};

/// Reads the tensor described by `entry` from `file`, converting to `as` when
/// given (`as` must be a floating dtype when entry holds floats).
Tensor read_entry(const FileHandle& file, const TensorEntry& entry, const std::string& key);
Tensor read_entry_as_f32(const FileHandle& file, const TensorEntry& entry, const std::string& key);

} // namespace mergeforge
