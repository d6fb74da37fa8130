// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/safetensors.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <limits>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace {

// Same ceiling the reference safetensors implementation applies.
constexpr std::uint64_t kMaxHeaderBytes = 100'000'000;
constexpr std::size_t kStagingBytes = 4u << 20;

using nlohmann::json;

[[noreturn]] void malformed(const std::filesystem::path& file, const std::string& what, const std::string& key = {}) {
    throw Error(ErrorCode::MalformedHeader, file.string() + ": " + what, key);
}

std::uint64_t to_u64(const json& v, const std::filesystem::path& file, const std::string& key) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        malformed(file, "expected a non-negative integer for '" + key + "'", key);
    return v.get<std::uint64_t>();
}

} // namespace

SafetensorsHeader read_safetensors_header(const std::filesystem::path& file) {
    FileHandle handle(file);
    const std::uint64_t file_size = handle.size();
    if (file_size < 8)
        malformed(file, "file shorter than the 8-byte header length");

    SafetensorsHeader header;
    std::byte prefix[8];
    handle.read_at(0, prefix);
    std::memcpy(&header.header_size, prefix, 8);
    if (header.header_size > kMaxHeaderBytes || header.header_size > file_size - 8)
        malformed(file, "header length " + std::to_string(header.header_size) + " exceeds file size " +
                            std::to_string(file_size));
    header.data_start = 8 + header.header_size;
    const std::uint64_t data_size = file_size - header.data_start;

    std::string text(header.header_size, '\0');
    handle.read_at(8, std::as_writable_bytes(std::span<char>(text.data(), text.size())));

    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        malformed(file, std::string("header is not valid JSON: ") + e.what());
    }
    if (!doc.is_object())
        malformed(file, "header is not a JSON object");

    struct Range {
        std::uint64_t begin, end;
        const std::string* key;
    };
    std::vector<Range> ranges;

    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string& key = it.key();
        const json& value = it.value();
        if (key == "__metadata__") {
            if (!value.is_object())
                malformed(file, "__metadata__ must be an object");
            for (auto m = value.begin(); m != value.end(); ++m) {
                if (!m.value().is_string())
                    malformed(file, "__metadata__ values must be strings", m.key());
                header.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets"))
            malformed(file, "entry lacks dtype/shape/data_offsets", key);
        if (!value["dtype"].is_string())
            malformed(file, "dtype must be a string", key);
        const auto dtype_name = value["dtype"].get<std::string>();
        const auto dtype = parse_dtype(dtype_name);
        if (!dtype)
            throw Error(ErrorCode::UnsupportedDtype, file.string() + ": dtype " + dtype_name + " is not supported", key);

        TensorEntry entry;
        entry.dtype = *dtype;
        entry.file = file;
        if (!value["shape"].is_array())
            malformed(file, "shape must be an array", key);
        std::uint64_t numel = 1;
        for (const auto& d : value["shape"]) {
            const std::uint64_t dim = to_u64(d, file, key);
            if (dim == 0)
                malformed(file, "zero-sized dimension", key);
            if (numel > data_size / dim)
                malformed(file, "tensor larger than the data section", key);
            numel *= dim;
            entry.shape.push_back(static_cast<std::int64_t>(dim));
        }
        const auto& offsets = value["data_offsets"];
        if (!offsets.is_array() || offsets.size() != 2)
            malformed(file, "data_offsets must be a pair", key);
        const std::uint64_t begin = to_u64(offsets[0], file, key);
        const std::uint64_t end = to_u64(offsets[1], file, key);
        if (begin > end || end > data_size)
            malformed(file, "byte range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") lies outside the data section", key);
        if (end - begin != numel * byte_width(entry.dtype))
            malformed(file, "byte range length does not match shape and dtype", key);
        entry.offset = header.data_start + begin;
        entry.nbytes = end - begin;
        auto [pos, inserted] = header.entries.emplace(key, std::move(entry));
        ranges.push_back({begin, end, &pos->first});
    }

    std::sort(ranges.begin(), ranges.end(), [](const Range& a, const Range& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].begin < ranges[i - 1].end)
            throw Error(ErrorCode::OverlappingRanges,
                        file.string() + ": tensors '" + *ranges[i - 1].key + "' and '" + *ranges[i].key + "' overlap",
                        *ranges[i].key);
    return header;
}

std::string encode_safetensors_header(std::span<const TensorSpec> specs,
                                      const std::map<std::string, std::string>& metadata) {
    json doc = json::object();
    std::uint64_t offset = 0;
    for (const auto& spec : specs) {
        if (doc.contains(spec.key))
            throw Error(ErrorCode::DuplicateKey, "duplicate tensor key '" + spec.key + "'", spec.key);
        const std::uint64_t end = offset + spec.nbytes();
        doc[spec.key] = {{"dtype", std::string(to_string(spec.dtype))},
                         {"shape", spec.shape},
                         {"data_offsets", {offset, end}}};
        offset = end;
    }
    if (!metadata.empty())
        doc["__metadata__"] = metadata;

    std::string text = doc.dump();
    const std::size_t padded = (text.size() + 7) / 8 * 8;
    text.resize(padded, ' ');
    const std::uint64_t length = text.size();
    std::string out(8, '\0');
    std::memcpy(out.data(), &length, 8);
    return out + text;
}

FileHandle::FileHandle(const std::filesystem::path& path) : mPath(path) {
    mFd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (mFd < 0)
        throw Error(ErrorCode::Io, "cannot open '" + path.string() + "': " + std::strerror(errno), path.string());
}

FileHandle::FileHandle(FileHandle&& other) noexcept
    : mFd(std::exchange(other.mFd, -1)), mPath(std::move(other.mPath)) {
}

FileHandle& FileHandle::operator=(FileHandle&& other) noexcept {
    if (this != &other) {
        if (mFd >= 0)
            ::close(mFd);
        mFd = std::exchange(other.mFd, -1);
        mPath = std::move(other.mPath);
    }
    return *this;
}

FileHandle::~FileHandle() {
    if (mFd >= 0)
        ::close(mFd);
}

void FileHandle::read_at(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
        const ssize_t got = ::pread(mFd, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
        if (got < 0 && errno == EINTR)
            continue;
        if (got <= 0)
            throw Error(ErrorCode::Io, "short read from '" + mPath.string() + "'" +
                                           (got < 0 ? std::string(": ") + std::strerror(errno) : std::string()),
                        mPath.string());
        done += static_cast<std::size_t>(got);
    }
}

std::uint64_t FileHandle::size() const {
    struct stat st {};
    if (::fstat(mFd, &st) != 0)
        throw Error(ErrorCode::Io, "cannot stat '" + mPath.string() + "'", mPath.string());
    return static_cast<std::uint64_t>(st.st_size);
}

Tensor read_entry(const FileHandle& file, const TensorEntry& entry, const std::string& key) {
    Tensor out(entry.shape, entry.dtype);
    try {
        file.read_at(entry.offset, out.bytes());
    } catch (const Error& e) {
        throw Error(ErrorCode::Io, std::string("while reading '") + key + "': " + e.what(), key);
    }
    return out;
}

Tensor read_entry_as_f32(const FileHandle& file, const TensorEntry& entry, const std::string& key) {
    if (entry.dtype == DType::F32)
        return read_entry(file, entry, key);
    if (entry.dtype == DType::U8)
        return read_entry(file, entry, key).to_f32();
    Tensor out(entry.shape, DType::F32);
    auto dst = out.f32();
    const std::size_t width = byte_width(entry.dtype);
    const std::size_t chunk_elems = kStagingBytes / width;
    TrackedBuffer staging(std::min<std::size_t>(kStagingBytes, entry.nbytes));
    try {
        for (std::size_t first = 0; first < dst.size(); first += chunk_elems) {
            const std::size_t count = std::min(chunk_elems, dst.size() - first);
            auto raw = staging.span().first(count * width);
            file.read_at(entry.offset + first * width, raw);
            decode_to_float(entry.dtype, raw, dst.subspan(first, count));
        }
    } catch (const Error& e) {
        throw Error(ErrorCode::Io, std::string("while reading '") + key + "': " + e.what(), key);
    }
    return out;
}

} // namespace mergeforge
