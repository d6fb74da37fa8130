// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <span>

namespace mergeforge {

namespace memory {

/// Bytes currently held by tracked buffers (tensor storage and I/O staging).
std::size_t resident_bytes() noexcept;
/// High-water mark of resident_bytes() since the last reset_peak().
std::size_t peak_bytes() noexcept;
/// Set the high-water mark to the current resident size.
void reset_peak() noexcept;

} // namespace memory

/// Owning, zero-initialised, 64-byte aligned byte buffer whose size is
/// accounted in memory::resident_bytes().
class TrackedBuffer {
public:
    TrackedBuffer() = default;
    explicit TrackedBuffer(std::size_t bytes);
    TrackedBuffer(const TrackedBuffer& other);
    TrackedBuffer& operator=(const TrackedBuffer& other);
    TrackedBuffer(TrackedBuffer&& other) noexcept;
    TrackedBuffer& operator=(TrackedBuffer&& other) noexcept;
    ~TrackedBuffer();

    std::size_t size() const noexcept { return mSize; }
    std::byte* data() noexcept { return mData; }
    const std::byte* data() const noexcept { return mData; }
    std::span<std::byte> span() noexcept { return {mData, mSize}; }
    std::span<const std::byte> span() const noexcept { return {mData, mSize}; }

private:
    void release() noexcept;

    std::byte* mData = nullptr;
    std::size_t mSize = 0;
};

} // namespace mergeforge
