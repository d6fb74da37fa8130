// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/memory.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <new>

namespace mergeforge {

namespace {

constexpr std::align_val_t kAlignment{64};

std::atomic<std::size_t> gResident{0};
std::atomic<std::size_t> gPeak{0};

void account_alloc(std::size_t bytes) noexcept {
    const std::size_t now = gResident.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::size_t peak = gPeak.load(std::memory_order_relaxed);
    while (now > peak && !gPeak.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
}

void account_free(std::size_t bytes) noexcept {
    gResident.fetch_sub(bytes, std::memory_order_relaxed);
}

} // namespace

namespace memory {

std::size_t resident_bytes() noexcept { return gResident.load(std::memory_order_relaxed); }
std::size_t peak_bytes() noexcept { return gPeak.load(std::memory_order_relaxed); }
void reset_peak() noexcept { gPeak.store(gResident.load(std::memory_order_relaxed), std::memory_order_relaxed); }

} // namespace memory

TrackedBuffer::TrackedBuffer(std::size_t bytes) : mSize(bytes) {
    if (bytes == 0)
        return;
    mData = static_cast<std::byte*>(::operator new(bytes, kAlignment));
    std::memset(mData, 0, bytes);
    account_alloc(bytes);
}

TrackedBuffer::TrackedBuffer(const TrackedBuffer& other) : TrackedBuffer(other.mSize) {
    if (mSize != 0)
        std::memcpy(mData, other.mData, mSize);
}

TrackedBuffer& TrackedBuffer::operator=(const TrackedBuffer& other) {
    if (this != &other) {
        TrackedBuffer copy(other);
        *this = std::move(copy);
    }
    return *this;
}

TrackedBuffer::TrackedBuffer(TrackedBuffer&& other) noexcept
    : mData(std::exchange(other.mData, nullptr)), mSize(std::exchange(other.mSize, 0)) {
}

TrackedBuffer& TrackedBuffer::operator=(TrackedBuffer&& other) noexcept {
    if (this != &other) {
        release();
        mData = std::exchange(other.mData, nullptr);
        mSize = std::exchange(other.mSize, 0);
    }
    return *this;
}

TrackedBuffer::~TrackedBuffer() { release(); }

void TrackedBuffer::release() noexcept {
    if (mData != nullptr) {
        ::operator delete(mData, kAlignment);
        account_free(mSize);
    }
    mData = nullptr;
    mSize = 0;
}

} // namespace mergeforge
