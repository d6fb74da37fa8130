// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/philox.hpp"

namespace mergeforge {

namespace {

inline float to_unit(std::uint32_t bits) noexcept {
    // 24 high bits -> exactly representable float in [0, 1).
    return static_cast<float>(bits >> 8) * 0x1.0p-24f;
}

} // namespace

KeyedUniform::KeyedUniform(std::uint64_t seed, std::uint32_t stream, std::string_view param_key) noexcept
    : mStream(stream) {
    const std::uint64_t key = splitmix64(seed ^ splitmix64(fnv1a64(param_key)));
    mKey = {static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
    mSalt = static_cast<std::uint32_t>(splitmix64(fnv1a64(param_key) + 1));
}

void KeyedUniform::fill(std::int64_t first, float* out, std::int64_t count) const noexcept {
    std::int64_t i = first;
    const std::int64_t end = first + count;
    while (i < end) {
        const auto block = static_cast<std::uint64_t>(i) >> 2;
        const auto words = Philox4x32::generate(
            {static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32), mStream, mSalt}, mKey);
        for (auto lane = static_cast<std::size_t>(i & 3); lane < 4 && i < end; ++lane, ++i)
            *out++ = to_unit(words[lane]);
    }
}

float KeyedUniform::at(std::int64_t element) const noexcept {
    float v;
    fill(element, &v, 1);
    return v;
}

} // namespace mergeforge
