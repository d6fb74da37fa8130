// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace mergeforge {

/// Storage element type. Parameters are F32/F16/BF16; U8 only appears in
/// mask statistics files.
enum class DType : std::uint8_t { F32, F16, BF16, U8 };

constexpr std::size_t byte_width(DType dtype) noexcept {
    switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::U8: return 1;
    }
    return 0;
}

constexpr bool is_floating(DType dtype) noexcept { return dtype != DType::U8; }

/// safetensors spelling ("F32", "F16", "BF16", "U8").
std::string_view to_string(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);

float half_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_half(float value) noexcept;
float bfloat16_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_bfloat16(float value) noexcept;

/// Decode `out.size()` little-endian elements of `dtype` from `raw`.
void decode_to_float(DType dtype, std::span<const std::byte> raw, std::span<float> out);
/// Encode floats as `dtype` into `raw` (which must hold out.size() * width bytes).
void encode_from_float(DType dtype, std::span<const float> values, std::span<std::byte> raw);

} // namespace mergeforge
