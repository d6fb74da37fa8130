// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/dtype.hpp"

#include <bit>
#include <cassert>
#include <cstring>

#include <Eigen/Core>

#include "mergeforge/error.hpp"

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

namespace mergeforge {

std::string_view to_string(DType dtype) {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::U8: return "U8";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    if (name == "U8") return DType::U8;
    return std::nullopt;
}

float half_to_float(std::uint16_t bits) noexcept {
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(bits));
}

std::uint16_t float_to_half(float value) noexcept {
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::half(value));
}

float bfloat16_to_float(std::uint16_t bits) noexcept {
    return static_cast<float>(Eigen::numext::bit_cast<Eigen::bfloat16>(bits));
}

std::uint16_t float_to_bfloat16(float value) noexcept {
    return Eigen::numext::bit_cast<std::uint16_t>(Eigen::bfloat16(value));
}

void decode_to_float(DType dtype, std::span<const std::byte> raw, std::span<float> out) {
    if (raw.size() != out.size() * byte_width(dtype))
        throw Error(ErrorCode::InvalidArgument, "decode_to_float: byte count does not match element count");
    switch (dtype) {
    case DType::F32:
        std::memcpy(out.data(), raw.data(), raw.size());
        break;
    case DType::F16:
    case DType::BF16:
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint16_t bits;
            std::memcpy(&bits, raw.data() + 2 * i, 2);
            out[i] = dtype == DType::F16 ? half_to_float(bits) : bfloat16_to_float(bits);
        }
        break;
    case DType::U8:
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<float>(std::to_integer<std::uint8_t>(raw[i]));
        break;
    }
}

void encode_from_float(DType dtype, std::span<const float> values, std::span<std::byte> raw) {
    if (raw.size() != values.size() * byte_width(dtype))
        throw Error(ErrorCode::InvalidArgument, "encode_from_float: byte count does not match element count");
    switch (dtype) {
    case DType::F32:
        std::memcpy(raw.data(), values.data(), raw.size());
        break;
    case DType::F16:
    case DType::BF16:
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::uint16_t bits = dtype == DType::F16 ? float_to_half(values[i]) : float_to_bfloat16(values[i]);
            std::memcpy(raw.data() + 2 * i, &bits, 2);
        }
        break;
    case DType::U8:
        for (std::size_t i = 0; i < values.size(); ++i)
            raw[i] = static_cast<std::byte>(values[i] != 0.0f ? 1 : 0);
        break;
    }
}

} // namespace mergeforge
