// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/dtype.hpp"
#include "mergeforge/memory.hpp"

namespace mergeforge {

using Shape = std::vector<std::int64_t>;

/// Number of elements of a shape; an empty shape is a scalar (1 element).
std::int64_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor. The buffer always holds element_count(shape) *
/// byte_width(dtype) bytes. Kernels operate on F32 tensors; other dtypes are
/// converted with to_f32() / cast().
class Tensor {
public:
    Tensor() = default;
    /// Zero-filled tensor.
    Tensor(Shape shape, DType dtype = DType::F32);

    static Tensor from_floats(Shape shape, std::span<const float> values, DType dtype = DType::F32);
    static Tensor from_floats(Shape shape, std::initializer_list<float> values, DType dtype = DType::F32);
    static Tensor filled(Shape shape, float value);

    const Shape& shape() const noexcept { return mShape; }
    DType dtype() const noexcept { return mDType; }
    std::int64_t numel() const noexcept { return mNumel; }
    std::size_t nbytes() const noexcept { return mBuffer.size(); }
    bool empty() const noexcept { return mNumel == 0; }

    std::span<std::byte> bytes() noexcept { return mBuffer.span(); }
    std::span<const std::byte> bytes() const noexcept { return mBuffer.span(); }

    /// Element view; throws unless dtype() == F32.
    std::span<float> f32();
    std::span<const float> f32() const;

    /// Element i converted to float (any dtype).
    float at(std::int64_t index) const;
    std::vector<float> to_vector() const;

    Tensor cast(DType dtype) const;
    /// Returns *this converted to F32 (a copy when already F32).
    Tensor to_f32() const { return cast(DType::F32); }

private:
    Shape mShape;
    DType mDType = DType::F32;
    std::int64_t mNumel = 0;
    TrackedBuffer mBuffer;
};

/// Throws ShapeMismatch naming `what` when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what);

/// One bit per element of a tensor-shaped region.
class BinaryMask {
public:
    BinaryMask() = default;
    explicit BinaryMask(Shape shape, bool value = false);

    static BinaryMask from_bools(Shape shape, std::span<const bool> bits);
    static BinaryMask from_bools(Shape shape, std::initializer_list<bool> bits);

    const Shape& shape() const noexcept { return mShape; }
    std::int64_t numel() const noexcept { return mNumel; }

    bool test(std::int64_t index) const noexcept {
        return (mWords[static_cast<std::size_t>(index >> 6)] >> (index & 63)) & 1u;
    }
    void set(std::int64_t index, bool value = true) noexcept {
        const auto bit = std::uint64_t{1} << (index & 63);
        auto& word = mWords[static_cast<std::size_t>(index >> 6)];
        word = value ? (word | bit) : (word & ~bit);
    }

    std::int64_t popcount() const noexcept;
    std::vector<bool> to_bools() const;

    /// Copy of `t` with unselected elements set to zero.
    Tensor apply(const Tensor& t) const;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    Shape mShape;
    std::int64_t mNumel = 0;
    std::vector<std::uint64_t> mWords;
};

} // namespace mergeforge
