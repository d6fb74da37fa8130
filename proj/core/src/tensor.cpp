// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/tensor.hpp"

#include <bit>
#include <cstring>

#include "mergeforge/error.hpp"

namespace mergeforge {

std::int64_t element_count(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0)
            throw Error(ErrorCode::InvalidArgument, "tensor dimensions must be positive, got " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, DType dtype)
    : mShape(std::move(shape)), mDType(dtype), mNumel(element_count(mShape)),
      mBuffer(static_cast<std::size_t>(mNumel) * byte_width(dtype)) {
}

Tensor Tensor::from_floats(Shape shape, std::span<const float> values, DType dtype) {
    Tensor t(std::move(shape), dtype);
    if (static_cast<std::int64_t>(values.size()) != t.numel())
        throw Error(ErrorCode::ShapeMismatch, "value count " + std::to_string(values.size()) +
                                                  " does not match shape " + shape_to_string(t.shape()));
    encode_from_float(dtype, values, t.bytes());
    return t;
}

Tensor Tensor::from_floats(Shape shape, std::initializer_list<float> values, DType dtype) {
    return from_floats(std::move(shape), std::span<const float>(values.begin(), values.size()), dtype);
}

Tensor Tensor::filled(Shape shape, float value) {
    Tensor t(std::move(shape), DType::F32);
    for (auto& v : t.f32())
        v = value;
    return t;
}

std::span<float> Tensor::f32() {
    if (mDType != DType::F32)
        throw Error(ErrorCode::DtypeMismatch, "f32 view requested on a " + std::string(to_string(mDType)) + " tensor");
    return {reinterpret_cast<float*>(mBuffer.data()), static_cast<std::size_t>(mNumel)};
}

std::span<const float> Tensor::f32() const {
    if (mDType != DType::F32)
        throw Error(ErrorCode::DtypeMismatch, "f32 view requested on a " + std::string(to_string(mDType)) + " tensor");
    return {reinterpret_cast<const float*>(mBuffer.data()), static_cast<std::size_t>(mNumel)};
}

float Tensor::at(std::int64_t index) const {
    if (index < 0 || index >= mNumel)
        throw Error(ErrorCode::InvalidArgument, "tensor index out of range");
    const std::size_t width = byte_width(mDType);
    float out = 0.0f;
    decode_to_float(mDType, bytes().subspan(static_cast<std::size_t>(index) * width, width), {&out, 1});
    return out;
}

std::vector<float> Tensor::to_vector() const {
    std::vector<float> out(static_cast<std::size_t>(mNumel));
    decode_to_float(mDType, bytes(), out);
    return out;
}

Tensor Tensor::cast(DType dtype) const {
    if (dtype == mDType)
        return *this;
    Tensor out(mShape, dtype);
    if (mDType == DType::F32) {
        encode_from_float(dtype, f32(), out.bytes());
    } else if (dtype == DType::F32) {
        decode_to_float(mDType, bytes(), out.f32());
    } else {
        const auto tmp = to_vector();
        encode_from_float(dtype, tmp, out.bytes());
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
    if (a.shape() != b.shape())
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": shape " + shape_to_string(a.shape()) +
                                                  " vs " + shape_to_string(b.shape()));
}

BinaryMask::BinaryMask(Shape shape, bool value)
    : mShape(std::move(shape)), mNumel(element_count(mShape)),
      mWords(static_cast<std::size_t>((mNumel + 63) / 64), value ? ~std::uint64_t{0} : 0) {
    // Keep bits beyond numel cleared so popcount and equality stay exact.
    if (value && (mNumel & 63) != 0)
        mWords.back() = (std::uint64_t{1} << (mNumel & 63)) - 1;
}

BinaryMask BinaryMask::from_bools(Shape shape, std::span<const bool> bits) {
    BinaryMask m(std::move(shape));
    if (static_cast<std::int64_t>(bits.size()) != m.numel())
        throw Error(ErrorCode::ShapeMismatch, "mask bit count does not match shape " + shape_to_string(m.shape()));
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i])
            m.set(static_cast<std::int64_t>(i));
    return m;
}

BinaryMask BinaryMask::from_bools(Shape shape, std::initializer_list<bool> bits) {
    return from_bools(std::move(shape), std::span<const bool>(bits.begin(), bits.size()));
}

std::int64_t BinaryMask::popcount() const noexcept {
    std::int64_t n = 0;
    for (auto w : mWords)
        n += std::popcount(w);
    return n;
}

std::vector<bool> BinaryMask::to_bools() const {
    std::vector<bool> out(static_cast<std::size_t>(mNumel));
    for (std::int64_t i = 0; i < mNumel; ++i)
        out[static_cast<std::size_t>(i)] = test(i);
    return out;
}

Tensor BinaryMask::apply(const Tensor& t) const {
    if (t.shape() != mShape)
        throw Error(ErrorCode::ShapeMismatch, "mask shape " + shape_to_string(mShape) + " vs tensor " +
                                                  shape_to_string(t.shape()));
    Tensor out = t.to_f32();
    auto v = out.f32();
    for (std::int64_t i = 0; i < mNumel; ++i)
        if (!test(i))
            v[static_cast<std::size_t>(i)] = 0.0f;
    return out;
}

} // namespace mergeforge
