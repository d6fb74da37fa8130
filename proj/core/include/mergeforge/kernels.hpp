// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "mergeforge/tensor.hpp"

namespace mergeforge {

/// acc + c * x, elementwise, float32 accumulation.
Tensor axpy_accumulate(const Tensor& acc, const Tensor& x, float c);

/// Number of elements kept for a keep fraction in (0, 1]: ceil(keep * numel),
/// clamped to [1, numel]. A 1e-9 relative slack absorbs decimal
/// representation error so that e.g. 0.3 * 10 keeps 3, not 4.
std::int64_t topk_count(std::int64_t numel, double keep_fraction);

/// Compact description of a top-k-by-magnitude selection: an element with
/// magnitude key m at flat index i is selected iff m > threshold, or
/// m == threshold and i <= tie_cutoff. Magnitude keys are the IEEE bit
/// patterns of |v|, which order like the values themselves.
struct MagnitudeCut {
    std::uint32_t threshold = 0;
    std::int64_t tie_cutoff = -1;
    bool keep_all = false;

    static std::uint32_t key(float v) noexcept;

    bool contains(float v, std::int64_t index) const noexcept {
        if (keep_all)
            return true;
        const std::uint32_t m = key(v);
        return m > threshold || (m == threshold && index <= tie_cutoff);
    }
};

/// Exact top-k selection by |value| with ties broken by lower flat index.
/// Runs in three linear passes with a fixed-size histogram, so it needs no
/// per-element scratch memory.
MagnitudeCut topk_magnitude_cut(std::span<const float> values, std::int64_t k);

/// Mask with exactly topk_count(numel, keep_fraction) set bits at the largest
/// |t| positions; ties go to the lower flat index.
BinaryMask topk_magnitude_mask(const Tensor& t, double keep_fraction);

/// Per position +1 when the positive mass sum_i max(d_i, 0) is at least the
/// negative mass sum_i max(-d_i, 0), otherwise -1.
Tensor elect_sign(std::span<const Tensor> deltas);

/// Sign election on raw spans: +1 / -1 written to `out`.
void elect_sign_into(std::span<const std::span<const float>> deltas, std::span<float> out);

} // namespace mergeforge
