// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/kernels.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <limits>
#include <vector>

#include "mergeforge/error.hpp"
#include "mergeforge/parallel.hpp"

namespace mergeforge {

Tensor axpy_accumulate(const Tensor& acc, const Tensor& x, float c) {
    require_same_shape(acc, x, "axpy_accumulate");
    Tensor out = acc.to_f32();
    const Tensor xf = x.to_f32();
    auto o = out.f32();
    auto xv = xf.f32();
    parallel_for(out.numel(), [&](std::int64_t b, std::int64_t e) {
        for (auto i = b; i < e; ++i)
            o[static_cast<std::size_t>(i)] += c * xv[static_cast<std::size_t>(i)];
    });
    return out;
}

std::int64_t topk_count(std::int64_t numel, double keep_fraction) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
        throw Error(ErrorCode::InvalidArgument, "keep fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
    if (numel <= 0)
        throw Error(ErrorCode::InvalidArgument, "top-k over an empty tensor");
    const double exact = keep_fraction * static_cast<double>(numel);
    auto k = static_cast<std::int64_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
    return std::clamp<std::int64_t>(k, 1, numel);
}

std::uint32_t MagnitudeCut::key(float v) noexcept {
    return std::bit_cast<std::uint32_t>(v) & 0x7fffffffu;
}

MagnitudeCut topk_magnitude_cut(std::span<const float> values, std::int64_t k) {
    MagnitudeCut cut;
    const auto n = static_cast<std::int64_t>(values.size());
    if (k >= n) {
        cut.keep_all = true;
        return cut;
    }
    if (k <= 0) {
        cut.threshold = std::numeric_limits<std::uint32_t>::max();
        cut.tie_cutoff = -1;
        return cut;
    }

    // Pass 1: histogram of the high 16 bits of the magnitude key.
    std::vector<std::int64_t> hist(1u << 16, 0);
    for (float v : values)
        ++hist[MagnitudeCut::key(v) >> 16];
    std::int64_t above = 0;
    std::uint32_t hi = 0xffff;
    for (;; --hi) {
        if (above + hist[hi] >= k)
            break;
        above += hist[hi];
    }

    // Pass 2: low 16 bits within the selected high bucket.
    std::fill(hist.begin(), hist.end(), 0);
    for (float v : values) {
        const auto m = MagnitudeCut::key(v);
        if ((m >> 16) == hi)
            ++hist[m & 0xffffu];
    }
    std::uint32_t lo = 0xffff;
    for (;; --lo) {
        if (above + hist[lo] >= k)
            break;
        above += hist[lo];
    }
    cut.threshold = (hi << 16) | lo;

    // Pass 3: the remaining slots go to the lowest-index elements equal to the threshold.
    std::int64_t remaining = k - above;
    for (std::int64_t i = 0; i < n; ++i) {
        if (MagnitudeCut::key(values[static_cast<std::size_t>(i)]) == cut.threshold && --remaining == 0) {
            cut.tie_cutoff = i;
            break;
        }
    }
    return cut;
}

BinaryMask topk_magnitude_mask(const Tensor& t, double keep_fraction) {
    if (t.empty())
        throw Error(ErrorCode::InvalidArgument, "top-k mask of an empty tensor");
    const std::int64_t k = topk_count(t.numel(), keep_fraction);
    const Tensor tf = t.to_f32();
    const auto v = tf.f32();
    const MagnitudeCut cut = topk_magnitude_cut(v, k);
    BinaryMask mask(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (cut.contains(v[static_cast<std::size_t>(i)], i))
            mask.set(i);
    return mask;
}

void elect_sign_into(std::span<const std::span<const float>> deltas, std::span<float> out) {
    if (deltas.empty())
        throw Error(ErrorCode::InvalidArgument, "elect_sign needs at least one tensor");
    for (const auto& d : deltas)
        if (d.size() != out.size())
            throw Error(ErrorCode::ShapeMismatch, "elect_sign: tensors differ in size");
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto i = static_cast<std::size_t>(b); i < static_cast<std::size_t>(e); ++i) {
            float pos = 0.0f;
            float neg = 0.0f;
            for (const auto& d : deltas) {
                const float v = d[i];
                if (v > 0.0f)
                    pos += v;
                else
                    neg -= v;
            }
            out[i] = pos >= neg ? 1.0f : -1.0f;
        }
    });
}

Tensor elect_sign(std::span<const Tensor> deltas) {
    if (deltas.empty())
        throw Error(ErrorCode::InvalidArgument, "elect_sign needs at least one tensor");
    std::vector<Tensor> converted;
    converted.reserve(deltas.size());
    std::vector<std::span<const float>> views;
    for (const auto& d : deltas) {
        require_same_shape(deltas.front(), d, "elect_sign");
        converted.push_back(d.to_f32());
        views.push_back(converted.back().f32());
    }
    Tensor out(deltas.front().shape());
    elect_sign_into(views, out.f32());
    return out;
}

} // namespace mergeforge
