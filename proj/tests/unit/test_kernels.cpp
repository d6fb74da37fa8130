// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fixtures.hpp"
#include "mergeforge/error.hpp"
#include "mergeforge/kernels.hpp"
#include "oracles.hpp"

using namespace mergeforge;

namespace {

std::vector<bool> mask_bits(const Tensor& t, double keep) {
    return topk_magnitude_mask(t, keep).to_bools();
}

} // namespace

TEST(Axpy, Examples) {
    EXPECT_EQ(axpy_accumulate(Tensor::from_floats({2}, {0, 0}), Tensor::from_floats({2}, {1, 2}), 0.5f).to_vector(),
              (std::vector<float>{0.5f, 1.0f}));
    EXPECT_EQ(axpy_accumulate(Tensor::from_floats({2}, {1, 1}), Tensor::from_floats({2}, {1, 1}), 0.0f).to_vector(),
              (std::vector<float>{1.0f, 1.0f}));
    const auto r =
        axpy_accumulate(Tensor::from_floats({3}, {0.1f, 0.2f, 0.3f}), Tensor::from_floats({3}, {3, 2, 1}), 2.0f)
            .to_vector();
    EXPECT_NEAR(r[0], 6.1, 1e-6);
    EXPECT_NEAR(r[1], 4.2, 1e-6);
    EXPECT_NEAR(r[2], 2.3, 1e-6);
}

TEST(Axpy, ShapeMismatchThrows) {
    try {
        axpy_accumulate(Tensor({2}), Tensor({3}), 1.0f);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Axpy, MatchesFloat64Oracle) {
    testkit::Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const Shape shape = testkit::random_shape(rng, 64);
        const Tensor acc = testkit::random_tensor(rng, shape, 3.0f);
        const Tensor x = testkit::random_tensor(rng, shape, 3.0f);
        const float c = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
        const auto out = axpy_accumulate(acc, x, c).to_vector();
        double max_input = 0.0;
        for (std::int64_t i = 0; i < acc.numel(); ++i)
            max_input = std::max({max_input, std::fabs(double(acc.at(i))), std::fabs(double(c) * x.at(i))});
        for (std::int64_t i = 0; i < acc.numel(); ++i) {
            const double expected = double(acc.at(i)) + double(c) * double(x.at(i));
            ASSERT_LE(std::fabs(out[static_cast<std::size_t>(i)] - expected), 1e-5 * max_input);
        }
    }
}

TEST(TopK, Examples) {
    EXPECT_EQ(mask_bits(Tensor::from_floats({3}, {-5, 1, 3}), 1.0 / 3), (std::vector<bool>{true, false, false}));
    EXPECT_EQ(mask_bits(Tensor::from_floats({3}, {2, -2, 0}), 1.0 / 3), (std::vector<bool>{true, false, false}));
    EXPECT_EQ(topk_magnitude_mask(Tensor::from_floats({4}, {0, 0, 1, -1}), 1.0).popcount(), 4);
}

TEST(TopK, RejectsKeepOutsideUnitInterval) {
    for (double keep : {0.0, -0.1, 1.5, std::nan("")}) {
        try {
            topk_magnitude_mask(Tensor({4}), keep);
            FAIL() << keep;
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
        }
    }
}

TEST(TopK, CountIsCeilingOfExactProduct) {
    // keep = q / 1000 exactly, so ceil(keep * n) = ceil(q * n / 1000) in integers.
    for (std::int64_t n = 1; n <= 1000; ++n) {
        for (std::int64_t q = 1; q <= 1000; q += 37) {
            const std::int64_t expected = std::max<std::int64_t>(1, (q * n + 999) / 1000);
            ASSERT_EQ(topk_count(n, static_cast<double>(q) / 1000.0), expected) << n << " " << q;
        }
        ASSERT_EQ(topk_count(n, 1.0), n);
    }
    EXPECT_EQ(topk_count(10, 0.3), 3);
    EXPECT_EQ(topk_count(10, 0.7), 7);
    EXPECT_EQ(topk_count(3, 1.0 / 3), 1);
}

TEST(TopK, PopcountEqualsCountForAllSmallSizes) {
    testkit::Rng rng(3);
    for (std::int64_t n = 1; n <= 1000; n += 3) {
        const Tensor t = testkit::random_tensor(rng, {n});
        for (double keep : {0.001, 0.1, 0.2, 0.3, 1.0 / 3, 0.5, 0.9, 1.0})
            ASSERT_EQ(topk_magnitude_mask(t, keep).popcount(), topk_count(n, keep));
    }
}

TEST(TopK, MatchesSortOracleIncludingTies) {
    testkit::Rng rng(5);
    std::uniform_int_distribution<int> small(-4, 4);
    for (int trial = 0; trial < 2000; ++trial) {
        const auto n = std::uniform_int_distribution<std::int64_t>(1, 300)(rng);
        std::vector<float> values(static_cast<std::size_t>(n));
        const bool tied = trial % 2 == 0;
        for (auto& v : values)
            v = tied ? static_cast<float>(small(rng)) * 0.5f : std::normal_distribution<float>()(rng);
        const double keep = std::uniform_real_distribution<double>(0.001, 1.0)(rng);
        const Tensor t = Tensor::from_floats({n}, values);
        ASSERT_EQ(mask_bits(t, keep), oracle::topk_mask(values, keep)) << "trial " << trial;
    }
}

TEST(TopK, SignedZerosAndDenormalsOrderByMagnitude) {
    const float tiny = std::numeric_limits<float>::denorm_min();
    const Tensor t = Tensor::from_floats({5}, {-0.0f, tiny, 0.0f, -2 * tiny, 1e-30f});
    EXPECT_EQ(mask_bits(t, 0.6), (std::vector<bool>{false, true, false, true, true}));
    EXPECT_EQ(mask_bits(t, 0.8), (std::vector<bool>{true, true, false, true, true}));
}

TEST(ElectSign, Examples) {
    auto elect = [](float a, float b) {
        const Tensor d[] = {Tensor::from_floats({1}, {a}), Tensor::from_floats({1}, {b})};
        return elect_sign(d).at(0);
    };
    EXPECT_EQ(elect(3, -1), 1.0f);
    EXPECT_EQ(elect(-3, 1), -1.0f);
    EXPECT_EQ(elect(2, -2), 1.0f);
    EXPECT_EQ(elect(0, 0), 1.0f);
}

TEST(ElectSign, PositiveScaleInvariant) {
    testkit::Rng rng(13);
    for (int trial = 0; trial < 300; ++trial) {
        const auto n = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
        const Shape shape{std::uniform_int_distribution<std::int64_t>(1, 64)(rng)};
        std::vector<Tensor> deltas;
        for (std::size_t i = 0; i < n; ++i)
            deltas.push_back(testkit::random_tensor(rng, shape));
        const float c = trial % 2 == 0 ? std::ldexp(1.0f, std::uniform_int_distribution<int>(-20, 20)(rng))
                                       : std::uniform_real_distribution<float>(0.01f, 100.0f)(rng);
        std::vector<Tensor> scaled;
        for (const auto& d : deltas)
            scaled.push_back(axpy_accumulate(Tensor(shape), d, c));
        ASSERT_EQ(elect_sign(deltas).to_vector(), elect_sign(scaled).to_vector());
    }
}

TEST(ElectSign, MatchesOracle) {
    testkit::Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const auto n = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
        std::vector<Tensor> deltas;
        std::vector<std::vector<float>> raw;
        for (std::size_t i = 0; i < n; ++i) {
            deltas.push_back(testkit::random_tensor(rng, {16}));
            raw.push_back(deltas.back().to_vector());
        }
        ASSERT_EQ(elect_sign(deltas).to_vector(), oracle::elect_sign(raw));
    }
}
