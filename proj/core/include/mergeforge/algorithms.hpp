// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/kernels.hpp"
#include "mergeforge/recipe.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

class StatsBundle;

/// Task vectors tau_i = theta_ft^(i) - theta_pre for one parameter.
struct TaskVectorGroup {
    std::string key;
    std::vector<Tensor> deltas;
};

TaskVectorGroup task_vectors(const ParamGroup& group);

// Each method below is a pure function of one parameter group. Inputs may be
// any floating dtype; outputs are F32. Sums over tasks accumulate in float32
// in task order.

/// (1/n) sum_i theta_ft^(i)
Tensor model_soup(std::span<const Tensor> finetuned);

/// theta_pre + lambda * sum_i tau_i
Tensor task_arithmetic(const Tensor& pretrained, std::span<const Tensor> deltas, float lambda);

/// Relative floor added to the Fisher denominator; see fisher_merge.
inline constexpr double kFisherEpsilon = 1e-10;

/// (sum_i F_i theta_i + eps * mean_i theta_i) / (sum_i F_i + eps), with
/// eps = 1e-10 * max over positions of sum_i F_i (or the smallest normal
/// float when every Fisher value is zero), so positions where all Fisher
/// values vanish fall back to the plain mean.
Tensor fisher_merge(std::span<const Tensor> finetuned, std::span<const Tensor> fisher);

/// W = (sum_i G~_i)^-1 sum_i G~_i W_i for a [out, in] weight, where G~_i keeps
/// the diagonal of G_i and scales its off-diagonal entries by alpha. Solved in
/// double by Cholesky; if the system is singular the diagonal is jittered by
/// 1e-6 * trace / dim once before giving up with SolverFailure.
Tensor regmean_merge(std::string_view key, std::span<const Tensor> weights, std::span<const Tensor> grams,
                     double alpha);

/// Trim each tau_i to its top keep_fraction by magnitude, elect a sign per
/// position from the trimmed vectors, average the trimmed values that carry
/// the elected sign (zero where none do), and add lambda times the result.
Tensor ties_merge(const Tensor& pretrained, std::span<const Tensor> deltas, double keep_fraction, float lambda);

/// theta_pre + lambda * sum_i (1 - m_i) * tau_i / (1 - p), m_i ~ Bernoulli(p)
/// drawn from a counter-based generator keyed by (seed, i, key, element).
Tensor dare_merge(std::string_view key, const Tensor& pretrained, std::span<const Tensor> deltas, double drop_rate,
                  float lambda, std::uint64_t seed);

/// tau_MTL = lambda * sum_i tau_i; m_i = 1{|tau_i| >= |tau_MTL - tau_i| * lambda_i};
/// keep tau_MTL where sum_i m_i >= 2.
Tensor consensus_ta(const Tensor& pretrained, std::span<const Tensor> deltas, float lambda,
                    std::span<const double> task_lambdas);

/// Stitch with top-k magnitude masks gamma_i; where c = sum_i gamma_i > 0 the
/// result is theta_pre + sum_i gamma_i tau_i / c, elsewhere theta_pre.
Tensor ls_dataless(const Tensor& pretrained, std::span<const Tensor> deltas, double keep_fraction);

/// Same stitch rule with externally supplied masks.
Tensor ls_trained(const Tensor& pretrained, std::span<const Tensor> deltas, std::span<const BinaryMask> masks);

/// Applies `recipe` to one streamed group, writing the merged parameter into
/// group.pretrained (F32). The finetuned tensors are consumed (overwritten by
/// task vectors) so that no extra parameter-sized buffer is needed for the
/// elementwise methods. `stats` must be provided for Fisher, RegMean and
/// LSTrained.
void merge_group(const MergeRecipe& recipe, ParamGroup& group, const StatsBundle* stats);

} // namespace mergeforge
