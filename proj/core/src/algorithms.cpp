// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/algorithms.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "mergeforge/error.hpp"
#include "mergeforge/parallel.hpp"
#include "mergeforge/philox.hpp"
#include "mergeforge/stats.hpp"

namespace mergeforge {

namespace {

using Views = std::vector<std::span<const float>>;

constexpr double kSingularRcond = 1e-12;
constexpr double kJitterScale = 1e-6;

// ---- span kernels -------------------------------------------------------
// `out` may alias `pre`: every kernel reads position j of its inputs before
// writing position j of `out`, and never touches any other position.

void soup_into(std::span<float> out, const Views& ft) {
    const float n = static_cast<float>(ft.size());
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = static_cast<std::size_t>(b); j < static_cast<std::size_t>(e); ++j) {
            float sum = 0.0f;
            for (const auto& t : ft)
                sum += t[j];
            out[j] = sum / n;
        }
    });
}

void task_arithmetic_into(std::span<float> out, std::span<const float> pre, const Views& deltas, float lambda) {
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = static_cast<std::size_t>(b); j < static_cast<std::size_t>(e); ++j) {
            float sum = 0.0f;
            for (const auto& d : deltas)
                sum += d[j];
            out[j] = pre[j] + lambda * sum;
        }
    });
}

void fisher_into(std::span<float> out, const Views& ft, const Views& fisher) {
    double max_total = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) {
        double total = 0.0;
        for (const auto& f : fisher)
            total += f[j];
        max_total = std::max(max_total, total);
    }
    const double eps = std::max(kFisherEpsilon * max_total, static_cast<double>(std::numeric_limits<float>::min()));
    const double n = static_cast<double>(ft.size());
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = static_cast<std::size_t>(b); j < static_cast<std::size_t>(e); ++j) {
            double weighted = 0.0, weight = 0.0, plain = 0.0;
            for (std::size_t i = 0; i < ft.size(); ++i) {
                weighted += static_cast<double>(fisher[i][j]) * ft[i][j];
                weight += fisher[i][j];
                plain += ft[i][j];
            }
            out[j] = static_cast<float>((weighted + eps * plain / n) / (weight + eps));
        }
    });
}

void ties_into(std::span<float> out, std::span<const float> pre, const Views& deltas,
               const std::vector<MagnitudeCut>& cuts, float lambda) {
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = b; j < e; ++j) {
            const auto u = static_cast<std::size_t>(j);
            float pos = 0.0f, neg = 0.0f;
            for (std::size_t i = 0; i < deltas.size(); ++i) {
                const float v = deltas[i][u];
                if (!cuts[i].contains(v, j))
                    continue;
                if (v > 0.0f)
                    pos += v;
                else
                    neg -= v;
            }
            const bool positive = pos >= neg;
            float sum = 0.0f;
            int count = 0;
            for (std::size_t i = 0; i < deltas.size(); ++i) {
                const float v = deltas[i][u];
                if (cuts[i].contains(v, j) && (positive ? v > 0.0f : v < 0.0f)) {
                    sum += v;
                    ++count;
                }
            }
            out[u] = count > 0 ? pre[u] + lambda * (sum / static_cast<float>(count)) : pre[u];
        }
    });
}

void dare_into(std::span<float> out, std::span<const float> pre, const Views& deltas, double drop_rate, float lambda,
               std::uint64_t seed, std::string_view key) {
    constexpr std::int64_t kBlock = 1024;
    const float p = static_cast<float>(drop_rate);
    const float rescale = static_cast<float>(1.0 / (1.0 - drop_rate));
    std::vector<KeyedUniform> draws;
    draws.reserve(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i)
        draws.emplace_back(seed, static_cast<std::uint32_t>(i), key);

    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        std::array<float, kBlock> u{};
        std::array<float, kBlock> acc{};
        for (std::int64_t first = b; first < e; first += kBlock) {
            const std::int64_t count = std::min(kBlock, e - first);
            std::fill_n(acc.begin(), count, 0.0f);
            for (std::size_t i = 0; i < deltas.size(); ++i) {
                draws[i].fill(first, u.data(), count);
                const float* d = deltas[i].data() + first;
                for (std::int64_t k = 0; k < count; ++k)
                    if (!(u[static_cast<std::size_t>(k)] < p))
                        acc[static_cast<std::size_t>(k)] += d[k] * rescale;
            }
            for (std::int64_t k = 0; k < count; ++k) {
                const auto j = static_cast<std::size_t>(first + k);
                out[j] = pre[j] + lambda * acc[static_cast<std::size_t>(k)];
            }
        }
    });
}

void consensus_into(std::span<float> out, std::span<const float> pre, const Views& deltas, float lambda,
                    std::span<const double> task_lambdas) {
    std::vector<float> thresholds(task_lambdas.begin(), task_lambdas.end());
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = static_cast<std::size_t>(b); j < static_cast<std::size_t>(e); ++j) {
            float sum = 0.0f;
            for (const auto& d : deltas)
                sum += d[j];
            const float mtl = lambda * sum;
            int votes = 0;
            for (std::size_t i = 0; i < deltas.size(); ++i) {
                const float t = deltas[i][j];
                if (std::fabs(t) >= std::fabs(mtl - t) * thresholds[i])
                    ++votes;
            }
            out[j] = votes >= 2 ? pre[j] + mtl : pre[j];
        }
    });
}

template <typename Selected>
void stitch_into(std::span<float> out, std::span<const float> pre, const Views& deltas, Selected selected) {
    parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t b, std::int64_t e) {
        for (auto j = b; j < e; ++j) {
            const auto u = static_cast<std::size_t>(j);
            float sum = 0.0f;
            int count = 0;
            for (std::size_t i = 0; i < deltas.size(); ++i) {
                if (selected(i, deltas[i][u], j)) {
                    sum += deltas[i][u];
                    ++count;
                }
            }
            out[u] = count > 0 ? pre[u] + sum / static_cast<float>(count) : pre[u];
        }
    });
}

std::vector<MagnitudeCut> magnitude_cuts(const Views& deltas, double keep_fraction) {
    std::vector<MagnitudeCut> cuts;
    cuts.reserve(deltas.size());
    for (const auto& d : deltas)
        cuts.push_back(topk_magnitude_cut(d, topk_count(static_cast<std::int64_t>(d.size()), keep_fraction)));
    return cuts;
}

void regmean_solve(std::string_view key, const Views& weights, const Views& grams, const Shape& shape, double alpha,
                   std::span<float> out) {
    using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using FloatMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    const auto rows = static_cast<Eigen::Index>(shape[0]);
    const auto cols = static_cast<Eigen::Index>(shape[1]);

    Matrix lhs = Matrix::Zero(cols, cols);
    Matrix rhs = Matrix::Zero(rows, cols);
    for (std::size_t i = 0; i < weights.size(); ++i) {
        Matrix g = FloatMap(grams[i].data(), cols, cols).cast<double>();
        const Eigen::VectorXd diag = g.diagonal();
        g *= alpha;
        g.diagonal() = diag;
        lhs += g;
        rhs += FloatMap(weights[i].data(), rows, cols).cast<double>() * g;
    }
    lhs = 0.5 * (lhs + lhs.transpose()).eval();

    Eigen::LLT<Matrix> llt(lhs);
    if (llt.info() != Eigen::Success || llt.rcond() < kSingularRcond) {
        const double jitter = kJitterScale * lhs.trace() / static_cast<double>(cols);
        lhs.diagonal().array() += jitter;
        llt.compute(lhs);
        if (!(jitter > 0.0) || llt.info() != Eigen::Success || llt.rcond() < kSingularRcond)
            throw Error(ErrorCode::SolverFailure,
                        "RegMean system for '" + std::string(key) + "' is singular even after diagonal jitter",
                        std::string(key));
    }
    // W * A = B with A symmetric  <=>  A * W^T = B^T.
    const Matrix merged = llt.solve(rhs.transpose()).transpose();
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data(), rows, cols) =
        merged.cast<float>();
}

// ---- argument plumbing for the tensor-level API ------------------------

struct Converted {
    std::vector<Tensor> storage;
    Views views;
};

Converted as_views(std::span<const Tensor> tensors, const Shape& shape, std::string_view what) {
    Converted c;
    c.storage.reserve(tensors.size());
    for (const auto& t : tensors) {
        if (t.shape() != shape)
            throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": shape " + shape_to_string(t.shape()) +
                                                      " vs " + shape_to_string(shape));
        c.storage.push_back(t.to_f32());
    }
    for (const auto& t : c.storage)
        c.views.push_back(t.f32());
    return c;
}

void require_tasks(std::span<const Tensor> tensors, std::string_view what) {
    if (tensors.empty())
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " needs at least one task");
}

void require_count(std::size_t got, std::size_t want, std::string_view what) {
    if (got != want)
        throw Error(ErrorCode::InvalidArgument, std::string(what) + ": expected " + std::to_string(want) +
                                                    " per-task entries, got " + std::to_string(got));
}

void check_fisher_values(const Views& fisher, std::string_view key) {
    for (const auto& f : fisher)
        for (std::size_t j = 0; j < f.size(); ++j)
            if (!(f[j] >= 0.0f))
                throw Error(ErrorCode::NegativeFisher,
                            "negative Fisher value at index " + std::to_string(j) + " of '" + std::string(key) + "'",
                            std::string(key));
}

void check_grams(const Views& grams, const std::vector<Tensor>& storage, const Shape& weight_shape,
                 std::string_view key) {
    (void)grams;
    if (weight_shape.size() != 2)
        throw Error(ErrorCode::GramShapeMismatch,
                    "RegMean needs a 2-D weight, '" + std::string(key) + "' has shape " + shape_to_string(weight_shape),
                    std::string(key));
    for (const auto& g : storage)
        if (g.shape() != Shape{weight_shape[1], weight_shape[1]})
            throw Error(ErrorCode::GramShapeMismatch,
                        "Gram for '" + std::string(key) + "' has shape " + shape_to_string(g.shape()) +
                            ", expected [" + std::to_string(weight_shape[1]) + ", " + std::to_string(weight_shape[1]) +
                            "]",
                        std::string(key));
}

} // namespace

TaskVectorGroup task_vectors(const ParamGroup& group) {
    TaskVectorGroup out;
    out.key = group.key;
    const Tensor pre = group.pretrained.to_f32();
    for (const auto& ft : group.finetuned)
        out.deltas.push_back(axpy_accumulate(ft, pre, -1.0f));
    return out;
}

Tensor model_soup(std::span<const Tensor> finetuned) {
    require_tasks(finetuned, "model_soup");
    auto ft = as_views(finetuned, finetuned.front().shape(), "model_soup");
    Tensor out(finetuned.front().shape());
    soup_into(out.f32(), ft.views);
    return out;
}

Tensor task_arithmetic(const Tensor& pretrained, std::span<const Tensor> deltas, float lambda) {
    require_tasks(deltas, "task_arithmetic");
    auto d = as_views(deltas, pretrained.shape(), "task_arithmetic");
    Tensor out = pretrained.to_f32();
    task_arithmetic_into(out.f32(), out.f32(), d.views, lambda);
    return out;
}

Tensor fisher_merge(std::span<const Tensor> finetuned, std::span<const Tensor> fisher) {
    require_tasks(finetuned, "fisher_merge");
    require_count(fisher.size(), finetuned.size(), "fisher_merge");
    const Shape& shape = finetuned.front().shape();
    auto ft = as_views(finetuned, shape, "fisher_merge");
    auto f = as_views(fisher, shape, "fisher_merge (Fisher)");
    check_fisher_values(f.views, "<tensor>");
    Tensor out(shape);
    fisher_into(out.f32(), ft.views, f.views);
    return out;
}

Tensor regmean_merge(std::string_view key, std::span<const Tensor> weights, std::span<const Tensor> grams,
                     double alpha) {
    require_tasks(weights, "regmean_merge");
    require_count(grams.size(), weights.size(), "regmean_merge");
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw Error(ErrorCode::InvalidArgument, "RegMean alpha must lie in (0, 1]");
    const Shape& shape = weights.front().shape();
    Converted g;
    for (const auto& t : grams)
        g.storage.push_back(t.to_f32());
    check_grams(g.views, g.storage, shape, key);
    for (const auto& t : g.storage)
        g.views.push_back(t.f32());
    auto w = as_views(weights, shape, "regmean_merge");
    Tensor out(shape);
    regmean_solve(key, w.views, g.views, shape, alpha, out.f32());
    return out;
}

Tensor ties_merge(const Tensor& pretrained, std::span<const Tensor> deltas, double keep_fraction, float lambda) {
    require_tasks(deltas, "ties_merge");
    auto d = as_views(deltas, pretrained.shape(), "ties_merge");
    const auto cuts = magnitude_cuts(d.views, keep_fraction);
    Tensor out = pretrained.to_f32();
    ties_into(out.f32(), out.f32(), d.views, cuts, lambda);
    return out;
}

Tensor dare_merge(std::string_view key, const Tensor& pretrained, std::span<const Tensor> deltas, double drop_rate,
                  float lambda, std::uint64_t seed) {
    require_tasks(deltas, "dare_merge");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0))
        throw Error(ErrorCode::InvalidArgument, "DARE drop rate must lie in [0, 1)");
    auto d = as_views(deltas, pretrained.shape(), "dare_merge");
    Tensor out = pretrained.to_f32();
    dare_into(out.f32(), out.f32(), d.views, drop_rate, lambda, seed, key);
    return out;
}

Tensor consensus_ta(const Tensor& pretrained, std::span<const Tensor> deltas, float lambda,
                    std::span<const double> task_lambdas) {
    if (deltas.size() < 2)
        throw Error(ErrorCode::ConsensusRequiresTwoTasks, "ConsensusTA needs at least two task vectors");
    require_count(task_lambdas.size(), deltas.size(), "consensus_ta");
    for (double l : task_lambdas)
        if (!(l >= 0.0))
            throw Error(ErrorCode::InvalidArgument, "ConsensusTA per-task lambdas must be >= 0");
    auto d = as_views(deltas, pretrained.shape(), "consensus_ta");
    Tensor out = pretrained.to_f32();
    consensus_into(out.f32(), out.f32(), d.views, lambda, task_lambdas);
    return out;
}

Tensor ls_dataless(const Tensor& pretrained, std::span<const Tensor> deltas, double keep_fraction) {
    require_tasks(deltas, "ls_dataless");
    auto d = as_views(deltas, pretrained.shape(), "ls_dataless");
    const auto cuts = magnitude_cuts(d.views, keep_fraction);
    Tensor out = pretrained.to_f32();
    stitch_into(out.f32(), out.f32(), d.views,
                [&](std::size_t i, float v, std::int64_t j) { return cuts[i].contains(v, j); });
    return out;
}

Tensor ls_trained(const Tensor& pretrained, std::span<const Tensor> deltas, std::span<const BinaryMask> masks) {
    require_tasks(deltas, "ls_trained");
    require_count(masks.size(), deltas.size(), "ls_trained");
    for (const auto& m : masks)
        if (m.shape() != pretrained.shape())
            throw Error(ErrorCode::ShapeMismatch, "ls_trained: mask shape " + shape_to_string(m.shape()) +
                                                      " vs parameter " + shape_to_string(pretrained.shape()));
    auto d = as_views(deltas, pretrained.shape(), "ls_trained");
    Tensor out = pretrained.to_f32();
    stitch_into(out.f32(), out.f32(), d.views,
                [&](std::size_t i, float, std::int64_t j) { return masks[i].test(j); });
    return out;
}

void merge_group(const MergeRecipe& recipe, ParamGroup& group, const StatsBundle* stats) {
    if (group.finetuned.empty())
        throw Error(ErrorCode::InvalidArgument, "merge_group: no finetuned tensors", group.key);
    if (group.pretrained.dtype() != DType::F32)
        group.pretrained = group.pretrained.to_f32();
    for (auto& t : group.finetuned) {
        if (t.shape() != group.pretrained.shape())
            throw Error(ErrorCode::ShapeMismatch, "finetuned tensor shape differs from pretrained", group.key);
        if (t.dtype() != DType::F32)
            t = t.to_f32();
    }
    const auto needs = required_stats(recipe.method);
    if (needs && (stats == nullptr || stats->kind() != *needs))
        throw Error(ErrorCode::MissingStats, std::string(to_string(recipe.method)) + " needs a " +
                                                 std::string(to_string(*needs)) + " stats bundle", group.key);
    if (needs && stats->task_count() != group.finetuned.size())
        throw Error(ErrorCode::MissingStats, "stats bundle has " + std::to_string(stats->task_count()) +
                                                 " tasks, merge has " + std::to_string(group.finetuned.size()),
                    group.key);

    auto out = group.pretrained.f32();
    const std::span<const float> pre = out;
    Views ft;
    for (const auto& t : group.finetuned)
        ft.push_back(t.f32());

    auto to_deltas = [&] {
        for (auto& t : group.finetuned) {
            auto v = t.f32();
            parallel_for(static_cast<std::int64_t>(v.size()), [&](std::int64_t b, std::int64_t e) {
                for (auto j = static_cast<std::size_t>(b); j < static_cast<std::size_t>(e); ++j)
                    v[j] -= pre[j];
            });
        }
    };
    const float lambda = static_cast<float>(recipe.lambda.value_or(1.0));

    switch (recipe.method) {
    case Method::ModelSoup:
        soup_into(out, ft);
        break;
    case Method::Fisher: {
        std::vector<Tensor> fisher = stats->load(group.key);
        Views f;
        for (auto& t : fisher) {
            if (t.shape() != group.pretrained.shape())
                throw Error(ErrorCode::ShapeMismatch, "Fisher shape differs from parameter", group.key);
            f.push_back(t.f32());
        }
        check_fisher_values(f, group.key);
        fisher_into(out, ft, f);
        break;
    }
    case Method::RegMean:
        if (group.pretrained.shape().size() == 2 && stats->covers(group.key)) {
            std::vector<Tensor> grams = stats->load(group.key);
            Views g;
            for (const auto& t : grams)
                g.push_back(t.f32());
            check_grams(g, grams, group.pretrained.shape(), group.key);
            regmean_solve(group.key, ft, g, group.pretrained.shape(), recipe.alpha.value_or(1.0), out);
        } else {
            soup_into(out, ft);
        }
        break;
    case Method::TaskArithmetic:
        to_deltas();
        task_arithmetic_into(out, pre, ft, lambda);
        break;
    case Method::TIES: {
        to_deltas();
        const auto cuts = magnitude_cuts(ft, recipe.sparsity.value_or(1.0));
        ties_into(out, pre, ft, cuts, lambda);
        break;
    }
    case Method::DARE:
        to_deltas();
        dare_into(out, pre, ft, recipe.drop_rate.value_or(0.0), lambda, recipe.seed.value_or(0), group.key);
        break;
    case Method::ConsensusTA: {
        if (ft.size() < 2)
            throw Error(ErrorCode::ConsensusRequiresTwoTasks, "ConsensusTA needs at least two task vectors", group.key);
        const auto& task_lambdas = recipe.per_task_lambda.value();
        require_count(task_lambdas.size(), ft.size(), "consensus_ta");
        to_deltas();
        consensus_into(out, pre, ft, lambda, task_lambdas);
        break;
    }
    case Method::LSDataless: {
        to_deltas();
        const auto cuts = magnitude_cuts(ft, recipe.sparsity.value_or(1.0));
        stitch_into(out, pre, ft, [&](std::size_t i, float v, std::int64_t j) { return cuts[i].contains(v, j); });
        break;
    }
    case Method::LSTrained: {
        const auto masks = stats->load_masks(group.key);
        to_deltas();
        stitch_into(out, pre, ft, [&](std::size_t i, float, std::int64_t j) { return masks[i].test(j); });
        break;
    }
    }
}

} // namespace mergeforge
