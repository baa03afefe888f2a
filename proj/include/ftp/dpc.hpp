#ifndef FTP_DPC_HPP
#define FTP_DPC_HPP

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

/**
 * @file dpc.hpp
 *
 * @brief Density-peaks-clustering token pruning.
 *
 * Each token (row of an N x C matrix) gets a local density
 * rho_i = exp(-mean_{j in kNN(i)} ||x_i - x_j||^2 / tau) and a separation
 * delta_i, the Euclidean distance to the nearest denser token (or, for the
 * densest token, the largest distance to any token). Tokens with the largest
 * rho * delta are kept as cluster centers.
 *
 * Ties in density are broken toward the lower index: token j counts as denser
 * than token i when rho_j > rho_i, or rho_j == rho_i and j < i. Score ties in
 * the final selection are broken the same way.
 */

namespace ftp::dpc {

struct DpcConfig {
    /// Neighbors averaged for the density estimate; capped at N - 1.
    std::size_t k = 5;
    /// Temperature. Unset means "use the token width C".
    std::optional<double> tau;
    /// Pruning ratio: max(1, N / epsilon) tokens survive.
    std::size_t epsilon = 1;

    void validate() const {
        if (k < 1) {
            throw ArgumentError("DpcConfig: k must be >= 1");
        }
        if (tau && !(*tau > 0.0 && std::isfinite(*tau))) {
            throw ArgumentError("DpcConfig: tau must be a positive finite number");
        }
        if (epsilon < 1) {
            throw ArgumentError("DpcConfig: epsilon must be >= 1");
        }
    }

    double resolved_tau(std::size_t width) const { return tau ? *tau : static_cast<double>(width); }
};

struct DpcScores {
    std::vector<double> rho;
    std::vector<double> delta;
    std::vector<double> score;
};

struct PruneSelection {
    /// Retained token indices, strictly increasing.
    std::vector<std::size_t> kept;
    std::size_t epsilon = 1;

    friend bool operator==(const PruneSelection&, const PruneSelection&) = default;
};

inline std::size_t kept_count(std::size_t n, std::size_t epsilon) { return std::max<std::size_t>(1, n / epsilon); }

/// Number of multiply-accumulates spent on pairwise distances for N tokens of width C.
inline std::uint64_t pairwise_macs(std::size_t n, std::size_t c) {
    return static_cast<std::uint64_t>(n) * (n - 1) / 2 * c;
}

/// Symmetric N x N matrix of squared Euclidean distances.
inline Tensor pairwise_sq_dist(const Tensor& tokens) {
    require_rank(tokens, 2, "pairwise_sq_dist");
    const std::size_t n = tokens.dim(0), c = tokens.dim(1);
    Tensor out({n, n});
    const double* x = tokens.data().data();
    double* o = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x + i * c;
        std::size_t j = i + 1;
        // Four independent accumulators; each pair still sums over d in order.
        for (; j + 4 <= n; j += 4) {
            const double* x0 = x + j * c;
            const double* x1 = x0 + c;
            const double* x2 = x1 + c;
            const double* x3 = x2 + c;
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (std::size_t d = 0; d < c; ++d) {
                const double v = xi[d];
                const double d0 = v - x0[d], d1 = v - x1[d], d2 = v - x2[d], d3 = v - x3[d];
                a0 += d0 * d0;
                a1 += d1 * d1;
                a2 += d2 * d2;
                a3 += d3 * d3;
            }
            o[i * n + j] = a0;
            o[i * n + j + 1] = a1;
            o[i * n + j + 2] = a2;
            o[i * n + j + 3] = a3;
        }
        for (; j < n; ++j) {
            const double* xj = x + j * c;
            double acc = 0.0;
            for (std::size_t d = 0; d < c; ++d) {
                const double diff = xi[d] - xj[d];
                acc += diff * diff;
            }
            o[i * n + j] = acc;
        }
    }
    constexpr std::size_t kTile = 64;
    for (std::size_t bi = 0; bi < n; bi += kTile) {
        for (std::size_t bj = bi; bj < n; bj += kTile) {
            const std::size_t ie = std::min(bi + kTile, n), je = std::min(bj + kTile, n);
            for (std::size_t i = bi; i < ie; ++i) {
                for (std::size_t j = std::max(bj, i + 1); j < je; ++j) {
                    o[j * n + i] = o[i * n + j];
                }
            }
        }
    }
    add_macs(pairwise_macs(n, c));
    return out;
}

namespace detail {

inline std::vector<double> density_from_dist(const Tensor& dist, std::size_t k, double tau) {
    const std::size_t n = dist.dim(0);
    std::vector<double> rho(n, 1.0);
    if (n == 1) {
        return rho;
    }
    const std::size_t kk = std::min(k, n - 1);
    // The kk smallest off-diagonal distances of a row, kept sorted ascending.
    std::vector<double> best(kk);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = dist.row(i);
        std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
        for (std::size_t j = 0; j < n; ++j) {
            const double v = row[j];
            if (j == i || !(v < best[kk - 1])) {
                continue;
            }
            std::size_t pos = kk - 1;
            while (pos > 0 && best[pos - 1] > v) {
                best[pos] = best[pos - 1];
                --pos;
            }
            best[pos] = v;
        }
        double total = 0.0;
        for (std::size_t j = 0; j < kk; ++j) {
            total += best[j];
        }
        rho[i] = std::exp(-(total / static_cast<double>(kk)) / tau);
    }
    return rho;
}

inline std::vector<double> delta_from_dist(const Tensor& dist, const std::vector<double>& rho) {
    const std::size_t n = dist.dim(0);
    std::vector<double> delta(n, 0.0);
    if (n == 1) {
        return delta;
    }
    // Densest first; ties go to the lower index.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rho[a] > rho[b]; });

    const std::size_t top = order[0];
    double far = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        far = std::max(far, dist(top, j));
    }
    delta[top] = std::sqrt(far);

    for (std::size_t pos = 1; pos < n; ++pos) {
        const std::size_t i = order[pos];
        auto row = dist.row(i);
        double best = row[order[0]];
        for (std::size_t q = 1; q < pos; ++q) {
            best = std::min(best, row[order[q]]);
        }
        delta[i] = std::sqrt(best);
    }
    return delta;
}

}  // namespace detail

inline std::vector<double> local_density(const Tensor& tokens, const DpcConfig& cfg) {
    require_rank(tokens, 2, "local_density");
    cfg.validate();
    return detail::density_from_dist(pairwise_sq_dist(tokens), cfg.k, cfg.resolved_tau(tokens.dim(1)));
}

inline std::vector<double> delta_distance(const Tensor& tokens, const std::vector<double>& rho) {
    require_rank(tokens, 2, "delta_distance");
    if (rho.size() != tokens.dim(0)) {
        throw ShapeError("delta_distance: " + std::to_string(rho.size()) + " densities for " +
                         std::to_string(tokens.dim(0)) + " tokens");
    }
    return detail::delta_from_dist(pairwise_sq_dist(tokens), rho);
}

/// Indices of the `count` highest scores (ties toward lower index), returned ascending.
inline std::vector<std::size_t> top_scores(const std::vector<double>& score, std::size_t count) {
    std::vector<std::size_t> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    count = std::min(count, order.size());
    std::partial_sort(order.begin(), order.begin() + count, order.end(), [&](std::size_t a, std::size_t b) {
        return score[a] > score[b] || (score[a] == score[b] && a < b);
    });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

struct PruneResult {
    DpcScores scores;
    PruneSelection selection;
};

/// Scores every token and keeps the max(1, N / epsilon) best cluster centers.
inline PruneResult prune(const Tensor& tokens, const DpcConfig& cfg) {
    require_rank(tokens, 2, "prune");
    cfg.validate();
    const std::size_t n = tokens.dim(0);
    PruneResult result;
    result.selection.epsilon = cfg.epsilon;
    if (cfg.epsilon == 1) {
        // Identity selection. Scores are still reported for inspection.
        result.selection.kept.resize(n);
        std::iota(result.selection.kept.begin(), result.selection.kept.end(), 0);
    }
    const Tensor dist = pairwise_sq_dist(tokens);
    auto& s = result.scores;
    s.rho = detail::density_from_dist(dist, cfg.k, cfg.resolved_tau(tokens.dim(1)));
    s.delta = detail::delta_from_dist(dist, s.rho);
    s.score.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        s.score[i] = s.rho[i] * s.delta[i];
    }
    if (cfg.epsilon != 1) {
        result.selection.kept = top_scores(s.score, kept_count(n, cfg.epsilon));
    }
    return result;
}

/// Selection only; skips scoring entirely when epsilon == 1.
inline PruneSelection select_tokens(const Tensor& tokens, const DpcConfig& cfg) {
    require_rank(tokens, 2, "select_tokens");
    cfg.validate();
    if (cfg.epsilon == 1) {
        PruneSelection sel;
        sel.kept.resize(tokens.dim(0));
        std::iota(sel.kept.begin(), sel.kept.end(), 0);
        return sel;
    }
    return prune(tokens, cfg).selection;
}

}  // namespace ftp::dpc

#endif
