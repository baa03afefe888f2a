#ifndef FTP_TESTS_ORACLES_HPP
#define FTP_TESTS_ORACLES_HPP

// Slow, obviously-correct reference implementations. Nothing here calls into
// the library's kernels; only the Tensor container is shared.

#include "ftp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using ftp::Shape;
using ftp::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data()) {
        v = dist(rng);
    }
    return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i) {
        for (std::size_t j = 0; j < b.dim(1); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.dim(1); ++p) {
                acc += a(i, p) * b(p, j);
            }
            out(i, j) = acc;
        }
    }
    return out;
}

// Bilinear resample written as a sum of separable hat weights over every input pixel.
inline Tensor upsample(const Tensor& x, std::size_t factor) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const auto f = static_cast<double>(factor);
    const auto src = [f](std::size_t o, std::size_t n) {
        const double s = (static_cast<double>(o) + 0.5) / f - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(n - 1));
    };
    const auto hat = [](double d) { return std::max(0.0, 1.0 - std::abs(d)); };
    Tensor out({h * factor, w * factor, c});
    for (std::size_t oy = 0; oy < h * factor; ++oy) {
        for (std::size_t ox = 0; ox < w * factor; ++ox) {
            const double sy = src(oy, h), sx = src(ox, w);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        acc += hat(sy - static_cast<double>(y)) * hat(sx - static_cast<double>(xx)) * x(y, xx, ch);
                    }
                }
                out(oy, ox, ch) = acc;
            }
        }
    }
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) {
        mx = std::max(mx, v);
    }
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

// Per-head scaled dot-product attention from first principles; w_o may be empty.
inline Tensor attention(const Tensor& queries, const Tensor& kv, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                        const Tensor* wo, std::size_t heads) {
    const std::size_t m = queries.dim(0), l = kv.dim(0), c = wq.dim(0), d = c / heads;
    const Tensor q = matmul(queries, wq), k = matmul(kv, wk), v = matmul(kv, wv);
    Tensor cat({m, c});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < m; ++i) {
            std::vector<double> logits(l);
            for (std::size_t j = 0; j < l; ++j) {
                double dot = 0.0;
                for (std::size_t e = 0; e < d; ++e) {
                    dot += q(i, h * d + e) * k(j, h * d + e);
                }
                logits[j] = dot / std::sqrt(static_cast<double>(d));
            }
            const auto p = softmax(logits);
            for (std::size_t e = 0; e < d; ++e) {
                double acc = 0.0;
                for (std::size_t j = 0; j < l; ++j) {
                    acc += p[j] * v(j, h * d + e);
                }
                cat(i, h * d + e) = acc;
            }
        }
    }
    return wo ? matmul(cat, *wo) : cat;
}

inline double mse(const Tensor& a, const Tensor& b) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        total += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return total / static_cast<double>(a.numel());
}

struct Dpc {
    std::vector<double> rho, delta, score;
    std::vector<std::size_t> kept;
};

// Density peaks scoring by exhaustive search: full sorts, explicit "denser" predicate.
inline Dpc dpc(const Tensor& x, std::size_t k, double tau, std::size_t epsilon) {
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<std::vector<double>> d2(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) {
                continue;
            }
            const std::size_t a = std::min(i, j), b = std::max(i, j);
            double acc = 0.0;
            for (std::size_t e = 0; e < c; ++e) {
                acc += (x(a, e) - x(b, e)) * (x(a, e) - x(b, e));
            }
            d2[i][j] = acc;
        }
    }
    Dpc out;
    out.rho.assign(n, 1.0);
    out.delta.assign(n, 0.0);
    if (n > 1) {
        const std::size_t kk = std::min(k, n - 1);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> others;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) {
                    others.push_back(d2[i][j]);
                }
            }
            std::sort(others.begin(), others.end());
            double total = 0.0;
            for (std::size_t j = 0; j < kk; ++j) {
                total += others[j];
            }
            out.rho[i] = std::exp(-(total / static_cast<double>(kk)) / tau);
        }
        for (std::size_t i = 0; i < n; ++i) {
            bool any = false;
            double best = 0.0;
            double far = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                far = std::max(far, std::sqrt(d2[i][j]));
                const bool denser = out.rho[j] > out.rho[i] || (out.rho[j] == out.rho[i] && j < i);
                if (j != i && denser) {
                    const double dist = std::sqrt(d2[i][j]);
                    best = any ? std::min(best, dist) : dist;
                    any = true;
                }
            }
            out.delta[i] = any ? best : far;
        }
    }
    out.score.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.score[i] = out.rho[i] * out.delta[i];
    }
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < n; ++i) {
        ranked.emplace_back(-out.score[i], i);
    }
    std::sort(ranked.begin(), ranked.end());
    const std::size_t keep = std::max<std::size_t>(1, n / epsilon);
    for (std::size_t i = 0; i < keep; ++i) {
        out.kept.push_back(ranked[i].second);
    }
    std::sort(out.kept.begin(), out.kept.end());
    return out;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max(1e-300, std::max(std::abs(a), std::abs(b)));
}

}  // namespace oracle

#endif
