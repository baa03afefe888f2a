#ifndef FTP_ATTENTION_HPP
#define FTP_ATTENTION_HPP

#include "autodiff.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

/**
 * @file attention.hpp
 *
 * @brief Multi-head attention, pre-norm transformer blocks, the spatio-temporal
 * block and the fine/coarse cross-attention used for fusion.
 *
 * Tokens are rows, so a projection is `x * W` with W of shape C x C.
 */

namespace ftp {

struct AttentionParams {
    Var w_q;
    Var w_k;
    Var w_v;
    /// Output projection; absent for the fusion layer, which returns the attended values directly.
    std::optional<Var> w_o;
    std::size_t heads = 1;

    std::size_t width() const { return w_q.shape().at(0); }

    void validate() const {
        const std::size_t c = width();
        for (const Var* w : {&w_q, &w_k, &w_v}) {
            if (w->shape() != Shape{c, c}) {
                throw ShapeError("attention projection must be " + to_string(Shape{c, c}) + ", got " +
                                 to_string(w->shape()));
            }
        }
        if (w_o && w_o->shape() != Shape{c, c}) {
            throw ShapeError("attention output projection must be " + to_string(Shape{c, c}) + ", got " +
                             to_string(w_o->shape()));
        }
        if (heads == 0 || c % heads != 0) {
            throw ShapeError("attention: " + std::to_string(heads) + " heads do not divide width " +
                             std::to_string(c));
        }
    }
};

struct BlockParams {
    Var ln1_gamma, ln1_beta;
    AttentionParams attention;
    Var ln2_gamma, ln2_beta;
    Var mlp_w1, mlp_b1;  // C -> hidden
    Var mlp_w2, mlp_b2;  // hidden -> C
};

struct SpatioTemporalParams {
    BlockParams block;
    /// One learned row per frame (t-1, t, t+1).
    Var frame_embed;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline Tensor random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) {
        v = dist(rng);
    }
    return t;
}

inline AttentionParams init_attention(std::size_t width, std::size_t heads, bool output_projection,
                                      std::mt19937_64& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(width));
    AttentionParams p;
    p.w_q = Var(random_normal({width, width}, sd, rng), true);
    p.w_k = Var(random_normal({width, width}, sd, rng), true);
    p.w_v = Var(random_normal({width, width}, sd, rng), true);
    if (output_projection) {
        p.w_o = Var(random_normal({width, width}, sd, rng), true);
    }
    p.heads = heads;
    p.validate();
    return p;
}

inline BlockParams init_block(std::size_t width, std::size_t heads, std::size_t mlp_ratio, std::mt19937_64& rng) {
    const std::size_t hidden = width * mlp_ratio;
    BlockParams b;
    b.ln1_gamma = Var(Tensor({width}, 1.0), true);
    b.ln1_beta = Var(Tensor({width}), true);
    b.attention = init_attention(width, heads, true, rng);
    b.ln2_gamma = Var(Tensor({width}, 1.0), true);
    b.ln2_beta = Var(Tensor({width}), true);
    b.mlp_w1 = Var(random_normal({width, hidden}, 1.0 / std::sqrt(static_cast<double>(width)), rng), true);
    b.mlp_b1 = Var(Tensor({hidden}), true);
    b.mlp_w2 = Var(random_normal({hidden, width}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng), true);
    b.mlp_b2 = Var(Tensor({width}), true);
    return b;
}

inline void append_named(std::vector<std::pair<std::string, Var*>>& out, const std::string& prefix,
                         AttentionParams& p) {
    out.emplace_back(prefix + ".w_q", &p.w_q);
    out.emplace_back(prefix + ".w_k", &p.w_k);
    out.emplace_back(prefix + ".w_v", &p.w_v);
    if (p.w_o) {
        out.emplace_back(prefix + ".w_o", &*p.w_o);
    }
}

inline void append_named(std::vector<std::pair<std::string, Var*>>& out, const std::string& prefix,
                         BlockParams& b) {
    out.emplace_back(prefix + ".ln1.gamma", &b.ln1_gamma);
    out.emplace_back(prefix + ".ln1.beta", &b.ln1_beta);
    append_named(out, prefix + ".attn", b.attention);
    out.emplace_back(prefix + ".ln2.gamma", &b.ln2_gamma);
    out.emplace_back(prefix + ".ln2.beta", &b.ln2_beta);
    out.emplace_back(prefix + ".mlp.w1", &b.mlp_w1);
    out.emplace_back(prefix + ".mlp.b1", &b.mlp_b1);
    out.emplace_back(prefix + ".mlp.w2", &b.mlp_w2);
    out.emplace_back(prefix + ".mlp.b2", &b.mlp_b2);
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require_width(const Var& x, std::size_t width, const char* what) {
    require_rank(x.value(), 2, what);
    if (x.shape()[1] != width) {
        throw ShapeError(std::string(what) + ": token width " + std::to_string(x.shape()[1]) +
                         " does not match parameter width " + std::to_string(width));
    }
}

/// Per-head softmax(q k^T / sqrt(d)) v, heads concatenated.
inline Var attend(const Var& queries, const Var& keys_values, const AttentionParams& p) {
    const std::size_t c = p.width();
    const std::size_t d = c / p.heads;
    Var q = matmul(queries, p.w_q);
    Var k = matmul(keys_values, p.w_k);
    Var v = matmul(keys_values, p.w_v);
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    if (p.heads == 1) {
        return matmul(softmax_rows(scale(matmul_nt(q, k), inv)), v);
    }
    std::vector<Var> outs;
    outs.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        Var qh = slice_cols(q, h * d, d);
        Var kh = slice_cols(k, h * d, d);
        Var vh = slice_cols(v, h * d, d);
        outs.push_back(matmul(softmax_rows(scale(matmul_nt(qh, kh), inv)), vh));
    }
    return concat_cols(outs);
}

}  // namespace detail

/// Per-head attention weight matrices (rows sum to one) for queries from `fine` over `coarse`.
inline std::vector<Tensor> attention_weights(const Tensor& fine, const Tensor& coarse, const AttentionParams& p) {
    p.validate();
    const std::size_t c = p.width();
    const std::size_t d = c / p.heads;
    const Tensor q = kernels::matmul(fine, p.w_q.value());
    const Tensor k = kernels::matmul(coarse, p.w_k.value());
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> out;
    for (std::size_t h = 0; h < p.heads; ++h) {
        Tensor logits({fine.dim(0), coarse.dim(0)});
        for (std::size_t i = 0; i < fine.dim(0); ++i) {
            for (std::size_t j = 0; j < coarse.dim(0); ++j) {
                double acc = 0.0;
                for (std::size_t e = h * d; e < (h + 1) * d; ++e) {
                    acc += q(i, e) * k(j, e);
                }
                logits(i, j) = acc * inv;
            }
        }
        out.push_back(kernels::softmax_rows(logits));
    }
    return out;
}

inline Var multi_head_self_attention(const Var& x, const AttentionParams& p) {
    p.validate();
    detail::require_width(x, p.width(), "multi_head_self_attention");
    if (!p.w_o) {
        throw ShapeError("multi_head_self_attention: output projection required");
    }
    return matmul(detail::attend(x, x, p), *p.w_o);
}

/// Queries from the fine tokens, keys and values from the coarse tokens.
inline Var cross_attention(const Var& fine, const Var& coarse, const AttentionParams& p) {
    p.validate();
    detail::require_width(fine, p.width(), "cross_attention");
    detail::require_width(coarse, p.width(), "cross_attention");
    Var out = detail::attend(fine, coarse, p);
    return p.w_o ? matmul(out, *p.w_o) : out;
}

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)) with a GELU hidden layer.
inline Var transformer_block(const Var& x, const BlockParams& p) {
    detail::require_width(x, p.attention.width(), "transformer_block");
    Var h = add(x, multi_head_self_attention(layer_norm(x, p.ln1_gamma, p.ln1_beta), p.attention));
    Var m = layer_norm(h, p.ln2_gamma, p.ln2_beta);
    m = gelu(add_bias(matmul(m, p.mlp_w1), p.mlp_b1));
    m = add_bias(matmul(m, p.mlp_w2), p.mlp_b2);
    return add(h, m);
}

inline Var transformer_blocks(Var x, std::span<const BlockParams> blocks) {
    for (const auto& b : blocks) {
        x = transformer_block(x, b);
    }
    return x;
}

/// Joint attention over three frames' tokens (order t-1, t, t+1) tagged with frame embeddings.
inline Var spatio_temporal_block(const std::array<Var, 3>& frames, const SpatioTemporalParams& p) {
    const Shape& ref = frames[0].shape();
    std::vector<Var> parts;
    parts.reserve(3);
    for (std::size_t f = 0; f < 3; ++f) {
        require_rank(frames[f].value(), 2, "spatio_temporal_block");
        if (frames[f].shape() != ref) {
            throw ShapeError("spatio_temporal_block: frame " + std::to_string(f) + " has shape " +
                             to_string(frames[f].shape()) + ", expected " + to_string(ref));
        }
        parts.push_back(add_bias(frames[f], slice_rows(p.frame_embed, f, 1)));
    }
    return transformer_block(concat_rows(parts), p.block);
}

}  // namespace ftp

#endif
