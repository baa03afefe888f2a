#ifndef FTP_MODEL_HPP
#define FTP_MODEL_HPP

#include "attention.hpp"
#include "autodiff.hpp"
#include "dpc.hpp"
#include "gradcheck.hpp"

#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

/**
 * @file model.hpp
 *
 * @brief The multi-grained video pose model.
 *
 * Three frames pass through a patch-embedding backbone. The key frame's tokens
 * are upsampled into a high-resolution grid, pruned with DPC, and refined by the
 * shared blocks (fine tokens). All three frames go through a spatio-temporal
 * block, are pruned, and are refined by the same shared blocks (coarse tokens).
 * Fine tokens attend to coarse tokens; the results are written back into the
 * high-resolution grid at their original positions and decoded per position into
 * joint heatmaps.
 */

namespace ftp {

struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double right() const { return x + w; }
    double bottom() const { return y + h; }
    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct ModelConfig {
    std::size_t image_h = 256;
    std::size_t image_w = 192;
    std::size_t patch = 16;
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    std::size_t joints = 15;
    /// Shared refinement blocks per branch.
    std::size_t blocks = 2;
    std::size_t backbone_blocks = 2;
    std::size_t upsample = 4;
    std::size_t mlp_ratio = 4;
    /// Add learned positional embeddings to the upsampled grid before pruning.
    bool hr_pos_embed = true;
    dpc::DpcConfig hr{5, std::nullopt, 6};
    dpc::DpcConfig lr{5, std::nullopt, 6};

    std::size_t grid_h() const { return image_h / patch; }
    std::size_t grid_w() const { return image_w / patch; }
    std::size_t tokens_per_frame() const { return grid_h() * grid_w(); }
    std::size_t temporal_tokens() const { return 3 * tokens_per_frame(); }
    std::size_t hr_h() const { return grid_h() * upsample; }
    std::size_t hr_w() const { return grid_w() * upsample; }
    std::size_t hr_tokens() const { return hr_h() * hr_w(); }
    std::size_t hr_kept() const { return dpc::kept_count(hr_tokens(), hr.epsilon); }
    std::size_t lr_kept() const { return dpc::kept_count(temporal_tokens(), lr.epsilon); }
    std::size_t patch_features() const { return patch * patch * 3; }
    Shape heatmap_shape() const { return {joints, hr_h(), hr_w()}; }

    void validate() const {
        if (patch == 0 || image_h == 0 || image_w == 0) {
            throw ArgumentError("ModelConfig: image and patch sizes must be positive");
        }
        if (image_h % patch != 0 || image_w % patch != 0) {
            throw ArgumentError("ModelConfig: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                " is not divisible by patch size " + std::to_string(patch));
        }
        if (embed_dim == 0 || joints == 0 || upsample == 0 || mlp_ratio == 0) {
            throw ArgumentError("ModelConfig: embed_dim, joints, upsample and mlp_ratio must be positive");
        }
        if (heads == 0 || embed_dim % heads != 0) {
            throw ArgumentError("ModelConfig: heads must divide embed_dim");
        }
        hr.validate();
        lr.validate();
    }

    /// 256x192 input, 16-pixel patches, pruning ratio 6 in both branches.
    static ModelConfig standard() { return ModelConfig{}; }

    /// Smallest useful configuration; used for gradient checks and training smoke runs.
    static ModelConfig tiny() {
        ModelConfig c;
        c.image_h = 32;
        c.image_w = 32;
        c.embed_dim = 8;
        c.heads = 2;
        c.joints = 2;
        return c;
    }

    /// Mid-sized configuration for ratio sweeps.
    static ModelConfig small() {
        ModelConfig c;
        c.image_h = 64;
        c.image_w = 48;
        c.embed_dim = 16;
        c.heads = 2;
        c.joints = 4;
        return c;
    }
};

struct FrameTriplet {
    /// Crops of frames t-1, t, t+1, each image_h x image_w x 3.
    std::array<Tensor, 3> images;
    std::size_t person_id = 0;
    std::size_t frame_index = 0;
    /// Region of the source frames the crops were taken from.
    BoundingBox region;
};

struct TrainingSample {
    FrameTriplet triplet;
    /// Ground-truth heatmaps, joints x hr_h x hr_w.
    Tensor target;
};

enum class Variant {
    /// Low-resolution branch only, no pruning; the key frame's coarse tokens are upsampled and decoded.
    kBaseline,
    /// Both branches plus fusion, pruned with the configured ratios.
    kMultiGrained,
};

inline const char* to_string(Variant v) { return v == Variant::kBaseline ? "baseline" : "multi-grained"; }

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct BackboneParams {
    Var patch_w;  // patch_features x C
    Var patch_b;  // C
    Var pos_embed;  // tokens_per_frame x C
    std::vector<BlockParams> blocks;
};

struct DecoderParams {
    Var w1, b1;  // C -> hidden
    Var w2, b2;  // hidden -> C
    Var head_w, head_b;  // C -> joints
};

struct ModelParams {
    BackboneParams backbone;
    Var hr_pos;  // hr_tokens x C, present when hr_pos_embed
    SpatioTemporalParams temporal;
    /// Blocks used by both branches.
    std::vector<BlockParams> shared;
    AttentionParams fusion;
    DecoderParams decoder;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const std::size_t c = cfg.embed_dim;
        const std::size_t hidden = c * cfg.mlp_ratio;
        const auto inv_sqrt = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

        ModelParams p;
        p.backbone.patch_w = Var(random_normal({cfg.patch_features(), c}, inv_sqrt(cfg.patch_features()), rng), true);
        p.backbone.patch_b = Var(Tensor({c}), true);
        p.backbone.pos_embed = Var(random_normal({cfg.tokens_per_frame(), c}, 0.1, rng), true);
        for (std::size_t i = 0; i < cfg.backbone_blocks; ++i) {
            p.backbone.blocks.push_back(init_block(c, cfg.heads, cfg.mlp_ratio, rng));
        }
        if (cfg.hr_pos_embed) {
            p.hr_pos = Var(random_normal({cfg.hr_tokens(), c}, 0.1, rng), true);
        }
        p.temporal.block = init_block(c, cfg.heads, cfg.mlp_ratio, rng);
        p.temporal.frame_embed = Var(random_normal({3, c}, 0.1, rng), true);
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            p.shared.push_back(init_block(c, cfg.heads, cfg.mlp_ratio, rng));
        }
        p.fusion = init_attention(c, 1, false, rng);
        p.decoder.w1 = Var(random_normal({c, hidden}, inv_sqrt(c), rng), true);
        p.decoder.b1 = Var(Tensor({hidden}), true);
        p.decoder.w2 = Var(random_normal({hidden, c}, inv_sqrt(hidden), rng), true);
        p.decoder.b2 = Var(Tensor({c}), true);
        p.decoder.head_w = Var(random_normal({c, cfg.joints}, inv_sqrt(c), rng), true);
        p.decoder.head_b = Var(Tensor({cfg.joints}), true);
        return p;
    }

    /// Every trainable tensor with a stable dotted name, in a fixed order.
    std::vector<std::pair<std::string, Var*>> named() {
        std::vector<std::pair<std::string, Var*>> out;
        out.emplace_back("backbone.patch_w", &backbone.patch_w);
        out.emplace_back("backbone.patch_b", &backbone.patch_b);
        out.emplace_back("backbone.pos_embed", &backbone.pos_embed);
        for (std::size_t i = 0; i < backbone.blocks.size(); ++i) {
            append_named(out, "backbone.block" + std::to_string(i), backbone.blocks[i]);
        }
        if (hr_pos.defined()) {
            out.emplace_back("hr_pos", &hr_pos);
        }
        append_named(out, "temporal.block", temporal.block);
        out.emplace_back("temporal.frame_embed", &temporal.frame_embed);
        for (std::size_t i = 0; i < shared.size(); ++i) {
            append_named(out, "shared.block" + std::to_string(i), shared[i]);
        }
        append_named(out, "fusion", fusion);
        out.emplace_back("decoder.w1", &decoder.w1);
        out.emplace_back("decoder.b1", &decoder.b1);
        out.emplace_back("decoder.w2", &decoder.w2);
        out.emplace_back("decoder.b2", &decoder.b2);
        out.emplace_back("decoder.head_w", &decoder.head_w);
        out.emplace_back("decoder.head_b", &decoder.head_b);
        return out;
    }

    std::vector<NamedVar> named_vars() {
        std::vector<NamedVar> out;
        for (auto& [name, v] : named()) {
            out.push_back({name, *v});
        }
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& [name, v] : named()) {
            n += v->value().numel();
        }
        return n;
    }

    /// Deep copy; the result shares no nodes with *this.
    ModelParams clone() const {
        ModelParams copy = *this;
        for (auto& [name, v] : copy.named()) {
            *v = Var(v->value(), v->requires_grad());
        }
        return copy;
    }
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Rearranges an H x W x 3 image into (H/P * W/P) rows of P*P*3 pixel features.
inline Tensor patchify(const Tensor& image, std::size_t patch) {
    require_rank(image, 3, "patchify");
    const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
    if (h % patch != 0 || w % patch != 0) {
        throw ShapeError("patchify: image " + to_string(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
    }
    const std::size_t gh = h / patch, gw = w / patch;
    Tensor out({gh * gw, patch * patch * ch});
    for (std::size_t gy = 0; gy < gh; ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            auto row = out.row(gy * gw + gx);
            std::size_t f = 0;
            for (std::size_t py = 0; py < patch; ++py) {
                for (std::size_t px = 0; px < patch; ++px) {
                    for (std::size_t c = 0; c < ch; ++c) {
                        row[f++] = image(gy * patch + py, gx * patch + px, c);
                    }
                }
            }
        }
    }
    return out;
}

/// Linear patch projection plus bias, before positional embedding.
inline Var patch_project(const Tensor& image, const ModelConfig& cfg, const BackboneParams& p) {
    if (image.shape() != Shape{cfg.image_h, cfg.image_w, 3}) {
        throw ShapeError("backbone: image " + to_string(image.shape()) + " does not match configured " +
                         to_string(Shape{cfg.image_h, cfg.image_w, 3}));
    }
    return add_bias(matmul(Var(patchify(image, cfg.patch)), p.patch_w), p.patch_b);
}

inline Var patch_embed(const Tensor& image, const ModelConfig& cfg, const BackboneParams& p) {
    return add(patch_project(image, cfg, p), p.pos_embed);
}

/// Feature tokens for frames t-1, t, t+1.
inline std::array<Var, 3> patch_embed_backbone(const FrameTriplet& triplet, const ModelConfig& cfg,
                                               const BackboneParams& p) {
    std::array<Var, 3> out;
    for (std::size_t f = 0; f < 3; ++f) {
        out[f] = transformer_blocks(patch_embed(triplet.images[f], cfg, p), p.blocks);
    }
    return out;
}

struct BranchOutput {
    Var tokens;
    dpc::PruneSelection selection;
    /// The refinement blocks this branch ran (identity of the shared parameters).
    std::span<const BlockParams> blocks;
};

struct HighResOutput : BranchOutput {
    /// Upsampled key-frame grid before pruning, hr_tokens x C.
    Var grid;
};

namespace detail {
inline std::string format_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline dpc::PruneSelection resolve_selection(const Tensor& tokens, const dpc::DpcConfig& cfg,
                                             const std::optional<dpc::PruneSelection>& forced) {
    if (forced) {
        return *forced;
    }
    return dpc::select_tokens(tokens, cfg);
}

/// Upsamples a (gh*gw) x C token matrix to an (f*gh * f*gw) x C grid.
inline Var upsample_tokens(const Var& tokens, const ModelConfig& cfg) {
    const std::size_t c = tokens.shape().at(1);
    if (tokens.shape()[0] != cfg.tokens_per_frame()) {
        throw ShapeError("high_res_branch: expected " + std::to_string(cfg.tokens_per_frame()) + " tokens, got " +
                         to_string(tokens.shape()));
    }
    Var grid = reshape(tokens, {cfg.grid_h(), cfg.grid_w(), c});
    grid = upsample_bilinear(grid, cfg.upsample);
    return reshape(grid, {cfg.hr_tokens(), c});
}
}  // namespace detail

/**
 * Key-frame tokens -> upsampled grid -> DPC pruning -> shared blocks.
 *
 * `hr_pos` may be undefined, in which case no positional embedding is added
 * after upsampling. `forced` replaces the DPC selection (used to hold the
 * selection fixed across finite-difference evaluations).
 */
inline HighResOutput high_res_branch(const Var& key_tokens, const ModelConfig& cfg,
                                     std::span<const BlockParams> shared, const Var& hr_pos,
                                     const std::optional<dpc::PruneSelection>& forced = std::nullopt) {
    HighResOutput out;
    out.grid = detail::upsample_tokens(key_tokens, cfg);
    if (hr_pos.defined()) {
        out.grid = add(out.grid, hr_pos);
    }
    out.selection = detail::resolve_selection(out.grid.value(), cfg.hr, forced);
    out.tokens = transformer_blocks(gather_rows(out.grid, out.selection.kept), shared);
    out.blocks = shared;
    return out;
}

/// Spatio-temporal block over all three frames -> DPC pruning -> shared blocks.
inline BranchOutput low_res_branch(const std::array<Var, 3>& frames, const ModelConfig& cfg,
                                   std::span<const BlockParams> shared, const SpatioTemporalParams& temporal,
                                   const std::optional<dpc::PruneSelection>& forced = std::nullopt) {
    BranchOutput out;
    Var joint = spatio_temporal_block(frames, temporal);
    out.selection = detail::resolve_selection(joint.value(), cfg.lr, forced);
    out.tokens = transformer_blocks(gather_rows(joint, out.selection.kept), shared);
    out.blocks = shared;
    return out;
}

/// Per-position MLP and 1x1 joint projection over a hr_tokens x C grid -> joints x hr_h x hr_w.
inline Var decode_grid(const Var& grid, const ModelConfig& cfg, const DecoderParams& d) {
    Var h = gelu(add_bias(matmul(grid, d.w1), d.b1));
    h = add_bias(matmul(h, d.w2), d.b2);
    Var heat = add_bias(matmul(h, d.head_w), d.head_b);
    return reshape(transpose(heat), cfg.heatmap_shape());
}

/// Cross-attends fine to coarse tokens, writes the result back into the grid, and decodes heatmaps.
inline Var fuse_and_decode(const Var& fine, const dpc::PruneSelection& fine_selection, const Var& hr_grid,
                           const Var& coarse, const AttentionParams& fusion, const DecoderParams& decoder,
                           const ModelConfig& cfg) {
    if (fine_selection.kept.size() != fine.shape().at(0)) {
        throw IndexError("fuse_and_decode: selection has " + std::to_string(fine_selection.kept.size()) +
                         " indices for " + std::to_string(fine.shape()[0]) + " fine tokens");
    }
    Var fused = cross_attention(fine, coarse, fusion);
    Var grid = scatter_rows(hr_grid, fine_selection.kept, fused);
    return decode_grid(grid, cfg, decoder);
}

/// Mean squared difference between predicted and ground-truth heatmaps.
inline Var heatmap_loss(const Var& predicted, const Var& target) {
    require_same_shape(predicted.value(), target.value(), "heatmap_loss");
    return mse(predicted, target);
}

inline double heatmap_loss(const Tensor& predicted, const Tensor& target) {
    return heatmap_loss(Var(predicted), Var(target)).value().item();
}

struct TokenLedger {
    std::size_t per_frame = 0;
    std::size_t hr_tokens = 0;
    std::size_t hr_kept = 0;
    std::size_t temporal_tokens = 0;
    std::size_t lr_kept = 0;
};

struct ForwardOptions {
    Variant variant = Variant::kMultiGrained;
    std::optional<dpc::PruneSelection> hr_selection;
    std::optional<dpc::PruneSelection> lr_selection;
};

struct ForwardResult {
    Var heatmap;
    dpc::PruneSelection hr_selection;
    dpc::PruneSelection lr_selection;
    TokenLedger ledger;
};

inline ForwardResult forward_full(const FrameTriplet& triplet, const ModelConfig& cfg, const ModelParams& params,
                                  const ForwardOptions& opts = {}) {
    cfg.validate();
    ForwardResult result;
    auto frames = patch_embed_backbone(triplet, cfg, params.backbone);
    result.ledger.per_frame = frames[1].shape()[0];

    if (opts.variant == Variant::kBaseline) {
        ModelConfig unpruned = cfg;
        unpruned.lr.epsilon = 1;
        auto low = low_res_branch(frames, unpruned, params.shared, params.temporal, opts.lr_selection);
        result.ledger.temporal_tokens = 3 * result.ledger.per_frame;
        result.ledger.lr_kept = low.selection.kept.size();
        result.lr_selection = low.selection;
        Var key = slice_rows(low.tokens, cfg.tokens_per_frame(), cfg.tokens_per_frame());
        Var grid = detail::upsample_tokens(key, cfg);
        if (params.hr_pos.defined()) {
            grid = add(grid, params.hr_pos);
        }
        result.ledger.hr_tokens = grid.shape()[0];
        result.ledger.hr_kept = 0;
        result.heatmap = decode_grid(grid, cfg, params.decoder);
        return result;
    }

    auto high = high_res_branch(frames[1], cfg, params.shared, params.hr_pos, opts.hr_selection);
    auto low = low_res_branch(frames, cfg, params.shared, params.temporal, opts.lr_selection);
    result.ledger.hr_tokens = high.grid.shape()[0];
    result.ledger.hr_kept = high.tokens.shape()[0];
    result.ledger.temporal_tokens = 3 * result.ledger.per_frame;
    result.ledger.lr_kept = low.tokens.shape()[0];
    result.hr_selection = high.selection;
    result.lr_selection = low.selection;
    result.heatmap = fuse_and_decode(high.tokens, high.selection, high.grid, low.tokens, params.fusion,
                                     params.decoder, cfg);
    return result;
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Exact multiply-accumulate count of one forward pass, derived from shapes alone.
/// Counts matrix products and DPC pairwise distances; element-wise ops are free.
inline std::uint64_t analytic_macs(const ModelConfig& cfg, Variant variant) {
    using u64 = std::uint64_t;
    const u64 c = cfg.embed_dim;
    const u64 hidden = c * cfg.mlp_ratio;
    const auto block = [&](u64 n) { return 4 * n * c * c + 2 * n * n * c + 2 * n * c * hidden; };
    const auto blocks = [&](u64 n, u64 count) { return count * block(n); };
    const u64 t = cfg.tokens_per_frame();
    const u64 hr = cfg.hr_tokens();

    u64 total = 3 * (t * cfg.patch_features() * c + blocks(t, cfg.backbone_blocks));
    const u64 decode = hr * (2 * c * hidden + c * cfg.joints);

    if (variant == Variant::kBaseline) {
        total += block(3 * t) + blocks(3 * t, cfg.blocks);
        return total + decode;
    }

    const u64 m = cfg.hr_kept();
    const u64 k = cfg.lr_kept();
    if (cfg.hr.epsilon > 1) {
        total += dpc::pairwise_macs(hr, c);
    }
    total += blocks(m, cfg.blocks);
    total += block(3 * t);
    if (cfg.lr.epsilon > 1) {
        total += dpc::pairwise_macs(3 * t, c);
    }
    total += blocks(k, cfg.blocks);
    total += m * c * c + 2 * k * c * c + 2 * m * k * c;  // cross-attention
    return total + decode;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/**
 * One gradient-descent step on the mean heatmap loss over `batch`; returns the
 * loss before the update. DPC selections are constants of the forward pass.
 *
 * When `clip_norm` > 0 the whole gradient is rescaled so its global L2 norm is
 * at most `clip_norm`.
 */
inline double train_step(std::span<const TrainingSample> batch, const ModelConfig& cfg, ModelParams& params,
                         double lr, double clip_norm = 0.0) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw ArgumentError("train_step: learning rate must be finite and non-negative");
    }
    if (batch.empty()) {
        throw ArgumentError("train_step: empty batch");
    }
    auto named = params.named();
    for (auto& [name, v] : named) {
        v->zero_grad();
    }
    std::vector<Var> losses;
    for (const auto& sample : batch) {
        Var pred = forward_full(sample.triplet, cfg, params).heatmap;
        losses.push_back(heatmap_loss(pred, Var(sample.target)));
    }
    Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) {
        total = add(total, losses[i]);
    }
    total = scale(total, 1.0 / static_cast<double>(losses.size()));
    const double loss = total.value().item();
    if (!std::isfinite(loss)) {
        throw TrainingError("train_step: non-finite loss " + detail::format_g(loss));
    }
    backward(total);
    double sq = 0.0;
    for (auto& [name, v] : named) {
        if (!v->has_grad()) {
            continue;
        }
        const Tensor g = v->grad();
        if (!g.all_finite()) {
            throw TrainingError("train_step: non-finite gradient in " + name + " (loss " + detail::format_g(loss) +
                                ")");
        }
        for (double x : g.data()) {
            sq += x * x;
        }
    }
    const double norm = std::sqrt(sq);
    const double step = clip_norm > 0.0 && norm > clip_norm ? lr * clip_norm / norm : lr;
    for (auto& [name, v] : named) {
        if (v->has_grad()) {
            kernels::axpy(-step, v->grad(), v->mutable_value());
        }
    }
    return loss;
}

inline double train_step(const TrainingSample& sample, const ModelConfig& cfg, ModelParams& params, double lr,
                         double clip_norm = 0.0) {
    return train_step(std::span<const TrainingSample>(&sample, 1), cfg, params, lr, clip_norm);
}

/**
 * Finite-difference check of the heatmap loss with respect to every model
 * parameter. DPC selections from an initial forward pass are held fixed, so the
 * function being differentiated is smooth.
 */
inline GradcheckReport pipeline_gradcheck(const TrainingSample& sample, const ModelConfig& cfg, ModelParams& params,
                                          double eps, const GradHook& hook = {}) {
    ForwardOptions opts;
    {
        NoGradGuard no_grad;
        auto first = forward_full(sample.triplet, cfg, params);
        opts.hr_selection = first.hr_selection;
        opts.lr_selection = first.lr_selection;
    }
    Var target(sample.target);
    auto f = [&] { return heatmap_loss(forward_full(sample.triplet, cfg, params, opts).heatmap, target); };
    return finite_diff_check(f, params.named_vars(), eps, hook);
}

}  // namespace ftp

#endif
