#include "ftp/io.hpp"
#include "ftp/model.hpp"
#include "ftp/synth.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <random>

using namespace ftp;

namespace {

FrameTriplet random_triplet(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    FrameTriplet t;
    for (auto& img : t.images) {
        img = oracle::random_tensor({cfg.image_h, cfg.image_w, 3}, rng, 0.0, 1.0);
    }
    return t;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = i;
    }
    return v;
}

}  // namespace

TEST(ModelConfig, DerivedSizes) {
    const auto cfg = ModelConfig::standard();
    EXPECT_EQ(cfg.tokens_per_frame(), 192u);
    EXPECT_EQ(cfg.hr_tokens(), 3072u);
    EXPECT_EQ(cfg.hr_kept(), 512u);
    EXPECT_EQ(cfg.temporal_tokens(), 576u);
    EXPECT_EQ(cfg.lr_kept(), 96u);
    EXPECT_EQ(cfg.heatmap_shape(), (Shape{15, 64, 48}));
}

TEST(ModelConfig, ValidateRejectsBadSizes) {
    auto cfg = ModelConfig::tiny();
    cfg.image_h = 40;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg = ModelConfig::tiny();
    cfg.heads = 3;
    EXPECT_THROW(cfg.validate(), ArgumentError);
    cfg = ModelConfig::tiny();
    cfg.hr.epsilon = 0;
    EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(PatchEmbed, ShapeAndZeroImage) {
    const auto cfg = ModelConfig::standard();
    auto params = ModelParams::init(cfg, 1);
    Tensor zeros({cfg.image_h, cfg.image_w, 3});
    auto tokens = patch_embed(zeros, cfg, params.backbone);
    EXPECT_EQ(tokens.shape(), (Shape{192, 32}));
    EXPECT_EQ(tokens.value(), params.backbone.pos_embed.value());
}

TEST(PatchEmbed, ProjectionIsLinearWithoutBias) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 2);
    std::mt19937_64 rng(3);
    auto a = oracle::random_tensor({32, 32, 3}, rng);
    auto b = oracle::random_tensor({32, 32, 3}, rng);
    Tensor ab(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        ab[i] = 2.0 * a[i] - 3.0 * b[i];
    }
    const auto pa = patch_project(a, cfg, params.backbone).value();
    const auto pb = patch_project(b, cfg, params.backbone).value();
    const auto pab = patch_project(ab, cfg, params.backbone).value();
    for (std::size_t i = 0; i < pa.numel(); ++i) {
        EXPECT_NEAR(pab[i], 2.0 * pa[i] - 3.0 * pb[i], 1e-12);
    }
}

TEST(PatchEmbed, PatchifyMatchesPixelLoop) {
    std::mt19937_64 rng(4);
    auto img = oracle::random_tensor({32, 48, 3}, rng);
    auto rows = patchify(img, 16);
    ASSERT_EQ(rows.shape(), (Shape{6, 768}));
    for (std::size_t gy = 0; gy < 2; ++gy) {
        for (std::size_t gx = 0; gx < 3; ++gx) {
            for (std::size_t py = 0; py < 16; ++py) {
                for (std::size_t px = 0; px < 16; ++px) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        EXPECT_EQ(rows(gy * 3 + gx, (py * 16 + px) * 3 + c), img(gy * 16 + py, gx * 16 + px, c));
                    }
                }
            }
        }
    }
}

TEST(PatchEmbed, WrongImageShapeIsShapeError) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 5);
    EXPECT_THROW(patch_embed(Tensor({32, 48, 3}), cfg, params.backbone), ShapeError);
}

TEST(Forward, StandardLedgerAndHeatmapShape) {
    const auto cfg = ModelConfig::standard();
    auto params = ModelParams::init(cfg, 6);
    auto result = forward_full(random_triplet(cfg, 7), cfg, params);
    EXPECT_EQ(result.ledger.per_frame, 192u);
    EXPECT_EQ(result.ledger.hr_tokens, 3072u);
    EXPECT_EQ(result.ledger.hr_kept, 512u);
    EXPECT_EQ(result.ledger.temporal_tokens, 576u);
    EXPECT_EQ(result.ledger.lr_kept, 96u);
    EXPECT_EQ(result.heatmap.shape(), (Shape{15, 64, 48}));
    EXPECT_TRUE(result.heatmap.value().all_finite());
}

TEST(Forward, BaselineDecodesFullGrid) {
    const auto cfg = ModelConfig::small();
    auto params = ModelParams::init(cfg, 8);
    ForwardOptions opts;
    opts.variant = Variant::kBaseline;
    auto result = forward_full(random_triplet(cfg, 9), cfg, params, opts);
    EXPECT_EQ(result.heatmap.shape(), cfg.heatmap_shape());
    EXPECT_EQ(result.ledger.lr_kept, cfg.temporal_tokens());
    EXPECT_EQ(result.ledger.hr_kept, 0u);
}

TEST(Forward, Deterministic) {
    const auto cfg = ModelConfig::small();
    auto p1 = ModelParams::init(cfg, 10);
    auto p2 = ModelParams::init(cfg, 10);
    const auto triplet = random_triplet(cfg, 11);
    auto a = forward_full(triplet, cfg, p1);
    auto b = forward_full(triplet, cfg, p2);
    EXPECT_EQ(a.heatmap.value(), b.heatmap.value());
    EXPECT_EQ(a.hr_selection, b.hr_selection);
    EXPECT_EQ(a.lr_selection, b.lr_selection);
}

TEST(Forward, RatiosChangeOutputButStayFinite) {
    auto cfg = ModelConfig::small();
    auto params = ModelParams::init(cfg, 12);
    const auto triplet = random_triplet(cfg, 13);
    cfg.hr.epsilon = cfg.lr.epsilon = 1;
    auto dense = forward_full(triplet, cfg, params).heatmap.value();
    cfg.hr.epsilon = cfg.lr.epsilon = 6;
    auto sparse = forward_full(triplet, cfg, params).heatmap.value();
    EXPECT_TRUE(dense.all_finite());
    EXPECT_TRUE(sparse.all_finite());
    EXPECT_GT(max_rel_diff(dense, sparse), 1e-6);
}

TEST(Forward, ZeroDecoderGivesZeroHeatmap) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 14);
    params.decoder.head_w.mutable_value().fill(0.0);
    auto heat = forward_full(random_triplet(cfg, 15), cfg, params).heatmap.value();
    EXPECT_EQ(heat, Tensor(cfg.heatmap_shape()));
}

TEST(Branches, ShareRefinementBlocks) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 16);
    auto frames = patch_embed_backbone(random_triplet(cfg, 17), cfg, params.backbone);
    auto high = high_res_branch(frames[1], cfg, params.shared, params.hr_pos);
    auto low = low_res_branch(frames, cfg, params.shared, params.temporal);
    EXPECT_EQ(high.blocks.data(), params.shared.data());
    EXPECT_EQ(low.blocks.data(), high.blocks.data());
    EXPECT_EQ(low.blocks.size(), cfg.blocks);
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        EXPECT_TRUE(high.blocks[i].mlp_w1.same_node(low.blocks[i].mlp_w1));
    }
}

TEST(Branches, MutatingSharedWeightsChangesBothBranches) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 18);
    auto frames = patch_embed_backbone(random_triplet(cfg, 19), cfg, params.backbone);
    auto h0 = high_res_branch(frames[1], cfg, params.shared, params.hr_pos).tokens.value();
    auto l0 = low_res_branch(frames, cfg, params.shared, params.temporal).tokens.value();
    for (double& v : params.shared.back().mlp_b2.mutable_value().data()) {
        v += 0.5;
    }
    auto h1 = high_res_branch(frames[1], cfg, params.shared, params.hr_pos).tokens.value();
    auto l1 = low_res_branch(frames, cfg, params.shared, params.temporal).tokens.value();
    EXPECT_GT(max_rel_diff(h0, h1), 1e-3);
    EXPECT_GT(max_rel_diff(l0, l1), 1e-3);
}

TEST(Fusion, UnitRatioScatterCoversWholeGrid) {
    auto cfg = ModelConfig::tiny();
    cfg.hr.epsilon = cfg.lr.epsilon = 1;
    auto params = ModelParams::init(cfg, 20);
    auto frames = patch_embed_backbone(random_triplet(cfg, 21), cfg, params.backbone);
    auto high = high_res_branch(frames[1], cfg, params.shared, params.hr_pos);
    EXPECT_EQ(high.selection.kept, all_indices(cfg.hr_tokens()));
    auto low = low_res_branch(frames, cfg, params.shared, params.temporal);
    auto fused = cross_attention(high.tokens, low.tokens, params.fusion);
    auto grid = scatter_rows(high.grid, high.selection.kept, fused);
    EXPECT_EQ(grid.value(), fused.value());
}

TEST(Fusion, UnselectedPositionsKeepUpsampledTokens) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 22);
    auto frames = patch_embed_backbone(random_triplet(cfg, 23), cfg, params.backbone);
    auto high = high_res_branch(frames[1], cfg, params.shared, params.hr_pos);
    auto low = low_res_branch(frames, cfg, params.shared, params.temporal);
    auto fused = cross_attention(high.tokens, low.tokens, params.fusion);
    auto grid = scatter_rows(high.grid, high.selection.kept, fused).value();
    std::vector<bool> kept(cfg.hr_tokens(), false);
    for (std::size_t i : high.selection.kept) {
        kept[i] = true;
    }
    for (std::size_t r = 0; r < cfg.hr_tokens(); ++r) {
        if (!kept[r]) {
            for (std::size_t c = 0; c < cfg.embed_dim; ++c) {
                EXPECT_EQ(grid(r, c), high.grid.value()(r, c));
            }
        }
    }
}

TEST(Fusion, SelectionSizeMismatchIsIndexError) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 24);
    dpc::PruneSelection sel{{0, 1, 2}, 6};
    Var fine(Tensor({2, cfg.embed_dim}));
    Var grid(Tensor({cfg.hr_tokens(), cfg.embed_dim}));
    EXPECT_THROW(fuse_and_decode(fine, sel, grid, Var(Tensor({4, cfg.embed_dim})), params.fusion, params.decoder,
                                 cfg),
                 IndexError);
}

TEST(Loss, ZeroForIdenticalMaps) {
    std::mt19937_64 rng(25);
    auto h = oracle::random_tensor({2, 8, 6}, rng);
    EXPECT_EQ(heatmap_loss(h, h), 0.0);
}

TEST(Loss, UnitDifferenceGivesOne) {
    EXPECT_EQ(heatmap_loss(Tensor({3, 4, 5}, 1.0), Tensor({3, 4, 5})), 1.0);
}

TEST(Loss, MatchesElementLoop) {
    std::mt19937_64 rng(26);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = oracle::random_tensor({4, 16, 12}, rng, -3.0, 3.0);
        auto b = oracle::random_tensor({4, 16, 12}, rng, -3.0, 3.0);
        EXPECT_LT(oracle::rel_err(heatmap_loss(a, b), oracle::mse(a, b)), 1e-12);
        EXPECT_GT(heatmap_loss(a, b), 0.0);
    }
}

TEST(Loss, ShapeMismatchIsShapeError) {
    EXPECT_THROW(heatmap_loss(Tensor({2, 4, 4}), Tensor({2, 4, 5})), ShapeError);
}

TEST(Macs, AnalyticMatchesInstrumented) {
    for (auto cfg : {ModelConfig::tiny(), ModelConfig::small()}) {
        auto params = ModelParams::init(cfg, 27);
        const auto triplet = random_triplet(cfg, 28);
        for (std::size_t eps : {1u, 3u, 6u, 10u}) {
            cfg.hr.epsilon = cfg.lr.epsilon = eps;
            for (auto variant : {Variant::kBaseline, Variant::kMultiGrained}) {
                NoGradGuard no_grad;
                MacScope scope;
                ForwardOptions opts;
                opts.variant = variant;
                forward_full(triplet, cfg, params, opts);
                EXPECT_EQ(scope.elapsed(), analytic_macs(cfg, variant))
                    << cfg.image_h << "x" << cfg.image_w << " eps " << eps << " " << to_string(variant);
            }
        }
    }
}

TEST(Macs, PruningReducesCost) {
    auto cfg = ModelConfig::standard();
    cfg.hr.epsilon = cfg.lr.epsilon = 1;
    const auto dense = analytic_macs(cfg, Variant::kMultiGrained);
    cfg.hr.epsilon = cfg.lr.epsilon = 6;
    const auto pruned = analytic_macs(cfg, Variant::kMultiGrained);
    EXPECT_LT(pruned, dense);
    cfg.hr.epsilon = cfg.lr.epsilon = 1;
    EXPECT_GT(analytic_macs(cfg, Variant::kMultiGrained), analytic_macs(cfg, Variant::kBaseline));
}

TEST(Macs, MonotoneInEachRatio) {
    auto cfg = ModelConfig::standard();
    for (std::size_t a : {1u, 3u, 6u}) {
        for (std::size_t b : {1u, 3u, 6u}) {
            cfg.hr.epsilon = a;
            cfg.lr.epsilon = b;
            const auto here = analytic_macs(cfg, Variant::kMultiGrained);
            cfg.hr.epsilon = a == 1 ? 3 : a + 4;
            EXPECT_GE(here, analytic_macs(cfg, Variant::kMultiGrained));
            cfg.hr.epsilon = a;
            cfg.lr.epsilon = b == 1 ? 3 : b + 4;
            EXPECT_GE(here, analytic_macs(cfg, Variant::kMultiGrained));
        }
    }
}

TEST(Params, CloneSharesNoNodes) {
    const auto cfg = ModelConfig::tiny();
    auto a = ModelParams::init(cfg, 29);
    auto b = a.clone();
    auto na = a.named();
    auto nb = b.named();
    ASSERT_EQ(na.size(), nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        EXPECT_EQ(na[i].first, nb[i].first);
        EXPECT_FALSE(na[i].second->same_node(*nb[i].second));
        EXPECT_EQ(na[i].second->value(), nb[i].second->value());
    }
}

TEST(Checkpoint, RoundTrip) {
    const auto cfg = ModelConfig::tiny();
    auto a = ModelParams::init(cfg, 30);
    auto b = ModelParams::init(cfg, 31);
    const auto path = (std::filesystem::temp_directory_path() / "ftp_model_roundtrip.json").string();
    io::save_checkpoint(path, a);
    io::load_checkpoint(path, b);
    std::remove(path.c_str());
    auto na = a.named();
    auto nb = b.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        EXPECT_EQ(na[i].second->value(), nb[i].second->value()) << na[i].first;
    }
}

TEST(Checkpoint, RejectsBadMagicAndShapes) {
    const auto cfg = ModelConfig::tiny();
    auto a = ModelParams::init(cfg, 32);
    auto doc = io::checkpoint_json(a);
    auto bad = doc;
    bad["magic"] = "NOPE";
    EXPECT_THROW(io::load_checkpoint(bad, a), io::FormatError);
    auto other = ModelParams::init(ModelConfig::small(), 33);
    EXPECT_THROW(io::load_checkpoint(doc, other), io::FormatError);
    EXPECT_THROW(io::load_checkpoint(std::string("/nonexistent/ckpt.json"), a), io::FormatError);
}

TEST(Training, ZeroLearningRateLeavesParamsUnchanged) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 34);
    auto before = params.clone();
    const auto batch = synth::make_batch(35, 2, cfg);
    train_step(batch, cfg, params, 0.0);
    auto na = params.named();
    auto nb = before.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        EXPECT_EQ(na[i].second->value(), nb[i].second->value()) << na[i].first;
    }
}

TEST(Training, ShallowModelLossDecreasesEveryStep) {
    auto cfg = ModelConfig::tiny();
    cfg.blocks = 0;
    cfg.backbone_blocks = 0;
    auto params = ModelParams::init(cfg, 36);
    const auto batch = synth::make_batch(37, 2, cfg);
    double prev = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 10; ++step) {
        const double loss = train_step(batch, cfg, params, 0.01);
        EXPECT_LT(loss, prev) << "step " << step;
        prev = loss;
    }
}

TEST(Training, RejectsBadLearningRates) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 38);
    const auto batch = synth::make_batch(39, 1, cfg);
    EXPECT_THROW(train_step(batch, cfg, params, -0.1), ArgumentError);
    EXPECT_THROW(train_step(batch, cfg, params, std::nan("")), ArgumentError);
    EXPECT_THROW(train_step(std::span<const TrainingSample>(), cfg, params, 0.1), ArgumentError);
}

TEST(Training, NonFiniteLossIsTrainingError) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 40);
    auto sample = synth::make_batch(41, 1, cfg)[0];
    sample.target[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(train_step(sample, cfg, params, 0.1), TrainingError);
}

TEST(Training, ClippingBoundsTheUpdate) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 42);
    auto before = params.clone();
    const auto batch = synth::make_batch(43, 2, cfg);
    train_step(batch, cfg, params, 1.0, 1e-3);
    double sq = 0.0;
    auto na = params.named();
    auto nb = before.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        const auto& x = na[i].second->value();
        const auto& y = nb[i].second->value();
        for (std::size_t k = 0; k < x.numel(); ++k) {
            sq += (x[k] - y[k]) * (x[k] - y[k]);
        }
    }
    EXPECT_LE(std::sqrt(sq), 1e-3 * (1 + 1e-9));
    EXPECT_GT(std::sqrt(sq), 0.0);
}

TEST(Gradcheck, TinyPipelineMatchesFiniteDifferences) {
    const auto cfg = ModelConfig::tiny();
    auto params = ModelParams::init(cfg, 44);
    const auto sample = synth::make_batch(45, 1, cfg)[0];
    auto report = pipeline_gradcheck(sample, cfg, params, 1e-4);
    EXPECT_LT(report.max_error, 1e-4) << report.worst_param;
    EXPECT_EQ(report.coordinates, params.parameter_count());
}
