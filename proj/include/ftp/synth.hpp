#ifndef FTP_SYNTH_HPP
#define FTP_SYNTH_HPP

#include "model.hpp"
#include "tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

/**
 * @file synth.hpp
 *
 * @brief Procedural single-person video clips, top-down cropping and Gaussian
 * target heatmaps.
 *
 * A figure is a tree of joints (discs) joined by limbs (segments). Its root
 * drifts along a bounded Lissajous path and each limb swings about its parent,
 * both at speeds proportional to the scene's motion amplitude. All randomness
 * comes from the scene seed.
 */

namespace ftp::synth {

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

/// Parent index per joint; -1 marks the root. Parents precede their children.
using Skeleton = std::vector<int>;

/// 15-joint human layout: neck, nose, head top, shoulders, elbows, wrists, hips, knees, ankles.
inline Skeleton human_skeleton() { return {-1, 0, 1, 0, 0, 3, 4, 5, 6, 0, 0, 9, 10, 11, 12}; }

struct SynthScene {
    std::uint64_t seed = 0;
    Skeleton skeleton = human_skeleton();
    /// Upper bound on root speed, in pixels per frame.
    double amplitude = 2.0;
    std::size_t image_h = 240;
    std::size_t image_w = 320;

    std::size_t joints() const { return skeleton.size(); }

    /// Human skeleton when `joints` is 15, otherwise a seeded random tree.
    static SynthScene with_joints(std::uint64_t seed, std::size_t joints) {
        SynthScene s;
        s.seed = seed;
        if (joints != 15) {
            std::mt19937_64 rng(seed ^ 0x5ce1e7u);
            s.skeleton.assign(joints, -1);
            for (std::size_t i = 1; i < joints; ++i) {
                s.skeleton[i] = static_cast<int>(rng() % i);
            }
        }
        return s;
    }

    void validate() const {
        if (skeleton.empty()) {
            throw ArgumentError("SynthScene: skeleton has no joints");
        }
        if (skeleton[0] != -1) {
            throw ArgumentError("SynthScene: joint 0 must be the root");
        }
        for (std::size_t i = 1; i < skeleton.size(); ++i) {
            if (skeleton[i] < 0 || static_cast<std::size_t>(skeleton[i]) >= i) {
                throw ArgumentError("SynthScene: joint " + std::to_string(i) + " has invalid parent " +
                                    std::to_string(skeleton[i]));
            }
        }
        if (image_h < 16 || image_w < 16) {
            throw ArgumentError("SynthScene: image must be at least 16x16");
        }
        if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) {
            throw ArgumentError("SynthScene: amplitude must be finite and non-negative");
        }
    }
};

struct SynthFrame {
    Tensor image;  // image_h x image_w x 3, values in [0, 1]
    std::vector<Keypoint> keypoints;
};

namespace detail {

inline double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

struct Figure {
    std::vector<Keypoint> offsets;  // rest-pose offset from parent, body units
    std::vector<double> swing;      // radians of swing per unit amplitude
    std::vector<double> phase;
    double scale = 1.0;             // pixels per body unit
    double path_radius = 0.0;
    double path_phase_x = 0.0;
    double path_phase_y = 0.0;
    Keypoint center;
    std::array<double, 3> background{};
    std::vector<std::array<double, 3>> joint_color;
};

inline std::vector<Keypoint> human_offsets() {
    return {{0.0, 0.0},  {0.0, -0.35}, {0.0, -0.35}, {0.45, 0.1},  {-0.45, 0.1},
            {0.1, 0.5},  {-0.1, 0.5},  {0.05, 0.45}, {-0.05, 0.45}, {0.25, 1.1}, {-0.25, 1.1},
            {0.05, 0.6}, {-0.05, 0.6}, {0.0, 0.55},  {0.0, 0.55}};
}

inline std::array<double, 3> hue_color(double hue) {
    const double h = hue * 6.0;
    const double x = 1.0 - std::abs(std::fmod(h, 2.0) - 1.0);
    switch (static_cast<int>(h) % 6) {
        case 0: return {1.0, x, 0.0};
        case 1: return {x, 1.0, 0.0};
        case 2: return {0.0, 1.0, x};
        case 3: return {0.0, x, 1.0};
        case 4: return {x, 0.0, 1.0};
        default: return {1.0, 0.0, x};
    }
}

inline Figure make_figure(const SynthScene& scene) {
    std::mt19937_64 rng(scene.seed);
    const std::size_t j = scene.joints();
    Figure fig;
    if (scene.skeleton == human_skeleton()) {
        fig.offsets = human_offsets();
    } else {
        fig.offsets.resize(j);
        for (std::size_t i = 1; i < j; ++i) {
            const double len = uniform(rng, 0.3, 0.6);
            const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
            fig.offsets[i] = {len * std::cos(ang), len * std::sin(ang)};
        }
    }
    fig.swing.resize(j);
    fig.phase.resize(j);
    for (std::size_t i = 0; i < j; ++i) {
        fig.swing[i] = uniform(rng, 0.05, 0.15);
        fig.phase[i] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }

    // Longest root-to-joint chain bounds the figure's radius under any rotation.
    std::vector<double> reach(j, 0.0);
    double max_reach = 0.0;
    for (std::size_t i = 1; i < j; ++i) {
        const auto& o = fig.offsets[i];
        reach[i] = reach[static_cast<std::size_t>(scene.skeleton[i])] + std::hypot(o.x, o.y);
        max_reach = std::max(max_reach, reach[i]);
    }
    const double side = static_cast<double>(std::min(scene.image_h, scene.image_w));
    fig.path_radius = 0.06 * side;
    const double radius_px = uniform(rng, 0.32, 0.38) * side;
    fig.scale = max_reach > 0.0 ? radius_px / max_reach : 1.0;
    fig.center = {static_cast<double>(scene.image_w) / 2.0 + uniform(rng, -0.02, 0.02) * side,
                  static_cast<double>(scene.image_h) / 2.0 + uniform(rng, -0.02, 0.02) * side};
    fig.path_phase_x = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    fig.path_phase_y = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    fig.background = {uniform(rng, 0.05, 0.25), uniform(rng, 0.05, 0.25), uniform(rng, 0.05, 0.25)};
    for (std::size_t i = 0; i < j; ++i) {
        fig.joint_color.push_back(hue_color(static_cast<double>(i) / static_cast<double>(j)));
    }
    return fig;
}

inline std::vector<Keypoint> pose_at(const SynthScene& scene, const Figure& fig, double t) {
    const std::size_t j = scene.joints();
    std::vector<Keypoint> kp(j);
    std::vector<double> angle(j, 0.0);
    // Root speed is at most `amplitude` px/frame: |d/dt r sin(w t)| <= r w.
    const double w_path = fig.path_radius > 0.0 ? scene.amplitude / (fig.path_radius * std::numbers::sqrt2) : 0.0;
    kp[0] = {fig.center.x + fig.path_radius * std::sin(w_path * t + fig.path_phase_x),
             fig.center.y + fig.path_radius * std::sin(w_path * t + fig.path_phase_y)};
    for (std::size_t i = 1; i < j; ++i) {
        const auto p = static_cast<std::size_t>(scene.skeleton[i]);
        angle[i] = angle[p] + std::min(0.8, fig.swing[i] * scene.amplitude) * std::sin(0.3 * t + fig.phase[i]);
        const double c = std::cos(angle[i]), s = std::sin(angle[i]);
        const auto& o = fig.offsets[i];
        kp[i] = {kp[p].x + fig.scale * (c * o.x - s * o.y), kp[p].y + fig.scale * (s * o.x + c * o.y)};
    }
    return kp;
}

inline double segment_distance(double px, double py, const Keypoint& a, const Keypoint& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double u = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    return std::hypot(px - (a.x + u * dx), py - (a.y + u * dy));
}

inline void paint(Tensor& img, std::size_t y, std::size_t x, const std::array<double, 3>& color) {
    for (std::size_t c = 0; c < 3; ++c) {
        img(y, x, c) = color[c];
    }
}

inline Tensor render(const SynthScene& scene, const Figure& fig, const std::vector<Keypoint>& kp,
                     const Tensor& texture) {
    const std::size_t h = scene.image_h, w = scene.image_w;
    Tensor img({h, w, 3});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                img(y, x, c) = fig.background[c] + texture(y, x);
            }
        }
    }
    const double side = static_cast<double>(std::min(h, w));
    const double limb_half = std::max(1.0, 0.008 * side);
    const double disc = std::max(1.5, 0.015 * side);
    const std::array<double, 3> limb_color{0.85, 0.85, 0.8};

    const auto clamp_range = [](double lo, double hi, std::size_t n) {
        const auto a = static_cast<std::ptrdiff_t>(std::floor(lo));
        const auto b = static_cast<std::ptrdiff_t>(std::ceil(hi));
        return std::pair<std::size_t, std::size_t>{
            static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(a, 0, static_cast<std::ptrdiff_t>(n))),
            static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(b + 1, 0, static_cast<std::ptrdiff_t>(n)))};
    };

    for (std::size_t i = 1; i < kp.size(); ++i) {
        const auto& a = kp[static_cast<std::size_t>(scene.skeleton[i])];
        const auto& b = kp[i];
        auto [y0, y1] = clamp_range(std::min(a.y, b.y) - limb_half, std::max(a.y, b.y) + limb_half, h);
        auto [x0, x1] = clamp_range(std::min(a.x, b.x) - limb_half, std::max(a.x, b.x) + limb_half, w);
        for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) {
                if (segment_distance(static_cast<double>(x), static_cast<double>(y), a, b) <= limb_half) {
                    paint(img, y, x, limb_color);
                }
            }
        }
    }
    for (std::size_t i = 0; i < kp.size(); ++i) {
        auto [y0, y1] = clamp_range(kp[i].y - disc, kp[i].y + disc, h);
        auto [x0, x1] = clamp_range(kp[i].x - disc, kp[i].x + disc, w);
        for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = x0; x < x1; ++x) {
                if (std::hypot(static_cast<double>(x) - kp[i].x, static_cast<double>(y) - kp[i].y) <= disc) {
                    paint(img, y, x, fig.joint_color[i]);
                }
            }
        }
    }
    return img;
}

}  // namespace detail

/// Renders `length` consecutive frames of the scene.
inline std::vector<SynthFrame> generate_sequence(const SynthScene& scene, std::size_t length) {
    scene.validate();
    if (length < 3) {
        throw ArgumentError("generate_sequence: length must be >= 3, got " + std::to_string(length));
    }
    const auto fig = detail::make_figure(scene);
    std::mt19937_64 rng(scene.seed * 0x9e3779b97f4a7c15ull + 1);
    Tensor texture({scene.image_h, scene.image_w});
    for (double& v : texture.data()) {
        v = detail::uniform(rng, 0.0, 0.05);
    }
    std::vector<SynthFrame> frames;
    frames.reserve(length);
    for (std::size_t t = 0; t < length; ++t) {
        auto kp = detail::pose_at(scene, fig, static_cast<double>(t));
        frames.push_back({detail::render(scene, fig, kp, texture), std::move(kp)});
    }
    return frames;
}

/// Tight box around the keypoints, padded by `margin` pixels on every side.
inline BoundingBox person_box(const std::vector<Keypoint>& keypoints, double margin) {
    if (keypoints.empty()) {
        throw ArgumentError("person_box: no keypoints");
    }
    double x0 = keypoints[0].x, x1 = x0, y0 = keypoints[0].y, y1 = y0;
    for (const auto& k : keypoints) {
        x0 = std::min(x0, k.x);
        x1 = std::max(x1, k.x);
        y0 = std::min(y0, k.y);
        y1 = std::max(y1, k.y);
    }
    return {x0 - margin, y0 - margin, x1 - x0 + 2 * margin, y1 - y0 + 2 * margin};
}

/// Scales the box about its center by `factor` and clamps it to the image.
inline BoundingBox expand_box(const BoundingBox& box, std::size_t image_w, std::size_t image_h,
                              double factor = 1.25) {
    if (!(box.w > 0.0 && box.h > 0.0)) {
        throw ArgumentError("expand_box: box must have positive width and height");
    }
    const double cx = box.x + box.w / 2.0, cy = box.y + box.h / 2.0;
    const double w = box.w * factor, h = box.h * factor;
    const double x0 = std::max(0.0, cx - w / 2.0), y0 = std::max(0.0, cy - h / 2.0);
    const double x1 = std::min(static_cast<double>(image_w), cx + w / 2.0);
    const double y1 = std::min(static_cast<double>(image_h), cy + h / 2.0);
    if (!(x1 > x0 && y1 > y0)) {
        throw ArgumentError("expand_box: box does not intersect the image");
    }
    return {x0, y0, x1 - x0, y1 - y0};
}

/// Bilinear resample of `region` of an H x W x 3 image to out_h x out_w.
inline Tensor crop_resize(const Tensor& image, const BoundingBox& region, std::size_t out_h, std::size_t out_w) {
    require_rank(image, 3, "crop_resize");
    const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
    Tensor out({out_h, out_w, ch});
    const double sy = region.h / static_cast<double>(out_h);
    const double sx = region.w / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp(region.y + (static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0,
                                     static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double fx = std::clamp(region.x + (static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0,
                                         static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < ch; ++c) {
                out(oy, ox, c) = (1 - wy) * ((1 - wx) * image(y0, x0, c) + wx * image(y0, x1, c)) +
                                 wy * ((1 - wx) * image(y1, x0, c) + wx * image(y1, x1, c));
            }
        }
    }
    return out;
}

/// Expands the key-frame box by 25% and cuts the same region out of all three frames.
inline FrameTriplet expand_and_crop(const BoundingBox& box, const std::array<const Tensor*, 3>& frames,
                                    std::size_t out_h, std::size_t out_w) {
    const Shape& ref = frames[0]->shape();
    require_rank(*frames[0], 3, "expand_and_crop");
    for (const Tensor* f : frames) {
        if (f->shape() != ref) {
            throw ShapeError("expand_and_crop: frames differ in shape");
        }
    }
    FrameTriplet triplet;
    triplet.region = expand_box(box, ref[1], ref[0]);
    for (std::size_t i = 0; i < 3; ++i) {
        triplet.images[i] = crop_resize(*frames[i], triplet.region, out_h, out_w);
    }
    return triplet;
}

/// Maps source-image keypoints into heatmap pixel coordinates for a crop region.
inline std::vector<Keypoint> to_heatmap_coords(const std::vector<Keypoint>& keypoints, const BoundingBox& region,
                                               std::size_t hm_h, std::size_t hm_w) {
    std::vector<Keypoint> out;
    out.reserve(keypoints.size());
    const double sx = static_cast<double>(hm_w) / region.w;
    const double sy = static_cast<double>(hm_h) / region.h;
    for (const auto& k : keypoints) {
        out.push_back({(k.x + 0.5 - region.x) * sx - 0.5, (k.y + 0.5 - region.y) * sy - 0.5});
    }
    return out;
}

/**
 * One map per joint with a unit-peak Gaussian centered on the rounded keypoint.
 * Joints whose rounded location falls outside the map produce all-zero maps.
 */
inline Tensor render_gaussian_heatmaps(const std::vector<Keypoint>& keypoints, std::size_t hm_h, std::size_t hm_w,
                                       double sigma) {
    if (!(sigma > 0.0)) {
        throw ArgumentError("render_gaussian_heatmaps: sigma must be positive");
    }
    if (keypoints.empty()) {
        throw ArgumentError("render_gaussian_heatmaps: no keypoints");
    }
    Tensor maps({keypoints.size(), hm_h, hm_w});
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (std::size_t j = 0; j < keypoints.size(); ++j) {
        const double cx = std::round(keypoints[j].x), cy = std::round(keypoints[j].y);
        if (!(cx >= 0.0 && cy >= 0.0 && cx < static_cast<double>(hm_w) && cy < static_cast<double>(hm_h))) {
            continue;
        }
        for (std::size_t y = 0; y < hm_h; ++y) {
            for (std::size_t x = 0; x < hm_w; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                maps(j, y, x) = std::exp(-(dx * dx + dy * dy) * inv);
            }
        }
    }
    return maps;
}

/// Disc radius used when drawing joints; person boxes are padded by it.
inline double joint_margin(const SynthScene& scene) {
    return std::max(1.5, 0.015 * static_cast<double>(std::min(scene.image_h, scene.image_w)));
}

/// Builds a model-ready sample around frame `t` (t >= 1) of the scene's sequence.
inline TrainingSample make_sample(const SynthScene& scene, std::size_t t, const ModelConfig& cfg,
                                  double sigma = 2.0) {
    if (t < 1) {
        throw ArgumentError("make_sample: key frame needs a predecessor (t >= 1)");
    }
    if (scene.joints() != cfg.joints) {
        throw ArgumentError("make_sample: scene has " + std::to_string(scene.joints()) +
                            " joints, model expects " + std::to_string(cfg.joints));
    }
    const auto seq = generate_sequence(scene, t + 2);
    const auto box = person_box(seq[t].keypoints, joint_margin(scene));
    TrainingSample sample;
    sample.triplet = expand_and_crop(box, {&seq[t - 1].image, &seq[t].image, &seq[t + 1].image}, cfg.image_h,
                                     cfg.image_w);
    sample.triplet.person_id = 0;
    sample.triplet.frame_index = t;
    const auto hm = to_heatmap_coords(seq[t].keypoints, sample.triplet.region, cfg.hr_h(), cfg.hr_w());
    sample.target = render_gaussian_heatmaps(hm, cfg.hr_h(), cfg.hr_w(), sigma);
    return sample;
}

/// A fixed batch of samples from consecutive seeds.
inline std::vector<TrainingSample> make_batch(std::uint64_t seed, std::size_t count, const ModelConfig& cfg,
                                              double sigma = 2.0) {
    std::vector<TrainingSample> batch;
    for (std::size_t i = 0; i < count; ++i) {
        auto scene = SynthScene::with_joints(seed + i, cfg.joints);
        batch.push_back(make_sample(scene, 1 + i % 3, cfg, sigma));
    }
    return batch;
}

}  // namespace ftp::synth

#endif
