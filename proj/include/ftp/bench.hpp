#ifndef FTP_BENCH_HPP
#define FTP_BENCH_HPP

#include "io.hpp"
#include "model.hpp"
#include "synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file bench.hpp
 *
 * @brief Configuration, benchmark suites and report emission behind the CLI.
 */

namespace ftp::bench {

inline constexpr const char* kReportSchema = "ftp-bench-report";
inline constexpr int kReportVersion = 1;

/// Thrown for malformed configuration; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BenchConfig {
    ModelConfig model = ModelConfig::standard();
    std::string preset = "standard";
    std::size_t warmup = 1;
    std::size_t iters = 5;
    std::uint64_t seed = 0;
    std::string out;
    double learning_rate = 0.05;
    /// Global gradient-norm cap for training; 0 disables clipping.
    double clip_norm = 1.0;
    std::size_t steps = 200;
    std::size_t batch = 2;
    std::vector<std::size_t> ratios{1, 3, 6, 10};
    std::size_t grid_steps = 30;
    double gradcheck_eps = 1e-4;
    double gradcheck_tolerance = 1e-4;

    void validate() const {
        model.validate();
        if (iters < 1) {
            throw ConfigError("iters must be >= 1");
        }
        if (!(learning_rate >= 0.0)) {
            throw ConfigError("learning_rate must be non-negative");
        }
        if (!(clip_norm >= 0.0)) {
            throw ConfigError("clip_norm must be non-negative");
        }
        if (batch < 1) {
            throw ConfigError("batch must be >= 1");
        }
        if (ratios.empty()) {
            throw ConfigError("ratios must not be empty");
        }
        for (auto r : ratios) {
            if (r < 1) {
                throw ConfigError("every ratio must be >= 1");
            }
        }
    }
};

inline ModelConfig preset_config(const std::string& name) {
    if (name == "standard") {
        return ModelConfig::standard();
    }
    if (name == "small") {
        return ModelConfig::small();
    }
    if (name == "tiny") {
        return ModelConfig::tiny();
    }
    throw ConfigError("unknown preset '" + name + "' (expected standard, small or tiny)");
}

// ---------------------------------------------------------------------------
// JSON <-> config
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const dpc::DpcConfig& c) {
    nlohmann::json j{{"k", c.k}, {"epsilon", c.epsilon}};
    j["tau"] = c.tau ? nlohmann::json(*c.tau) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"image_h", c.image_h},
            {"image_w", c.image_w},
            {"patch", c.patch},
            {"embed_dim", c.embed_dim},
            {"heads", c.heads},
            {"joints", c.joints},
            {"blocks", c.blocks},
            {"backbone_blocks", c.backbone_blocks},
            {"upsample", c.upsample},
            {"mlp_ratio", c.mlp_ratio},
            {"hr_pos_embed", c.hr_pos_embed},
            {"hr", to_json(c.hr)},
            {"lr", to_json(c.lr)}};
}

inline nlohmann::json to_json(const BenchConfig& c) {
    return {{"preset", c.preset},
            {"model", to_json(c.model)},
            {"warmup", c.warmup},
            {"iters", c.iters},
            {"seed", c.seed},
            {"learning_rate", c.learning_rate},
            {"clip_norm", c.clip_norm},
            {"steps", c.steps},
            {"batch", c.batch},
            {"ratios", c.ratios},
            {"grid_steps", c.grid_steps},
            {"gradcheck_eps", c.gradcheck_eps},
            {"gradcheck_tolerance", c.gradcheck_tolerance}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

inline void apply_dpc(const nlohmann::json& j, dpc::DpcConfig& c, const std::string& where) {
    reject_unknown(j, {"k", "tau", "epsilon"}, where);
    read(j, "k", c.k);
    read(j, "epsilon", c.epsilon);
    if (j.contains("tau")) {
        c.tau = j.at("tau").is_null() ? std::nullopt : std::optional<double>(j.at("tau").get<double>());
    }
}

inline void apply_model(const nlohmann::json& j, ModelConfig& c) {
    reject_unknown(j,
                   {"image_h", "image_w", "patch", "embed_dim", "heads", "joints", "blocks", "backbone_blocks",
                    "upsample", "mlp_ratio", "hr_pos_embed", "hr", "lr"},
                   "model");
    read(j, "image_h", c.image_h);
    read(j, "image_w", c.image_w);
    read(j, "patch", c.patch);
    read(j, "embed_dim", c.embed_dim);
    read(j, "heads", c.heads);
    read(j, "joints", c.joints);
    read(j, "blocks", c.blocks);
    read(j, "backbone_blocks", c.backbone_blocks);
    read(j, "upsample", c.upsample);
    read(j, "mlp_ratio", c.mlp_ratio);
    read(j, "hr_pos_embed", c.hr_pos_embed);
    if (j.contains("hr")) {
        apply_dpc(j.at("hr"), c.hr, "model.hr");
    }
    if (j.contains("lr")) {
        apply_dpc(j.at("lr"), c.lr, "model.lr");
    }
}

}  // namespace detail

/**
 * Builds a config from a JSON document on top of `base`. A "preset" key
 * replaces the model section before "model" overrides are applied.
 */
inline BenchConfig config_from_json(const nlohmann::json& j, BenchConfig base) {
    try {
        if (!j.is_object()) {
            throw ConfigError("config must be a JSON object");
        }
        detail::reject_unknown(j,
                               {"preset", "model", "warmup", "iters", "seed", "out", "learning_rate", "clip_norm",
                                "steps", "batch", "ratios", "grid_steps", "gradcheck_eps", "gradcheck_tolerance"},
                               "config");
        if (j.contains("preset")) {
            base.preset = j.at("preset").get<std::string>();
            base.model = preset_config(base.preset);
        }
        if (j.contains("model")) {
            detail::apply_model(j.at("model"), base.model);
        }
        detail::read(j, "warmup", base.warmup);
        detail::read(j, "iters", base.iters);
        detail::read(j, "seed", base.seed);
        detail::read(j, "out", base.out);
        detail::read(j, "learning_rate", base.learning_rate);
        detail::read(j, "clip_norm", base.clip_norm);
        detail::read(j, "steps", base.steps);
        detail::read(j, "batch", base.batch);
        detail::read(j, "ratios", base.ratios);
        detail::read(j, "grid_steps", base.grid_steps);
        detail::read(j, "gradcheck_eps", base.gradcheck_eps);
        detail::read(j, "gradcheck_tolerance", base.gradcheck_tolerance);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return base;
}

inline BenchConfig load_config(const std::string& path, BenchConfig base) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return config_from_json(j, std::move(base));
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

struct LatencyStats {
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
};

/// Nearest-rank percentiles.
inline LatencyStats latency_stats(std::vector<double> ms) {
    LatencyStats s;
    if (ms.empty()) {
        return s;
    }
    std::sort(ms.begin(), ms.end());
    double total = 0.0;
    for (double v : ms) {
        total += v;
    }
    s.mean_ms = total / static_cast<double>(ms.size());
    const auto rank = [&](double q) {
        auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(ms.size())));
        return ms[std::clamp<std::size_t>(r, 1, ms.size()) - 1];
    };
    s.p50_ms = rank(0.50);
    s.p95_ms = rank(0.95);
    return s;
}

struct TimingResult {
    std::vector<double> iteration_ms;
    double total_seconds = 0.0;
    std::uint64_t macs = 0;
    TokenLedger ledger;

    double throughput() const {
        return total_seconds > 0.0 ? static_cast<double>(iteration_ms.size()) / total_seconds : 0.0;
    }
};

/// Single-threaded timing loop for forward_full after `warmup` untimed calls.
inline TimingResult time_forward(const FrameTriplet& triplet, const ModelConfig& cfg, const ModelParams& params,
                                 Variant variant, std::size_t warmup, std::size_t iters) {
    NoGradGuard no_grad;
    ForwardOptions opts;
    opts.variant = variant;
    TimingResult r;
    {
        MacScope scope;
        r.ledger = forward_full(triplet, cfg, params, opts).ledger;
        r.macs = scope.elapsed();
    }
    for (std::size_t i = 1; i < warmup; ++i) {
        forward_full(triplet, cfg, params, opts);
    }
    using clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < iters; ++i) {
        const auto t0 = clock::now();
        auto out = forward_full(triplet, cfg, params, opts);
        const auto t1 = clock::now();
        const double sec = std::chrono::duration<double>(t1 - t0).count();
        r.iteration_ms.push_back(sec * 1e3);
        r.total_seconds += sec;
    }
    return r;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct VariantReport {
    std::string name;
    Variant variant = Variant::kMultiGrained;
    std::size_t eps_hrb = 1;
    std::size_t eps_lrb = 1;
    std::uint64_t macs = 0;
    std::uint64_t macs_analytic = 0;
    LatencyStats latency;
    double throughput = 0.0;
    double total_seconds = 0.0;
    std::size_t iterations = 0;
    TokenLedger ledger;
};

struct BenchReport {
    BenchConfig config;
    std::vector<VariantReport> variants;

    const VariantReport& get(const std::string& name) const {
        for (const auto& v : variants) {
            if (v.name == name) {
                return v;
            }
        }
        throw std::out_of_range("no variant " + name);
    }
};

inline nlohmann::json to_json(const TokenLedger& l) {
    return {{"per_frame", l.per_frame},
            {"hr_tokens", l.hr_tokens},
            {"hr_kept", l.hr_kept},
            {"temporal_tokens", l.temporal_tokens},
            {"lr_kept", l.lr_kept}};
}

inline nlohmann::json to_json(const BenchReport& r) {
    nlohmann::json variants = nlohmann::json::array();
    for (const auto& v : r.variants) {
        variants.push_back({{"name", v.name},
                            {"kind", to_string(v.variant)},
                            {"eps_hrb", v.eps_hrb},
                            {"eps_lrb", v.eps_lrb},
                            {"macs", v.macs},
                            {"macs_analytic", v.macs_analytic},
                            {"latency_ms",
                             {{"mean", v.latency.mean_ms}, {"p50", v.latency.p50_ms}, {"p95", v.latency.p95_ms}}},
                            {"throughput_per_s", v.throughput},
                            {"timed_seconds", v.total_seconds},
                            {"iterations", v.iterations},
                            {"tokens", to_json(v.ledger)}});
    }
    return {{"schema", kReportSchema},
            {"version", kReportVersion},
            {"command", "bench"},
            {"config", to_json(r.config)},
            {"seed", r.config.seed},
            {"variants", variants}};
}

/**
 * Times three variants: the unpruned low-resolution baseline, (a) both branches
 * without pruning, and (b) both branches pruned with the configured ratios.
 */
inline BenchReport run_bench(const BenchConfig& cfg) {
    cfg.validate();
    auto scene = synth::SynthScene::with_joints(cfg.seed, cfg.model.joints);
    const auto sample = synth::make_sample(scene, 1, cfg.model);
    const auto params = ModelParams::init(cfg.model, cfg.seed);

    struct Spec {
        const char* name;
        Variant variant;
        std::size_t hrb, lrb;
    };
    const Spec specs[] = {{"baseline", Variant::kBaseline, 1, 1},
                          {"a", Variant::kMultiGrained, 1, 1},
                          {"b", Variant::kMultiGrained, cfg.model.hr.epsilon, cfg.model.lr.epsilon}};

    BenchReport report;
    report.config = cfg;
    for (const auto& s : specs) {
        ModelConfig mc = cfg.model;
        mc.hr.epsilon = s.hrb;
        mc.lr.epsilon = s.lrb;
        auto t = time_forward(sample.triplet, mc, params, s.variant, cfg.warmup, cfg.iters);
        VariantReport v;
        v.name = s.name;
        v.variant = s.variant;
        v.eps_hrb = s.hrb;
        v.eps_lrb = s.lrb;
        v.macs = t.macs;
        v.macs_analytic = analytic_macs(mc, s.variant);
        v.latency = latency_stats(t.iteration_ms);
        v.throughput = t.throughput();
        v.total_seconds = t.total_seconds;
        v.iterations = t.iteration_ms.size();
        v.ledger = t.ledger;
        report.variants.push_back(std::move(v));
    }
    return report;
}

// ---------------------------------------------------------------------------
// train-smoke
// ---------------------------------------------------------------------------

struct TrainCurve {
    /// Loss before each step, followed by the loss after the last step.
    std::vector<double> losses;
    bool diverged = false;
    std::size_t diverged_at = 0;
    std::string error;

    double initial() const { return losses.empty() ? 0.0 : losses.front(); }
    double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
    bool reduced_by_half() const { return !diverged && !losses.empty() && final_loss() <= 0.5 * initial(); }
};

inline double evaluate_loss(std::span<const TrainingSample> batch, const ModelConfig& cfg,
                            const ModelParams& params) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (const auto& s : batch) {
        total += heatmap_loss(forward_full(s.triplet, cfg, params).heatmap.value(), s.target);
    }
    return total / static_cast<double>(batch.size());
}

/// Gradient descent on a fixed synthetic batch, clipped to `clip_norm` when it is positive.
inline TrainCurve train_curve(const ModelConfig& cfg, std::uint64_t seed, std::size_t steps, std::size_t batch_size,
                              double lr, double clip_norm, ModelParams* trained = nullptr) {
    auto params = ModelParams::init(cfg, seed);
    const auto batch = synth::make_batch(seed, batch_size, cfg);
    TrainCurve curve;
    for (std::size_t step = 0; step < steps; ++step) {
        try {
            curve.losses.push_back(train_step(batch, cfg, params, lr, clip_norm));
        } catch (const TrainingError& e) {
            curve.diverged = true;
            curve.diverged_at = step;
            curve.error = e.what();
            return curve;
        }
    }
    const double last = evaluate_loss(batch, cfg, params);
    if (!std::isfinite(last)) {
        curve.diverged = true;
        curve.diverged_at = steps;
        curve.error = "non-finite loss after final step";
        return curve;
    }
    curve.losses.push_back(last);
    if (trained) {
        *trained = std::move(params);
    }
    return curve;
}

inline std::string curve_csv(const TrainCurve& c) {
    std::ostringstream out;
    out.precision(17);
    out << "step,loss\n";
    for (std::size_t i = 0; i < c.losses.size(); ++i) {
        out << i << ',' << c.losses[i] << '\n';
    }
    return out.str();
}

inline nlohmann::json to_json(const TrainCurve& c, const BenchConfig& cfg) {
    return {{"schema", kReportSchema},
            {"version", kReportVersion},
            {"command", "train-smoke"},
            {"config", to_json(cfg)},
            {"seed", cfg.seed},
            {"initial_loss", c.initial()},
            {"final_loss", c.final_loss()},
            {"ratio", c.initial() > 0 ? c.final_loss() / c.initial() : 0.0},
            {"passed", c.reduced_by_half()},
            {"diverged", c.diverged},
            {"diverged_at", c.diverged_at},
            {"error", c.error},
            {"losses", c.losses}};
}

// ---------------------------------------------------------------------------
// ratio-grid
// ---------------------------------------------------------------------------

struct GridCell {
    std::size_t eps_hrb = 1;
    std::size_t eps_lrb = 1;
    std::size_t hr_kept = 0;
    std::size_t lr_kept = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double throughput = 0.0;
    std::uint64_t macs = 0;
    std::uint64_t macs_analytic = 0;
    std::string error;
};

struct GridReport {
    BenchConfig config;
    std::vector<std::size_t> ratios;
    /// Row-major over (eps_hrb, eps_lrb).
    std::vector<GridCell> cells;

    const GridCell& at(std::size_t hrb_index, std::size_t lrb_index) const {
        return cells.at(hrb_index * ratios.size() + lrb_index);
    }
};

/// Trains and times one model per (eps_hrb, eps_lrb) pair. Training failures are recorded per cell.
inline GridReport run_ratio_grid(const BenchConfig& cfg) {
    cfg.validate();
    GridReport report;
    report.config = cfg;
    report.ratios = cfg.ratios;
    for (auto hrb : cfg.ratios) {
        for (auto lrb : cfg.ratios) {
            ModelConfig mc = cfg.model;
            mc.hr.epsilon = hrb;
            mc.lr.epsilon = lrb;
            GridCell cell;
            cell.eps_hrb = hrb;
            cell.eps_lrb = lrb;
            cell.hr_kept = mc.hr_kept();
            cell.lr_kept = mc.lr_kept();
            cell.macs_analytic = analytic_macs(mc, Variant::kMultiGrained);
            ModelParams params;
            auto curve =
                train_curve(mc, cfg.seed, cfg.grid_steps, cfg.batch, cfg.learning_rate, cfg.clip_norm, &params);
            if (curve.diverged) {
                cell.error = curve.error;
                params = ModelParams::init(mc, cfg.seed);
            } else {
                cell.initial_loss = curve.initial();
                cell.final_loss = curve.final_loss();
            }
            const auto batch = synth::make_batch(cfg.seed, 1, mc);
            auto t = time_forward(batch[0].triplet, mc, params, Variant::kMultiGrained, cfg.warmup, cfg.iters);
            cell.throughput = t.throughput();
            cell.macs = t.macs;
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

inline std::string grid_csv(const GridReport& r) {
    std::ostringstream out;
    out.precision(17);
    out << "eps_hrb,eps_lrb,hr_kept,lr_kept,initial_loss,final_loss,throughput_per_s,macs,macs_analytic,error\n";
    for (const auto& c : r.cells) {
        out << c.eps_hrb << ',' << c.eps_lrb << ',' << c.hr_kept << ',' << c.lr_kept << ',' << c.initial_loss << ','
            << c.final_loss << ',' << c.throughput << ',' << c.macs << ',' << c.macs_analytic << ",\"" << c.error
            << "\"\n";
    }
    return out.str();
}

inline nlohmann::json to_json(const GridReport& r) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"eps_hrb", c.eps_hrb},
                         {"eps_lrb", c.eps_lrb},
                         {"hr_kept", c.hr_kept},
                         {"lr_kept", c.lr_kept},
                         {"initial_loss", c.initial_loss},
                         {"final_loss", c.final_loss},
                         {"throughput_per_s", c.throughput},
                         {"macs", c.macs},
                         {"macs_analytic", c.macs_analytic},
                         {"error", c.error}});
    }
    return {{"schema", kReportSchema}, {"version", kReportVersion}, {"command", "ratio-grid"},
            {"config", to_json(r.config)}, {"seed", r.config.seed},    {"ratios", r.ratios},
            {"cells", cells}};
}

/// True when MACs strictly fall as either ratio grows with the other held fixed.
inline bool grid_macs_monotone(const GridReport& r) {
    const std::size_t n = r.ratios.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j + 1 < n; ++j) {
            if (r.ratios[j + 1] > r.ratios[j]) {
                if (!(r.at(i, j + 1).macs < r.at(i, j).macs)) {
                    return false;
                }
                if (!(r.at(j + 1, i).macs < r.at(j, i).macs)) {
                    return false;
                }
            }
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

inline constexpr std::size_t kGradcheckMaxImage = 64;

inline GradcheckReport run_gradcheck(const BenchConfig& cfg, const std::string& corrupt_param = {}) {
    cfg.validate();
    if (cfg.model.image_h > kGradcheckMaxImage || cfg.model.image_w > kGradcheckMaxImage) {
        throw ConfigError("gradcheck needs a tiny config (image at most 64x64), got " +
                          std::to_string(cfg.model.image_h) + "x" + std::to_string(cfg.model.image_w));
    }
    auto params = ModelParams::init(cfg.model, cfg.seed);
    if (!corrupt_param.empty()) {
        bool found = false;
        for (auto& [name, v] : params.named()) {
            found = found || name == corrupt_param;
        }
        if (!found) {
            throw ConfigError("no parameter named " + corrupt_param);
        }
    }
    auto scene = synth::SynthScene::with_joints(cfg.seed, cfg.model.joints);
    const auto sample = synth::make_sample(scene, 1, cfg.model);
    GradHook hook;
    if (!corrupt_param.empty()) {
        hook = [corrupt_param](const std::string& name, Tensor& g) {
            if (name == corrupt_param) {
                g[0] += 1.0;
            }
        };
    }
    return pipeline_gradcheck(sample, cfg.model, params, cfg.gradcheck_eps, hook);
}

inline nlohmann::json to_json(const GradcheckReport& r, const BenchConfig& cfg) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : r.params) {
        params.push_back({{"name", p.name}, {"max_error", p.max_error}, {"worst_index", p.worst_index}});
    }
    return {{"schema", kReportSchema},
            {"version", kReportVersion},
            {"command", "gradcheck"},
            {"config", to_json(cfg)},
            {"seed", cfg.seed},
            {"tolerance", cfg.gradcheck_tolerance},
            {"max_error", r.max_error},
            {"worst_param", r.worst_param},
            {"coordinates", r.coordinates},
            {"passed", r.passed(cfg.gradcheck_tolerance)},
            {"params", params}};
}

}  // namespace ftp::bench

#endif
