#ifndef FTP_IO_HPP
#define FTP_IO_HPP

#include "model.hpp"
#include "synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>

/**
 * @file io.hpp
 *
 * @brief Parameter checkpoints and synthetic-frame dumps.
 *
 * Checkpoint (JSON):
 *
 *     { "magic": "FTPPOSE-CKPT", "version": 1,
 *       "params": [ { "name": "...", "shape": [..], "data": [..] }, ... ] }
 *
 * Doubles are written with 17 significant digits, so a save/load cycle is exact.
 */

namespace ftp::io {

inline constexpr const char* kCheckpointMagic = "FTPPOSE-CKPT";
inline constexpr int kCheckpointVersion = 1;

/// Thrown for unreadable, malformed or mismatched files.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline nlohmann::json checkpoint_json(ModelParams& params) {
    nlohmann::json doc;
    doc["magic"] = kCheckpointMagic;
    doc["version"] = kCheckpointVersion;
    auto& list = doc["params"] = nlohmann::json::array();
    for (auto& [name, v] : params.named()) {
        list.push_back({{"name", name}, {"shape", v->value().shape()}, {"data", v->value().vec()}});
    }
    return doc;
}

inline void save_checkpoint(const std::string& path, ModelParams& params) {
    std::ofstream out(path);
    if (!out) {
        throw FormatError("cannot open " + path + " for writing");
    }
    out << checkpoint_json(params).dump();
}

/// Loads values into `params`; every name and shape must match exactly.
inline void load_checkpoint(const nlohmann::json& doc, ModelParams& params) {
    if (!doc.is_object() || doc.value("magic", "") != kCheckpointMagic) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    if (doc.value("version", 0) != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + doc.value("version", nlohmann::json()).dump());
    }
    auto named = params.named();
    const auto& list = doc.at("params");
    if (list.size() != named.size()) {
        throw FormatError("checkpoint has " + std::to_string(list.size()) + " parameters, model has " +
                          std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& entry = list[i];
        const auto& [name, var] = named[i];
        if (entry.at("name").get<std::string>() != name) {
            throw FormatError("parameter " + std::to_string(i) + " is " + entry.at("name").get<std::string>() +
                              ", expected " + name);
        }
        auto shape = entry.at("shape").get<Shape>();
        if (shape != var->value().shape()) {
            throw FormatError("parameter " + name + " has shape " + to_string(shape) + ", expected " +
                              to_string(var->value().shape()));
        }
        var->mutable_value() = Tensor(std::move(shape), entry.at("data").get<std::vector<double>>());
    }
}

inline void load_checkpoint(const std::string& path, ModelParams& params) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open " + path);
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    load_checkpoint(doc, params);
}

/// Writes the channel mean of an H x W x 3 image in [0, 1] as binary 8-bit PGM.
inline void write_pgm(const std::string& path, const Tensor& image) {
    require_rank(image, 3, "write_pgm");
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open " + path + " for writing");
    }
    const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
    out << "P5\n" << w << ' ' << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double v = 0.0;
            for (std::size_t c = 0; c < ch; ++c) {
                v += image(y, x, c);
            }
            v = std::clamp(v / static_cast<double>(ch), 0.0, 1.0);
            out.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
        }
    }
}

inline nlohmann::json frame_sidecar(const synth::SynthScene& scene, std::size_t index, const synth::SynthFrame& f) {
    nlohmann::json kp = nlohmann::json::array();
    for (const auto& k : f.keypoints) {
        kp.push_back({k.x, k.y});
    }
    return {{"schema", "ftp-synth-frame"}, {"version", 1},          {"seed", scene.seed},
            {"frame", index},              {"width", scene.image_w}, {"height", scene.image_h},
            {"amplitude", scene.amplitude}, {"skeleton", scene.skeleton}, {"keypoints", kp}};
}

}  // namespace ftp::io

#endif
