#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "canopyseg/errors.hpp"
#include "canopyseg/raster.hpp"
#include "canopyseg/rng.hpp"

namespace canopyseg {

// Two-species forest scene with controllable class imbalance. The majority
// canopy is a dark green; minority blobs are a yellow-green whose per-channel
// noise ranges overlap the majority's, so a single-pixel color threshold
// cannot separate the classes. Sandy ground cells are bright enough to trip
// the default brightness filter.
struct SceneConfig {
    int width = 512;
    int height = 512;
    double minority_fraction_target = 0.10;
    std::array<int, 2> blob_count_range = {0, 4000};
    std::array<int, 2> blob_radius_range = {6, 20};
    double ground_patch_probability = 0.08;
    int texture_noise_amplitude = 25;
    std::uint64_t seed = 0;

    void validate() const {
        if (width < kPatchSize || height < kPatchSize)
            throw ConfigError("scene must be at least 64x64, got " + std::to_string(width) + "x" +
                              std::to_string(height));
        if (minority_fraction_target <= 0.0 || minority_fraction_target >= 1.0)
            throw ConfigError("minority_fraction_target must be in (0, 1)");
        if (blob_count_range[0] < 0 || blob_count_range[0] > blob_count_range[1])
            throw ConfigError("blob_count_range must satisfy 0 <= lo <= hi");
        if (blob_radius_range[0] < 1 || blob_radius_range[0] > blob_radius_range[1])
            throw ConfigError("blob_radius_range must satisfy 1 <= lo <= hi");
        if (ground_patch_probability < 0.0 || ground_patch_probability > 1.0)
            throw ConfigError("ground_patch_probability must be in [0, 1]");
        if (texture_noise_amplitude < 0 || texture_noise_amplitude > 100)
            throw ConfigError("texture_noise_amplitude must be in [0, 100]");
    }
};

struct Scene {
    RgbRaster image;
    MaskRaster mask;
    double achieved_minority_fraction = 0.0;
};

namespace detail {

struct BaseColor {
    int r, g, b;
};

inline constexpr BaseColor kMajorityColor = {60, 95, 45};   // dark-green canopy
inline constexpr BaseColor kMinorityColor = {100, 125, 55}; // yellow-green, autumn contrast
inline constexpr BaseColor kGroundColor = {226, 209, 178};  // sandy ground, mean > 200

inline Rgba noisy(Rng& rng, BaseColor base, int amplitude, double shade = 1.0) {
    Rgba px;
    const int nr = static_cast<int>(rng.uniform_int(-amplitude, amplitude));
    const int ng = static_cast<int>(rng.uniform_int(-amplitude, amplitude));
    const int nb = static_cast<int>(rng.uniform_int(-amplitude, amplitude));
    px.r = static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(base.r * shade)) + nr, 0, 255));
    px.g = static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(base.g * shade)) + ng, 0, 255));
    px.b = static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(base.b * shade)) + nb, 0, 255));
    px.a = 255;
    return px;
}

} // namespace detail

// Deterministic scene synthesis: majority texture everywhere, elliptical
// minority blobs added until the mask fraction reaches the target (within
// the blob budget), then bright ground cells on 64-aligned tiles that hold
// no minority pixels. The mask is 1 exactly on minority pixels.
inline Scene generate(const SceneConfig& config) {
    config.validate();
    Rng rng(config.seed);

    Scene scene;
    scene.image.width = config.width;
    scene.image.height = config.height;
    scene.image.pixels.resize(static_cast<std::size_t>(config.width) * config.height);
    scene.mask = MaskRaster::zeros(config.width, config.height);

    for (Rgba& px : scene.image.pixels)
        px = detail::noisy(rng, detail::kMajorityColor, config.texture_noise_amplitude);

    // Ground cell decisions come before blob placement in the draw order so
    // the stream stays aligned regardless of how many blobs get painted.
    const int cells_x = config.width / kPatchSize;
    const int cells_y = config.height / kPatchSize;
    std::vector<std::uint8_t> ground_cell(static_cast<std::size_t>(cells_x) * cells_y, 0);
    for (auto& cell : ground_cell) cell = rng.bernoulli(config.ground_patch_probability) ? 1 : 0;

    const std::int64_t total_px = static_cast<std::int64_t>(config.width) * config.height;
    const double target = config.minority_fraction_target;
    std::int64_t mask_px = 0;
    int blobs = 0;
    while (blobs < config.blob_count_range[0] ||
           (static_cast<double>(mask_px) / static_cast<double>(total_px) < 0.95 * target &&
            blobs < config.blob_count_range[1])) {
        const int cx = static_cast<int>(rng.uniform_int(0, config.width - 1));
        const int cy = static_cast<int>(rng.uniform_int(0, config.height - 1));
        const int rx = static_cast<int>(rng.uniform_int(config.blob_radius_range[0], config.blob_radius_range[1]));
        const int ry = static_cast<int>(rng.uniform_int(config.blob_radius_range[0], config.blob_radius_range[1]));
        const double angle = rng.uniform(0.0, 3.141592653589793);
        const double ca = std::cos(angle), sa = std::sin(angle);

        const int extent = std::max(rx, ry);
        for (int y = std::max(0, cy - extent); y <= std::min(config.height - 1, cy + extent); ++y) {
            for (int x = std::max(0, cx - extent); x <= std::min(config.width - 1, cx + extent); ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = (ca * dx + sa * dy) / rx;
                const double v = (-sa * dx + ca * dy) / ry;
                const double d2 = u * u + v * v;
                if (d2 > 1.0) continue;
                // Radial shading: brighter crown center, darker rim.
                const double shade = 1.12 - 0.24 * std::sqrt(d2);
                scene.image.at(x, y) = detail::noisy(rng, detail::kMinorityColor, config.texture_noise_amplitude, shade);
                if (scene.mask.at(x, y) == 0) {
                    scene.mask.at(x, y) = 1;
                    ++mask_px;
                }
            }
        }
        ++blobs;
    }

    for (int cy = 0; cy < cells_y; ++cy) {
        for (int cx = 0; cx < cells_x; ++cx) {
            if (!ground_cell[static_cast<std::size_t>(cy) * cells_x + cx]) continue;
            bool touches_minority = false;
            for (int y = cy * kPatchSize; y < (cy + 1) * kPatchSize && !touches_minority; ++y)
                for (int x = cx * kPatchSize; x < (cx + 1) * kPatchSize; ++x)
                    if (scene.mask.at(x, y)) {
                        touches_minority = true;
                        break;
                    }
            if (touches_minority) continue;
            for (int y = cy * kPatchSize; y < (cy + 1) * kPatchSize; ++y)
                for (int x = cx * kPatchSize; x < (cx + 1) * kPatchSize; ++x)
                    scene.image.at(x, y) = detail::noisy(rng, detail::kGroundColor, config.texture_noise_amplitude);
        }
    }

    scene.achieved_minority_fraction = static_cast<double>(mask_px) / static_cast<double>(total_px);
    return scene;
}

inline nlohmann::json scene_config_to_json(const SceneConfig& c) {
    return {{"width", c.width},
            {"height", c.height},
            {"minority_fraction_target", c.minority_fraction_target},
            {"blob_count_range", c.blob_count_range},
            {"blob_radius_range", c.blob_radius_range},
            {"ground_patch_probability", c.ground_patch_probability},
            {"texture_noise_amplitude", c.texture_noise_amplitude},
            {"seed", c.seed}};
}

// Writes <id>.img.png / <id>.tgt.png plus a JSON sidecar with the config and
// the achieved minority fraction.
inline void write_scene(const std::string& dir, const std::string& id, const Scene& scene,
                        const SceneConfig& config) {
    std::filesystem::create_directories(dir);
    const auto base = (std::filesystem::path(dir) / id).string();
    save_rgb(base + ".img.png", scene.image);
    save_mask(base + ".tgt.png", scene.mask);
    nlohmann::json sidecar = {{"config", scene_config_to_json(config)},
                              {"achieved_minority_fraction", scene.achieved_minority_fraction}};
    std::ofstream out(base + ".json");
    if (!out) throw IoError("cannot open for writing: " + base + ".json");
    out << sidecar.dump(2) << "\n";
}

} // namespace canopyseg
