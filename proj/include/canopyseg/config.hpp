#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopyseg/dataset.hpp"
#include "canopyseg/errors.hpp"
#include "canopyseg/eval.hpp"
#include "canopyseg/model.hpp"
#include "canopyseg/synth.hpp"

namespace canopyseg {

struct FilterConfig {
    double brightness_threshold = 160.0;
    double blank_threshold = 0.25;
};

struct PathsConfig {
    std::string data;
    std::string out;
    std::string model;
    std::string manifest;
    std::string image;
    std::string mask;
};

// Union of every stage's knobs, loaded from one JSON file. Command-line
// flags override file values, which override the defaults.
struct RunConfig {
    SceneConfig scene;
    int scene_count = 1;
    AugmentConfig augment;
    UNetConfig model;
    TrainConfig train;
    FilterConfig filter;
    std::vector<double> calibration_grid = default_calibration_grid();
    PathsConfig paths;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& section,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError("config section must be an object: " + section);
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* key : allowed)
            if (it.key() == key) {
                known = true;
                break;
            }
        if (!known) throw ConfigError("unknown config key: " + section + "." + it.key());
    }
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

inline void maybe_range(const nlohmann::json& obj, const char* key, std::array<double, 2>& out) {
    if (!obj.contains(key)) return;
    const auto& a = obj.at(key);
    if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be a 2-element array");
    out = {a[0].get<double>(), a[1].get<double>()};
}

inline void maybe_range(const nlohmann::json& obj, const char* key, std::array<int, 2>& out) {
    if (!obj.contains(key)) return;
    const auto& a = obj.at(key);
    if (!a.is_array() || a.size() != 2) throw ConfigError(std::string(key) + " must be a 2-element array");
    out = {a[0].get<int>(), a[1].get<int>()};
}

} // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j, "(root)", {"scene", "augment", "model", "train", "filter", "calibration", "paths"});
    RunConfig cfg;

    if (j.contains("scene")) {
        const auto& s = j.at("scene");
        detail::check_keys(s, "scene",
                           {"width", "height", "minority_fraction_target", "blob_count_range", "blob_radius_range",
                            "ground_patch_probability", "texture_noise_amplitude", "seed", "count"});
        detail::maybe(s, "width", cfg.scene.width);
        detail::maybe(s, "height", cfg.scene.height);
        detail::maybe(s, "minority_fraction_target", cfg.scene.minority_fraction_target);
        detail::maybe_range(s, "blob_count_range", cfg.scene.blob_count_range);
        detail::maybe_range(s, "blob_radius_range", cfg.scene.blob_radius_range);
        detail::maybe(s, "ground_patch_probability", cfg.scene.ground_patch_probability);
        detail::maybe(s, "texture_noise_amplitude", cfg.scene.texture_noise_amplitude);
        detail::maybe(s, "seed", cfg.scene.seed);
        detail::maybe(s, "count", cfg.scene_count);
        if (cfg.scene_count < 1) throw ConfigError("scene.count must be >= 1");
    }

    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        detail::check_keys(a, "augment",
                           {"rot90", "flips", "brightness_range", "sharpness_range", "color_gain_range",
                            "channel_shift_max"});
        detail::maybe(a, "rot90", cfg.augment.rot90);
        detail::maybe(a, "flips", cfg.augment.flips);
        detail::maybe_range(a, "brightness_range", cfg.augment.brightness_range);
        detail::maybe_range(a, "sharpness_range", cfg.augment.sharpness_range);
        detail::maybe_range(a, "color_gain_range", cfg.augment.color_gain_range);
        detail::maybe(a, "channel_shift_max", cfg.augment.channel_shift_max);
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, "model",
                           {"depth", "base_channels", "dropout_p", "dropout_stages", "in_channels", "out_channels"});
        detail::maybe(m, "depth", cfg.model.depth);
        detail::maybe(m, "base_channels", cfg.model.base_channels);
        detail::maybe(m, "dropout_p", cfg.model.dropout_p);
        if (m.contains("dropout_stages")) cfg.model.dropout_stages = m.at("dropout_stages").get<std::vector<int>>();
        detail::maybe(m, "in_channels", cfg.model.in_channels);
        detail::maybe(m, "out_channels", cfg.model.out_channels);
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t, "train", {"learning_rate", "batch_size", "epochs", "loss_a", "seed", "weighting"});
        detail::maybe(t, "learning_rate", cfg.train.learning_rate);
        detail::maybe(t, "batch_size", cfg.train.batch_size);
        detail::maybe(t, "epochs", cfg.train.epochs);
        detail::maybe(t, "loss_a", cfg.train.loss_a);
        detail::maybe(t, "seed", cfg.train.seed);
        detail::maybe(t, "weighting", cfg.train.weighting);
    }

    if (j.contains("filter")) {
        const auto& f = j.at("filter");
        detail::check_keys(f, "filter", {"brightness_threshold", "blank_threshold"});
        detail::maybe(f, "brightness_threshold", cfg.filter.brightness_threshold);
        detail::maybe(f, "blank_threshold", cfg.filter.blank_threshold);
    }

    if (j.contains("calibration")) {
        const auto& c = j.at("calibration");
        detail::check_keys(c, "calibration", {"grid"});
        detail::maybe(c, "grid", cfg.calibration_grid);
        for (double t : cfg.calibration_grid)
            if (t <= 0.0 || t >= 1.0) throw ConfigError("calibration grid thresholds must be in (0, 1)");
        if (cfg.calibration_grid.empty()) throw ConfigError("calibration grid must not be empty");
    }

    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::check_keys(p, "paths", {"data", "out", "model", "manifest", "image", "mask"});
        detail::maybe(p, "data", cfg.paths.data);
        detail::maybe(p, "out", cfg.paths.out);
        detail::maybe(p, "model", cfg.paths.model);
        detail::maybe(p, "manifest", cfg.paths.manifest);
        detail::maybe(p, "image", cfg.paths.image);
        detail::maybe(p, "mask", cfg.paths.mask);
    }

    cfg.scene.validate();
    cfg.augment.validate();
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.filter.brightness_threshold < 0.0 || cfg.filter.brightness_threshold > 255.0)
        throw ConfigError("filter.brightness_threshold must be in [0, 255]");
    if (cfg.filter.blank_threshold < 0.0 || cfg.filter.blank_threshold > 1.0)
        throw ConfigError("filter.blank_threshold must be in [0, 1]");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad config " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

} // namespace canopyseg
