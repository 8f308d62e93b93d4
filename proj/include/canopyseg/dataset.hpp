#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopyseg/errors.hpp"
#include "canopyseg/raster.hpp"
#include "canopyseg/rng.hpp"

namespace canopyseg {

// Patch coverage bins. Boundaries are floors of 20%, 50% and 80% of the
// 4096 pixels in a patch: C0 = 0, C1_20 = 1..819, C21_50 = 820..2048,
// C51_80 = 2049..3276, C81_100 = 3277..4096.
enum class CoverageCategory { C0 = 0, C1_20, C21_50, C51_80, C81_100 };

inline constexpr int kCategoryCount = 5;
inline constexpr int kCoverage20 = kPatchPixels * 20 / 100; // 819
inline constexpr int kCoverage50 = kPatchPixels * 50 / 100; // 2048
inline constexpr int kCoverage80 = kPatchPixels * 80 / 100; // 3276

inline const char* category_name(CoverageCategory c) {
    switch (c) {
    case CoverageCategory::C0: return "C0";
    case CoverageCategory::C1_20: return "C1_20";
    case CoverageCategory::C21_50: return "C21_50";
    case CoverageCategory::C51_80: return "C51_80";
    case CoverageCategory::C81_100: return "C81_100";
    }
    return "?";
}

inline CoverageCategory parse_category(const std::string& name) {
    for (int i = 0; i < kCategoryCount; ++i) {
        const auto c = static_cast<CoverageCategory>(i);
        if (name == category_name(c)) return c;
    }
    throw FormatError("unknown coverage category: " + name);
}

enum class Split { Train = 0, Val, Test, Unassigned };

inline const char* split_name(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
    }
    return "?";
}

inline Split parse_split(const std::string& name) {
    for (int i = 0; i < 4; ++i) {
        const auto s = static_cast<Split>(i);
        if (name == split_name(s)) return s;
    }
    throw FormatError("unknown split: " + name);
}

// Count of 1-pixels in a binary target map.
inline int coverage(const std::vector<std::uint8_t>& target) {
    int count = 0;
    for (std::uint8_t v : target) count += v ? 1 : 0;
    return count;
}

inline CoverageCategory categorize(int coverage_px) {
    if (coverage_px < 0 || coverage_px > kPatchPixels)
        throw ArgumentError("coverage_px out of range: " + std::to_string(coverage_px));
    if (coverage_px == 0) return CoverageCategory::C0;
    if (coverage_px <= kCoverage20) return CoverageCategory::C1_20;
    if (coverage_px <= kCoverage50) return CoverageCategory::C21_50;
    if (coverage_px <= kCoverage80) return CoverageCategory::C51_80;
    return CoverageCategory::C81_100;
}

// One labeled 64x64 sample. `image` is interleaved RGB (alpha dropped after
// filtering), `target` holds {0,1}.
struct PatchSample {
    std::string id;
    std::vector<std::uint8_t> image;  // kPatchPixels * 3
    std::vector<std::uint8_t> target; // kPatchPixels
    int coverage_px = 0;
    CoverageCategory category = CoverageCategory::C0;
    Split split = Split::Unassigned;
};

inline PatchSample make_sample(std::string id, const Patch& patch) {
    PatchSample s;
    s.id = std::move(id);
    s.image.resize(static_cast<std::size_t>(kPatchPixels) * 3);
    s.target.resize(kPatchPixels);
    for (int i = 0; i < kPatchPixels; ++i) {
        const Rgba& px = patch.image.pixels[i];
        s.image[3 * i + 0] = px.r;
        s.image[3 * i + 1] = px.g;
        s.image[3 * i + 2] = px.b;
        s.target[i] = patch.target.values[i] ? 1 : 0;
    }
    s.coverage_px = coverage(s.target);
    s.category = categorize(s.coverage_px);
    return s;
}

// ---------------------------------------------------------------------------
// Spatial transforms. All are pure index remaps, so binary targets are never
// interpolated and composing a transform with its inverse is bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

template <int Channels>
void remap64(const std::vector<std::uint8_t>& src, std::vector<std::uint8_t>& dst, int sx_of_x, int sx_of_y,
             int sx_add, int sy_of_x, int sy_of_y, int sy_add) {
    const int n = kPatchSize;
    dst.resize(src.size());
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const int sx = sx_of_x * x + sx_of_y * y + sx_add;
            const int sy = sy_of_x * x + sy_of_y * y + sy_add;
            for (int c = 0; c < Channels; ++c)
                dst[(static_cast<std::size_t>(y) * n + x) * Channels + c] =
                    src[(static_cast<std::size_t>(sy) * n + sx) * Channels + c];
        }
    }
}

} // namespace detail

// 90-degree clockwise rotation: dst(x, y) = src(y, N-1-x).
template <int Channels>
std::vector<std::uint8_t> rotate90(const std::vector<std::uint8_t>& src) {
    std::vector<std::uint8_t> dst;
    detail::remap64<Channels>(src, dst, 0, 1, 0, -1, 0, kPatchSize - 1);
    return dst;
}

template <int Channels>
std::vector<std::uint8_t> hflip(const std::vector<std::uint8_t>& src) {
    std::vector<std::uint8_t> dst;
    detail::remap64<Channels>(src, dst, -1, 0, kPatchSize - 1, 0, 1, 0);
    return dst;
}

template <int Channels>
std::vector<std::uint8_t> vflip(const std::vector<std::uint8_t>& src) {
    std::vector<std::uint8_t> dst;
    detail::remap64<Channels>(src, dst, 1, 0, 0, 0, -1, kPatchSize - 1);
    return dst;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    bool rot90 = true;
    bool flips = true;
    std::array<double, 2> brightness_range = {0.8, 1.2};
    std::array<double, 2> sharpness_range = {0.0, 0.5};
    std::array<double, 2> color_gain_range = {0.9, 1.1};
    int channel_shift_max = 10;

    void validate() const {
        if (brightness_range[0] > brightness_range[1] || sharpness_range[0] > sharpness_range[1] ||
            color_gain_range[0] > color_gain_range[1])
            throw ConfigError("augment ranges must have lo <= hi");
        if (channel_shift_max < 0 || channel_shift_max > 255)
            throw ConfigError("channel_shift_max must be in [0, 255]");
    }
};

namespace detail {

// 3x3 box blur with clamped borders, per channel.
inline std::vector<double> box_blur3(const std::vector<double>& src) {
    const int n = kPatchSize;
    std::vector<double> dst(src.size());
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            for (int c = 0; c < 3; ++c) {
                double sum = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sx = std::clamp(x + dx, 0, n - 1);
                        const int sy = std::clamp(y + dy, 0, n - 1);
                        sum += src[(static_cast<std::size_t>(sy) * n + sx) * 3 + c];
                    }
                }
                dst[(static_cast<std::size_t>(y) * n + x) * 3 + c] = sum / 9.0;
            }
        }
    }
    return dst;
}

} // namespace detail

// Draws one spatial transform uniformly from {rot90^k} x {none, hflip, vflip}
// and applies it to image and target alike, then photometric adjustments
// (brightness scale, unsharp blend, per-channel gain, per-channel shift) to
// the image only. Deterministic given rng_seed.
inline PatchSample augment(const PatchSample& sample, const AugmentConfig& config, std::uint64_t rng_seed) {
    config.validate();
    Rng rng(rng_seed);

    PatchSample out = sample;

    const int rotations = config.rot90 ? static_cast<int>(rng.uniform_int(0, 3)) : 0;
    const int flip = config.flips ? static_cast<int>(rng.uniform_int(0, 2)) : 0;

    for (int k = 0; k < rotations; ++k) {
        out.image = rotate90<3>(out.image);
        out.target = rotate90<1>(out.target);
    }
    if (flip == 1) {
        out.image = hflip<3>(out.image);
        out.target = hflip<1>(out.target);
    } else if (flip == 2) {
        out.image = vflip<3>(out.image);
        out.target = vflip<1>(out.target);
    }

    const double brightness = rng.uniform(config.brightness_range[0], config.brightness_range[1]);
    const double sharpness = rng.uniform(config.sharpness_range[0], config.sharpness_range[1]);
    std::array<double, 3> gain;
    for (double& g : gain) g = rng.uniform(config.color_gain_range[0], config.color_gain_range[1]);
    std::array<int, 3> shift;
    for (int& s : shift) s = static_cast<int>(rng.uniform_int(-config.channel_shift_max, config.channel_shift_max));

    std::vector<double> img(out.image.begin(), out.image.end());
    if (sharpness != 0.0) {
        // Unsharp result = img + (img - blur); blend between original and it.
        const std::vector<double> blur = detail::box_blur3(img);
        for (std::size_t i = 0; i < img.size(); ++i) {
            const double unsharp = 2.0 * img[i] - blur[i];
            img[i] = (1.0 - sharpness) * img[i] + sharpness * unsharp;
        }
    }
    for (std::size_t i = 0; i < img.size(); ++i) {
        const int c = static_cast<int>(i % 3);
        const double v = img[i] * brightness * gain[c] + shift[c];
        out.image[i] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
    }

    out.coverage_px = coverage(out.target);
    out.category = categorize(out.coverage_px);
    return out;
}

// ---------------------------------------------------------------------------
// Stratified split
// ---------------------------------------------------------------------------

struct SplitManifest {
    std::uint64_t seed = 0;
    std::array<double, 3> ratios = {0.6, 0.2, 0.2};
    struct Entry {
        std::string id;
        CoverageCategory category = CoverageCategory::C0;
        Split split = Split::Unassigned;
    };
    std::vector<Entry> entries;

    Split split_of(const std::string& id) const {
        for (const Entry& e : entries)
            if (e.id == id) return e.split;
        return Split::Unassigned;
    }
};

namespace detail {

// Largest-remainder apportionment of n samples to the three splits. Every
// count lands within one sample of n*ratio; leftover units go to the largest
// fractional parts, ties resolved towards test, then val.
inline std::array<int, 3> apportion(int n, const std::array<double, 3>& ratios) {
    std::array<int, 3> counts;
    std::array<double, 3> frac;
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = n * ratios[i];
        counts[i] = static_cast<int>(std::floor(exact));
        frac[i] = exact - counts[i];
        assigned += counts[i];
    }
    int leftover = n - assigned;
    std::array<int, 3> order = {2, 1, 0}; // test, val, train on ties
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (int k = 0; k < leftover; ++k) counts[order[k]] += 1;
    return counts;
}

} // namespace detail

struct SplitItem {
    std::string id;
    CoverageCategory category = CoverageCategory::C0;
};

// Shuffles each coverage category with its own stream derived from
// (seed, category) and apportions it 60/20/20 across train/val/test.
inline SplitManifest stratified_split(const std::vector<SplitItem>& items,
                                      std::array<double, 3> ratios = {0.6, 0.2, 0.2}, std::uint64_t seed = 0) {
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0 || std::abs(sum - 1.0) > 1e-9)
        throw ArgumentError("split ratios must be positive and sum to 1");

    std::array<std::vector<std::size_t>, kCategoryCount> by_category;
    for (std::size_t i = 0; i < items.size(); ++i)
        by_category[static_cast<int>(items[i].category)].push_back(i);

    std::vector<Split> assignment(items.size(), Split::Unassigned);
    for (int cat = 0; cat < kCategoryCount; ++cat) {
        auto& indices = by_category[cat];
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cat)));
        rng.shuffle(indices);
        const auto counts = detail::apportion(static_cast<int>(indices.size()), ratios);
        std::size_t pos = 0;
        for (int s = 0; s < 3; ++s)
            for (int k = 0; k < counts[s]; ++k) assignment[indices[pos++]] = static_cast<Split>(s);
    }

    SplitManifest manifest;
    manifest.seed = seed;
    manifest.ratios = ratios;
    manifest.entries.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i)
        manifest.entries.push_back({items[i].id, items[i].category, assignment[i]});
    return manifest;
}

inline SplitManifest stratified_split(const std::vector<PatchSample>& samples,
                                      std::array<double, 3> ratios = {0.6, 0.2, 0.2}, std::uint64_t seed = 0) {
    std::vector<SplitItem> items;
    items.reserve(samples.size());
    for (const PatchSample& s : samples) items.push_back({s.id, s.category});
    return stratified_split(items, ratios, seed);
}

inline nlohmann::json manifest_to_json(const SplitManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries)
        entries.push_back({{"id", e.id}, {"category", category_name(e.category)}, {"split", split_name(e.split)}});
    return {{"seed", m.seed}, {"ratios", m.ratios}, {"entries", entries}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto r = j.at("ratios");
    if (!r.is_array() || r.size() != 3) throw FormatError("manifest ratios must be a 3-element array");
    for (int i = 0; i < 3; ++i) m.ratios[i] = r[i].get<double>();
    for (const auto& e : j.at("entries"))
        m.entries.push_back({e.at("id").get<std::string>(), parse_category(e.at("category").get<std::string>()),
                             parse_split(e.at("split").get<std::string>())});
    return m;
}

inline void save_manifest(const std::string& path, const SplitManifest& m) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << manifest_to_json(m).dump(2) << "\n";
}

inline SplitManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    nlohmann::json j;
    try {
        in >> j;
        return manifest_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad manifest " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Patch store: <id>.img.png / <id>.tgt.png pairs plus index.json.
// ---------------------------------------------------------------------------

struct IndexEntry {
    std::string id;
    int coverage_px = 0;
    CoverageCategory category = CoverageCategory::C0;
};

inline std::string index_path(const std::string& dir) {
    return (std::filesystem::path(dir) / "index.json").string();
}

inline std::vector<IndexEntry> read_index(const std::string& dir) {
    std::ifstream in(index_path(dir));
    if (!in) throw IoError("cannot open patch index: " + index_path(dir));
    nlohmann::json j;
    std::vector<IndexEntry> entries;
    try {
        in >> j;
        for (const auto& e : j.at("patches"))
            entries.push_back({e.at("id").get<std::string>(), e.at("coverage_px").get<int>(),
                               parse_category(e.at("category").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad patch index: " + std::string(e.what()));
    }
    return entries;
}

// Writes samples into `dir`, merging with any existing index (union by id,
// sorted) so several source images can share one store.
inline void store_write(const std::string& dir, const std::vector<PatchSample>& samples) {
    std::filesystem::create_directories(dir);
    std::map<std::string, IndexEntry> merged;
    if (std::filesystem::exists(index_path(dir)))
        for (const IndexEntry& e : read_index(dir)) merged[e.id] = e;

    for (const PatchSample& s : samples) {
        RgbRaster img = RgbRaster::filled(kPatchSize, kPatchSize, {0, 0, 0, 255});
        MaskRaster tgt = MaskRaster::zeros(kPatchSize, kPatchSize);
        for (int i = 0; i < kPatchPixels; ++i) {
            img.pixels[i] = {s.image[3 * i], s.image[3 * i + 1], s.image[3 * i + 2], 255};
            tgt.values[i] = s.target[i];
        }
        const auto base = std::filesystem::path(dir) / s.id;
        save_rgb(base.string() + ".img.png", img);
        save_mask(base.string() + ".tgt.png", tgt);
        merged[s.id] = {s.id, s.coverage_px, s.category};
    }

    nlohmann::json patches = nlohmann::json::array();
    for (const auto& [id, e] : merged)
        patches.push_back({{"id", e.id}, {"coverage_px", e.coverage_px}, {"category", category_name(e.category)}});
    std::ofstream out(index_path(dir));
    if (!out) throw IoError("cannot open for writing: " + index_path(dir));
    out << nlohmann::json{{"patches", patches}}.dump(2) << "\n";
}

// Loads every indexed sample; coverage is recomputed from the target PNG,
// which is the source of truth.
inline std::vector<PatchSample> store_read(const std::string& dir) {
    std::vector<PatchSample> samples;
    for (const IndexEntry& e : read_index(dir)) {
        const auto base = std::filesystem::path(dir) / e.id;
        const RgbRaster img = load_rgb(base.string() + ".img.png");
        const MaskRaster tgt = load_mask(base.string() + ".tgt.png");
        if (img.width != kPatchSize || img.height != kPatchSize || tgt.width != kPatchSize ||
            tgt.height != kPatchSize)
            throw FormatError("stored patch " + e.id + " is not 64x64");
        Patch p;
        p.image = img;
        p.target = tgt;
        samples.push_back(make_sample(e.id, p));
    }
    return samples;
}

// Applies manifest splits to loaded samples; every sample must be listed.
inline void apply_manifest(std::vector<PatchSample>& samples, const SplitManifest& manifest) {
    std::map<std::string, Split> by_id;
    for (const auto& e : manifest.entries) by_id[e.id] = e.split;
    for (PatchSample& s : samples) {
        const auto it = by_id.find(s.id);
        if (it == by_id.end()) throw DataError("sample missing from manifest: " + s.id);
        s.split = it->second;
    }
}

inline std::vector<PatchSample> select_split(const std::vector<PatchSample>& samples, Split split) {
    std::vector<PatchSample> out;
    for (const PatchSample& s : samples)
        if (s.split == split) out.push_back(s);
    return out;
}

} // namespace canopyseg
