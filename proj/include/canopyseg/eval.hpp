#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopyseg/dataset.hpp"
#include "canopyseg/errors.hpp"
#include "canopyseg/model.hpp"
#include "canopyseg/raster.hpp"

namespace canopyseg {

inline constexpr double kDefaultThreshold = 0.85;

// Fraction of a patch's target pixels that must be predicted for the patch
// to count as detected, and the false-positive budget that keeps a
// zero-coverage patch "correct" (about 1% of 4096 pixels).
inline constexpr double kDetectionFraction = 0.10;
inline constexpr int kZeroCoverageFpTolerance = 40;

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::int64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

// A pixel is predicted positive iff its probability is >= threshold, so a
// threshold of 0.85 includes pixels at exactly 0.85.
template <typename S>
ConfusionCounts pixel_confusion(const std::vector<S>& pred, const std::vector<std::uint8_t>& target,
                                double threshold) {
    if (pred.size() != target.size())
        throw ShapeError("pixel_confusion size mismatch: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(target.size()));
    if (threshold <= 0.0 || threshold >= 1.0) throw ArgumentError("threshold must be in (0, 1)");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool positive = static_cast<double>(pred[i]) >= threshold;
        const bool actual = target[i] != 0;
        if (positive && actual)
            ++c.tp;
        else if (positive && !actual)
            ++c.fp;
        else if (!positive && !actual)
            ++c.tn;
        else
            ++c.fn;
    }
    return c;
}

// Sensitivity: tp / (tp + fn).
inline double tp_rate(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) throw DegenerateError("tp_rate undefined: no positive pixels");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

// Specificity: tn / (tn + fp).
inline double tn_rate(const ConfusionCounts& c) {
    if (c.tn + c.fp == 0) throw DegenerateError("tn_rate undefined: no negative pixels");
    return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

inline std::vector<double> default_calibration_grid() {
    std::vector<double> grid;
    for (int k = 1; k <= 19; ++k) grid.push_back(k * 0.05);
    return grid;
}

struct ThresholdReport {
    struct Row {
        double threshold = 0.0;
        double tp_rate = 0.0;
        double tn_rate = 0.0;
        double youden_j = 0.0;
    };
    std::vector<Row> grid;
    double chosen_threshold = kDefaultThreshold;
};

// Pooled pixel confusion at every grid threshold; the chosen threshold
// maximizes Youden's J = tp_rate + tn_rate - 1, ties resolved to the lowest
// threshold.
template <typename S>
ThresholdReport calibrate_from_predictions(const std::vector<std::vector<S>>& predictions,
                                           const std::vector<const std::vector<std::uint8_t>*>& targets,
                                           std::vector<double> grid = default_calibration_grid()) {
    if (predictions.empty()) throw DataError("calibration needs a non-empty validation set");
    if (predictions.size() != targets.size()) throw ShapeError("calibration predictions/targets mismatch");
    std::sort(grid.begin(), grid.end());

    ThresholdReport report;
    bool have_best = false;
    double best_j = 0.0;
    for (double threshold : grid) {
        ConfusionCounts pooled;
        for (std::size_t i = 0; i < predictions.size(); ++i)
            pooled += pixel_confusion(predictions[i], *targets[i], threshold);
        ThresholdReport::Row row;
        row.threshold = threshold;
        row.tp_rate = tp_rate(pooled);
        row.tn_rate = tn_rate(pooled);
        row.youden_j = row.tp_rate + row.tn_rate - 1.0;
        report.grid.push_back(row);
        if (!have_best || row.youden_j > best_j) {
            have_best = true;
            best_j = row.youden_j;
            report.chosen_threshold = threshold;
        }
    }
    return report;
}

template <typename S>
ThresholdReport calibrate_threshold(const UNetT<S>& model, const std::vector<PatchSample>& validation,
                                    std::vector<double> grid = default_calibration_grid()) {
    if (validation.empty()) throw DataError("calibration needs a non-empty validation set");
    const auto predictions = predict_batch(model, validation);
    std::vector<const std::vector<std::uint8_t>*> targets;
    for (const PatchSample& s : validation) targets.push_back(&s.target);
    return calibrate_from_predictions(predictions, targets, std::move(grid));
}

struct BucketReport {
    struct Bucket {
        CoverageCategory category = CoverageCategory::C0;
        std::int64_t patch_count = 0;
        std::int64_t detected_count = 0;
        double rate = 0.0; // detected / count; 0 when the bucket is empty
    };
    std::array<Bucket, kCategoryCount> buckets;
    double threshold = kDefaultThreshold;
};

// Patch-level detection per coverage bucket. A patch with coverage is
// detected when at least 10% of its target pixels are predicted (ceil); a
// zero-coverage patch is correct when its false positives stay within the
// tolerance.
template <typename S>
BucketReport bucket_detection(const std::vector<std::vector<S>>& predictions,
                              const std::vector<const std::vector<std::uint8_t>*>& targets, double threshold,
                              int zero_coverage_fp_tolerance = kZeroCoverageFpTolerance) {
    if (predictions.empty()) throw DataError("bucket_detection needs a non-empty input");
    if (predictions.size() != targets.size()) throw ShapeError("bucket_detection predictions/targets mismatch");

    BucketReport report;
    report.threshold = threshold;
    for (int i = 0; i < kCategoryCount; ++i) report.buckets[i].category = static_cast<CoverageCategory>(i);

    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const ConfusionCounts c = pixel_confusion(predictions[i], *targets[i], threshold);
        const int coverage_px = static_cast<int>(c.tp + c.fn);
        const CoverageCategory category = categorize(coverage_px);
        bool detected;
        if (coverage_px > 0) {
            const std::int64_t needed = (static_cast<std::int64_t>(coverage_px) * 10 + 99) / 100; // ceil(0.10 * cov)
            detected = c.tp >= needed;
        } else {
            detected = c.fp <= zero_coverage_fp_tolerance;
        }
        auto& bucket = report.buckets[static_cast<int>(category)];
        bucket.patch_count += 1;
        if (detected) bucket.detected_count += 1;
    }
    for (auto& bucket : report.buckets)
        bucket.rate = bucket.patch_count ? static_cast<double>(bucket.detected_count) /
                                               static_cast<double>(bucket.patch_count)
                                         : 0.0;
    return report;
}

template <typename S>
BucketReport bucket_detection(const UNetT<S>& model, const std::vector<PatchSample>& samples, double threshold) {
    if (samples.empty()) throw DataError("bucket_detection needs a non-empty input");
    const auto predictions = predict_batch(model, samples);
    std::vector<const std::vector<std::uint8_t>*> targets;
    for (const PatchSample& s : samples) targets.push_back(&s.target);
    return bucket_detection(predictions, targets, threshold);
}

// Pixels predicted positive are blended 50% with pure red; everything else
// passes through unchanged.
template <typename S>
RgbRaster overlay(const RgbRaster& image, const std::vector<S>& prediction, double threshold) {
    if (prediction.size() != image.pixels.size())
        throw ShapeError("overlay size mismatch: " + std::to_string(prediction.size()) + " vs " +
                         std::to_string(image.pixels.size()));
    RgbRaster out = image;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        if (static_cast<double>(prediction[i]) < threshold) continue;
        Rgba& px = out.pixels[i];
        px.r = static_cast<std::uint8_t>((px.r + 256) / 2); // round-half-up blend with (255,0,0)
        px.g = static_cast<std::uint8_t>((px.g + 1) / 2);
        px.b = static_cast<std::uint8_t>((px.b + 1) / 2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report serialization: JSON plus aligned text tables.
// ---------------------------------------------------------------------------

struct EvalReport {
    double threshold = kDefaultThreshold;
    ConfusionCounts pixel;
    std::optional<double> tp_rate; // absent when the denominator is zero
    std::optional<double> tn_rate;
    BucketReport buckets;
};

template <typename S>
EvalReport evaluate(const UNetT<S>& model, const std::vector<PatchSample>& samples, double threshold) {
    if (samples.empty()) throw DataError("evaluation needs a non-empty test set");
    const auto predictions = predict_batch(model, samples);
    std::vector<const std::vector<std::uint8_t>*> targets;
    for (const PatchSample& s : samples) targets.push_back(&s.target);

    EvalReport report;
    report.threshold = threshold;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        report.pixel += pixel_confusion(predictions[i], *targets[i], threshold);
    try {
        report.tp_rate = tp_rate(report.pixel);
    } catch (const DegenerateError&) {
    }
    try {
        report.tn_rate = tn_rate(report.pixel);
    } catch (const DegenerateError&) {
    }
    report.buckets = bucket_detection(predictions, targets, threshold);
    return report;
}

inline nlohmann::json threshold_report_to_json(const ThresholdReport& r) {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& row : r.grid)
        grid.push_back({{"threshold", row.threshold},
                        {"tp_rate", row.tp_rate},
                        {"tn_rate", row.tn_rate},
                        {"youden_j", row.youden_j}});
    return {{"grid", grid}, {"chosen_threshold", r.chosen_threshold}};
}

inline nlohmann::json bucket_report_to_json(const BucketReport& r) {
    nlohmann::json buckets = nlohmann::json::array();
    for (const auto& b : r.buckets)
        buckets.push_back({{"category", category_name(b.category)},
                           {"patch_count", b.patch_count},
                           {"detected_count", b.detected_count},
                           {"rate", b.rate}});
    return {{"threshold", r.threshold}, {"buckets", buckets}};
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json pixel = {{"tp", r.pixel.tp}, {"fp", r.pixel.fp}, {"tn", r.pixel.tn}, {"fn", r.pixel.fn}};
    pixel["tp_rate"] = r.tp_rate ? nlohmann::json(*r.tp_rate) : nlohmann::json();
    pixel["tn_rate"] = r.tn_rate ? nlohmann::json(*r.tn_rate) : nlohmann::json();
    return {{"threshold", r.threshold}, {"pixel", pixel}, {"buckets", bucket_report_to_json(r.buckets)}};
}

inline std::string threshold_report_to_text(const ThresholdReport& r) {
    std::string out = "threshold  tp_rate  tn_rate  youden_j\n";
    char buf[96];
    for (const auto& row : r.grid) {
        std::snprintf(buf, sizeof(buf), "%9.2f  %7.4f  %7.4f  %8.4f\n", row.threshold, row.tp_rate, row.tn_rate,
                      row.youden_j);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "chosen threshold: %.2f\n", r.chosen_threshold);
    out += buf;
    return out;
}

inline std::string eval_report_to_text(const EvalReport& r) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "Pixel rates at threshold %.2f\n", r.threshold);
    out += buf;
    auto pct = [](const std::optional<double>& v) {
        char b[32];
        if (v)
            std::snprintf(b, sizeof(b), "%5.1f%%", *v * 100.0);
        else
            std::snprintf(b, sizeof(b), "   n/a");
        return std::string(b);
    };
    out += "  True Positive   " + pct(r.tp_rate) + "\n";
    out += "  True Negative   " + pct(r.tn_rate) + "\n\n";
    out += "Coverage bucket detection (>= 10% of target pixels found)\n";
    out += "  coverage        patches  detected  rate\n";
    static const char* labels[kCategoryCount] = {"0%", "1-20%", "21-50%", "51-80%", "81-100%"};
    for (int i = 0; i < kCategoryCount; ++i) {
        const auto& b = r.buckets.buckets[i];
        if (b.patch_count)
            std::snprintf(buf, sizeof(buf), "  %-14s %8lld  %8lld  %5.1f%%\n", labels[i],
                          static_cast<long long>(b.patch_count), static_cast<long long>(b.detected_count),
                          b.rate * 100.0);
        else
            std::snprintf(buf, sizeof(buf), "  %-14s %8lld  %8lld    n/a\n", labels[i],
                          static_cast<long long>(b.patch_count), static_cast<long long>(b.detected_count));
        out += buf;
    }
    return out;
}

} // namespace canopyseg
