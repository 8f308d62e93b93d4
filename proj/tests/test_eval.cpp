#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "canopyseg/eval.hpp"
#include "canopyseg/rng.hpp"

using namespace canopyseg;

namespace {

// Brute-force confusion oracle: a literal per-pixel tabulation, independent
// of the implementation under test.
ConfusionCounts confusion_oracle(const std::vector<double>& pred, const std::vector<std::uint8_t>& target,
                                 double threshold) {
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool positive = pred[i] >= threshold;
        if (positive && target[i]) ++c.tp;
        if (positive && !target[i]) ++c.fp;
        if (!positive && !target[i]) ++c.tn;
        if (!positive && target[i]) ++c.fn;
    }
    return c;
}

// Brute-force re-implementation of the bucket rule.
BucketReport bucket_oracle(const std::vector<std::vector<double>>& preds,
                           const std::vector<std::vector<std::uint8_t>>& targets, double threshold,
                           int fp_tolerance) {
    BucketReport r;
    r.threshold = threshold;
    for (int i = 0; i < kCategoryCount; ++i) r.buckets[i].category = static_cast<CoverageCategory>(i);
    for (std::size_t s = 0; s < preds.size(); ++s) {
        int cov = 0, tp = 0, fp = 0;
        for (std::size_t i = 0; i < preds[s].size(); ++i) {
            if (targets[s][i]) ++cov;
            if (preds[s][i] >= threshold && targets[s][i]) ++tp;
            if (preds[s][i] >= threshold && !targets[s][i]) ++fp;
        }
        bool detected;
        if (cov > 0)
            detected = tp >= static_cast<int>(std::ceil(0.10 * cov));
        else
            detected = fp <= fp_tolerance;
        auto& b = r.buckets[static_cast<int>(categorize(cov))];
        b.patch_count += 1;
        if (detected) b.detected_count += 1;
    }
    return r;
}

} // namespace

TEST_CASE("pixel_confusion handles the uniform cases") {
    const std::vector<double> high(kPatchPixels, 0.9);
    const std::vector<std::uint8_t> ones(kPatchPixels, 1);
    const std::vector<std::uint8_t> zeros(kPatchPixels, 0);

    ConfusionCounts c = pixel_confusion(high, ones, 0.85);
    REQUIRE(c.tp == kPatchPixels);
    REQUIRE(c.fp + c.tn + c.fn == 0);

    c = pixel_confusion(high, zeros, 0.85);
    REQUIRE(c.fp == kPatchPixels);

    // >= decision rule: pixels at exactly the threshold are positive.
    const std::vector<double> at(4, 0.85);
    c = pixel_confusion(at, std::vector<std::uint8_t>{1, 1, 0, 0}, 0.85);
    REQUIRE(c.tp == 2);
    REQUIRE(c.fp == 2);
}

TEST_CASE("pixel_confusion validates its inputs") {
    REQUIRE_THROWS_AS(pixel_confusion(std::vector<double>(4, 0.5), std::vector<std::uint8_t>(5, 0), 0.5),
                      ShapeError);
    REQUIRE_THROWS_AS(pixel_confusion(std::vector<double>(4, 0.5), std::vector<std::uint8_t>(4, 0), 0.0),
                      ArgumentError);
    REQUIRE_THROWS_AS(pixel_confusion(std::vector<double>(4, 0.5), std::vector<std::uint8_t>(4, 0), 1.0),
                      ArgumentError);
}

TEST_CASE("pixel_confusion equals a per-pixel loop on randomized instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const int pixels = static_cast<int>(rng.uniform_int(1, 64));
        std::vector<double> pred(pixels);
        std::vector<std::uint8_t> target(pixels);
        for (auto& p : pred) p = rng.uniform(0.0, 1.0);
        for (auto& t : target) t = rng.bernoulli(0.4) ? 1 : 0;
        const double threshold = rng.uniform(0.05, 0.95);

        const ConfusionCounts got = pixel_confusion(pred, target, threshold);
        const ConfusionCounts want = confusion_oracle(pred, target, threshold);
        REQUIRE(got.tp == want.tp);
        REQUIRE(got.fp == want.fp);
        REQUIRE(got.tn == want.tn);
        REQUIRE(got.fn == want.fn);
        REQUIRE(got.total() == pixels);
    }
}

TEST_CASE("tp_rate and tn_rate are plain ratios with degenerate guards") {
    ConfusionCounts c;
    c.tp = 62;
    c.fn = 38;
    c.tn = 981;
    c.fp = 19;
    REQUIRE(tp_rate(c) == 0.62);
    REQUIRE(tn_rate(c) == 0.981);

    ConfusionCounts no_pos;
    no_pos.tn = 10;
    REQUIRE_THROWS_AS(tp_rate(no_pos), DegenerateError);
    ConfusionCounts no_neg;
    no_neg.tp = 10;
    REQUIRE_THROWS_AS(tn_rate(no_neg), DegenerateError);
}

TEST_CASE("calibration picks the lowest threshold among ties") {
    // Perfect separator: every grid threshold in (0.01, 0.99) scores J = 1.
    std::vector<std::vector<double>> preds(4);
    std::vector<std::vector<std::uint8_t>> targets(4);
    for (int s = 0; s < 4; ++s) {
        preds[s].assign(16, s % 2 ? 0.99 : 0.01);
        targets[s].assign(16, s % 2 ? 1 : 0);
    }
    std::vector<const std::vector<std::uint8_t>*> tptrs;
    for (auto& t : targets) tptrs.push_back(&t);

    const ThresholdReport r = calibrate_from_predictions(preds, tptrs);
    REQUIRE(r.grid.size() == 19);
    for (const auto& row : r.grid) REQUIRE(row.youden_j == 1.0);
    REQUIRE(r.chosen_threshold == 0.05);
}

TEST_CASE("calibration of a constant 0.5 predictor ties at J=0 and selects 0.05") {
    std::vector<std::vector<double>> preds = {std::vector<double>(32, 0.5)};
    std::vector<std::uint8_t> target(32, 0);
    for (int i = 0; i < 16; ++i) target[i] = 1;
    std::vector<const std::vector<std::uint8_t>*> tptrs = {&target};

    const ThresholdReport r = calibrate_from_predictions(preds, tptrs);
    for (const auto& row : r.grid) {
        // <= 0.5 classifies everything positive, above everything negative.
        if (row.threshold <= 0.5) {
            REQUIRE(row.tp_rate == 1.0);
            REQUIRE(row.tn_rate == 0.0);
        } else {
            REQUIRE(row.tp_rate == 0.0);
            REQUIRE(row.tn_rate == 1.0);
        }
        REQUIRE(row.youden_j == 0.0);
    }
    REQUIRE(r.chosen_threshold == 0.05);

    REQUIRE_THROWS_AS(calibrate_from_predictions<double>({}, {}), DataError);
}

TEST_CASE("tp counts fall and tn counts rise along the grid") {
    Rng rng(31);
    for (int trial = 0; trial < 40; ++trial) {
        const int pixels = static_cast<int>(rng.uniform_int(16, 256));
        std::vector<double> pred(pixels);
        std::vector<std::uint8_t> target(pixels);
        for (auto& p : pred) p = rng.uniform(0.0, 1.0);
        for (auto& t : target) t = rng.bernoulli(0.3) ? 1 : 0;

        std::int64_t prev_tp = -1, prev_tn = -1;
        bool first = true;
        for (double threshold : default_calibration_grid()) {
            const ConfusionCounts c = pixel_confusion(pred, target, threshold);
            if (!first) {
                REQUIRE(c.tp <= prev_tp);
                REQUIRE(c.tn >= prev_tn);
            }
            prev_tp = c.tp;
            prev_tn = c.tn;
            first = false;
        }
    }
}

TEST_CASE("bucket_detection applies the 10% rule with a ceiling") {
    // 100 target pixels: 10 found is detected, 9 is not.
    std::vector<std::uint8_t> target(kPatchPixels, 0);
    for (int i = 0; i < 100; ++i) target[i] = 1;

    auto with_tp = [&](int tp_count) {
        std::vector<double> pred(kPatchPixels, 0.1);
        for (int i = 0; i < tp_count; ++i) pred[i] = 0.9;
        return pred;
    };

    std::vector<std::vector<double>> preds = {with_tp(10), with_tp(9)};
    std::vector<const std::vector<std::uint8_t>*> targets = {&target, &target};
    const BucketReport r = bucket_detection(preds, targets, 0.85);
    const auto& bucket = r.buckets[static_cast<int>(CoverageCategory::C1_20)];
    REQUIRE(bucket.patch_count == 2);
    REQUIRE(bucket.detected_count == 1);
    REQUIRE(bucket.rate == 0.5);
}

TEST_CASE("zero-coverage patches tolerate up to 40 false positives") {
    std::vector<std::uint8_t> clean(kPatchPixels, 0);
    auto with_fp = [&](int fp_count) {
        std::vector<double> pred(kPatchPixels, 0.1);
        for (int i = 0; i < fp_count; ++i) pred[i] = 0.9;
        return pred;
    };

    std::vector<std::vector<double>> preds = {with_fp(0), with_fp(40), with_fp(41)};
    std::vector<const std::vector<std::uint8_t>*> targets = {&clean, &clean, &clean};
    const BucketReport r = bucket_detection(preds, targets, 0.85);
    const auto& bucket = r.buckets[static_cast<int>(CoverageCategory::C0)];
    REQUIRE(bucket.patch_count == 3);
    REQUIRE(bucket.detected_count == 2);
}

TEST_CASE("bucket_detection equals the brute-force oracle on random batches") {
    Rng rng(47);
    for (int trial = 0; trial < 30; ++trial) {
        const int patches = static_cast<int>(rng.uniform_int(1, 50));
        std::vector<std::vector<double>> preds(patches);
        std::vector<std::vector<std::uint8_t>> targets(patches);
        for (int s = 0; s < patches; ++s) {
            preds[s].resize(kPatchPixels);
            targets[s].resize(kPatchPixels);
            const double density = rng.uniform(0.0, 1.0);
            for (auto& p : preds[s]) p = rng.uniform(0.0, 1.0);
            for (auto& t : targets[s]) t = rng.bernoulli(density) ? 1 : 0;
        }
        std::vector<const std::vector<std::uint8_t>*> tptrs;
        for (auto& t : targets) tptrs.push_back(&t);

        const double threshold = rng.uniform(0.1, 0.9);
        const BucketReport got = bucket_detection(preds, tptrs, threshold);
        const BucketReport want = bucket_oracle(preds, targets, threshold, kZeroCoverageFpTolerance);

        std::int64_t total = 0;
        for (int i = 0; i < kCategoryCount; ++i) {
            REQUIRE(got.buckets[i].patch_count == want.buckets[i].patch_count);
            REQUIRE(got.buckets[i].detected_count == want.buckets[i].detected_count);
            total += got.buckets[i].patch_count;
        }
        REQUIRE(total == patches); // buckets partition the evaluated set
    }
}

TEST_CASE("overlay blends only predicted-positive pixels with red") {
    const RgbRaster image = RgbRaster::filled(8, 8, {40, 80, 60, 255});

    std::vector<double> none(64, 0.1);
    REQUIRE(overlay(image, none, 0.85).pixels == image.pixels);

    std::vector<double> all(64, 0.9);
    const RgbRaster blended = overlay(image, all, 0.85);
    for (const Rgba& px : blended.pixels) {
        REQUIRE(static_cast<int>(px.r) == (40 + 256) / 2); // 148, round-half-up of 147.5
        REQUIRE(static_cast<int>(px.g) == (80 + 1) / 2);
        REQUIRE(static_cast<int>(px.b) == (60 + 1) / 2);
    }

    std::vector<double> single(64, 0.1);
    single[13] = 0.99;
    const RgbRaster one = overlay(image, single, 0.85);
    int changed = 0;
    for (std::size_t i = 0; i < one.pixels.size(); ++i)
        if (!(one.pixels[i] == image.pixels[i])) ++changed;
    REQUIRE(changed == 1);

    REQUIRE_THROWS_AS(overlay(image, std::vector<double>(10, 0.5), 0.85), ShapeError);
}

TEST_CASE("report serialization carries rates and buckets") {
    ThresholdReport tr;
    tr.grid.push_back({0.5, 0.9, 0.8, 0.7});
    tr.chosen_threshold = 0.5;
    const nlohmann::json tj = threshold_report_to_json(tr);
    REQUIRE(tj.at("chosen_threshold") == 0.5);
    REQUIRE(tj.at("grid")[0].at("youden_j") == 0.7);
    REQUIRE(threshold_report_to_text(tr).find("chosen threshold: 0.50") != std::string::npos);

    EvalReport er;
    er.threshold = 0.85;
    er.pixel = {626, 19, 981, 374};
    er.tp_rate = 0.626;
    er.tn_rate = 0.981;
    for (int i = 0; i < kCategoryCount; ++i) er.buckets.buckets[i].category = static_cast<CoverageCategory>(i);
    const nlohmann::json ej = eval_report_to_json(er);
    REQUIRE(ej.at("pixel").at("tp") == 626);
    REQUIRE(ej.at("pixel").at("tp_rate") == 0.626);
    const std::string text = eval_report_to_text(er);
    REQUIRE(text.find("62.6%") != std::string::npos);
    REQUIRE(text.find("98.1%") != std::string::npos);

    EvalReport degenerate = er;
    degenerate.tp_rate.reset();
    REQUIRE(eval_report_to_json(degenerate).at("pixel").at("tp_rate").is_null());
    REQUIRE(eval_report_to_text(degenerate).find("n/a") != std::string::npos);
}
