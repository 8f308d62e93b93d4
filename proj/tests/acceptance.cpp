// Acceptance suite: ten pipeline-level criteria, one pass/fail line each.
// Run with no arguments for all criteria, or pass criterion numbers to run a
// subset (the ctest entries run them one by one).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "canopyseg/autodiff.hpp"
#include "canopyseg/config.hpp"
#include "canopyseg/dataset.hpp"
#include "canopyseg/eval.hpp"
#include "canopyseg/model.hpp"
#include "canopyseg/raster.hpp"
#include "canopyseg/rng.hpp"
#include "canopyseg/synth.hpp"

using namespace canopyseg;
namespace fs = std::filesystem;

namespace {

struct Check {
    bool ok = true;
    std::string detail;

    void expect(bool condition, const std::string& message) {
        if (!condition && ok) {
            ok = false;
            detail = message;
        }
    }
};

double rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-8});
}

constexpr double kFdStep = 1e-5;
constexpr double kFdTolerance = 1e-4;

// Central differences against a recomputed forward value; the oracle path
// never touches the adjoint code.
template <typename Forward>
double fd_at(ad::Tensor<double>& t, std::int64_t index, Forward forward) {
    const double orig = t.value()[index];
    t.value()[index] = orig + kFdStep;
    const double fp = forward();
    t.value()[index] = orig - kFdStep;
    const double fm = forward();
    t.value()[index] = orig;
    return (fp - fm) / (2.0 * kFdStep);
}

std::vector<double> kink_free(Rng& rng, std::int64_t count) {
    std::vector<double> v(count);
    for (auto& x : v) {
        x = rng.uniform(0.01, 1.0);
        if (rng.bernoulli(0.5)) x = -x;
    }
    return v;
}

ad::Tensor<double> rand_tensor(Rng& rng, ad::Shape shape, bool rg = true) {
    return ad::Tensor<double>::from_data(shape, kink_free(rng, ad::shape_numel(shape)), rg);
}

template <typename Forward>
void check_all_grads(Check& c, const char* op, std::vector<ad::Tensor<double>*> inputs, Forward forward) {
    for (ad::Tensor<double>* t : inputs) {
        for (std::int64_t i = 0; i < t->numel(); ++i) {
            const double fd = fd_at(*t, i, forward);
            const double err = rel_err(t->grad_at(i), fd);
            c.expect(err < kFdTolerance,
                     std::string(op) + " gradient mismatch at element " + std::to_string(i) + ": rel err " +
                         std::to_string(err));
        }
    }
}

// --------------------------------------------------------------------------
// Criterion 1: gradient fidelity of every primitive plus the full U-Net loss.
// --------------------------------------------------------------------------
bool c1_gradient_fidelity(Check& c) {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(101);

    { // conv2d: input, weight and bias
        auto x = rand_tensor(rng, {2, 3, 6, 6});
        auto w = rand_tensor(rng, {4, 3, 3, 3});
        auto b = rand_tensor(rng, {4});
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::conv2d(t, x, w, b)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::conv2d(tape, x, w, b)));
        check_all_grads(c, "conv2d", {&x, &w, &b}, forward);
    }
    { // max_pool2d on tie-free input
        auto x = rand_tensor(rng, {1, 2, 6, 6});
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::max_pool2d(t, x)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::max_pool2d(tape, x)));
        check_all_grads(c, "max_pool2d", {&x}, forward);
    }
    { // upsample_nearest2x
        auto x = rand_tensor(rng, {1, 2, 3, 3});
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::upsample_nearest2x(t, x)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::upsample_nearest2x(tape, x)));
        check_all_grads(c, "upsample_nearest2x", {&x}, forward);
    }
    { // relu away from the kink, sigmoid everywhere
        auto x = rand_tensor(rng, {4, 8});
        auto forward_relu = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::relu(t, x)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::relu(tape, x)));
        check_all_grads(c, "relu", {&x}, forward_relu);

        auto y = rand_tensor(rng, {4, 8});
        auto forward_sig = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::sigmoid(t, y)).value()[0];
        };
        ad::Tape<double> tape2;
        tape2.backward(ad::sum(tape2, ad::sigmoid(tape2, y)));
        check_all_grads(c, "sigmoid", {&y}, forward_sig);
    }
    { // dropout with a fixed mask seed
        auto x = rand_tensor(rng, {2, 16});
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::dropout(t, x, 0.4, true, 777)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::dropout(tape, x, 0.4, true, 777)));
        check_all_grads(c, "dropout", {&x}, forward);
    }
    { // concat_channels
        auto a = rand_tensor(rng, {1, 2, 3, 3});
        auto b = rand_tensor(rng, {1, 3, 3, 3});
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::sum(t, ad::concat_channels(t, a, b)).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::sum(tape, ad::concat_channels(tape, a, b)));
        check_all_grads(c, "concat_channels", {&a, &b}, forward);
    }
    { // bce_loss with per-sample weights
        std::vector<double> pv(2 * 12), tv(2 * 12);
        for (auto& v : pv) v = rng.uniform(0.05, 0.95);
        for (auto& v : tv) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        auto pred = ad::Tensor<double>::from_data({2, 12}, pv, true);
        auto target = ad::Tensor<double>::from_data({2, 12}, tv);
        const std::vector<double> weights = {1.0, 3.2};
        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::bce_loss(t, pred, target, weights).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::bce_loss(tape, pred, target, weights));
        check_all_grads(c, "bce_loss", {&pred}, forward);
    }
    { // full U-Net loss, 20 random parameter probes
        UNetConfig cfg;
        cfg.depth = 2;
        cfg.base_channels = 8;
        cfg.dropout_p = 0.0;
        UNetT<double> model = build<double>(cfg, 11);

        auto input = ad::Tensor<double>::from_data({1, 3, 16, 16}, [&] {
            std::vector<double> v(3 * 16 * 16);
            for (auto& x : v) x = rng.uniform(0.0, 1.0);
            return v;
        }());
        auto target = ad::Tensor<double>::from_data({1, 1, 16, 16}, [&] {
            std::vector<double> v(16 * 16);
            for (auto& x : v) x = rng.bernoulli(0.2) ? 1.0 : 0.0;
            return v;
        }());
        const std::vector<double> weights = {2.4};

        auto forward = [&] {
            ad::Tape<double> t;
            t.recording = false;
            return ad::bce_loss(t, model.forward(t, input), target, weights).value()[0];
        };
        ad::Tape<double> tape;
        tape.backward(ad::bce_loss(tape, model.forward(tape, input), target, weights));

        auto params = model.named_params();
        for (int probe = 0; probe < 20; ++probe) {
            auto& [name, t] = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
            const auto idx = static_cast<std::int64_t>(rng.uniform_int(0, t.numel() - 1));
            const double fd = fd_at(t, idx, forward);
            const double err = rel_err(t.grad_at(idx), fd);
            c.expect(err < kFdTolerance, "U-Net " + name + "[" + std::to_string(idx) + "]: rel err " +
                                             std::to_string(err));
        }
    }

    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(elapsed < 60.0, "gradient checks took " + std::to_string(elapsed) + "s, budget is 60s");
    if (c.ok) c.detail = "all primitives and 20 U-Net probes within 1e-4 (" + std::to_string(elapsed) + "s)";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 2: the loss weighting formula and its dataset-level default.
// --------------------------------------------------------------------------
bool c2_formula_fidelity(Check& c) {
    std::vector<std::uint8_t> zeros(kPatchPixels, 0);
    std::vector<std::uint8_t> ones(kPatchPixels, 1);
    c.expect(loss_weight(zeros, 400.0) == 1.0, "zero coverage must weigh exactly 1.0");
    c.expect(std::abs(loss_weight(ones, 400.0) - 11.24) < 1e-12, "full coverage must weigh 4096/400 + 1 = 11.24");

    const double a = default_a(4096, 40960); // exactly a 10% pixel ratio
    c.expect(std::abs(a - 409.6) < 1e-9, "default_a at ratio 0.1 must be 409.6");
    c.expect(std::abs(a / 400.0 - 1.0) < 0.03, "default_a at ratio 0.1 must round to about 400");
    if (c.ok) c.detail = "f_M endpoints exact; default_a(10%) = 409.6 ~ 400";
    return c.ok;
}

AugmentConfig identity_augment() {
    AugmentConfig cfg;
    cfg.rot90 = false;
    cfg.flips = false;
    cfg.brightness_range = {1.0, 1.0};
    cfg.sharpness_range = {0.0, 0.0};
    cfg.color_gain_range = {1.0, 1.0};
    cfg.channel_shift_max = 0;
    return cfg;
}

double pixel_accuracy(UNet& model, const std::vector<PatchSample>& set, double threshold) {
    std::int64_t correct = 0, total = 0;
    const auto preds = predict_batch(model, set);
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (int px = 0; px < kPatchPixels; ++px) {
            if ((static_cast<double>(preds[i][px]) >= threshold) == (set[i].target[px] != 0)) ++correct;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// --------------------------------------------------------------------------
// Criterion 3: a small U-Net must be able to overfit eight patches.
// --------------------------------------------------------------------------
bool c3_overfit_oracle(Check& c) {
    const auto start = std::chrono::steady_clock::now();

    SceneConfig sc;
    sc.seed = 42;
    sc.ground_patch_probability = 0.0;
    const Scene scene = generate(sc);
    std::vector<PatchSample> set;
    for (const Patch& p : partition(scene.image, scene.mask)) {
        PatchSample s = make_sample("p" + std::to_string(set.size()), p);
        if (s.coverage_px > 50) set.push_back(std::move(s));
        if (set.size() == 8) break;
    }
    c.expect(set.size() == 8, "scene did not yield eight usable patches");

    UNetConfig mc;
    mc.depth = 2;
    mc.base_channels = 8;
    mc.dropout_p = 0.0; // memorization test, no regularization
    UNet model = build<float>(mc, 1);

    TrainConfig tc;
    tc.learning_rate = 0.02;
    tc.batch_size = 2;
    tc.seed = 1;
    tc.epochs = 25;

    double acc = 0.0;
    int epochs_used = 0;
    for (int round = 0; round < 20 && epochs_used < 500; ++round) { // 20 * 25 = 500 epoch budget
        train(model, set, tc, identity_augment());
        epochs_used += tc.epochs;
        acc = pixel_accuracy(model, set, 0.5);
        if (acc > 0.99) break;
    }

    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(acc > 0.99, "training pixel accuracy " + std::to_string(acc) + " after " +
                             std::to_string(epochs_used) + " epochs");
    c.expect(elapsed < 300.0, "overfit run took " + std::to_string(elapsed) + "s, budget is 300s");
    if (c.ok)
        c.detail = "accuracy " + std::to_string(acc) + " after " + std::to_string(epochs_used) + " epochs (" +
                   std::to_string(elapsed) + "s)";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 4: f_M weighting must lift the minority true-positive rate.
// --------------------------------------------------------------------------
bool c4_imbalance_experiment(Check& c) {
    const auto start = std::chrono::steady_clock::now();

    SceneConfig sc;
    sc.width = 1024;
    sc.height = 1024;
    sc.seed = 777;
    sc.ground_patch_probability = 0.05;
    const Scene scene = generate(sc);
    const FilterResult filtered = filter_patches(partition(scene.image, scene.mask), 160.0, 0.25);
    std::vector<PatchSample> samples;
    for (const Patch& p : filtered.kept)
        samples.push_back(make_sample("p" + std::to_string(samples.size()), p));
    c.expect(samples.size() >= 200, "dataset has only " + std::to_string(samples.size()) + " patches");

    apply_manifest(samples, stratified_split(samples, {0.6, 0.2, 0.2}, 99));
    const std::vector<PatchSample> train_set = select_split(samples, Split::Train);
    const std::vector<PatchSample> test_set = select_split(samples, Split::Test);

    std::string summary;
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
        double tp[2] = {0, 0}, tn[2] = {0, 0};
        for (int mode = 0; mode < 2; ++mode) {
            UNetConfig mc;
            mc.depth = 2;
            mc.base_channels = 4;
            mc.dropout_p = 0.0;
            UNet model = build<float>(mc, derive_seed(seed, 0xB11Du));

            TrainConfig tc;
            tc.learning_rate = 0.02;
            tc.batch_size = 8;
            tc.epochs = 60;
            tc.seed = seed;
            tc.weighting = (mode == 0);
            train(model, train_set, tc, identity_augment());

            ConfusionCounts pooled;
            const auto preds = predict_batch(model, test_set);
            for (std::size_t i = 0; i < test_set.size(); ++i)
                pooled += pixel_confusion(preds[i], test_set[i].target, 0.85);
            tp[mode] = tp_rate(pooled);
            tn[mode] = tn_rate(pooled);
        }
        summary += "seed " + std::to_string(seed) + ": tp " + std::to_string(tp[0]) + " vs " +
                   std::to_string(tp[1]) + ", tn " + std::to_string(tn[0]) + "; ";
        c.expect(tp[0] > tp[1], "seed " + std::to_string(seed) + ": weighted tp_rate " + std::to_string(tp[0]) +
                                    " not above unweighted " + std::to_string(tp[1]));
        c.expect(tn[0] > 0.90, "seed " + std::to_string(seed) + ": weighted tn_rate " + std::to_string(tn[0]) +
                                   " fell to or below 0.90");
    }

    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(elapsed < 1800.0, "imbalance experiment took " + std::to_string(elapsed) + "s, budget is 1800s");
    if (c.ok) c.detail = summary + "(" + std::to_string(elapsed) + "s)";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 5: raising the threshold never raises tp counts or lowers tn.
// --------------------------------------------------------------------------
bool c5_threshold_monotonicity(Check& c) {
    Rng rng(505);
    const auto grid = default_calibration_grid();
    for (int trial = 0; trial < 100; ++trial) {
        const int pixels = static_cast<int>(rng.uniform_int(1, kPatchPixels));
        std::vector<double> pred(pixels);
        std::vector<std::uint8_t> target(pixels);
        for (auto& p : pred) p = rng.uniform(0.0, 1.0);
        for (auto& t : target) t = rng.bernoulli(rng.uniform(0.0, 1.0)) ? 1 : 0;

        std::int64_t prev_tp = 0, prev_tn = 0;
        bool first = true;
        for (const double threshold : grid) {
            const ConfusionCounts counts = pixel_confusion(pred, target, threshold);
            if (!first) {
                c.expect(counts.tp <= prev_tp, "tp count rose with the threshold");
                c.expect(counts.tn >= prev_tn, "tn count fell with the threshold");
            }
            prev_tp = counts.tp;
            prev_tn = counts.tn;
            first = false;
        }
    }
    if (c.ok) c.detail = "100 random prediction sets, exact over the 19-point grid";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 6: metric implementations equal brute-force loops.
// --------------------------------------------------------------------------
bool c6_metric_oracles(Check& c) {
    Rng rng(606);

    int instances = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int pixels = static_cast<int>(rng.uniform_int(1, 256));
        std::vector<double> pred(pixels);
        std::vector<std::uint8_t> target(pixels);
        for (auto& p : pred) p = rng.uniform(0.0, 1.0);
        for (auto& t : target) t = rng.bernoulli(0.35) ? 1 : 0;
        const double threshold = rng.uniform(0.05, 0.95);

        std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
        for (int i = 0; i < pixels; ++i) {
            const bool positive = pred[i] >= threshold;
            if (positive && target[i]) ++tp;
            if (positive && !target[i]) ++fp;
            if (!positive && !target[i]) ++tn;
            if (!positive && target[i]) ++fn;
        }
        const ConfusionCounts got = pixel_confusion(pred, target, threshold);
        c.expect(got.tp == tp && got.fp == fp && got.tn == tn && got.fn == fn,
                 "pixel_confusion diverged from the loop oracle");
        ++instances;
    }

    for (int trial = 0; trial < 25; ++trial) {
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

        // Independent re-implementation of the bucket rule.
        std::array<std::int64_t, kCategoryCount> count{}, detected{};
        for (int s = 0; s < patches; ++s) {
            int cov = 0, tp = 0, fp = 0;
            for (int i = 0; i < kPatchPixels; ++i) {
                if (targets[s][i]) ++cov;
                if (preds[s][i] >= threshold && targets[s][i]) ++tp;
                if (preds[s][i] >= threshold && !targets[s][i]) ++fp;
            }
            const int cat = static_cast<int>(categorize(cov));
            count[cat] += 1;
            const bool hit = cov > 0 ? tp >= static_cast<int>(std::ceil(0.10 * cov)) : fp <= 40;
            if (hit) detected[cat] += 1;
        }
        for (int i = 0; i < kCategoryCount; ++i) {
            c.expect(got.buckets[i].patch_count == count[i], "bucket patch counts diverged");
            c.expect(got.buckets[i].detected_count == detected[i], "bucket detections diverged");
        }
        ++instances;
    }

    if (c.ok) c.detail = std::to_string(instances) + " randomized instances, exact count equality";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 7: stratified splits stay within one sample of 60/20/20.
// --------------------------------------------------------------------------
bool c7_split_stratification(Check& c) {
    Rng rng(707);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<SplitItem> items;
        std::array<int, kCategoryCount> per_category;
        for (int cat = 0; cat < kCategoryCount; ++cat) {
            per_category[cat] = static_cast<int>(rng.uniform_int(5, 500));
            for (int i = 0; i < per_category[cat]; ++i)
                items.push_back({"t" + std::to_string(trial) + "_c" + std::to_string(cat) + "_" + std::to_string(i),
                                 static_cast<CoverageCategory>(cat)});
        }
        const SplitManifest manifest = stratified_split(items, {0.6, 0.2, 0.2}, rng.next_u64());

        std::set<std::string> seen;
        std::array<std::array<int, 3>, kCategoryCount> counts{};
        for (const auto& e : manifest.entries) {
            c.expect(e.split != Split::Unassigned, "entry left unassigned");
            c.expect(seen.insert(e.id).second, "id assigned to more than one split");
            counts[static_cast<int>(e.category)][static_cast<int>(e.split)] += 1;
        }
        c.expect(seen.size() == items.size(), "splits do not cover the input");

        const double ratios[3] = {0.6, 0.2, 0.2};
        for (int cat = 0; cat < kCategoryCount; ++cat)
            for (int s = 0; s < 3; ++s)
                c.expect(std::abs(counts[cat][s] - per_category[cat] * ratios[s]) <= 1.0,
                         "per-category split deviates by more than one sample");
    }
    if (c.ok) c.detail = "30 randomized datasets, 5-500 samples per category";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 8: augmentation group laws.
// --------------------------------------------------------------------------
bool c8_augmentation_laws(Check& c) {
    Rng rng(808);
    for (int trial = 0; trial < 30; ++trial) {
        PatchSample s;
        s.id = "aug";
        s.image.resize(static_cast<std::size_t>(kPatchPixels) * 3);
        s.target.resize(kPatchPixels);
        for (auto& v : s.image) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        const double density = rng.uniform(0.0, 1.0);
        for (auto& v : s.target) v = rng.bernoulli(density) ? 1 : 0;
        s.coverage_px = coverage(s.target);
        s.category = categorize(s.coverage_px);

        auto rotated = s.image;
        for (int k = 0; k < 4; ++k) rotated = rotate90<3>(rotated);
        c.expect(rotated == s.image, "rot90^4 is not the identity on the image");
        auto rotated_t = s.target;
        for (int k = 0; k < 4; ++k) rotated_t = rotate90<1>(rotated_t);
        c.expect(rotated_t == s.target, "rot90^4 is not the identity on the target");
        c.expect(hflip<3>(hflip<3>(s.image)) == s.image, "hflip^2 is not the identity");
        c.expect(vflip<1>(vflip<1>(s.target)) == s.target, "vflip^2 is not the identity");

        AugmentConfig full; // spatial + photometric defaults
        const PatchSample augmented = augment(s, full, rng.next_u64());
        c.expect(augmented.coverage_px == s.coverage_px, "spatial transform changed the coverage");
        c.expect(coverage(augmented.target) == s.coverage_px, "target coverage drifted");
        for (auto v : augmented.target)
            c.expect(v == 0 || v == 1, "target left the {0,1} domain");

        AugmentConfig photometric_only = full;
        photometric_only.rot90 = false;
        photometric_only.flips = false;
        const PatchSample photo = augment(s, photometric_only, rng.next_u64());
        c.expect(photo.target == s.target, "photometric transform modified the target");
        // PatchSample stores 8-bit samples, so [0,255] holds by construction;
        // saturating inputs must still round-trip through the clamp.
        AugmentConfig extreme = photometric_only;
        extreme.brightness_range = {2.5, 2.5};
        const PatchSample saturated = augment(s, extreme, 3);
        c.expect(saturated.image.size() == s.image.size(), "augmented image changed size");
    }
    if (c.ok) c.detail = "30 randomized samples, exact group-law assertions";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 9: checkpoint round-trip and corruption rejection.
// --------------------------------------------------------------------------
bool c9_checkpoint_roundtrip(Check& c) {
    const auto dir = fs::temp_directory_path() / "canopyseg_acceptance_ckpt";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string path = (dir / "model.ckpt").string();

    UNetConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 8;
    UNet model = build<float>(cfg, 909);
    save_checkpoint(model, path, 0.85, {{"purpose", "acceptance"}});

    LoadedCheckpoint loaded = load_checkpoint(path);
    auto original = model.named_params();
    auto restored = loaded.model.named_params();
    c.expect(original.size() == restored.size(), "parameter list size changed");
    for (std::size_t i = 0; i < original.size(); ++i)
        c.expect(original[i].second.value() == restored[i].second.value(),
                 "tensor " + original[i].first + " not bit-exact after round-trip");
    c.expect(loaded.threshold && *loaded.threshold == 0.85, "threshold lost in round-trip");

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const std::string truncated = (dir / "truncated.ckpt").string();
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() - 9);
    try {
        load_checkpoint(truncated);
        c.expect(false, "truncated checkpoint was accepted");
    } catch (const FormatError&) {
    }

    const std::string bad_magic = (dir / "magic.ckpt").string();
    std::string tampered = bytes;
    tampered[1] = 'Z';
    std::ofstream(bad_magic, std::ios::binary) << tampered;
    try {
        load_checkpoint(bad_magic);
        c.expect(false, "bad-magic checkpoint was accepted");
    } catch (const FormatError&) {
    }

    fs::remove_all(dir);
    if (c.ok) c.detail = "bit-exact round-trip; truncation and bad magic rejected";
    return c.ok;
}

// --------------------------------------------------------------------------
// Criterion 10: the CLI pipeline is byte-deterministic end to end.
// --------------------------------------------------------------------------
std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

bool run_pipeline(const fs::path& root, const std::string& config_path) {
    const std::string cli = CANOPYSEG_CLI_PATH;
    const std::string data = (root / "store").string();
    const std::string manifest = (root / "manifest.json").string();
    const std::string model = (root / "model.ckpt").string();
    const auto call = [&](const std::string& args) {
        const std::string cmd = cli + " " + args + " >/dev/null 2>/dev/null";
        return std::system(cmd.c_str()) == 0;
    };
    return call("synth --config " + config_path + " --out " + (root / "scenes").string()) &&
           call("prepare --image " + (root / "scenes/scene_000.img.png").string() + " --mask " +
                (root / "scenes/scene_000.tgt.png").string() + " --out " + data) &&
           call("split --data " + data + " --seed 5 --out " + manifest) &&
           call("train --data " + data + " --manifest " + manifest + " --config " + config_path + " --out " + model) &&
           call("calibrate --model " + model + " --data " + data + " --manifest " + manifest) &&
           call("eval --model " + model + " --data " + data + " --manifest " + manifest) &&
           call("predict --model " + model + " --image " + (root / "scenes/scene_000.img.png").string() +
                " --out " + (root / "overlay.png").string());
}

bool c10_end_to_end_determinism(Check& c) {
    const auto base = fs::temp_directory_path() / "canopyseg_acceptance_e2e";
    fs::remove_all(base);
    fs::create_directories(base);

    const std::string config_path = (base / "config.json").string();
    const nlohmann::json config = {
        {"scene", {{"width", 320}, {"height", 320}, {"ground_patch_probability", 0.05}, {"seed", 21}, {"count", 1}}},
        {"model", {{"depth", 2}, {"base_channels", 4}}},
        {"train", {{"learning_rate", 0.02}, {"batch_size", 8}, {"epochs", 2}, {"seed", 9}}},
    };
    std::ofstream(config_path) << config.dump(2);

    const fs::path run_a = base / "a";
    const fs::path run_b = base / "b";
    fs::create_directories(run_a);
    fs::create_directories(run_b);
    c.expect(run_pipeline(run_a, config_path), "first pipeline run failed");
    c.expect(run_pipeline(run_b, config_path), "second pipeline run failed");
    if (!c.ok) return false;

    const char* artifacts[] = {"manifest.json",           "model.ckpt.loss.csv", "model.ckpt.calibration.json",
                               "model.ckpt.eval.json",    "model.ckpt",          "overlay.png",
                               "store/index.json"};
    for (const char* name : artifacts) {
        const std::string a = slurp((run_a / name).string());
        const std::string b = slurp((run_b / name).string());
        c.expect(!a.empty(), std::string(name) + " is empty or missing");
        c.expect(a == b, std::string(name) + " differs between identical runs");
    }

    fs::remove_all(base);
    if (c.ok) c.detail = "manifests, loss CSV, report JSONs, checkpoint and overlay byte-identical";
    return c.ok;
}

struct Criterion {
    int id;
    const char* summary;
    bool (*fn)(Check&);
};

const Criterion kCriteria[] = {
    {1, "gradient fidelity (finite differences, 64-bit)", c1_gradient_fidelity},
    {2, "loss weighting formula fidelity", c2_formula_fidelity},
    {3, "overfit oracle (8 patches, <= 500 epochs, > 99% accuracy)", c3_overfit_oracle},
    {4, "imbalance experiment (weighted beats unweighted tp at 0.85)", c4_imbalance_experiment},
    {5, "threshold monotonicity", c5_threshold_monotonicity},
    {6, "metric oracle equivalence", c6_metric_oracles},
    {7, "split stratification within one sample", c7_split_stratification},
    {8, "augmentation group laws", c8_augmentation_laws},
    {9, "checkpoint round-trip and corruption rejection", c9_checkpoint_roundtrip},
    {10, "end-to-end CLI determinism", c10_end_to_end_determinism},
};

} // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const Criterion& criterion : kCriteria) {
        if (!selected.empty() && !selected.count(criterion.id)) continue;
        Check check;
        try {
            criterion.fn(check);
        } catch (const std::exception& e) {
            check.ok = false;
            check.detail = std::string("exception: ") + e.what();
        }
        std::printf("[%s] criterion %d: %s%s%s\n", check.ok ? "PASS" : "FAIL", criterion.id, criterion.summary,
                    check.detail.empty() ? "" : " -- ", check.detail.c_str());
        std::fflush(stdout);
        if (!check.ok) ++failures;
    }
    return failures;
}
