// canopyseg: orthomosaic-to-species-map pipeline driver.
//
// synth -> prepare -> split -> train -> calibrate -> eval / predict, every
// stage seeded so identical invocations produce identical artifacts.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "canopyseg/config.hpp"
#include "canopyseg/dataset.hpp"
#include "canopyseg/eval.hpp"
#include "canopyseg/model.hpp"
#include "canopyseg/raster.hpp"
#include "canopyseg/synth.hpp"

namespace {

using namespace canopyseg;

std::string source_stem(const std::string& path) {
    std::string stem = std::filesystem::path(path).stem().string();
    if (stem.size() > 4 && stem.ends_with(".img")) stem.resize(stem.size() - 4);
    return stem;
}

std::string patch_id(const std::string& stem, PatchOrigin origin) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_x%05d_y%05d", stem.c_str(), origin.x, origin.y);
    return buf;
}

double resolve_threshold(const std::optional<double>& flag, const std::optional<double>& checkpoint) {
    if (flag) return *flag;
    if (checkpoint) return *checkpoint;
    std::cerr << "no calibrated threshold in checkpoint; using default " << kDefaultThreshold << "\n";
    return kDefaultThreshold;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir) {
    const RunConfig cfg = load_run_config(config_path);
    for (int i = 0; i < cfg.scene_count; ++i) {
        SceneConfig scene_cfg = cfg.scene;
        scene_cfg.seed = derive_seed(cfg.scene.seed, static_cast<std::uint64_t>(i));
        const Scene scene = generate(scene_cfg);
        char id[32];
        std::snprintf(id, sizeof(id), "scene_%03d", i);
        write_scene(out_dir, id, scene, scene_cfg);
        std::printf("%s: %dx%d, minority fraction %.4f\n", id, scene_cfg.width, scene_cfg.height,
                    scene.achieved_minority_fraction);
    }
    return 0;
}

int cmd_prepare(const std::string& image_path, const std::string& mask_path, const std::string& out_dir,
                double brightness_threshold, double blank_threshold) {
    const RgbRaster image = load_rgb(image_path);
    const MaskRaster mask = load_mask(mask_path);
    const std::vector<Patch> patches = partition(image, mask);
    const FilterResult filtered = filter_patches(patches, brightness_threshold, blank_threshold);

    const std::string stem = source_stem(image_path);
    std::vector<PatchSample> samples;
    samples.reserve(filtered.kept.size());
    for (const Patch& p : filtered.kept) samples.push_back(make_sample(patch_id(stem, p.origin), p));
    store_write(out_dir, samples);

    const auto log_path = std::filesystem::path(out_dir) / (stem + ".rejections.log");
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot open for writing: " + log_path.string());
    log << rejection_log(filtered.rejected);

    std::printf("%s: %zu patches kept, %zu rejected\n", stem.c_str(), filtered.kept.size(),
                filtered.rejected.size());
    return 0;
}

int cmd_split(const std::string& data_dir, std::uint64_t seed, const std::string& out_path) {
    std::vector<SplitItem> items;
    for (const IndexEntry& e : read_index(data_dir)) items.push_back({e.id, e.category});
    if (items.empty()) throw DataError("patch store is empty: " + data_dir);

    const SplitManifest manifest = stratified_split(items, {0.6, 0.2, 0.2}, seed);
    save_manifest(out_path, manifest);

    std::array<int, 3> counts = {0, 0, 0};
    for (const auto& e : manifest.entries) counts[static_cast<int>(e.split)] += 1;
    std::printf("split %zu patches: train %d, val %d, test %d\n", manifest.entries.size(), counts[0], counts[1],
                counts[2]);
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& manifest_path, const std::string& config_path,
              const std::string& out_path) {
    const RunConfig cfg = load_run_config(config_path);
    std::vector<PatchSample> samples = store_read(data_dir);
    apply_manifest(samples, load_manifest(manifest_path));
    const std::vector<PatchSample> train_set = select_split(samples, Split::Train);

    UNet model = build<float>(cfg.model, derive_seed(cfg.train.seed, 0xB11Du));
    const std::vector<double> trace = train(model, train_set, cfg.train, cfg.augment);

    nlohmann::json metadata = {{"epochs", cfg.train.epochs},
                               {"learning_rate", cfg.train.learning_rate},
                               {"batch_size", cfg.train.batch_size},
                               {"loss_a", cfg.train.loss_a},
                               {"seed", cfg.train.seed},
                               {"weighting", cfg.train.weighting},
                               {"train_patches", train_set.size()},
                               {"final_loss", trace.empty() ? 0.0 : trace.back()}};
    save_checkpoint(model, out_path, std::nullopt, metadata);
    save_loss_csv(out_path + ".loss.csv", trace);

    std::printf("trained on %zu patches for %d epochs; final loss %.6f\n", train_set.size(), cfg.train.epochs,
                trace.empty() ? 0.0 : trace.back());
    return 0;
}

int cmd_calibrate(const std::string& model_path, const std::string& data_dir, const std::string& manifest_path,
                  const std::string& config_path) {
    std::vector<double> grid = default_calibration_grid();
    if (!config_path.empty()) grid = load_run_config(config_path).calibration_grid;

    LoadedCheckpoint ckpt = load_checkpoint(model_path);
    std::vector<PatchSample> samples = store_read(data_dir);
    apply_manifest(samples, load_manifest(manifest_path));
    const std::vector<PatchSample> val_set = select_split(samples, Split::Val);

    const ThresholdReport report = calibrate_threshold(ckpt.model, val_set, grid);
    std::fputs(threshold_report_to_text(report).c_str(), stdout);

    std::ofstream json_out(model_path + ".calibration.json");
    if (!json_out) throw IoError("cannot open for writing: " + model_path + ".calibration.json");
    json_out << threshold_report_to_json(report).dump(2) << "\n";

    save_checkpoint(ckpt.model, model_path, report.chosen_threshold, ckpt.metadata);
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, const std::string& manifest_path,
             const std::optional<double>& threshold_flag) {
    LoadedCheckpoint ckpt = load_checkpoint(model_path);
    const double threshold = resolve_threshold(threshold_flag, ckpt.threshold);

    std::vector<PatchSample> samples = store_read(data_dir);
    apply_manifest(samples, load_manifest(manifest_path));
    const std::vector<PatchSample> test_set = select_split(samples, Split::Test);

    const EvalReport report = evaluate(ckpt.model, test_set, threshold);
    std::fputs(eval_report_to_text(report).c_str(), stdout);

    std::ofstream json_out(model_path + ".eval.json");
    if (!json_out) throw IoError("cannot open for writing: " + model_path + ".eval.json");
    json_out << eval_report_to_json(report).dump(2) << "\n";
    return 0;
}

int cmd_predict(const std::string& model_path, const std::string& image_path, const std::string& out_path) {
    LoadedCheckpoint ckpt = load_checkpoint(model_path);
    const double threshold = resolve_threshold(std::nullopt, ckpt.threshold);

    const RgbRaster image = load_rgb(image_path);
    if (image.width % kPatchSize != 0 || image.height % kPatchSize != 0)
        std::cerr << "image is not a multiple of 64; the border will be left unpredicted\n";

    const MaskRaster dummy = MaskRaster::zeros(image.width, image.height);
    RgbRaster result = image;
    for (const Patch& tile : partition(image, dummy)) {
        const PatchSample sample = make_sample("tile", tile);
        const std::vector<float> probs = predict(ckpt.model, sample.image);
        const RgbRaster blended = overlay(tile.image, probs, threshold);
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x)
                result.at(tile.origin.x + x, tile.origin.y + y) = blended.at(x, y);
    }
    save_rgb(out_path, result);
    std::printf("overlay written to %s\n", out_path.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tree-species segmentation pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_path, image_path, mask_path, data_dir, manifest_path, model_path;
    double brightness_threshold = 160.0, blank_threshold = 0.25;
    std::uint64_t seed = 0;
    std::optional<double> threshold_flag;

    auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic forest scenes");
    synth_cmd->add_option("--config", config_path, "Run config JSON")->required();
    synth_cmd->add_option("--out", out_path, "Output directory")->required();

    auto* prepare_cmd = app.add_subcommand("prepare", "Partition and filter an image/mask pair");
    prepare_cmd->add_option("--image", image_path, "Orthomosaic PNG")->required();
    prepare_cmd->add_option("--mask", mask_path, "Species map PNG")->required();
    prepare_cmd->add_option("--out", out_path, "Patch store directory")->required();
    prepare_cmd->add_option("--brightness-threshold", brightness_threshold, "Reject patches brighter than this");
    prepare_cmd->add_option("--blank-threshold", blank_threshold, "Reject patches with more alpha-0 than this");

    auto* split_cmd = app.add_subcommand("split", "Stratified 60/20/20 split");
    split_cmd->add_option("--data", data_dir, "Patch store directory")->required();
    split_cmd->add_option("--seed", seed, "Split seed")->required();
    split_cmd->add_option("--out", out_path, "Manifest JSON path")->required();

    auto* train_cmd = app.add_subcommand("train", "Train the segmentation model");
    train_cmd->add_option("--data", data_dir, "Patch store directory")->required();
    train_cmd->add_option("--manifest", manifest_path, "Split manifest")->required();
    train_cmd->add_option("--config", config_path, "Run config JSON")->required();
    train_cmd->add_option("--out", out_path, "Checkpoint path")->required();

    auto* calibrate_cmd = app.add_subcommand("calibrate", "Pick the output threshold on the validation split");
    calibrate_cmd->add_option("--model", model_path, "Checkpoint path")->required();
    calibrate_cmd->add_option("--data", data_dir, "Patch store directory")->required();
    calibrate_cmd->add_option("--manifest", manifest_path, "Split manifest")->required();
    calibrate_cmd->add_option("--config", config_path, "Run config JSON (optional, for the grid)");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate on the test split");
    eval_cmd->add_option("--model", model_path, "Checkpoint path")->required();
    eval_cmd->add_option("--data", data_dir, "Patch store directory")->required();
    eval_cmd->add_option("--manifest", manifest_path, "Split manifest")->required();
    eval_cmd->add_option("--threshold", threshold_flag, "Output threshold override");

    auto* predict_cmd = app.add_subcommand("predict", "Tile an image, predict and stitch a red overlay");
    predict_cmd->add_option("--model", model_path, "Checkpoint path")->required();
    predict_cmd->add_option("--image", image_path, "Input PNG")->required();
    predict_cmd->add_option("--out", out_path, "Overlay PNG path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(config_path, out_path);
        if (prepare_cmd->parsed()) return cmd_prepare(image_path, mask_path, out_path, brightness_threshold, blank_threshold);
        if (split_cmd->parsed()) return cmd_split(data_dir, seed, out_path);
        if (train_cmd->parsed()) return cmd_train(data_dir, manifest_path, config_path, out_path);
        if (calibrate_cmd->parsed()) return cmd_calibrate(model_path, data_dir, manifest_path, config_path);
        if (eval_cmd->parsed()) return cmd_eval(model_path, data_dir, manifest_path, threshold_flag);
        if (predict_cmd->parsed()) return cmd_predict(model_path, image_path, out_path);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
