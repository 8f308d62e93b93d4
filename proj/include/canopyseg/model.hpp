#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "canopyseg/autodiff.hpp"
#include "canopyseg/dataset.hpp"
#include "canopyseg/errors.hpp"
#include "canopyseg/rng.hpp"

namespace canopyseg {

struct UNetConfig {
    int depth = 4;
    int base_channels = 32;
    double dropout_p = 0.5;
    // Contractive stage indices carrying dropout; defaults to the two
    // deepest stages when unset.
    std::optional<std::vector<int>> dropout_stages;
    int in_channels = 3;
    int out_channels = 1;

    std::vector<int> effective_dropout_stages() const {
        if (dropout_stages) return *dropout_stages;
        if (depth == 1) return {0};
        return {depth - 2, depth - 1};
    }

    void validate() const {
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (kPatchSize % (1 << depth) != 0)
            throw ConfigError("64 must be divisible by 2^depth, got depth " + std::to_string(depth));
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0, 1)");
        for (int s : effective_dropout_stages())
            if (s < 0 || s >= depth) throw ConfigError("dropout stage " + std::to_string(s) + " out of range");
        if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be >= 1");
    }
};

template <typename S>
struct ConvLayer {
    ad::Tensor<S> weight; // F x C x K x K
    ad::Tensor<S> bias;   // F
};

// Encoder/decoder segmentation network. Each contractive stage is two 3x3
// convolutions + ReLU followed by 2x2 max pooling; the expansive path
// mirrors it with nearest-neighbour upsampling, a channel-halving
// convolution and a skip concatenation. A 1x1 convolution and sigmoid
// produce the per-pixel probability map.
template <typename S>
class UNetT {
public:
    UNetConfig config;

    struct EncoderStage {
        ConvLayer<S> conv1, conv2;
    };
    struct DecoderStage {
        ConvLayer<S> up, conv1, conv2;
    };

    std::vector<EncoderStage> encoder;
    EncoderStage bottleneck;
    std::vector<DecoderStage> decoder; // index i pairs with encoder stage i
    ConvLayer<S> head;

    // Canonical parameter order; checkpoint payloads follow it.
    std::vector<std::pair<std::string, ad::Tensor<S>>> named_params() {
        std::vector<std::pair<std::string, ad::Tensor<S>>> out;
        auto add = [&out](const std::string& name, ConvLayer<S>& layer) {
            out.emplace_back(name + ".weight", layer.weight);
            out.emplace_back(name + ".bias", layer.bias);
        };
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            add("enc" + std::to_string(i) + ".conv1", encoder[i].conv1);
            add("enc" + std::to_string(i) + ".conv2", encoder[i].conv2);
        }
        add("bottleneck.conv1", bottleneck.conv1);
        add("bottleneck.conv2", bottleneck.conv2);
        for (std::size_t k = 0; k < decoder.size(); ++k) {
            const std::size_t i = decoder.size() - 1 - k; // deepest first, forward order
            add("dec" + std::to_string(i) + ".up", decoder[i].up);
            add("dec" + std::to_string(i) + ".conv1", decoder[i].conv1);
            add("dec" + std::to_string(i) + ".conv2", decoder[i].conv2);
        }
        add("head", head);
        return out;
    }

    ad::Tensor<S> forward(ad::Tape<S>& tape, const ad::Tensor<S>& input, bool training = false,
                          std::uint64_t dropout_seed = 0) const {
        if (input.shape().size() != 4 || input.dim(1) != config.in_channels)
            throw ShapeError("forward expects Nx" + std::to_string(config.in_channels) + "xHxW, got " +
                                 ad::shape_str(input.shape()));
        if (input.dim(2) % (1 << config.depth) != 0 || input.dim(3) % (1 << config.depth) != 0)
            throw ShapeError("spatial size must be divisible by 2^depth");

        const auto drop_stages = config.effective_dropout_stages();
        auto has_dropout = [&](int stage) {
            return std::find(drop_stages.begin(), drop_stages.end(), stage) != drop_stages.end();
        };

        ad::Tensor<S> x = input;
        std::vector<ad::Tensor<S>> skips;
        for (int i = 0; i < config.depth; ++i) {
            x = ad::relu(tape, ad::conv2d(tape, x, encoder[i].conv1.weight, encoder[i].conv1.bias));
            x = ad::relu(tape, ad::conv2d(tape, x, encoder[i].conv2.weight, encoder[i].conv2.bias));
            if (training && config.dropout_p > 0.0 && has_dropout(i))
                x = ad::dropout(tape, x, config.dropout_p, true, derive_seed(dropout_seed, 0xD0u, static_cast<std::uint64_t>(i)));
            skips.push_back(x);
            x = ad::max_pool2d(tape, x);
        }
        x = ad::relu(tape, ad::conv2d(tape, x, bottleneck.conv1.weight, bottleneck.conv1.bias));
        x = ad::relu(tape, ad::conv2d(tape, x, bottleneck.conv2.weight, bottleneck.conv2.bias));
        for (int i = config.depth - 1; i >= 0; --i) {
            x = ad::upsample_nearest2x(tape, x);
            x = ad::relu(tape, ad::conv2d(tape, x, decoder[i].up.weight, decoder[i].up.bias));
            x = ad::concat_channels(tape, skips[i], x);
            x = ad::relu(tape, ad::conv2d(tape, x, decoder[i].conv1.weight, decoder[i].conv1.bias));
            x = ad::relu(tape, ad::conv2d(tape, x, decoder[i].conv2.weight, decoder[i].conv2.bias));
        }
        x = ad::conv2d(tape, x, head.weight, head.bias);
        return ad::sigmoid(tape, x);
    }
};

using UNet = UNetT<float>;

namespace detail {

template <typename S>
ConvLayer<S> init_conv(Rng& rng, int out_ch, int in_ch, int kernel) {
    // He-style scaling: weights ~ N(0, 2/fan_in), biases zero.
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * kernel * kernel));
    std::vector<S> w(static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel);
    for (S& v : w) v = static_cast<S>(rng.normal(0.0, stddev));
    ConvLayer<S> layer;
    layer.weight = ad::Tensor<S>::from_data({out_ch, in_ch, kernel, kernel}, std::move(w), true);
    layer.bias = ad::Tensor<S>::zeros({out_ch}, true);
    return layer;
}

} // namespace detail

template <typename S = float>
UNetT<S> build(const UNetConfig& config, std::uint64_t seed) {
    config.validate();
    UNetT<S> model;
    model.config = config;
    Rng rng(derive_seed(seed, 0x1217u));

    int ch = config.base_channels;
    int in_ch = config.in_channels;
    for (int i = 0; i < config.depth; ++i) {
        typename UNetT<S>::EncoderStage stage;
        stage.conv1 = detail::init_conv<S>(rng, ch, in_ch, 3);
        stage.conv2 = detail::init_conv<S>(rng, ch, ch, 3);
        model.encoder.push_back(stage);
        in_ch = ch;
        ch *= 2;
    }
    model.bottleneck.conv1 = detail::init_conv<S>(rng, ch, in_ch, 3);
    model.bottleneck.conv2 = detail::init_conv<S>(rng, ch, ch, 3);

    model.decoder.resize(config.depth);
    for (int i = config.depth - 1; i >= 0; --i) {
        const int stage_ch = config.base_channels << i;
        typename UNetT<S>::DecoderStage stage;
        stage.up = detail::init_conv<S>(rng, stage_ch, stage_ch * 2, 3);
        stage.conv1 = detail::init_conv<S>(rng, stage_ch, stage_ch * 2, 3);
        stage.conv2 = detail::init_conv<S>(rng, stage_ch, stage_ch, 3);
        model.decoder[i] = stage;
    }
    model.head = detail::init_conv<S>(rng, config.out_channels, config.base_channels, 1);
    return model;
}

template <typename S>
std::int64_t param_count(UNetT<S>& model) {
    std::int64_t total = 0;
    for (auto& [name, tensor] : model.named_params()) total += tensor.numel();
    return total;
}

// Loss weighting factor for one species map: coverage / a + 1. Patches with
// more target-species pixels weigh more, countering the class imbalance.
inline double loss_weight(const std::vector<std::uint8_t>& target, double a) {
    if (a <= 0.0) throw ArgumentError("loss weighting divisor a must be positive");
    return static_cast<double>(coverage(target)) / a + 1.0;
}

inline double loss_weight_from_coverage(int coverage_px, double a) {
    if (a <= 0.0) throw ArgumentError("loss weighting divisor a must be positive");
    return static_cast<double>(coverage_px) / a + 1.0;
}

// Dataset-level default for a: the minority/majority pixel ratio scaled by
// the 4096 pixels of a patch.
inline double default_a(std::int64_t total_invasive_px, std::int64_t total_non_invasive_px) {
    if (total_non_invasive_px <= 0) throw ArgumentError("default_a needs a positive non-invasive pixel count");
    return static_cast<double>(total_invasive_px) / static_cast<double>(total_non_invasive_px) * kPatchPixels;
}

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 16;
    int epochs = 1;
    double loss_a = 400.0;
    std::uint64_t seed = 0;
    bool weighting = true; // false trains with all sample weights = 1

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (loss_a <= 0.0) throw ConfigError("loss_a must be positive");
    }
};

namespace detail {

// Images enter the network as floats in [0, 1].
template <typename S>
void fill_batch(const std::vector<const PatchSample*>& batch, ad::Tensor<S>& input, ad::Tensor<S>& target) {
    const int n = static_cast<int>(batch.size());
    S* in_p = input.data();
    S* tg_p = target.data();
    for (int ni = 0; ni < n; ++ni) {
        const PatchSample& s = *batch[ni];
        for (int c = 0; c < 3; ++c) {
            S* plane = in_p + (static_cast<std::int64_t>(ni) * 3 + c) * kPatchPixels;
            for (int i = 0; i < kPatchPixels; ++i)
                plane[i] = static_cast<S>(s.image[3 * i + c]) / S(255);
        }
        S* tplane = tg_p + static_cast<std::int64_t>(ni) * kPatchPixels;
        for (int i = 0; i < kPatchPixels; ++i) tplane[i] = static_cast<S>(s.target[i]);
    }
}

} // namespace detail

// Mini-batch stochastic gradient descent with on-the-fly augmentation and
// per-sample loss weighting. Returns one mean loss per epoch. Deterministic
// given the config seeds.
template <typename S>
std::vector<double> train(UNetT<S>& model, const std::vector<PatchSample>& train_set, const TrainConfig& tc,
                          const AugmentConfig& ac) {
    tc.validate();
    ac.validate();
    if (train_set.empty()) throw DataError("training set is empty");

    auto params = model.named_params();
    std::vector<double> trace;
    trace.reserve(tc.epochs);

    std::vector<std::size_t> order(train_set.size());
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(tc.seed, 0x5EEDu, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            const int n = static_cast<int>(end - start);

            std::vector<PatchSample> augmented;
            augmented.reserve(n);
            std::vector<const PatchSample*> batch;
            std::vector<S> weights;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                augmented.push_back(augment(train_set[idx], ac,
                                            derive_seed(tc.seed, 0xA06u, static_cast<std::uint64_t>(epoch),
                                                        static_cast<std::uint64_t>(idx))));
                weights.push_back(tc.weighting
                                      ? static_cast<S>(loss_weight_from_coverage(augmented.back().coverage_px, tc.loss_a))
                                      : S(1));
            }
            for (const PatchSample& s : augmented) batch.push_back(&s);

            ad::Tensor<S> input = ad::Tensor<S>::zeros({n, 3, kPatchSize, kPatchSize});
            ad::Tensor<S> target = ad::Tensor<S>::zeros({n, 1, kPatchSize, kPatchSize});
            detail::fill_batch(batch, input, target);

            ad::Tape<S> tape;
            const std::uint64_t drop_seed =
                derive_seed(tc.seed, 0xD209u, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(start));
            ad::Tensor<S> pred = model.forward(tape, input, true, drop_seed);
            ad::Tensor<S> loss = ad::bce_loss(tape, pred, target, weights);
            tape.backward(loss);

            const S lr = static_cast<S>(tc.learning_rate);
            for (auto& [name, p] : params) {
                if (p.grad().empty()) continue;
                S* v = p.data();
                const S* g = p.grad().data();
                for (std::int64_t i = 0; i < p.numel(); ++i) v[i] -= lr * g[i];
                p.zero_grad();
            }

            epoch_loss += static_cast<double>(loss.value()[0]) * n;
            seen += n;
        }
        trace.push_back(epoch_loss / static_cast<double>(seen));
    }
    return trace;
}

// Inference on one 64x64 RGB patch; dropout disabled, nothing recorded.
template <typename S>
std::vector<S> predict(const UNetT<S>& model, const std::vector<std::uint8_t>& image) {
    if (image.size() != static_cast<std::size_t>(kPatchPixels) * 3)
        throw ShapeError("predict expects a 64x64x3 patch, got " + std::to_string(image.size()) + " bytes");
    ad::Tensor<S> input = ad::Tensor<S>::zeros({1, 3, kPatchSize, kPatchSize});
    S* in_p = input.data();
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < kPatchPixels; ++i)
            in_p[static_cast<std::int64_t>(c) * kPatchPixels + i] = static_cast<S>(image[3 * i + c]) / S(255);

    ad::Tape<S> tape;
    tape.recording = false;
    ad::Tensor<S> out = model.forward(tape, input, false, 0);
    return out.value();
}

// Batched inference over many samples, in input order.
template <typename S>
std::vector<std::vector<S>> predict_batch(const UNetT<S>& model, const std::vector<PatchSample>& samples,
                                          int batch_size = 16) {
    std::vector<std::vector<S>> out;
    out.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        const int n = static_cast<int>(end - start);
        std::vector<const PatchSample*> batch;
        for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[k]);

        ad::Tensor<S> input = ad::Tensor<S>::zeros({n, 3, kPatchSize, kPatchSize});
        ad::Tensor<S> target = ad::Tensor<S>::zeros({n, 1, kPatchSize, kPatchSize});
        detail::fill_batch(batch, input, target);

        ad::Tape<S> tape;
        tape.recording = false;
        ad::Tensor<S> pred = model.forward(tape, input, false, 0);
        for (int ni = 0; ni < n; ++ni) {
            const S* p = pred.data() + static_cast<std::int64_t>(ni) * kPatchPixels;
            out.emplace_back(p, p + kPatchPixels);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CSEG" magic, u32 version, u64 header length, JSON header
// (config, tensor names+shapes, metadata, optional calibrated threshold),
// then raw little-endian float32 payloads in header order.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
    UNet model;
    std::optional<double> threshold;
    nlohmann::json metadata;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline nlohmann::json config_to_json(const UNetConfig& c) {
    nlohmann::json j = {{"depth", c.depth},
                        {"base_channels", c.base_channels},
                        {"dropout_p", c.dropout_p},
                        {"dropout_stages", c.effective_dropout_stages()},
                        {"in_channels", c.in_channels},
                        {"out_channels", c.out_channels}};
    return j;
}

inline UNetConfig config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.depth = j.at("depth").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.dropout_p = j.at("dropout_p").get<double>();
    c.dropout_stages = j.at("dropout_stages").get<std::vector<int>>();
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    return c;
}

} // namespace detail

inline void save_checkpoint(UNet& model, const std::string& path, std::optional<double> threshold = std::nullopt,
                            nlohmann::json metadata = nlohmann::json::object()) {
    auto params = model.named_params();
    nlohmann::json tensors = nlohmann::json::array();
    for (auto& [name, t] : params) tensors.push_back({{"name", name}, {"shape", t.shape()}});
    nlohmann::json header = {{"config", detail::config_to_json(model.config)},
                             {"tensors", tensors},
                             {"metadata", std::move(metadata)}};
    if (threshold) header["threshold"] = *threshold;
    const std::string header_str = header.dump();

    std::string blob;
    blob.append(kCheckpointMagic, 4);
    detail::put_u32(blob, kCheckpointVersion);
    detail::put_u64(blob, header_str.size());
    blob += header_str;
    for (auto& [name, t] : params) {
        for (float v : t.value()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(blob, bits);
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < 16) throw FormatError("checkpoint too short: " + path);
    if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad checkpoint magic: " + path);
    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint32_t version = detail::get_u32(bytes + 4);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    const std::uint64_t header_len = detail::get_u64(bytes + 8);
    if (16 + header_len > blob.size()) throw FormatError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint header: " + std::string(e.what()));
    }

    LoadedCheckpoint result;
    try {
        result.model = build<float>(detail::config_from_json(header.at("config")), 0);
        if (header.contains("threshold")) result.threshold = header.at("threshold").get<double>();
        if (header.contains("metadata")) result.metadata = header.at("metadata");

        auto params = result.model.named_params();
        const auto& tensors = header.at("tensors");
        if (tensors.size() != params.size()) throw FormatError("checkpoint tensor list mismatch: " + path);

        std::size_t offset = 16 + header_len;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& [name, t] = params[i];
            if (tensors[i].at("name").get<std::string>() != name ||
                tensors[i].at("shape").get<std::vector<int>>() != t.shape())
                throw FormatError("checkpoint tensor " + std::to_string(i) + " does not match the architecture");
            const std::size_t bytes_needed = static_cast<std::size_t>(t.numel()) * 4;
            if (offset + bytes_needed > blob.size()) throw FormatError("truncated checkpoint payload: " + path);
            float* v = t.data();
            for (std::int64_t k = 0; k < t.numel(); ++k) {
                const std::uint32_t bits = detail::get_u32(bytes + offset + 4 * k);
                std::memcpy(&v[k], &bits, 4);
            }
            offset += bytes_needed;
        }
        if (offset != blob.size()) throw FormatError("checkpoint payload has trailing bytes: " + path);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint header: " + std::string(e.what()));
    }
    return result;
}

inline void save_loss_csv(const std::string& path, const std::vector<double>& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "epoch,mean_loss\n";
    char buf[64];
    for (std::size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i, trace[i]);
        out << buf;
    }
}

} // namespace canopyseg
