#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "canopyseg/errors.hpp"
#include "canopyseg/rng.hpp"

namespace canopyseg::ad {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
}

// Worker cap for the convolution kernels. CANOPYSEG_THREADS overrides the
// hardware count; parallel loops assign disjoint outputs to each thread, so
// results are identical for any thread count.
inline int thread_cap() {
    static const int cap = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        if (const char* env = std::getenv("CANOPYSEG_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) n = std::min(n, v);
        }
        return n;
    }();
    return cap;
}

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad; // empty means zero
    bool requires_grad = false;
    std::uint64_t tape_epoch = 0; // epoch of the tape step that produced this node; 0 = leaf
};

// Value-semantic handle to a shared tensor node. Copies alias the same data,
// matching how parameters are shared between the tape and the optimizer.
template <typename S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return with_data(std::move(shape), {}, requires_grad);
    }

    static Tensor full(Shape shape, S fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        return with_data(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    int dim(int i) const { return node_->shape[i]; }

    std::vector<S>& value() { return node_->value; }
    const std::vector<S>& value() const { return node_->value; }
    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    // Gradient vector; empty while no adjoint has been accumulated.
    const std::vector<S>& grad() const { return node_->grad; }
    S grad_at(std::int64_t i) const { return node_->grad.empty() ? S(0) : node_->grad[i]; }
    void zero_grad() { node_->grad.clear(); }

    std::vector<S>& ensure_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), S(0));
        return node_->grad;
    }

    std::shared_ptr<TensorNode<S>> node() const { return node_; }

private:
    static Tensor with_data(Shape shape, std::vector<S> data, bool requires_grad) {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<S>>();
        t.node_->shape = std::move(shape);
        if (data.empty())
            t.node_->value.assign(static_cast<std::size_t>(shape_numel(t.node_->shape)), S(0));
        else
            t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    std::shared_ptr<TensorNode<S>> node_;
};

// Ordered record of primitive operations. Backward replays the record in
// reverse; a step whose output never received an adjoint is skipped, so
// parameters unreachable from the loss keep zero gradients.
template <typename S>
class Tape {
public:
    bool recording = true;

    void record(const Tensor<S>& output, std::function<void()> backward_fn) {
        output.node()->tape_epoch = epoch_;
        steps_.push_back({output.node(), std::move(backward_fn)});
    }

    void backward(const Tensor<S>& loss) {
        if (loss.numel() != 1) throw ArgumentError("backward expects a scalar loss");
        if (loss.node()->tape_epoch != epoch_)
            throw StateError("loss was not produced by this tape (tape cleared or foreign tensor)");
        loss.node()->grad.assign(1, S(1));
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            it->fn();
        }
    }

    void clear() {
        steps_.clear();
        ++epoch_;
    }

    std::size_t size() const { return steps_.size(); }

private:
    struct Step {
        std::shared_ptr<TensorNode<S>> output;
        std::function<void()> fn;
    };
    std::vector<Step> steps_;
    std::uint64_t epoch_ = 1;
};

namespace detail {

template <typename S>
bool track(const Tape<S>& tape, std::initializer_list<const Tensor<S>*> inputs) {
    if (!tape.recording) return false;
    for (const Tensor<S>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

} // namespace detail

// ---------------------------------------------------------------------------
// conv2d: odd square kernel, stride 1, zero padding (k-1)/2, so spatial size
// is preserved. Cross-correlation, differentiable in input, weight and bias.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(Tape<S>& tape, const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias) {
    if (input.shape().size() != 4 || weight.shape().size() != 4 || bias.shape().size() != 1)
        throw ShapeError("conv2d expects input NxCxHxW, weight FxCxKxK, bias F");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int f = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c)
        throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(c) + ", weight C=" +
                         std::to_string(weight.dim(1)));
    if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d kernel must be odd and square");
    if (bias.dim(0) != f) throw ShapeError("conv2d bias size must equal filter count");
    const int pad = k / 2;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;

    Tensor<S> out = Tensor<S>::zeros({n, f, h, w});
    const S* in_p = input.data();
    const S* w_p = weight.data();
    const S* b_p = bias.data();
    S* out_p = out.data();

#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
    for (int ni = 0; ni < n; ++ni) {
        for (int fi = 0; fi < f; ++fi) {
            S* op = out_p + (static_cast<std::int64_t>(ni) * f + fi) * plane;
            std::fill(op, op + plane, b_p[fi]);
            for (int ci = 0; ci < c; ++ci) {
                const S* ip = in_p + (static_cast<std::int64_t>(ni) * c + ci) * plane;
                for (int ky = 0; ky < k; ++ky) {
                    const int dy = ky - pad;
                    const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                    for (int kx = 0; kx < k; ++kx) {
                        const int dx = kx - pad;
                        const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                        const S wv = w_p[((static_cast<std::int64_t>(fi) * c + ci) * k + ky) * k + kx];
                        for (int y = ylo; y < yhi; ++y) {
                            S* orow = op + static_cast<std::int64_t>(y) * w;
                            const S* irow = ip + static_cast<std::int64_t>(y + dy) * w + dx;
                            for (int x = xlo; x < xhi; ++x) orow[x] += wv * irow[x];
                        }
                    }
                }
            }
        }
    }

    if (detail::track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto w_n = weight.node();
        auto b_n = bias.node();
        auto out_n = out.node();
        tape.record(out, [in_n, w_n, b_n, out_n, n, c, h, w, f, k, pad, plane] {
            const S* go = out_n->grad.data();
            if (in_n->requires_grad) {
                if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
                S* gi = in_n->grad.data();
                const S* wp = w_n->value.data();
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
                for (int ni = 0; ni < n; ++ni) {
                    for (int ci = 0; ci < c; ++ci) {
                        S* gip = gi + (static_cast<std::int64_t>(ni) * c + ci) * plane;
                        for (int fi = 0; fi < f; ++fi) {
                            const S* gop = go + (static_cast<std::int64_t>(ni) * f + fi) * plane;
                            for (int ky = 0; ky < k; ++ky) {
                                const int dy = ky - pad;
                                const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                                for (int kx = 0; kx < k; ++kx) {
                                    const int dx = kx - pad;
                                    const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                                    const S wv = wp[((static_cast<std::int64_t>(fi) * c + ci) * k + ky) * k + kx];
                                    for (int y = ylo; y < yhi; ++y) {
                                        S* girow = gip + static_cast<std::int64_t>(y + dy) * w + dx;
                                        const S* gorow = gop + static_cast<std::int64_t>(y) * w;
                                        for (int x = xlo; x < xhi; ++x) girow[x] += wv * gorow[x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (w_n->requires_grad) {
                if (w_n->grad.empty()) w_n->grad.assign(w_n->value.size(), S(0));
                S* gw = w_n->grad.data();
                const S* ip_all = in_n->value.data();
#pragma omp parallel for collapse(2) schedule(static) num_threads(thread_cap())
                for (int fi = 0; fi < f; ++fi) {
                    for (int ci = 0; ci < c; ++ci) {
                        for (int ky = 0; ky < k; ++ky) {
                            const int dy = ky - pad;
                            const int ylo = std::max(0, -dy), yhi = std::min(h, h - dy);
                            for (int kx = 0; kx < k; ++kx) {
                                const int dx = kx - pad;
                                const int xlo = std::max(0, -dx), xhi = std::min(w, w - dx);
                                S acc = 0;
                                for (int ni = 0; ni < n; ++ni) {
                                    const S* ip = ip_all + (static_cast<std::int64_t>(ni) * c + ci) * plane;
                                    const S* gop = go + (static_cast<std::int64_t>(ni) * f + fi) * plane;
                                    for (int y = ylo; y < yhi; ++y) {
                                        const S* irow = ip + static_cast<std::int64_t>(y + dy) * w + dx;
                                        const S* gorow = gop + static_cast<std::int64_t>(y) * w;
                                        for (int x = xlo; x < xhi; ++x) acc += irow[x] * gorow[x];
                                    }
                                }
                                gw[((static_cast<std::int64_t>(fi) * c + ci) * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            }
            if (b_n->requires_grad) {
                if (b_n->grad.empty()) b_n->grad.assign(b_n->value.size(), S(0));
                S* gb = b_n->grad.data();
                for (int fi = 0; fi < f; ++fi) {
                    S acc = 0;
                    for (int ni = 0; ni < n; ++ni) {
                        const S* gop = go + (static_cast<std::int64_t>(ni) * f + fi) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) acc += gop[i];
                    }
                    gb[fi] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// max_pool2d: 2x2 windows, stride 2. The adjoint routes the gradient to the
// argmax; ties resolve to the first element in row-major window order.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> max_pool2d(Tape<S>& tape, const Tensor<S>& input) {
    if (input.shape().size() != 4) throw ShapeError("max_pool2d expects NxCxHxW");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw ShapeError("max_pool2d needs even H and W, got " + shape_str(input.shape()));
    const int oh = h / 2, ow = w / 2;

    Tensor<S> out = Tensor<S>::zeros({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
    const S* ip = input.data();
    S* op = out.data();
    std::int64_t oi = 0;
    for (int p = 0; p < n * c; ++p) {
        const S* plane = ip + static_cast<std::int64_t>(p) * h * w;
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x, ++oi) {
                std::int64_t best_idx = static_cast<std::int64_t>(2 * y) * w + 2 * x;
                S best = plane[best_idx];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::int64_t idx = static_cast<std::int64_t>(2 * y + dy) * w + 2 * x + dx;
                        if (plane[idx] > best) {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                op[oi] = best;
                (*argmax)[oi] = static_cast<std::int64_t>(p) * h * w + best_idx;
            }
        }
    }

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n, argmax] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S* go = out_n->grad.data();
            S* gi = in_n->grad.data();
            for (std::size_t i = 0; i < argmax->size(); ++i) gi[(*argmax)[i]] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// upsample_nearest2x: each pixel replicated into a 2x2 block; the adjoint
// sums the four incoming gradients.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> upsample_nearest2x(Tape<S>& tape, const Tensor<S>& input) {
    if (input.shape().size() != 4) throw ShapeError("upsample_nearest2x expects NxCxHxW");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int oh = 2 * h, ow = 2 * w;

    Tensor<S> out = Tensor<S>::zeros({n, c, oh, ow});
    const S* ip = input.data();
    S* op = out.data();
    for (int p = 0; p < n * c; ++p) {
        const S* iplane = ip + static_cast<std::int64_t>(p) * h * w;
        S* oplane = op + static_cast<std::int64_t>(p) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const S* irow = iplane + static_cast<std::int64_t>(y / 2) * w;
            S* orow = oplane + static_cast<std::int64_t>(y) * ow;
            for (int x = 0; x < ow; ++x) orow[x] = irow[x / 2];
        }
    }

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n, n, c, h, w, oh, ow] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S* go = out_n->grad.data();
            S* gi = in_n->grad.data();
            for (int p = 0; p < n * c; ++p) {
                S* giplane = gi + static_cast<std::int64_t>(p) * h * w;
                const S* goplane = go + static_cast<std::int64_t>(p) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    S* girow = giplane + static_cast<std::int64_t>(y / 2) * w;
                    const S* gorow = goplane + static_cast<std::int64_t>(y) * ow;
                    for (int x = 0; x < ow; ++x) girow[x / 2] += gorow[x];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& input) {
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const S* ip = input.data();
    S* op = out.data();
    const std::int64_t count = input.numel();
    for (std::int64_t i = 0; i < count; ++i) op[i] = ip[i] > S(0) ? ip[i] : S(0);

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n, count] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S* go = out_n->grad.data();
            const S* iv = in_n->value.data();
            S* gi = in_n->grad.data();
            for (std::int64_t i = 0; i < count; ++i)
                if (iv[i] > S(0)) gi[i] += go[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& input) {
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const S* ip = input.data();
    S* op = out.data();
    const std::int64_t count = input.numel();
    for (std::int64_t i = 0; i < count; ++i) {
        const S x = ip[i];
        if (x >= S(0)) {
            op[i] = S(1) / (S(1) + std::exp(-x));
        } else {
            const S e = std::exp(x);
            op[i] = e / (S(1) + e);
        }
    }

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n, count] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S* go = out_n->grad.data();
            const S* ov = out_n->value.data();
            S* gi = in_n->grad.data();
            for (std::int64_t i = 0; i < count; ++i) gi[i] += go[i] * ov[i] * (S(1) - ov[i]);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-p) at train time, so
// inference is the identity (the input tensor is returned unchanged).
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> dropout(Tape<S>& tape, const Tensor<S>& input, double p, bool training, std::uint64_t rng_seed) {
    if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout probability must be in [0, 1)");
    if (!training || p == 0.0) return input;

    Rng rng(rng_seed);
    const S scale = static_cast<S>(1.0 / (1.0 - p));
    auto factors = std::make_shared<std::vector<S>>(input.numel());
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const S* ip = input.data();
    S* op = out.data();
    for (std::int64_t i = 0; i < input.numel(); ++i) {
        const S f = rng.bernoulli(p) ? S(0) : scale;
        (*factors)[i] = f;
        op[i] = ip[i] * f;
    }

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n, factors] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S* go = out_n->grad.data();
            S* gi = in_n->grad.data();
            for (std::size_t i = 0; i < factors->size(); ++i) gi[i] += go[i] * (*factors)[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat_channels: NxC1xHxW + NxC2xHxW -> Nx(C1+C2)xHxW; the adjoint splits
// the gradient back.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> concat_channels(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4) throw ShapeError("concat_channels expects NxCxHxW");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels needs matching N, H, W: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int n = a.dim(0), c1 = a.dim(1), c2 = b.dim(1), h = a.dim(2), w = a.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;

    Tensor<S> out = Tensor<S>::zeros({n, c1 + c2, h, w});
    S* op = out.data();
    for (int ni = 0; ni < n; ++ni) {
        std::copy_n(a.data() + static_cast<std::int64_t>(ni) * c1 * plane, c1 * plane,
                    op + static_cast<std::int64_t>(ni) * (c1 + c2) * plane);
        std::copy_n(b.data() + static_cast<std::int64_t>(ni) * c2 * plane, c2 * plane,
                    op + static_cast<std::int64_t>(ni) * (c1 + c2) * plane + c1 * plane);
    }

    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto a_n = a.node();
        auto b_n = b.node();
        auto out_n = out.node();
        tape.record(out, [a_n, b_n, out_n, n, c1, c2, plane] {
            const S* go = out_n->grad.data();
            if (a_n->requires_grad) {
                if (a_n->grad.empty()) a_n->grad.assign(a_n->value.size(), S(0));
                for (int ni = 0; ni < n; ++ni) {
                    const S* src = go + static_cast<std::int64_t>(ni) * (c1 + c2) * plane;
                    S* dst = a_n->grad.data() + static_cast<std::int64_t>(ni) * c1 * plane;
                    for (std::int64_t i = 0; i < c1 * plane; ++i) dst[i] += src[i];
                }
            }
            if (b_n->requires_grad) {
                if (b_n->grad.empty()) b_n->grad.assign(b_n->value.size(), S(0));
                for (int ni = 0; ni < n; ++ni) {
                    const S* src = go + static_cast<std::int64_t>(ni) * (c1 + c2) * plane + c1 * plane;
                    S* dst = b_n->grad.data() + static_cast<std::int64_t>(ni) * c2 * plane;
                    for (std::int64_t i = 0; i < c2 * plane; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Weighted binary cross-entropy. Predictions are clamped to [eps, 1-eps];
// each sample's pixel-mean loss is multiplied by its weight, then the batch
// is averaged. Targets and weights are constants.
// ---------------------------------------------------------------------------
inline constexpr double kBceEps = 1e-7;

template <typename S>
Tensor<S> bce_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, const std::vector<S>& weights) {
    if (pred.shape() != target.shape())
        throw ShapeError("bce_loss shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    if (pred.shape().empty()) throw ShapeError("bce_loss expects a batched tensor");
    const int n = pred.dim(0);
    if (static_cast<int>(weights.size()) != n)
        throw ShapeError("bce_loss needs one weight per sample: got " + std::to_string(weights.size()) +
                         " for batch " + std::to_string(n));
    const std::int64_t per_sample = pred.numel() / n;
    const S eps = static_cast<S>(kBceEps);
    const S lo = eps, hi = S(1) - eps;

    const S* pp = pred.data();
    const S* tp = target.data();
    double total = 0.0;
    for (int ni = 0; ni < n; ++ni) {
        double sample_sum = 0.0;
        const S* p = pp + static_cast<std::int64_t>(ni) * per_sample;
        const S* t = tp + static_cast<std::int64_t>(ni) * per_sample;
        for (std::int64_t i = 0; i < per_sample; ++i) {
            const S pc = std::clamp(p[i], lo, hi);
            sample_sum -= static_cast<double>(t[i]) * std::log(static_cast<double>(pc)) +
                          (1.0 - static_cast<double>(t[i])) * std::log(1.0 - static_cast<double>(pc));
        }
        total += static_cast<double>(weights[ni]) * sample_sum / static_cast<double>(per_sample);
    }
    Tensor<S> out = Tensor<S>::from_data({1}, {static_cast<S>(total / n)});

    if (detail::track(tape, {&pred})) {
        out.set_requires_grad(true);
        auto p_n = pred.node();
        auto t_n = target.node();
        auto out_n = out.node();
        auto w = std::make_shared<std::vector<S>>(weights);
        tape.record(out, [p_n, t_n, out_n, w, n, per_sample, lo, hi] {
            if (p_n->grad.empty()) p_n->grad.assign(p_n->value.size(), S(0));
            const S gl = out_n->grad[0];
            const S* p = p_n->value.data();
            const S* t = t_n->value.data();
            S* gp = p_n->grad.data();
            for (int ni = 0; ni < n; ++ni) {
                const S factor = gl * (*w)[ni] / (static_cast<S>(n) * static_cast<S>(per_sample));
                for (std::int64_t i = 0; i < per_sample; ++i) {
                    const std::int64_t idx = static_cast<std::int64_t>(ni) * per_sample + i;
                    if (p[idx] < lo || p[idx] > hi) continue; // clamped region: flat
                    gp[idx] += factor * (-t[idx] / p[idx] + (S(1) - t[idx]) / (S(1) - p[idx]));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and elementwise helpers used by the trainer and the tests.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& input) {
    double total = 0.0;
    const S* ip = input.data();
    for (std::int64_t i = 0; i < input.numel(); ++i) total += static_cast<double>(ip[i]);
    Tensor<S> out = Tensor<S>::from_data({1}, {static_cast<S>(total)});

    if (detail::track(tape, {&input})) {
        out.set_requires_grad(true);
        auto in_n = input.node();
        auto out_n = out.node();
        tape.record(out, [in_n, out_n] {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->value.size(), S(0));
            const S g = out_n->grad[0];
            for (S& v : in_n->grad) v += g;
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const S* ap = a.data();
    const S* bp = b.data();
    S* op = out.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] * bp[i];

    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        auto a_n = a.node();
        auto b_n = b.node();
        auto out_n = out.node();
        tape.record(out, [a_n, b_n, out_n] {
            const S* go = out_n->grad.data();
            if (a_n->requires_grad) {
                if (a_n->grad.empty()) a_n->grad.assign(a_n->value.size(), S(0));
                for (std::size_t i = 0; i < a_n->grad.size(); ++i) a_n->grad[i] += go[i] * b_n->value[i];
            }
            if (b_n->requires_grad) {
                if (b_n->grad.empty()) b_n->grad.assign(b_n->value.size(), S(0));
                for (std::size_t i = 0; i < b_n->grad.size(); ++i) b_n->grad[i] += go[i] * a_n->value[i];
            }
        });
    }
    return out;
}

} // namespace canopyseg::ad
