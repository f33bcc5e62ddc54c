#pragma once

// Bias-free fully connected networks with explicit 1/sqrt(width)
// forward scaling, N(0,1) init, and hand-derived backpropagation.
// Two gradient routes exist: a per-sample route (one flattened
// gradient per sample, used by the geometry analyses) and a batched
// route that forms subset gradient sums directly with GEMM kernels.
// Both accumulate in fixed orders, so results are run-to-run stable.

#include <cleanprio/data.hpp>
#include <cleanprio/numcore.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace cleanprio::network {

using numcore::Matrix;
using numcore::SeededRng;
using numcore::Vector;

class unsupported_operation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

enum class Activation { linear, relu };
enum class Head { sigmoid, softmax };

struct NetworkConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_widths;
    Activation activation = Activation::relu;
    Head head = Head::sigmoid;
    std::size_t num_logits = 1;

    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("network: input_dim must be positive");
        if (hidden_widths.empty()) throw std::invalid_argument("network: need at least one hidden layer");
        for (std::size_t w : hidden_widths)
            if (w == 0) throw std::invalid_argument("network: hidden widths must be positive");
        if (num_logits == 0) throw std::invalid_argument("network: num_logits must be positive");
        if ((head == Head::sigmoid) != (num_logits == 1))
            throw std::invalid_argument("network: sigmoid head requires exactly one logit and vice versa");
    }

    // weight matrices: one per hidden layer plus the output layer
    std::size_t num_layers() const { return hidden_widths.size() + 1; }
    std::size_t in_dim(std::size_t k) const { return k == 0 ? input_dim : hidden_widths[k - 1]; }
    std::size_t out_dim(std::size_t k) const {
        return k == hidden_widths.size() ? num_logits : hidden_widths[k];
    }
    // the 1/sqrt(m) factor applied to each hidden layer's output when consumed
    double in_scale(std::size_t k) const {
        return k == 0 ? 1.0 : 1.0 / std::sqrt(static_cast<double>(in_dim(k)));
    }
    std::size_t param_count() const {
        std::size_t total = 0;
        for (std::size_t k = 0; k < num_layers(); ++k) total += in_dim(k) * out_dim(k);
        return total;
    }
};

struct NetworkState {
    NetworkConfig config;
    Vector params;                      // all weight matrices, row-major, layer by layer
    std::vector<std::size_t> offsets;   // start of each layer inside params

    std::span<double> layer(std::size_t k) {
        return {params.data() + offsets[k], config.in_dim(k) * config.out_dim(k)};
    }
    std::span<const double> layer(std::size_t k) const {
        return {params.data() + offsets[k], config.in_dim(k) * config.out_dim(k)};
    }
};

inline NetworkState init_ntk(const NetworkConfig& config, SeededRng& rng) {
    config.validate();
    NetworkState st;
    st.config = config;
    st.offsets.resize(config.num_layers());
    std::size_t off = 0;
    for (std::size_t k = 0; k < config.num_layers(); ++k) {
        st.offsets[k] = off;
        off += config.in_dim(k) * config.out_dim(k);
    }
    st.params.resize(off);
    for (double& w : st.params) w = rng.next_gaussian();
    return st;
}

namespace detail {

inline double activate(double z, Activation a) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : z;
}
inline double activate_grad(double z, Activation a) {
    return a == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0;
}

inline double sigmoid(double h) {
    if (h >= 0.0) return 1.0 / (1.0 + std::exp(-h));
    const double e = std::exp(h);
    return e / (1.0 + e);
}

// log(1 + e^h), overflow-safe
inline double softplus(double h) {
    return std::max(h, 0.0) + std::log1p(std::exp(-std::abs(h)));
}

inline void softmax_into(std::span<const double> h, std::span<double> f) {
    double mx = h[0];
    for (double v : h) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t c = 0; c < h.size(); ++c) {
        f[c] = std::exp(h[c] - mx);
        z += f[c];
    }
    for (std::size_t c = 0; c < h.size(); ++c) f[c] /= z;
}

inline double log_sum_exp(std::span<const double> h) {
    double mx = h[0];
    for (double v : h) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : h) z += std::exp(v - mx);
    return mx + std::log(z);
}

}  // namespace detail

struct ForwardRecord {
    std::vector<Vector> pre;   // pre-activations, one per layer; back() is the logits
    std::vector<Vector> post;  // post-activations for hidden layers
    Vector logits;
    Vector outputs;            // sigmoid probability or softmax distribution
};

inline ForwardRecord forward(const NetworkState& state, std::span<const double> x) {
    const NetworkConfig& cfg = state.config;
    if (x.size() != cfg.input_dim) throw std::invalid_argument("forward: input length mismatch");
    ForwardRecord rec;
    Vector cur(x.begin(), x.end());
    for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
        const double s = cfg.in_scale(k);
        if (s != 1.0)
            for (double& v : cur) v *= s;
        Vector z(cfg.out_dim(k));
        const double* W = state.params.data() + state.offsets[k];
        const std::size_t in = cfg.in_dim(k);
        for (std::size_t i = 0; i < z.size(); ++i)
            z[i] = numcore::dot({W + i * in, in}, cur);
        rec.pre.push_back(z);
        if (k + 1 < cfg.num_layers()) {
            for (double& v : z) v = detail::activate(v, cfg.activation);
            rec.post.push_back(z);
            cur = std::move(z);
        } else {
            rec.logits = std::move(z);
        }
    }
    rec.outputs.resize(cfg.num_logits);
    if (cfg.head == Head::sigmoid) {
        rec.outputs[0] = detail::sigmoid(rec.logits[0]);
    } else {
        detail::softmax_into(rec.logits, rec.outputs);
    }
    return rec;
}

namespace detail {

// Shared core: gradient of sum_c delta[c] * h_c with respect to all
// parameters, reusing the cached forward pass. Output accumulates
// into `grad` (sized param_count, zero-initialized by the caller).
inline void backprop_logit_delta(const NetworkState& state, std::span<const double> x,
                                 const ForwardRecord& rec, std::span<const double> delta,
                                 std::span<double> grad) {
    const NetworkConfig& cfg = state.config;
    Vector cur(delta.begin(), delta.end());
    for (std::size_t k = cfg.num_layers(); k-- > 0;) {
        const std::size_t in = cfg.in_dim(k), out = cfg.out_dim(k);
        const double s = cfg.in_scale(k);
        // layer input, with the forward scale folded in
        Vector a(in);
        if (k == 0) {
            for (std::size_t j = 0; j < in; ++j) a[j] = x[j];
        } else {
            for (std::size_t j = 0; j < in; ++j) a[j] = s * rec.post[k - 1][j];
        }
        double* dW = grad.data() + state.offsets[k];
        for (std::size_t i = 0; i < out; ++i) {
            const double d = cur[i];
            if (d == 0.0) continue;
            double* row = dW + i * in;
            for (std::size_t j = 0; j < in; ++j) row[j] += d * a[j];
        }
        if (k == 0) break;
        const double* W = state.params.data() + state.offsets[k];
        Vector prev(in, 0.0);
        for (std::size_t i = 0; i < out; ++i) {
            const double d = cur[i];
            if (d == 0.0) continue;
            const double* row = W + i * in;
            for (std::size_t j = 0; j < in; ++j) prev[j] += d * row[j];
        }
        for (std::size_t j = 0; j < in; ++j)
            prev[j] *= s * activate_grad(rec.pre[k - 1][j], cfg.activation);
        cur = std::move(prev);
    }
}

inline void check_label(const NetworkConfig& cfg, int y) {
    if (cfg.head == Head::sigmoid) {
        if (y != 0 && y != 1) throw std::invalid_argument("label must be 0 or 1 for a sigmoid head");
    } else if (y < 0 || static_cast<std::size_t>(y) >= cfg.num_logits) {
        throw std::invalid_argument("label out of range for softmax head");
    }
}

}  // namespace detail

// Gradient of the pre-activation logit h_c with respect to all
// parameters (head detached).
inline Vector model_derivative(const NetworkState& state, std::span<const double> x, std::size_t c = 0) {
    if (c >= state.config.num_logits) throw std::invalid_argument("model_derivative: logit index out of range");
    ForwardRecord rec = forward(state, x);
    Vector grad(state.params.size(), 0.0);
    Vector delta(state.config.num_logits, 0.0);
    delta[c] = 1.0;
    detail::backprop_logit_delta(state, x, rec, delta, grad);
    return grad;
}

struct SampleGradient {
    Vector grad;             // same indexing as params
    Vector residual_factor;  // f - y: one entry for sigmoid, per-logit for softmax
    std::size_t sample_id = 0;
};

// Gradient of the sample loss: (f - y) backpropagated through the
// logits (the fused logistic / softmax cross-entropy form).
inline SampleGradient per_sample_gradient(const NetworkState& state, std::span<const double> x, int y) {
    detail::check_label(state.config, y);
    ForwardRecord rec = forward(state, x);
    SampleGradient sg;
    sg.grad.assign(state.params.size(), 0.0);
    sg.residual_factor.resize(state.config.num_logits);
    for (std::size_t c = 0; c < state.config.num_logits; ++c) {
        const double yc = state.config.head == Head::sigmoid ? static_cast<double>(y)
                                                             : (static_cast<std::size_t>(y) == c ? 1.0 : 0.0);
        sg.residual_factor[c] = rec.outputs[c] - yc;
    }
    detail::backprop_logit_delta(state, x, rec, sg.residual_factor, sg.grad);
    return sg;
}

// The logit-c component (f_c - y_c) grad(h_c) of a multi-class sample
// gradient, materialized over the full parameter vector (output rows
// for other logits stay zero).
inline SampleGradient single_logit_gradient(const NetworkState& state, std::span<const double> x,
                                            int y, std::size_t c) {
    if (state.config.head != Head::softmax)
        throw unsupported_operation("single_logit_gradient requires a softmax head");
    if (c >= state.config.num_logits) throw std::invalid_argument("single_logit_gradient: logit out of range");
    detail::check_label(state.config, y);
    ForwardRecord rec = forward(state, x);
    SampleGradient sg;
    sg.grad.assign(state.params.size(), 0.0);
    const double yc = static_cast<std::size_t>(y) == c ? 1.0 : 0.0;
    sg.residual_factor.assign(1, rec.outputs[c] - yc);
    Vector delta(state.config.num_logits, 0.0);
    delta[c] = sg.residual_factor[0];
    detail::backprop_logit_delta(state, x, rec, delta, sg.grad);
    return sg;
}

enum class GradientMode { full, single_logit };

namespace detail {

// One block of the batched forward pass. Keeps the scaled layer
// inputs and raw pre-activations needed by the backward sweep.
struct BatchForward {
    std::vector<Matrix> inputs;  // inputs[k]: block x in_dim(k), scale folded in
    std::vector<Matrix> pre;     // pre[k]:    block x out_dim(k)
    std::size_t block = 0;
};

inline BatchForward batch_forward(const NetworkState& state, const data::SubsetView& view,
                                  std::size_t first, std::size_t count) {
    const NetworkConfig& cfg = state.config;
    BatchForward bf;
    bf.block = count;
    Matrix cur(count, cfg.input_dim);
    for (std::size_t r = 0; r < count; ++r) {
        auto x = view.x(first + r);
        std::copy(x.begin(), x.end(), cur.row(r).begin());
    }
    for (std::size_t k = 0; k < cfg.num_layers(); ++k) {
        const double s = cfg.in_scale(k);
        if (s != 1.0)
            for (double& v : cur.data) v *= s;
        bf.inputs.push_back(cur);
        Matrix z(count, cfg.out_dim(k));
        numcore::gemm_nt(cur.data.data(), state.params.data() + state.offsets[k], z.data.data(),
                         count, cfg.in_dim(k), cfg.out_dim(k));
        bf.pre.push_back(z);
        if (k + 1 < cfg.num_layers()) {
            for (double& v : z.data) v = activate(v, cfg.activation);
            cur = std::move(z);
        }
    }
    return bf;
}

// Backward sweep for a whole block: delta holds one row per sample on
// the logits; accumulates layer gradients into grad in sample order.
inline void batch_backward(const NetworkState& state, const BatchForward& bf, Matrix& delta,
                           std::span<double> grad) {
    const NetworkConfig& cfg = state.config;
    const std::size_t B = bf.block;
    for (std::size_t k = cfg.num_layers(); k-- > 0;) {
        const std::size_t in = cfg.in_dim(k), out = cfg.out_dim(k);
        numcore::gemm_tn_add(delta.data.data(), bf.inputs[k].data.data(),
                             grad.data() + state.offsets[k], B, out, in);
        if (k == 0) break;
        Matrix prev(B, in);
        numcore::gemm_nn_add(delta.data.data(), state.params.data() + state.offsets[k],
                             prev.data.data(), B, out, in);
        const double s = cfg.in_scale(k);
        const Matrix& z = bf.pre[k - 1];
        for (std::size_t i = 0; i < prev.data.size(); ++i)
            prev.data[i] *= s * activate_grad(z.data[i], cfg.activation);
        delta = std::move(prev);
    }
}

constexpr std::size_t kBatchBlock = 256;

}  // namespace detail

// Sum over the view of per-sample loss gradients (GradientMode::full)
// or of the logit-c components (GradientMode::single_logit), computed
// blockwise with the GEMM kernels. Sample order is the view order.
inline Vector sum_gradient(const NetworkState& state, const data::SubsetView& view,
                           GradientMode mode = GradientMode::full, std::size_t logit = 0) {
    const NetworkConfig& cfg = state.config;
    if (view.empty()) throw std::invalid_argument("sum_gradient: empty view");
    if (mode == GradientMode::single_logit && cfg.head != Head::softmax)
        throw unsupported_operation("single-logit gradients require a softmax head");
    if (mode == GradientMode::single_logit && logit >= cfg.num_logits)
        throw std::invalid_argument("sum_gradient: logit out of range");
    Vector grad(state.params.size(), 0.0);
    Vector f(cfg.num_logits);
    for (std::size_t first = 0; first < view.size(); first += detail::kBatchBlock) {
        const std::size_t count = std::min(detail::kBatchBlock, view.size() - first);
        auto bf = detail::batch_forward(state, view, first, count);
        const Matrix& H = bf.pre.back();
        Matrix delta(count, cfg.num_logits);
        for (std::size_t r = 0; r < count; ++r) {
            const int y = view.label(first + r);
            detail::check_label(cfg, y);
            if (cfg.head == Head::sigmoid) {
                delta(r, 0) = detail::sigmoid(H(r, 0)) - static_cast<double>(y);
            } else {
                detail::softmax_into(H.row(r), f);
                if (mode == GradientMode::full) {
                    for (std::size_t c = 0; c < cfg.num_logits; ++c)
                        delta(r, c) = f[c] - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0);
                } else {
                    delta(r, logit) = f[logit] - (static_cast<std::size_t>(y) == logit ? 1.0 : 0.0);
                }
            }
        }
        detail::batch_backward(state, bf, delta, grad);
    }
    return grad;
}

// Arithmetic mean of the per-sample gradients over the view.
inline Vector mean_gradient(const NetworkState& state, const data::SubsetView& view) {
    if (view.empty()) throw std::invalid_argument("mean_gradient: empty view");
    Vector g = sum_gradient(state, view);
    const double inv = 1.0 / static_cast<double>(view.size());
    for (double& v : g) v *= inv;
    return g;
}

struct ViewMetrics {
    std::size_t n = 0;
    double loss = 0.0;        // mean per-sample loss
    double error = 0.0;       // misclassification rate
    double residual = 0.0;    // mean |f-y| (binary) or mean ||f-y||_2 (multi-class)
    double residual_pos = 0.0;  // mean |f_y - 1| on the labeled logit
};

// Loss, error and residual means over a view, computed from the
// batched forward pass with tree-summed per-sample terms.
inline ViewMetrics evaluate_view(const NetworkState& state, const data::SubsetView& view) {
    const NetworkConfig& cfg = state.config;
    ViewMetrics m;
    m.n = view.size();
    if (view.empty()) return m;
    Vector losses(view.size()), resids(view.size()), resids_pos(view.size());
    Vector f(cfg.num_logits);
    std::size_t errors = 0;
    for (std::size_t first = 0; first < view.size(); first += detail::kBatchBlock) {
        const std::size_t count = std::min(detail::kBatchBlock, view.size() - first);
        auto bf = detail::batch_forward(state, view, first, count);
        const Matrix& H = bf.pre.back();
        for (std::size_t r = 0; r < count; ++r) {
            const std::size_t i = first + r;
            const int y = view.label(i);
            detail::check_label(cfg, y);
            if (cfg.head == Head::sigmoid) {
                const double h = H(r, 0);
                const double p = detail::sigmoid(h);
                losses[i] = detail::softplus(h) - static_cast<double>(y) * h;
                resids[i] = resids_pos[i] = std::abs(p - static_cast<double>(y));
                errors += (p > 0.5 ? 1 : 0) != y;
            } else {
                auto h = H.row(r);
                losses[i] = detail::log_sum_exp(h) - h[static_cast<std::size_t>(y)];
                detail::softmax_into(h, f);
                double sq = 0.0;
                std::size_t argmax = 0;
                for (std::size_t c = 0; c < cfg.num_logits; ++c) {
                    const double d = f[c] - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0);
                    sq += d * d;
                    if (h[c] > h[argmax]) argmax = c;
                }
                resids[i] = std::sqrt(sq);
                resids_pos[i] = 1.0 - f[static_cast<std::size_t>(y)];
                errors += argmax != static_cast<std::size_t>(y);
            }
        }
    }
    const double inv = 1.0 / static_cast<double>(view.size());
    m.loss = numcore::tree_sum(losses) * inv;
    m.error = static_cast<double>(errors) * inv;
    m.residual = numcore::tree_sum(resids) * inv;
    m.residual_pos = numcore::tree_sum(resids_pos) * inv;
    return m;
}

}  // namespace cleanprio::network
