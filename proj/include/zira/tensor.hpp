#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "zira/errors.hpp"

namespace zira {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense 64-bit float tensor; a lightweight handle sharing its storage, so a
/// parameter held by a model and the same parameter seen by an optimizer or a
/// recorded graph node refer to one buffer (and one gradient buffer).
class Tensor {
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad; // empty until a gradient is accumulated
        bool requires_grad = false;
        std::uint64_t graph_id = 0; // 0 = leaf / not produced by a graph op
    };

  public:
    Tensor() : impl_(std::make_shared<Impl>()) {}

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        if (shape_size(shape) != data.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    bool is_scalar() const { return size() == 1; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double value() const {
        if (!is_scalar()) throw DomainError("value(): tensor is not a scalar");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const { return impl_->grad; }
    std::vector<double>& grad_buffer() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy: fresh storage, no graph tag, no gradient.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::uint64_t graph_id() const { return impl_->graph_id; }
    void tag_graph(std::uint64_t id) { impl_->graph_id = id; }

  private:
    std::shared_ptr<Impl> impl_;
};

/// Dynamic tape: one graph per forward pass. Recorded nodes are backward
/// closures in topological (recording) order; backward() replays them in
/// reverse and then clears the tape.
class Graph {
  public:
    Graph() : id_(next_id()) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::uint64_t id() const { return id_; }
    std::size_t node_count() const { return nodes_.size(); }

    void record(std::function<void()> backward_step) { nodes_.push_back(std::move(backward_step)); }

    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

  private:
    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1);
    }

    std::uint64_t id_;
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline void ensure_finite(const Tensor& t, const char* op) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in result");
}

inline bool backward_applicable(const Tensor& out) {
    return out.has_grad();
}

/// Accumulate src into dst's gradient buffer (additive across consumers).
inline void accumulate(Tensor& dst, const std::vector<double>& src) {
    auto& g = dst.grad_buffer();
    for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

} // namespace detail

/// Marks `out` as produced by `g` when any input requires grad and records the
/// backward closure. The closure must read out.grad() and accumulate into the
/// inputs' grad buffers.
inline Tensor finish_op(Graph& g, Tensor out, bool any_requires_grad, std::function<void()> backward_step) {
    if (any_requires_grad) {
        out.set_requires_grad(true);
        out.tag_graph(g.id());
        g.record(std::move(backward_step));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    Tensor y(a.shape(), std::move(out));
    detail::ensure_finite(y, "add");
    const bool needs = a.requires_grad() || b.requires_grad();
    Tensor ac = a, bc = b, yc = y;
    return finish_op(g, y, needs, [ac, bc, yc]() mutable {
        if (!detail::backward_applicable(yc)) return;
        if (ac.requires_grad()) detail::accumulate(ac, yc.grad());
        if (bc.requires_grad()) detail::accumulate(bc, yc.grad());
    });
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    Tensor y(a.shape(), std::move(out));
    detail::ensure_finite(y, "sub");
    const bool needs = a.requires_grad() || b.requires_grad();
    Tensor ac = a, bc = b, yc = y;
    return finish_op(g, y, needs, [ac, bc, yc]() mutable {
        if (!detail::backward_applicable(yc)) return;
        if (ac.requires_grad()) detail::accumulate(ac, yc.grad());
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            const auto& go = yc.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

/// Broadcast-multiply by a scalar tensor: y_i = x_i * s. The scalar receives
/// the summed product gradient.
inline Tensor scale(Graph& g, const Tensor& x, const Tensor& s) {
    if (!s.is_scalar()) throw ShapeError("scale: scaling factor must be a scalar tensor");
    const double sv = s.data()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
    Tensor y(x.shape(), std::move(out));
    detail::ensure_finite(y, "scale");
    const bool needs = x.requires_grad() || s.requires_grad();
    Tensor xc = x, sc = s, yc = y;
    return finish_op(g, y, needs, [xc, sc, yc]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        const double sv2 = sc.data()[0];
        if (xc.requires_grad()) {
            auto& gx = xc.grad_buffer();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv2;
        }
        if (sc.requires_grad()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * xc.data()[i];
            sc.grad_buffer()[0] += acc;
        }
    });
}

inline Tensor tanh_op(Graph& g, const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
    Tensor y(x.shape(), std::move(out));
    const bool needs = x.requires_grad();
    Tensor xc = x, yc = y;
    return finish_op(g, y, needs, [xc, yc]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        auto& gx = xc.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double t = yc.data()[i];
            gx[i] += go[i] * (1.0 - t * t);
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        throw ShapeError("matmul: both operands must be rank 2");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data()[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
        }
    Tensor y({m, n}, std::move(out));
    detail::ensure_finite(y, "matmul");
    const bool needs = a.requires_grad() || b.requires_grad();
    Tensor ac = a, bc = b, yc = y;
    return finish_op(g, y, needs, [ac, bc, yc, m, k, n]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        if (ac.requires_grad()) {
            auto& ga = ac.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = go[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gv * bc.data()[p * n + j];
                }
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = go[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) gb[p * n + j] += gv * ac.data()[i * k + p];
                }
        }
    });
}

/// Row-batched affine map: x is B x in, w is out x in, b is out; y = x w^T + b.
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        throw ShapeError("linear: expected x rank 2, w rank 2, b rank 1");
    const std::size_t batch = x.shape()[0], in = x.shape()[1];
    const std::size_t out_dim = w.shape()[0];
    if (w.shape()[1] != in || b.shape()[0] != out_dim)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " / bias " + shape_str(b.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
    std::vector<double> out(batch * out_dim);
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = b.data()[o];
            for (std::size_t i = 0; i < in; ++i) acc += x.data()[r * in + i] * w.data()[o * in + i];
            out[r * out_dim + o] = acc;
        }
    Tensor y({batch, out_dim}, std::move(out));
    detail::ensure_finite(y, "linear");
    const bool needs = x.requires_grad() || w.requires_grad() || b.requires_grad();
    Tensor xc = x, wc = w, bc = b, yc = y;
    return finish_op(g, y, needs, [xc, wc, bc, yc, batch, in, out_dim]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        if (xc.requires_grad()) {
            auto& gx = xc.grad_buffer();
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double gv = go[r * out_dim + o];
                    for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += gv * wc.data()[o * in + i];
                }
        }
        if (wc.requires_grad()) {
            auto& gw = wc.grad_buffer();
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) {
                    const double gv = go[r * out_dim + o];
                    for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += gv * xc.data()[r * in + i];
                }
        }
        if (bc.requires_grad()) {
            auto& gb = bc.grad_buffer();
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t o = 0; o < out_dim; ++o) gb[o] += go[r * out_dim + o];
        }
    });
}

/// Cross-correlation convolution, stride 1, zero padding.
/// x: B x C_in x H x W, kernel: C_out x C_in x k x k, bias: C_out.
inline Tensor conv2d(Graph& g, const Tensor& x, const Tensor& kernel, const Tensor& bias, int padding) {
    if (x.shape().size() != 4 || kernel.shape().size() != 4 || bias.shape().size() != 1)
        throw ShapeError("conv2d: expected x rank 4, kernel rank 4, bias rank 1");
    if (padding < 0) throw DomainError("conv2d: padding must be non-negative");
    const std::size_t B = x.shape()[0], C_in = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t C_out = kernel.shape()[0], kc = kernel.shape()[1], kh = kernel.shape()[2],
                      kw = kernel.shape()[3];
    if (kc != C_in)
        throw ShapeError("conv2d: kernel channels " + std::to_string(kc) + " != input channels " +
                         std::to_string(C_in));
    if (bias.shape()[0] != C_out) throw ShapeError("conv2d: bias length must equal output channels");
    if (kh > H + 2 * static_cast<std::size_t>(padding) || kw > W + 2 * static_cast<std::size_t>(padding))
        throw ShapeError("conv2d: kernel larger than padded input");
    const std::size_t Ho = H + 2 * padding - kh + 1;
    const std::size_t Wo = W + 2 * padding - kw + 1;

    std::vector<double> out(B * C_out * Ho * Wo);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t co = 0; co < C_out; ++co)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = bias.data()[co];
                    for (std::size_t ci = 0; ci < C_in; ++ci)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long iy = static_cast<long>(oy + ky) - padding;
                                const long ix = static_cast<long>(ox + kx) - padding;
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                acc += x.data()[((b * C_in + ci) * H + iy) * W + ix] *
                                       kernel.data()[((co * C_in + ci) * kh + ky) * kw + kx];
                            }
                    out[((b * C_out + co) * Ho + oy) * Wo + ox] = acc;
                }
    Tensor y({B, C_out, Ho, Wo}, std::move(out));
    detail::ensure_finite(y, "conv2d");
    const bool needs = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    Tensor xc = x, kcap = kernel, bcap = bias, yc = y;
    return finish_op(g, y, needs, [xc, kcap, bcap, yc, B, C_in, H, W, C_out, kh, kw, Ho, Wo, padding]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        const bool need_x = xc.requires_grad(), need_k = kcap.requires_grad(), need_b = bcap.requires_grad();
        std::vector<double>* gx = need_x ? &xc.grad_buffer() : nullptr;
        std::vector<double>* gk = need_k ? &kcap.grad_buffer() : nullptr;
        std::vector<double>* gb = need_b ? &bcap.grad_buffer() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < C_out; ++co)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const double gv = go[((b * C_out + co) * Ho + oy) * Wo + ox];
                        if (gv == 0.0) continue;
                        if (need_b) (*gb)[co] += gv;
                        if (!need_x && !need_k) continue;
                        for (std::size_t ci = 0; ci < C_in; ++ci)
                            for (std::size_t ky = 0; ky < kh; ++ky)
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const long iy = static_cast<long>(oy + ky) - padding;
                                    const long ix = static_cast<long>(ox + kx) - padding;
                                    if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                                        ix >= static_cast<long>(W))
                                        continue;
                                    const std::size_t xi = ((b * C_in + ci) * H + iy) * W + ix;
                                    const std::size_t ki = ((co * C_in + ci) * kh + ky) * kw + kx;
                                    if (need_k) (*gk)[ki] += gv * xc.data()[xi];
                                    if (need_x) (*gx)[xi] += gv * kcap.data()[ki];
                                }
                    }
    });
}

/// B x C x H x W -> B x C, mean over the spatial extent.
inline Tensor global_avg_pool(Graph& g, const Tensor& x) {
    if (x.shape().size() != 4) throw ShapeError("global_avg_pool: expected rank-4 input");
    const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const double inv = 1.0 / static_cast<double>(H * W);
    std::vector<double> out(B * C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const std::size_t base = (b * C + c) * H * W;
            for (std::size_t i = 0; i < H * W; ++i) acc += x.data()[base + i];
            out[b * C + c] = acc * inv;
        }
    Tensor y({B, C}, std::move(out));
    const bool needs = x.requires_grad();
    Tensor xc = x, yc = y;
    return finish_op(g, y, needs, [xc, yc, B, C, H, W, inv]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        auto& gx = xc.grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const double gv = go[b * C + c] * inv;
                const std::size_t base = (b * C + c) * H * W;
                for (std::size_t i = 0; i < H * W; ++i) gx[base + i] += gv;
            }
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor reduce_sum(Graph& g, const Tensor& x) {
    if (x.size() == 0) throw DomainError("reduce_sum: empty tensor");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor y = Tensor::scalar(acc);
    detail::ensure_finite(y, "reduce_sum");
    const bool needs = x.requires_grad();
    Tensor xc = x, yc = y;
    return finish_op(g, y, needs, [xc, yc]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const double gv = yc.grad()[0];
        auto& gx = xc.grad_buffer();
        for (auto& v : gx) v += gv;
    });
}

enum class NormKind { L1Mean, L2Mean, SmoothL1Mean };

inline const char* norm_kind_name(NormKind k) {
    switch (k) {
        case NormKind::L1Mean: return "l1_mean";
        case NormKind::L2Mean: return "l2_mean";
        case NormKind::SmoothL1Mean: return "smooth_l1_mean";
    }
    return "?";
}

/// Mean-reduced norms: l1_mean = mean(|x|), l2_mean = mean(x^2),
/// smooth_l1_mean = mean(huber(x, delta=1)). The L1 subgradient at exactly 0
/// is 0.
inline Tensor reduce_norm(Graph& g, const Tensor& x, NormKind kind) {
    if (x.size() == 0) throw DomainError("reduce_norm: empty tensor");
    const double inv = 1.0 / static_cast<double>(x.size());
    double acc = 0.0;
    switch (kind) {
        case NormKind::L1Mean:
            for (double v : x.data()) acc += std::abs(v);
            break;
        case NormKind::L2Mean:
            for (double v : x.data()) acc += v * v;
            break;
        case NormKind::SmoothL1Mean:
            for (double v : x.data()) acc += std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5;
            break;
    }
    Tensor y = Tensor::scalar(acc * inv);
    detail::ensure_finite(y, "reduce_norm");
    const bool needs = x.requires_grad();
    Tensor xc = x, yc = y;
    return finish_op(g, y, needs, [xc, yc, kind, inv]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const double gv = yc.grad()[0] * inv;
        auto& gx = xc.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double v = xc.data()[i];
            double d = 0.0;
            switch (kind) {
                case NormKind::L1Mean: d = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); break;
                case NormKind::L2Mean: d = 2.0 * v; break;
                case NormKind::SmoothL1Mean: d = std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0); break;
            }
            gx[i] += gv * d;
        }
    });
}

/// logits[b,k] = cos(features[b], prototypes[k]) / temperature.
inline Tensor cosine_logits(Graph& g, const Tensor& features, const Tensor& prototypes, double temperature) {
    if (features.shape().size() != 2 || prototypes.shape().size() != 2)
        throw ShapeError("cosine_logits: expected rank-2 features and prototypes");
    const std::size_t B = features.shape()[0], D = features.shape()[1];
    const std::size_t K = prototypes.shape()[0];
    if (prototypes.shape()[1] != D)
        throw ShapeError("cosine_logits: feature dim " + std::to_string(D) + " != prototype dim " +
                         std::to_string(prototypes.shape()[1]));
    if (!(temperature > 0.0)) throw DomainError("cosine_logits: temperature must be positive");

    std::vector<double> fnorm(B), pnorm(K);
    for (std::size_t b = 0; b < B; ++b) {
        double acc = 0.0;
        for (std::size_t d = 0; d < D; ++d) acc += features.data()[b * D + d] * features.data()[b * D + d];
        fnorm[b] = std::sqrt(acc);
        if (fnorm[b] < 1e-12) throw DomainError("cosine_logits: zero-norm feature row");
    }
    for (std::size_t k = 0; k < K; ++k) {
        double acc = 0.0;
        for (std::size_t d = 0; d < D; ++d) acc += prototypes.data()[k * D + d] * prototypes.data()[k * D + d];
        pnorm[k] = std::sqrt(acc);
        if (pnorm[k] < 1e-12) throw DomainError("cosine_logits: zero-norm prototype row");
    }
    std::vector<double> out(B * K);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            double dot = 0.0;
            for (std::size_t d = 0; d < D; ++d) dot += features.data()[b * D + d] * prototypes.data()[k * D + d];
            out[b * K + k] = dot / (fnorm[b] * pnorm[k] * temperature);
        }
    Tensor y({B, K}, std::move(out));
    detail::ensure_finite(y, "cosine_logits");
    const bool needs = features.requires_grad() || prototypes.requires_grad();
    Tensor fc = features, pc = prototypes, yc = y;
    return finish_op(g, y, needs, [fc, pc, yc, B, D, K, temperature, fnorm, pnorm]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const auto& go = yc.grad();
        const bool need_f = fc.requires_grad(), need_p = pc.requires_grad();
        std::vector<double>* gf = need_f ? &fc.grad_buffer() : nullptr;
        std::vector<double>* gp = need_p ? &pc.grad_buffer() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                const double gv = go[b * K + k];
                if (gv == 0.0) continue;
                const double denom = fnorm[b] * pnorm[k] * temperature;
                const double logit = yc.data()[b * K + k];
                for (std::size_t d = 0; d < D; ++d) {
                    const double fv = fc.data()[b * D + d];
                    const double pv = pc.data()[k * D + d];
                    if (need_f) (*gf)[b * D + d] += gv * (pv / denom - logit * fv / (fnorm[b] * fnorm[b]));
                    if (need_p) (*gp)[k * D + d] += gv * (fv / denom - logit * pv / (pnorm[k] * pnorm[k]));
                }
            }
    });
}

/// Mean negative log-softmax of the true class, stabilized by max-subtraction.
inline Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2) throw ShapeError("softmax_cross_entropy: expected rank-2 logits");
    const std::size_t B = logits.shape()[0], K = logits.shape()[1];
    if (labels.size() != B) throw ShapeError("softmax_cross_entropy: labels length must equal batch size");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= K)
            throw DomainError("softmax_cross_entropy: label " + std::to_string(l) + " out of range [0," +
                              std::to_string(K) + ")");
    std::vector<double> probs(B * K);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        double mx = logits.data()[b * K];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.data()[b * K + k]);
        double denom = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            probs[b * K + k] = std::exp(logits.data()[b * K + k] - mx);
            denom += probs[b * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) probs[b * K + k] /= denom;
        loss -= std::log(probs[b * K + labels[b]]);
    }
    loss /= static_cast<double>(B);
    Tensor y = Tensor::scalar(loss);
    detail::ensure_finite(y, "softmax_cross_entropy");
    const bool needs = logits.requires_grad();
    Tensor lc = logits, yc = y;
    return finish_op(g, y, needs, [lc, yc, probs, labels, B, K]() mutable {
        if (!detail::backward_applicable(yc)) return;
        const double gv = yc.grad()[0] / static_cast<double>(B);
        auto& gl = lc.grad_buffer();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k) {
                const double indicator = (static_cast<std::size_t>(labels[b]) == k) ? 1.0 : 0.0;
                gl[b * K + k] += gv * (probs[b * K + k] - indicator);
            }
    });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Populates grad buffers of every requires_grad tensor reachable from `loss`.
/// Gradients accumulate additively; callers zero them between steps.
inline void backward(Graph& g, Tensor loss) {
    if (!loss.is_scalar()) throw DomainError("backward: loss must be a scalar");
    if (!loss.requires_grad() || loss.graph_id() == 0)
        throw GraphError("backward: loss is detached from any graph");
    if (loss.graph_id() != g.id())
        throw GraphError("backward: loss does not belong to the given graph");
    loss.grad_buffer()[0] += 1.0;
    g.run_backward();
}

} // namespace zira
