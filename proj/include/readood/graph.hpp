#pragma once

// Expression graph with forward evaluation and reverse-mode gradients.
//
// A graph is a topologically ordered list of nodes. Leaves are bound by name at
// evaluation time; parameters are leaves flagged trainable. Shapes are inferred
// from the bound tensors, so one graph serves any batch size.

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "readood/error.hpp"
#include "readood/gemm.hpp"
#include "readood/tensor.hpp"

namespace readood {

using NodeId = std::size_t;

enum class Op {
    input,
    param,
    add,
    sub,
    mul,
    div,
    scale,
    add_scalar,
    matmul,
    bias_add,
    conv2d,
    conv_transpose2d,
    relu,
    sigmoid,
    softmax,
    log_softmax,
    log,
    square,
    sum,
    mean,
    global_avg_pool,
    batch_norm,
    upsample,
    downsample,
    reshape,
    sq_dist,
};

inline std::string_view op_name(Op op) {
    switch (op) {
        case Op::input: return "input";
        case Op::param: return "param";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::scale: return "scale";
        case Op::add_scalar: return "add_scalar";
        case Op::matmul: return "matmul";
        case Op::bias_add: return "bias_add";
        case Op::conv2d: return "conv2d";
        case Op::conv_transpose2d: return "conv_transpose2d";
        case Op::relu: return "relu";
        case Op::sigmoid: return "sigmoid";
        case Op::softmax: return "softmax";
        case Op::log_softmax: return "log_softmax";
        case Op::log: return "log";
        case Op::square: return "square";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::global_avg_pool: return "global_avg_pool";
        case Op::batch_norm: return "batch_norm";
        case Op::upsample: return "upsample";
        case Op::downsample: return "downsample";
        case Op::reshape: return "reshape";
        case Op::sq_dist: return "sq_dist";
    }
    return "?";
}

struct OpAttrs {
    double scalar = 0.0;  // scale factor, additive constant, or batch-norm epsilon
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t output_pad = 0;
    std::size_t factor = 2;
    bool transpose_b = false;
    Shape shape;  // reshape: trailing dims, leading axis kept
};

struct Node {
    Op op;
    std::vector<NodeId> inputs;
    OpAttrs attrs;
    std::string name;  // leaves only
};

class ExprGraph {
public:
    NodeId input(std::string name) { return leaf(Op::input, std::move(name)); }
    NodeId param(std::string name) { return leaf(Op::param, std::move(name)); }

    NodeId add(NodeId a, NodeId b) { return push(Op::add, {a, b}); }
    NodeId sub(NodeId a, NodeId b) { return push(Op::sub, {a, b}); }
    NodeId mul(NodeId a, NodeId b) { return push(Op::mul, {a, b}); }
    // b may match a's shape, be a scalar, or be [N,1] against a [N,K].
    NodeId div(NodeId a, NodeId b) { return push(Op::div, {a, b}); }
    NodeId scale(NodeId a, double k) { return push(Op::scale, {a}, {.scalar = k}); }
    NodeId add_scalar(NodeId a, double k) { return push(Op::add_scalar, {a}, {.scalar = k}); }
    NodeId neg(NodeId a) { return scale(a, -1.0); }
    NodeId matmul(NodeId a, NodeId b, bool transpose_b = false) {
        return push(Op::matmul, {a, b}, {.transpose_b = transpose_b});
    }
    NodeId bias_add(NodeId x, NodeId bias) { return push(Op::bias_add, {x, bias}); }
    NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t pad) {
        return push(Op::conv2d, {x, w}, {.stride = stride, .pad = pad});
    }
    NodeId conv_transpose2d(NodeId x, NodeId w, std::size_t stride, std::size_t pad, std::size_t output_pad = 0) {
        return push(Op::conv_transpose2d, {x, w}, {.stride = stride, .pad = pad, .output_pad = output_pad});
    }
    NodeId relu(NodeId a) { return push(Op::relu, {a}); }
    NodeId sigmoid(NodeId a) { return push(Op::sigmoid, {a}); }
    NodeId softmax(NodeId a) { return push(Op::softmax, {a}); }
    NodeId log_softmax(NodeId a) { return push(Op::log_softmax, {a}); }
    NodeId log(NodeId a) { return push(Op::log, {a}); }
    NodeId square(NodeId a) { return push(Op::square, {a}); }
    NodeId sum(NodeId a) { return push(Op::sum, {a}); }
    NodeId mean(NodeId a) { return push(Op::mean, {a}); }
    NodeId global_avg_pool(NodeId a) { return push(Op::global_avg_pool, {a}); }
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                      double eps = 1e-5) {
        return push(Op::batch_norm, {x, gamma, beta, running_mean, running_var}, {.scalar = eps});
    }
    NodeId upsample(NodeId a, std::size_t factor) { return push(Op::upsample, {a}, {.factor = factor}); }
    NodeId downsample(NodeId a, std::size_t factor) { return push(Op::downsample, {a}, {.factor = factor}); }
    NodeId reshape(NodeId a, Shape trailing) { return push(Op::reshape, {a}, {.shape = std::move(trailing)}); }
    // Row-wise squared Euclidean distances: z [N,d], centers [K,d] -> [N,K].
    NodeId sq_dist(NodeId z, NodeId centers) { return push(Op::sq_dist, {z, centers}); }

    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

    std::vector<std::string> parameter_names() const {
        std::vector<std::string> out;
        for (const auto& n : nodes_)
            if (n.op == Op::param) out.push_back(n.name);
        return out;
    }
    std::vector<std::string> input_names() const {
        std::vector<std::string> out;
        for (const auto& n : nodes_)
            if (n.op == Op::input) out.push_back(n.name);
        return out;
    }
    NodeId leaf_id(const std::string& name) const {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) throw Error("unknown leaf '" + name + "'");
        return it->second;
    }
    bool has_leaf(const std::string& name) const { return leaves_.count(name) != 0; }

    void set_output(const std::string& name, NodeId id) { outputs_[name] = id; }
    NodeId output(const std::string& name) const {
        auto it = outputs_.find(name);
        if (it == outputs_.end()) throw Error("graph has no output '" + name + "'");
        return it->second;
    }

private:
    NodeId leaf(Op op, std::string name) {
        if (leaves_.count(name)) throw Error("duplicate leaf name '" + name + "'");
        nodes_.push_back(Node{op, {}, {}, name});
        leaves_[name] = nodes_.size() - 1;
        return nodes_.size() - 1;
    }
    NodeId push(Op op, std::vector<NodeId> inputs, OpAttrs attrs = {}) {
        for (NodeId i : inputs)
            if (i >= nodes_.size()) throw Error("node input refers to a later node");
        nodes_.push_back(Node{op, std::move(inputs), std::move(attrs), {}});
        return nodes_.size() - 1;
    }

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> leaves_;
    std::map<std::string, NodeId> outputs_;
};

template <typename T>
using Bindings = std::map<std::string, Tensor<T>>;

/// Name lookup across several binding maps, searched in order.
template <typename T>
class Feed {
public:
    Feed() = default;
    Feed(const Bindings<T>& b) { maps_.push_back(&b); }  // NOLINT(google-explicit-constructor)
    Feed(std::initializer_list<const Bindings<T>*> maps) : maps_(maps) {}

    const Tensor<T>* find(const std::string& name) const {
        for (const auto* m : maps_) {
            auto it = m->find(name);
            if (it != m->end()) return &it->second;
        }
        return nullptr;
    }

private:
    std::vector<const Bindings<T>*> maps_;
};

struct EvalOptions {
    bool training = false;  // batch-norm uses batch statistics when set
};

template <typename T>
class Evaluation;

template <typename T>
Evaluation<T> evaluate(const ExprGraph& graph, const Feed<T>& feed, EvalOptions options = {},
                       NodeId last = static_cast<NodeId>(-1));

/// Forward values of every node. Leaf values point into the feed, which must
/// outlive this object.
template <typename T>
class Evaluation {
public:
    const Tensor<T>& value(NodeId id) const& { return *ptr_.at(id); }
    Tensor<T> value(NodeId id) && { return *ptr_.at(id); }
    // Batch statistics (mean then biased variance, per channel) of a training-mode batch-norm node.
    const std::vector<T>& aux(NodeId id) const { return aux_.at(id); }
    std::size_t size() const { return ptr_.size(); }
    EvalOptions options() const { return options_; }

private:
    friend Evaluation evaluate<T>(const ExprGraph&, const Feed<T>&, EvalOptions, NodeId);

    std::vector<Tensor<T>> owned_;
    std::vector<const Tensor<T>*> ptr_;
    std::vector<std::vector<T>> aux_;
    EvalOptions options_;
};

namespace detail {

[[noreturn]] inline void shape_fail(NodeId id, Op op, const std::string& msg) {
    throw ShapeError("node " + std::to_string(id) + " (" + std::string(op_name(op)) + "): " + msg);
}

inline bool row_broadcast(const Shape& a, const Shape& b) {
    return a.size() == 2 && b.size() == 2 && b[0] == a[0] && b[1] == 1;
}

// Spatial size of a per-channel layout [N,C,...]
inline std::size_t inner_size(const Shape& s) {
    std::size_t r = 1;
    for (std::size_t i = 2; i < s.size(); ++i) r *= s[i];
    return r;
}

template <typename T>
void softmax_rows(const T* x, std::size_t rows, std::size_t cols, T* y, bool log_space) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        T s{};
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - mx);
        if (log_space) {
            const T ls = std::log(s);
            for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - mx - ls;
        } else {
            for (std::size_t c = 0; c < cols; ++c) yr[c] = std::exp(xr[c] - mx) / s;
        }
    }
}

}  // namespace detail

/// Evaluates every node up to and including `last` (default: whole graph).
template <typename T>
Evaluation<T> evaluate(const ExprGraph& graph, const Feed<T>& feed, EvalOptions options, NodeId last) {
    using detail::shape_fail;
    const std::size_t count = last == static_cast<NodeId>(-1) ? graph.size() : last + 1;
    Evaluation<T> ev;
    ev.options_ = options;
    ev.owned_.resize(count);
    ev.ptr_.assign(count, nullptr);
    ev.aux_.resize(count);

    for (NodeId id = 0; id < count; ++id) {
        const Node& nd = graph.node(id);
        if (nd.op == Op::input || nd.op == Op::param) {
            const Tensor<T>* t = feed.find(nd.name);
            if (!t) throw Error("leaf '" + nd.name + "' (node " + std::to_string(id) + ") is not bound");
            if (!t->all_finite()) {
                throw NumericError("non-finite value in leaf '" + nd.name + "' (node " + std::to_string(id) + ")");
            }
            ev.ptr_[id] = t;
            continue;
        }
        auto in = [&](std::size_t k) -> const Tensor<T>& { return *ev.ptr_[nd.inputs[k]]; };
        Tensor<T>& out = ev.owned_[id];
        const auto& a = in(0);

        switch (nd.op) {
            case Op::add:
            case Op::sub:
            case Op::mul:
            case Op::div: {
                const auto& b = in(1);
                out = Tensor<T>(a.shape());
                const T* pa = a.data();
                const T* pb = b.data();
                T* po = out.data();
                const std::size_t n = a.size();
                auto apply = [&](T x, T y) -> T {
                    switch (nd.op) {
                        case Op::add: return x + y;
                        case Op::sub: return x - y;
                        case Op::mul: return x * y;
                        default: return x / y;
                    }
                };
                if (b.shape() == a.shape()) {
                    for (std::size_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
                } else if (b.size() == 1) {
                    for (std::size_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[0]);
                } else if (nd.op == Op::div && detail::row_broadcast(a.shape(), b.shape())) {
                    const std::size_t cols = a.dim(1);
                    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i / cols];
                } else {
                    shape_fail(id, nd.op, "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
                }
                break;
            }
            case Op::scale:
            case Op::add_scalar: {
                out = Tensor<T>(a.shape());
                const T k = static_cast<T>(nd.attrs.scalar);
                for (std::size_t i = 0; i < a.size(); ++i) out[i] = nd.op == Op::scale ? a[i] * k : a[i] + k;
                break;
            }
            case Op::matmul: {
                const auto& b = in(1);
                if (a.rank() != 2 || b.rank() != 2) shape_fail(id, nd.op, "operands must be rank 2");
                const std::size_t m = a.dim(0), k = a.dim(1);
                const bool tb = nd.attrs.transpose_b;
                const std::size_t kb = tb ? b.dim(1) : b.dim(0);
                const std::size_t n = tb ? b.dim(0) : b.dim(1);
                if (k != kb) shape_fail(id, nd.op, "inner dims " + to_string(a.shape()) + " x " + to_string(b.shape()));
                out = Tensor<T>(Shape{m, n});
                if (tb) detail::gemm_nt(m, n, k, a.data(), b.data(), out.data(), false);
                else detail::gemm_nn(m, n, k, a.data(), b.data(), out.data(), false);
                break;
            }
            case Op::bias_add: {
                const auto& b = in(1);
                if (a.rank() < 2 || b.rank() != 1 || b.dim(0) != a.dim(1)) {
                    shape_fail(id, nd.op, "bias " + to_string(b.shape()) + " vs input " + to_string(a.shape()));
                }
                out = a;
                const std::size_t ch = a.dim(1), inner = detail::inner_size(a.shape());
                for (std::size_t n = 0; n < a.dim(0); ++n)
                    for (std::size_t c = 0; c < ch; ++c) {
                        T* p = out.data() + (n * ch + c) * inner;
                        for (std::size_t s = 0; s < inner; ++s) p[s] += b[c];
                    }
                break;
            }
            case Op::conv2d:
            case Op::conv_transpose2d: {
                const auto& w = in(1);
                if (a.rank() != 4 || w.rank() != 4) shape_fail(id, nd.op, "expects NCHW input and 4-d kernel");
                const std::size_t batch = a.dim(0), c_in = a.dim(1), h = a.dim(2), wd = a.dim(3);
                const std::size_t kh = w.dim(2), kw = w.dim(3), s = nd.attrs.stride, p = nd.attrs.pad;
                if (w.dim(nd.op == Op::conv2d ? 1 : 0) != c_in) {
                    shape_fail(id, nd.op, "kernel " + to_string(w.shape()) + " does not match input " + to_string(a.shape()));
                }
                if (nd.op == Op::conv2d) {
                    if (h + 2 * p < kh || wd + 2 * p < kw) shape_fail(id, nd.op, "kernel larger than padded input");
                    const std::size_t c_out = w.dim(0);
                    const std::size_t oh = (h + 2 * p - kh) / s + 1, ow = (wd + 2 * p - kw) / s + 1;
                    const detail::ConvGeometry g{c_in, h, wd, kh, kw, s, p, oh, ow};
                    const std::size_t ck = c_in * kh * kw, cols_n = batch * oh * ow;
                    std::vector<T> cols(ck * cols_n), tmp(c_out * cols_n);
                    detail::im2col(a.data(), batch, g, cols.data());
                    detail::gemm_nn(c_out, cols_n, ck, w.data(), cols.data(), tmp.data(), false);
                    out = Tensor<T>(Shape{batch, c_out, oh, ow});
                    detail::swap_leading(tmp.data(), c_out, batch, oh * ow, out.data());
                } else {
                    const std::size_t c_out = w.dim(1);
                    const std::size_t oh = (h - 1) * s + kh + nd.attrs.output_pad;
                    const std::size_t ow = (wd - 1) * s + kw + nd.attrs.output_pad;
                    if (oh <= 2 * p || ow <= 2 * p) shape_fail(id, nd.op, "padding removes the whole output");
                    const std::size_t out_h = oh - 2 * p, out_w = ow - 2 * p;
                    const detail::ConvGeometry g{c_out, out_h, out_w, kh, kw, s, p, h, wd};
                    const std::size_t okk = c_out * kh * kw, cols_n = batch * h * wd;
                    std::vector<T> xp(c_in * cols_n), cols(okk * cols_n);
                    detail::swap_leading(a.data(), batch, c_in, h * wd, xp.data());
                    detail::gemm_tn(okk, cols_n, c_in, w.data(), xp.data(), cols.data(), false);
                    out = Tensor<T>(Shape{batch, c_out, out_h, out_w});
                    detail::col2im(cols.data(), batch, g, out.data());
                }
                break;
            }
            case Op::relu:
            case Op::sigmoid:
            case Op::log:
            case Op::square: {
                out = Tensor<T>(a.shape());
                for (std::size_t i = 0; i < a.size(); ++i) {
                    const T x = a[i];
                    switch (nd.op) {
                        case Op::relu: out[i] = x > T{} ? x : T{}; break;
                        case Op::sigmoid: out[i] = T{1} / (T{1} + std::exp(-x)); break;
                        case Op::log: out[i] = std::log(x); break;
                        default: out[i] = x * x; break;
                    }
                }
                break;
            }
            case Op::softmax:
            case Op::log_softmax: {
                if (a.rank() != 2) shape_fail(id, nd.op, "expects [rows, classes]");
                out = Tensor<T>(a.shape());
                detail::softmax_rows(a.data(), a.dim(0), a.dim(1), out.data(), nd.op == Op::log_softmax);
                break;
            }
            case Op::sum:
            case Op::mean: {
                T s{};
                for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
                if (nd.op == Op::mean) {
                    if (a.empty()) shape_fail(id, nd.op, "mean of empty tensor");
                    s /= static_cast<T>(a.size());
                }
                out = Tensor<T>::scalar(s);
                break;
            }
            case Op::global_avg_pool: {
                if (a.rank() != 4) shape_fail(id, nd.op, "expects NCHW");
                const std::size_t nc = a.dim(0) * a.dim(1), inner = a.dim(2) * a.dim(3);
                out = Tensor<T>(Shape{a.dim(0), a.dim(1)});
                for (std::size_t i = 0; i < nc; ++i) {
                    T s{};
                    for (std::size_t k = 0; k < inner; ++k) s += a[i * inner + k];
                    out[i] = s / static_cast<T>(inner);
                }
                break;
            }
            case Op::batch_norm: {
                const auto& gamma = in(1);
                const auto& beta = in(2);
                const auto& rmean = in(3);
                const auto& rvar = in(4);
                if (a.rank() < 2) shape_fail(id, nd.op, "expects [N,C,...]");
                const std::size_t batch = a.dim(0), ch = a.dim(1), inner = detail::inner_size(a.shape());
                for (const auto* t : {&gamma, &beta, &rmean, &rvar}) {
                    if (t->rank() != 1 || t->dim(0) != ch) shape_fail(id, nd.op, "per-channel parameter size mismatch");
                }
                const T eps = static_cast<T>(nd.attrs.scalar);
                std::vector<T> mu(ch), var(ch);
                if (options.training) {
                    const std::size_t m = batch * inner;
                    if (m < 2) shape_fail(id, nd.op, "training mode needs more than one value per channel");
                    for (std::size_t c = 0; c < ch; ++c) {
                        T s{};
                        for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t k = 0; k < inner; ++k) s += a[(n * ch + c) * inner + k];
                        mu[c] = s / static_cast<T>(m);
                        T v{};
                        for (std::size_t n = 0; n < batch; ++n)
                            for (std::size_t k = 0; k < inner; ++k) {
                                const T d = a[(n * ch + c) * inner + k] - mu[c];
                                v += d * d;
                            }
                        var[c] = v / static_cast<T>(m);
                    }
                    ev.aux_[id] = mu;
                    ev.aux_[id].insert(ev.aux_[id].end(), var.begin(), var.end());
                } else {
                    std::copy(rmean.storage().begin(), rmean.storage().end(), mu.begin());
                    std::copy(rvar.storage().begin(), rvar.storage().end(), var.begin());
                }
                out = Tensor<T>(a.shape());
                for (std::size_t c = 0; c < ch; ++c) {
                    const T inv = T{1} / std::sqrt(var[c] + eps);
                    for (std::size_t n = 0; n < batch; ++n)
                        for (std::size_t k = 0; k < inner; ++k) {
                            const std::size_t i = (n * ch + c) * inner + k;
                            out[i] = gamma[c] * (a[i] - mu[c]) * inv + beta[c];
                        }
                }
                break;
            }
            case Op::upsample:
            case Op::downsample: {
                if (a.rank() != 4) shape_fail(id, nd.op, "expects NCHW");
                const std::size_t f = nd.attrs.factor;
                const std::size_t nc = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
                if (nd.op == Op::upsample) {
                    out = Tensor<T>(Shape{a.dim(0), a.dim(1), h * f, w * f});
                    for (std::size_t i = 0; i < nc; ++i)
                        for (std::size_t y = 0; y < h * f; ++y)
                            for (std::size_t x = 0; x < w * f; ++x)
                                out[(i * h * f + y) * w * f + x] = a[(i * h + y / f) * w + x / f];
                } else {
                    if (h % f || w % f) shape_fail(id, nd.op, "spatial size not divisible by factor");
                    const std::size_t oh = h / f, ow = w / f;
                    out = Tensor<T>(Shape{a.dim(0), a.dim(1), oh, ow});
                    for (std::size_t i = 0; i < nc; ++i)
                        for (std::size_t y = 0; y < oh; ++y)
                            for (std::size_t x = 0; x < ow; ++x)
                                out[(i * oh + y) * ow + x] = a[(i * h + y * f) * w + x * f];
                }
                break;
            }
            case Op::reshape: {
                if (a.rank() == 0) shape_fail(id, nd.op, "cannot reshape a scalar");
                Shape s{a.dim(0)};
                s.insert(s.end(), nd.attrs.shape.begin(), nd.attrs.shape.end());
                if (numel(s) != a.size()) shape_fail(id, nd.op, to_string(a.shape()) + " -> " + to_string(s));
                out = a.reshaped(std::move(s));
                break;
            }
            case Op::sq_dist: {
                const auto& c = in(1);
                if (a.rank() != 2 || c.rank() != 2 || a.dim(1) != c.dim(1)) {
                    shape_fail(id, nd.op, to_string(a.shape()) + " vs centers " + to_string(c.shape()));
                }
                const std::size_t n = a.dim(0), k = c.dim(0), d = a.dim(1);
                out = Tensor<T>(Shape{n, k});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        T s{};
                        for (std::size_t t = 0; t < d; ++t) {
                            const T diff = a[i * d + t] - c[j * d + t];
                            s += diff * diff;
                        }
                        out[i * k + j] = s;
                    }
                break;
            }
            case Op::input:
            case Op::param: break;
        }
        if (!out.all_finite()) {
            throw NumericError("non-finite value at node " + std::to_string(id) + " (" + std::string(op_name(nd.op)) + ")");
        }
        ev.ptr_[id] = &out;
    }
    return ev;
}

template <typename T>
Evaluation<T> evaluate(const ExprGraph& graph, const Bindings<T>& bindings, EvalOptions options = {}) {
    return evaluate(graph, Feed<T>(bindings), options);
}

/// Reverse-mode gradients of the scalar node `output` with respect to the named leaves.
/// Leaves with no path to the output receive a zero tensor.
template <typename T>
std::map<std::string, Tensor<T>> backward(const ExprGraph& graph, const Evaluation<T>& ev, NodeId output,
                                          const std::set<std::string>& wrt) {
    if (output >= ev.size()) throw Error("output node " + std::to_string(output) + " was not evaluated");
    if (ev.value(output).size() != 1) {
        throw Error("gradient requires a scalar output; node " + std::to_string(output) + " has shape " +
                    to_string(ev.value(output).shape()));
    }
    std::vector<char> wanted(output + 1, 0);
    for (const auto& name : wrt) {
        const NodeId id = graph.leaf_id(name);
        if (id <= output) wanted[id] = 1;
    }
    // needs[i]: node i depends on a requested leaf
    std::vector<char> needs(output + 1, 0);
    for (NodeId id = 0; id <= output; ++id) {
        const Node& nd = graph.node(id);
        if (nd.op == Op::input || nd.op == Op::param) {
            needs[id] = wanted[id];
        } else {
            for (NodeId i : nd.inputs) needs[id] |= needs[i];
        }
    }

    std::vector<Tensor<T>> grad(output + 1);
    std::vector<char> has(output + 1, 0);
    auto accum = [&](NodeId id, Tensor<T>&& g) {
        if (!needs[id]) return;
        if (!has[id]) {
            grad[id] = std::move(g);
            has[id] = 1;
        } else {
            T* p = grad[id].data();
            for (std::size_t i = 0; i < g.size(); ++i) p[i] += g[i];
        }
    };
    grad[output] = Tensor<T>(ev.value(output).shape(), T{1});
    has[output] = 1;

    for (NodeId id = output + 1; id-- > 0;) {
        const Node& nd = graph.node(id);
        if (!has[id] || !needs[id] || nd.op == Op::input || nd.op == Op::param) continue;
        const Tensor<T>& g = grad[id];
        const Tensor<T>& y = ev.value(id);
        auto in = [&](std::size_t k) -> const Tensor<T>& { return ev.value(nd.inputs[k]); };
        auto need = [&](std::size_t k) { return needs[nd.inputs[k]] != 0; };
        const auto& a = in(0);

        switch (nd.op) {
            case Op::add:
            case Op::sub:
            case Op::mul:
            case Op::div: {
                const auto& b = in(1);
                const bool same = b.shape() == a.shape();
                const bool row = !same && b.size() != 1;
                const std::size_t cols = row ? a.dim(1) : 1;
                auto bidx = [&](std::size_t i) { return same ? i : (row ? i / cols : 0); };
                if (need(0)) {
                    Tensor<T> ga(a.shape());
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        const T bv = b[bidx(i)];
                        switch (nd.op) {
                            case Op::mul: ga[i] = g[i] * bv; break;
                            case Op::div: ga[i] = g[i] / bv; break;
                            default: ga[i] = g[i]; break;
                        }
                    }
                    accum(nd.inputs[0], std::move(ga));
                }
                if (need(1)) {
                    Tensor<T> gb(b.shape());
                    for (std::size_t i = 0; i < a.size(); ++i) {
                        const T bv = b[bidx(i)];
                        T v;
                        switch (nd.op) {
                            case Op::add: v = g[i]; break;
                            case Op::sub: v = -g[i]; break;
                            case Op::mul: v = g[i] * a[i]; break;
                            default: v = -g[i] * a[i] / (bv * bv); break;
                        }
                        gb[bidx(i)] += v;
                    }
                    accum(nd.inputs[1], std::move(gb));
                }
                break;
            }
            case Op::scale: {
                Tensor<T> ga(a.shape());
                const T k = static_cast<T>(nd.attrs.scalar);
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] = g[i] * k;
                accum(nd.inputs[0], std::move(ga));
                break;
            }
            case Op::add_scalar: accum(nd.inputs[0], Tensor<T>(g)); break;
            case Op::matmul: {
                const auto& b = in(1);
                const std::size_t m = a.dim(0), k = a.dim(1);
                const bool tb = nd.attrs.transpose_b;
                const std::size_t n = tb ? b.dim(0) : b.dim(1);
                if (need(0)) {
                    Tensor<T> ga(a.shape());
                    // dA = G B^T  (or G B when b is stored transposed)
                    if (tb) detail::gemm_nn(m, k, n, g.data(), b.data(), ga.data(), false);
                    else detail::gemm_nt(m, k, n, g.data(), b.data(), ga.data(), false);
                    accum(nd.inputs[0], std::move(ga));
                }
                if (need(1)) {
                    Tensor<T> gb(b.shape());
                    // dB = A^T G  (or G^T A)
                    if (tb) detail::gemm_tn(n, k, m, g.data(), a.data(), gb.data(), false);
                    else detail::gemm_tn(k, n, m, a.data(), g.data(), gb.data(), false);
                    accum(nd.inputs[1], std::move(gb));
                }
                break;
            }
            case Op::bias_add: {
                if (need(0)) accum(nd.inputs[0], Tensor<T>(g));
                if (need(1)) {
                    const std::size_t ch = a.dim(1), inner = detail::inner_size(a.shape());
                    Tensor<T> gb(Shape{ch});
                    for (std::size_t n = 0; n < a.dim(0); ++n)
                        for (std::size_t c = 0; c < ch; ++c) {
                            const T* p = g.data() + (n * ch + c) * inner;
                            T s{};
                            for (std::size_t q = 0; q < inner; ++q) s += p[q];
                            gb[c] += s;
                        }
                    accum(nd.inputs[1], std::move(gb));
                }
                break;
            }
            case Op::conv2d: {
                const auto& w = in(1);
                const std::size_t batch = a.dim(0), c_in = a.dim(1), h = a.dim(2), wd = a.dim(3);
                const std::size_t c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
                const std::size_t oh = y.dim(2), ow = y.dim(3);
                const detail::ConvGeometry geo{c_in, h, wd, kh, kw, nd.attrs.stride, nd.attrs.pad, oh, ow};
                const std::size_t ck = c_in * kh * kw, cols_n = batch * oh * ow;
                std::vector<T> gp(c_out * cols_n);
                detail::swap_leading(g.data(), batch, c_out, oh * ow, gp.data());
                if (need(1)) {
                    std::vector<T> cols(ck * cols_n);
                    detail::im2col(a.data(), batch, geo, cols.data());
                    Tensor<T> gw(w.shape());
                    detail::gemm_nt(c_out, ck, cols_n, gp.data(), cols.data(), gw.data(), false);
                    accum(nd.inputs[1], std::move(gw));
                }
                if (need(0)) {
                    std::vector<T> dcols(ck * cols_n);
                    detail::gemm_tn(ck, cols_n, c_out, w.data(), gp.data(), dcols.data(), false);
                    Tensor<T> ga(a.shape());
                    detail::col2im(dcols.data(), batch, geo, ga.data());
                    accum(nd.inputs[0], std::move(ga));
                }
                break;
            }
            case Op::conv_transpose2d: {
                const auto& w = in(1);
                const std::size_t batch = a.dim(0), c_in = a.dim(1), h = a.dim(2), wd = a.dim(3);
                const std::size_t c_out = w.dim(1), kh = w.dim(2), kw = w.dim(3);
                const detail::ConvGeometry geo{c_out, y.dim(2), y.dim(3), kh, kw, nd.attrs.stride, nd.attrs.pad, h, wd};
                const std::size_t okk = c_out * kh * kw, cols_n = batch * h * wd;
                std::vector<T> dcols(okk * cols_n);
                detail::im2col(g.data(), batch, geo, dcols.data());
                if (need(1)) {
                    std::vector<T> xp(c_in * cols_n);
                    detail::swap_leading(a.data(), batch, c_in, h * wd, xp.data());
                    Tensor<T> gw(w.shape());
                    detail::gemm_nt(c_in, okk, cols_n, xp.data(), dcols.data(), gw.data(), false);
                    accum(nd.inputs[1], std::move(gw));
                }
                if (need(0)) {
                    std::vector<T> gxp(c_in * cols_n);
                    detail::gemm_nn(c_in, cols_n, okk, w.data(), dcols.data(), gxp.data(), false);
                    Tensor<T> ga(a.shape());
                    detail::swap_leading(gxp.data(), c_in, batch, h * wd, ga.data());
                    accum(nd.inputs[0], std::move(ga));
                }
                break;
            }
            case Op::relu:
            case Op::sigmoid:
            case Op::log:
            case Op::square: {
                Tensor<T> ga(a.shape());
                for (std::size_t i = 0; i < a.size(); ++i) {
                    switch (nd.op) {
                        case Op::relu: ga[i] = a[i] > T{} ? g[i] : T{}; break;
                        case Op::sigmoid: ga[i] = g[i] * y[i] * (T{1} - y[i]); break;
                        case Op::log: ga[i] = g[i] / a[i]; break;
                        default: ga[i] = T{2} * a[i] * g[i]; break;
                    }
                }
                accum(nd.inputs[0], std::move(ga));
                break;
            }
            case Op::softmax:
            case Op::log_softmax: {
                const std::size_t rows = a.dim(0), cols = a.dim(1);
                Tensor<T> ga(a.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* gr = g.data() + r * cols;
                    const T* yr = y.data() + r * cols;
                    T* out = ga.data() + r * cols;
                    if (nd.op == Op::softmax) {
                        T s{};
                        for (std::size_t c = 0; c < cols; ++c) s += gr[c] * yr[c];
                        for (std::size_t c = 0; c < cols; ++c) out[c] = yr[c] * (gr[c] - s);
                    } else {
                        T s{};
                        for (std::size_t c = 0; c < cols; ++c) s += gr[c];
                        for (std::size_t c = 0; c < cols; ++c) out[c] = gr[c] - std::exp(yr[c]) * s;
                    }
                }
                accum(nd.inputs[0], std::move(ga));
                break;
            }
            case Op::sum:
            case Op::mean: {
                const T v = nd.op == Op::sum ? g[0] : g[0] / static_cast<T>(a.size());
                accum(nd.inputs[0], Tensor<T>(a.shape(), v));
                break;
            }
            case Op::global_avg_pool: {
                const std::size_t nc = a.dim(0) * a.dim(1), inner = a.dim(2) * a.dim(3);
                Tensor<T> ga(a.shape());
                for (std::size_t i = 0; i < nc; ++i)
                    for (std::size_t k = 0; k < inner; ++k) ga[i * inner + k] = g[i] / static_cast<T>(inner);
                accum(nd.inputs[0], std::move(ga));
                break;
            }
            case Op::batch_norm: {
                const auto& gamma = in(1);
                const std::size_t batch = a.dim(0), ch = a.dim(1), inner = detail::inner_size(a.shape());
                const T eps = static_cast<T>(nd.attrs.scalar);
                const bool train = ev.options().training;
                std::vector<T> mu(ch), var(ch);
                if (train) {
                    const auto& aux = ev.aux(id);
                    std::copy(aux.begin(), aux.begin() + ch, mu.begin());
                    std::copy(aux.begin() + ch, aux.end(), var.begin());
                } else {
                    std::copy(in(3).storage().begin(), in(3).storage().end(), mu.begin());
                    std::copy(in(4).storage().begin(), in(4).storage().end(), var.begin());
                }
                Tensor<T> ga(a.shape()), ggamma(Shape{ch}), gbeta(Shape{ch}), gmean(Shape{ch}), gvar(Shape{ch});
                const T m = static_cast<T>(batch * inner);
                for (std::size_t c = 0; c < ch; ++c) {
                    const T inv = T{1} / std::sqrt(var[c] + eps);
                    T sg{}, sgx{};
                    for (std::size_t n = 0; n < batch; ++n)
                        for (std::size_t k = 0; k < inner; ++k) {
                            const std::size_t i = (n * ch + c) * inner + k;
                            const T xhat = (a[i] - mu[c]) * inv;
                            sg += g[i];
                            sgx += g[i] * xhat;
                        }
                    ggamma[c] = sgx;
                    gbeta[c] = sg;
                    for (std::size_t n = 0; n < batch; ++n)
                        for (std::size_t k = 0; k < inner; ++k) {
                            const std::size_t i = (n * ch + c) * inner + k;
                            if (train) {
                                const T xhat = (a[i] - mu[c]) * inv;
                                ga[i] = gamma[c] * inv * (g[i] - sg / m - xhat * sgx / m);
                            } else {
                                ga[i] = gamma[c] * inv * g[i];
                            }
                        }
                    if (!train) {
                        gmean[c] = -gamma[c] * inv * sg;
                        gvar[c] = -T{0.5} * gamma[c] * sgx / (var[c] + eps);
                    }
                }
                if (need(0)) accum(nd.inputs[0], std::move(ga));
                if (need(1)) accum(nd.inputs[1], std::move(ggamma));
                if (need(2)) accum(nd.inputs[2], std::move(gbeta));
                if (need(3)) accum(nd.inputs[3], std::move(gmean));
                if (need(4)) accum(nd.inputs[4], std::move(gvar));
                break;
            }
            case Op::upsample:
            case Op::downsample: {
                const std::size_t f = nd.attrs.factor;
                const std::size_t nc = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
                Tensor<T> ga(a.shape());
                if (nd.op == Op::upsample) {
                    for (std::size_t i = 0; i < nc; ++i)
                        for (std::size_t yy = 0; yy < h * f; ++yy)
                            for (std::size_t x = 0; x < w * f; ++x)
                                ga[(i * h + yy / f) * w + x / f] += g[(i * h * f + yy) * w * f + x];
                } else {
                    const std::size_t oh = h / f, ow = w / f;
                    for (std::size_t i = 0; i < nc; ++i)
                        for (std::size_t yy = 0; yy < oh; ++yy)
                            for (std::size_t x = 0; x < ow; ++x)
                                ga[(i * h + yy * f) * w + x * f] = g[(i * oh + yy) * ow + x];
                }
                accum(nd.inputs[0], std::move(ga));
                break;
            }
            case Op::reshape: accum(nd.inputs[0], g.reshaped(a.shape())); break;
            case Op::sq_dist: {
                const auto& c = in(1);
                const std::size_t n = a.dim(0), k = c.dim(0), d = a.dim(1);
                Tensor<T> ga(a.shape()), gc(c.shape());
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const T gij = T{2} * g[i * k + j];
                        for (std::size_t t = 0; t < d; ++t) {
                            const T diff = a[i * d + t] - c[j * d + t];
                            ga[i * d + t] += gij * diff;
                            gc[j * d + t] -= gij * diff;
                        }
                    }
                if (need(0)) accum(nd.inputs[0], std::move(ga));
                if (need(1)) accum(nd.inputs[1], std::move(gc));
                break;
            }
            case Op::input:
            case Op::param: break;
        }
    }

    std::map<std::string, Tensor<T>> result;
    for (const auto& name : wrt) {
        const NodeId id = graph.leaf_id(name);
        if (id <= output && has[id]) {
            result[name] = std::move(grad[id]);
        } else if (id < ev.size()) {
            result[name] = Tensor<T>(ev.value(id).shape());
        } else {
            throw Error("leaf '" + name + "' was not evaluated");
        }
    }
    return result;
}

/// Evaluates the graph and returns d(output)/d(leaf) for each requested leaf.
template <typename T>
std::map<std::string, Tensor<T>> gradient(const ExprGraph& graph, const Feed<T>& feed, NodeId output,
                                          const std::set<std::string>& wrt, EvalOptions options = {}) {
    for (const auto& name : wrt) graph.leaf_id(name);
    const auto ev = evaluate(graph, feed, options);
    return backward(graph, ev, output, wrt);
}

}  // namespace readood
