#pragma once

// Desk-scale classifier (feature extractor + standard or decomposed head) and
// convolutional autoencoder.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "readood/graph.hpp"
#include "readood/rng.hpp"
#include "readood/tensor.hpp"

namespace readood {

/// A graph plus its trainable parameters and non-trainable state (batch-norm running statistics).
struct Network {
    ExprGraph graph;
    Bindings<float> params;
    Bindings<float> state;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params) n += t.size();
        return n;
    }

    template <typename T>
    Evaluation<T> run(const Bindings<T>& inputs, const Bindings<T>& params_t, const Bindings<T>& state_t,
                      bool training, NodeId last = static_cast<NodeId>(-1)) const {
        return evaluate(graph, Feed<T>{&inputs, &params_t, &state_t}, EvalOptions{training}, last);
    }
    Evaluation<float> run(const Bindings<float>& inputs, bool training = false,
                          NodeId last = static_cast<NodeId>(-1)) const {
        return run<float>(inputs, params, state, training, last);
    }
};

template <typename U>
Bindings<U> cast_bindings(const Bindings<float>& b) {
    Bindings<U> out;
    for (const auto& [k, v] : b) out[k] = v.template cast<U>();
    return out;
}

struct ImageSpec {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;

    Shape batch_shape(std::size_t n) const { return {n, channels, height, width}; }
    std::size_t pixels() const { return channels * height * width; }
    friend bool operator==(const ImageSpec&, const ImageSpec&) = default;
};

inline void check_image_batch(const Tensor<float>& x, const ImageSpec& spec) {
    if (x.rank() != 4 || x.dim(1) != spec.channels || x.dim(2) != spec.height || x.dim(3) != spec.width) {
        throw ShapeError("expected image batch [N," + std::to_string(spec.channels) + "," + std::to_string(spec.height) +
                         "," + std::to_string(spec.width) + "], got " + to_string(x.shape()));
    }
}

enum class HeadKind { standard, decomposed };

inline std::string to_string(HeadKind k) { return k == HeadKind::standard ? "standard" : "decomposed"; }

struct ClassifierSpec {
    ImageSpec image;
    std::size_t classes = 4;
    std::array<std::size_t, 3> widths{16, 32, 64};
    HeadKind head = HeadKind::standard;
};

namespace detail {

inline Tensor<float> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    return random_normal<float>(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// conv(stride 2) -> batch-norm -> relu. Striding the convolution equals convolving
// and then keeping every second row and column.
inline NodeId conv_bn_relu(Network& net, NodeId x, const std::string& prefix, std::size_t c_in, std::size_t c_out,
                           Rng& rng) {
    auto& g = net.graph;
    net.params[prefix + ".w"] = he_normal({c_out, c_in, 3, 3}, c_in * 9, rng);
    net.params[prefix + ".bn.gamma"] = Tensor<float>(Shape{c_out}, 1.0f);
    net.params[prefix + ".bn.beta"] = Tensor<float>(Shape{c_out}, 0.0f);
    net.state[prefix + ".bn.mean"] = Tensor<float>(Shape{c_out}, 0.0f);
    net.state[prefix + ".bn.var"] = Tensor<float>(Shape{c_out}, 1.0f);
    auto y = g.conv2d(x, g.param(prefix + ".w"), 2, 1);
    y = g.batch_norm(y, g.param(prefix + ".bn.gamma"), g.param(prefix + ".bn.beta"), g.input(prefix + ".bn.mean"),
                     g.input(prefix + ".bn.var"));
    return g.relu(y);
}

}  // namespace detail

/// f_fe followed by f_ch. Outputs: "z" (latent, [N,d]) and "logits" ([N,K]);
/// the decomposed head also exposes "h" (negated squared center distances) and "g" (divisor).
class ClassifierModel {
public:
    ClassifierModel() = default;
    ClassifierModel(ClassifierSpec spec, Rng& rng) : spec_(spec) {
        if (spec.classes < 2) throw Error("classifier needs at least 2 classes");
        if (spec.image.height % 8 || spec.image.width % 8) throw ShapeError("image size must be divisible by 8");
        auto& g = net_.graph;
        NodeId x = g.input("x");
        std::size_t c = spec.image.channels;
        for (std::size_t i = 0; i < 3; ++i) {
            x = detail::conv_bn_relu(net_, x, "fe.conv" + std::to_string(i + 1), c, spec.widths[i], rng);
            c = spec.widths[i];
        }
        const NodeId z = g.global_avg_pool(x);
        const std::size_t d = latent_dim();
        const std::size_t k = spec.classes;
        if (spec.head == HeadKind::standard) {
            net_.params["head.w"] = detail::he_normal({k, d}, d, rng);
            net_.params["head.b"] = Tensor<float>(Shape{k});
        } else {
            net_.params["head.centers"] = detail::he_normal({k, d}, d, rng);
            net_.params["head.div.w"] = detail::he_normal({d, 1}, d, rng);
            net_.params["head.div.b"] = Tensor<float>(Shape{1});
            net_.params["head.div.bn.gamma"] = Tensor<float>(Shape{1}, 1.0f);
            net_.params["head.div.bn.beta"] = Tensor<float>(Shape{1}, 0.0f);
            net_.state["head.div.bn.mean"] = Tensor<float>(Shape{1}, 0.0f);
            net_.state["head.div.bn.var"] = Tensor<float>(Shape{1}, 1.0f);
        }
        const NodeId logits = append_head(g, z, spec.head);
        g.set_output("z", z);
        g.set_output("logits", logits);
    }

    // Head nodes on top of latent node `z`; parameters are referenced by name.
    static NodeId append_head(ExprGraph& g, NodeId z, HeadKind head) {
        if (head == HeadKind::standard) return g.bias_add(g.matmul(z, g.param("head.w"), true), g.param("head.b"));
        const NodeId h = g.neg(g.sq_dist(z, g.param("head.centers")));
        NodeId pre = g.bias_add(g.matmul(z, g.param("head.div.w")), g.param("head.div.b"));
        pre = g.batch_norm(pre, g.param("head.div.bn.gamma"), g.param("head.div.bn.beta"), g.input("head.div.bn.mean"),
                           g.input("head.div.bn.var"));
        const NodeId div = g.sigmoid(pre);
        g.set_output("h", h);
        g.set_output("g", div);
        return g.div(h, div);
    }

    const ClassifierSpec& spec() const { return spec_; }
    HeadKind head() const { return spec_.head; }
    std::size_t classes() const { return spec_.classes; }
    std::size_t latent_dim() const { return spec_.widths[2]; }
    Network& network() { return net_; }
    const Network& network() const { return net_; }
    NodeId z_node() const { return net_.graph.output("z"); }
    NodeId logits_node() const { return net_.graph.output("logits"); }

    // Class centers of the decomposed head ([K,d]).
    const Tensor<float>& centers() const {
        if (spec_.head != HeadKind::decomposed) throw Error("standard head has no class centers");
        return net_.params.at("head.centers");
    }

private:
    ClassifierSpec spec_;
    Network net_;
};

struct ClassifierOutput {
    Tensor<float> z;
    Tensor<float> logits;
};

/// Batched forward pass in inference mode (running batch-norm statistics).
inline ClassifierOutput clf_forward(const ClassifierModel& model, const Tensor<float>& x) {
    check_image_batch(x, model.spec().image);
    const Bindings<float> in{{"x", x}};
    const auto ev = model.network().run(in);
    return {ev.value(model.z_node()), ev.value(model.logits_node())};
}

/// Latents only; stops evaluation before the head.
inline Tensor<float> extract_latent(const ClassifierModel& model, const Tensor<float>& x) {
    check_image_batch(x, model.spec().image);
    const Bindings<float> in{{"x", x}};
    return model.network().run(in, false, model.z_node()).value(model.z_node());
}

/// Head logits for given latents ([N,d]), inference mode.
inline Tensor<float> head_logits(const ClassifierModel& model, const Tensor<float>& z) {
    if (z.rank() != 2 || z.dim(1) != model.latent_dim()) throw ShapeError("head_logits: expected latents [N," + std::to_string(model.latent_dim()) + "]");
    ExprGraph g;
    const NodeId logits = ClassifierModel::append_head(g, g.input("z"), model.head());
    const Bindings<float> in{{"z", z}};
    const auto& net = model.network();
    return evaluate(g, Feed<float>{&in, &net.params, &net.state}).value(logits);
}

struct Prediction {
    std::size_t label;
    std::vector<double> posterior;
};

/// softmax + argmax per row; ties go to the smaller class id.
inline std::vector<Prediction> predict_from_logits(const Tensor<float>& logits) {
    if (logits.rank() != 2) throw ShapeError("logits must be [N,K]");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<Prediction> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = logits.data() + i * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        std::vector<double> p(k);
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += p[j] = std::exp(static_cast<double>(row[j]) - row[best]);
        for (auto& v : p) v /= s;
        out[i] = {best, std::move(p)};
    }
    return out;
}

inline std::vector<Prediction> predict(const ClassifierModel& model, const Tensor<float>& x) {
    return predict_from_logits(clf_forward(model, x).logits);
}

struct AutoencoderSpec {
    ImageSpec image;
    std::array<std::size_t, 3> widths{16, 32, 64};
    std::size_t bottleneck = 64;
};

/// Three stride-2 conv blocks -> linear bottleneck -> mirrored transposed convs -> sigmoid.
/// Encoder parameters are prefixed "enc.", decoder parameters "dec.". Outputs "code" and "recon".
class AutoencoderModel {
public:
    AutoencoderModel() = default;
    AutoencoderModel(AutoencoderSpec spec, Rng& rng) : spec_(spec) {
        if (spec.image.height % 8 || spec.image.width % 8) throw ShapeError("image size must be divisible by 8");
        auto& g = net_.graph;
        auto& p = net_.params;
        const std::size_t h8 = spec.image.height / 8, w8 = spec.image.width / 8;
        const std::size_t flat = spec.widths[2] * h8 * w8;

        NodeId x = g.input("x");
        std::size_t c = spec.image.channels;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string name = "enc.conv" + std::to_string(i + 1);
            p[name + ".w"] = detail::he_normal({spec.widths[i], c, 3, 3}, c * 9, rng);
            p[name + ".b"] = Tensor<float>(Shape{spec.widths[i]});
            x = g.relu(g.bias_add(g.conv2d(x, g.param(name + ".w"), 2, 1), g.param(name + ".b")));
            c = spec.widths[i];
        }
        x = g.reshape(x, {flat});
        p["enc.fc.w"] = detail::he_normal({flat, spec.bottleneck}, flat, rng);
        p["enc.fc.b"] = Tensor<float>(Shape{spec.bottleneck});
        const NodeId code = g.bias_add(g.matmul(x, g.param("enc.fc.w")), g.param("enc.fc.b"));

        p["dec.fc.w"] = detail::he_normal({spec.bottleneck, flat}, spec.bottleneck, rng);
        p["dec.fc.b"] = Tensor<float>(Shape{flat});
        NodeId y = g.relu(g.bias_add(g.matmul(code, g.param("dec.fc.w")), g.param("dec.fc.b")));
        y = g.reshape(y, {spec.widths[2], h8, w8});
        const std::array<std::size_t, 4> chans{spec.widths[2], spec.widths[1], spec.widths[0], spec.image.channels};
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string name = "dec.deconv" + std::to_string(i + 1);
            p[name + ".w"] = detail::he_normal({chans[i], chans[i + 1], 4, 4}, chans[i] * 4, rng);
            p[name + ".b"] = Tensor<float>(Shape{chans[i + 1]});
            y = g.bias_add(g.conv_transpose2d(y, g.param(name + ".w"), 2, 1), g.param(name + ".b"));
            if (i < 2) y = g.relu(y);
        }
        const NodeId recon = g.sigmoid(y);
        g.set_output("code", code);
        g.set_output("recon", recon);
    }

    const AutoencoderSpec& spec() const { return spec_; }
    Network& network() { return net_; }
    const Network& network() const { return net_; }
    NodeId recon_node() const { return net_.graph.output("recon"); }
    NodeId code_node() const { return net_.graph.output("code"); }

private:
    AutoencoderSpec spec_;
    Network net_;
};

inline Tensor<float> ae_forward(const AutoencoderModel& model, const Tensor<float>& x) {
    check_image_batch(x, model.spec().image);
    const Bindings<float> in{{"x", x}};
    return model.network().run(in).value(model.recon_node());
}

}  // namespace readood
