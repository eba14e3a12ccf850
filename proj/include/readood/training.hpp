#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "readood/dataset.hpp"
#include "readood/graph.hpp"
#include "readood/models.hpp"
#include "readood/rng.hpp"

namespace readood {

enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
    std::size_t batch_size = 128;
    std::size_t epochs = 60;
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::vector<std::size_t> lr_drop_epochs{30, 45};
    double lr_drop_factor = 0.1;
    bool random_flip = true;
    bool random_crop = true;
    std::size_t crop_pad = 4;
    double bn_momentum = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0)) throw ConfigError("learning rate must be > 0");
        if (!std::is_sorted(lr_drop_epochs.begin(), lr_drop_epochs.end())) {
            throw ConfigError("lr drop epochs must be sorted ascending");
        }
        if (!lr_drop_epochs.empty() && lr_drop_epochs.back() > epochs) {
            throw ConfigError("lr drop epoch beyond the number of epochs");
        }
        if (weight_decay < 0 || momentum < 0 || bn_momentum < 0 || bn_momentum > 1) {
            throw ConfigError("weight decay, momentum and bn momentum must be non-negative (bn momentum <= 1)");
        }
    }

    double lr_at(std::size_t epoch) const {
        double lr = learning_rate;
        for (std::size_t e : lr_drop_epochs)
            if (epoch >= e) lr *= lr_drop_factor;
        return lr;
    }

    // SGD with momentum 0.9, weight decay 5e-4, lr 0.1 dropped by 10x at 50% and 75%.
    static TrainConfig classifier(std::size_t epochs) {
        TrainConfig c;
        c.epochs = epochs;
        c.lr_drop_epochs = {epochs / 2, epochs * 3 / 4};
        return c;
    }
    static TrainConfig classifier_paper() { return classifier(200); }
    static TrainConfig classifier_desk() { return classifier(60); }

    // Adam, lr 1e-3, betas (0.9, 0.999), no weight decay.
    static TrainConfig autoencoder(std::size_t epochs) {
        TrainConfig c;
        c.epochs = epochs;
        c.optimizer = OptimizerKind::adam;
        c.learning_rate = 1e-3;
        c.weight_decay = 0.0;
        c.lr_drop_epochs.clear();
        return c;
    }
    static TrainConfig autoencoder_paper() { return autoencoder(2000); }
    static TrainConfig autoencoder_desk() { return autoencoder(300); }
};

// ---------------------------------------------------------------------------
// Losses

/// Appends -mean_n log softmax(logits)[n, label_n] to the graph. `onehot` is an [N,K] input.
inline NodeId append_cross_entropy(ExprGraph& g, NodeId logits, NodeId onehot, std::size_t classes) {
    return g.scale(g.mean(g.mul(g.log_softmax(logits), onehot)), -static_cast<double>(classes));
}

/// Appends mean over the batch of the per-sample squared L2 distance.
inline NodeId append_mse(ExprGraph& g, NodeId x, NodeId recon, std::size_t per_sample) {
    return g.scale(g.mean(g.square(g.sub(x, recon))), static_cast<double>(per_sample));
}

template <typename T>
Tensor<T> one_hot(std::span<const std::size_t> labels, std::size_t classes) {
    Tensor<T> out(Shape{labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw Error("label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(classes) + ")");
        }
        out[i * classes + labels[i]] = T{1};
    }
    return out;
}

inline double cross_entropy_loss(const Tensor<double>& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw ShapeError("logits must be [N,K] with N labels");
    ExprGraph g;
    const NodeId loss = append_cross_entropy(g, g.input("logits"), g.input("onehot"), logits.dim(1));
    Bindings<double> b{{"logits", logits}, {"onehot", one_hot<double>(labels, logits.dim(1))}};
    return evaluate(g, b).value(loss).item();
}

inline double mse_loss(const Tensor<double>& x, const Tensor<double>& recon) {
    if (x.shape() != recon.shape() || x.rank() == 0) {
        throw ShapeError("mse_loss: shapes " + to_string(x.shape()) + " and " + to_string(recon.shape()));
    }
    ExprGraph g;
    const NodeId loss = append_mse(g, g.input("x"), g.input("r"), x.size() / x.dim(0));
    return evaluate(g, Bindings<double>{{"x", x}, {"r", recon}}).value(loss).item();
}

// ---------------------------------------------------------------------------
// Augmentation

/// Optional horizontal flip, then reflect-pad by `pad` and crop back at offset (dy, dx) in [0, 2*pad].
inline void augment_into(const float* src, float* dst, std::size_t c, std::size_t h, std::size_t w, bool flip,
                         std::size_t pad, std::size_t dy, std::size_t dx) {
    auto reflect = [](long i, long n) {
        if (n == 1) return 0L;
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return i;
    };
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const long sy = reflect(static_cast<long>(y + dy) - static_cast<long>(pad), static_cast<long>(h));
                long sx = reflect(static_cast<long>(x + dx) - static_cast<long>(pad), static_cast<long>(w));
                if (flip) sx = static_cast<long>(w) - 1 - sx;
                dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
}

/// Random flip (p = 0.5) and random reflect-padded crop of one image [C,H,W] or [1,C,H,W].
inline Tensor<float> augment(const Tensor<float>& x, Rng& rng, bool flip = true, bool crop = true, std::size_t pad = 4) {
    if (x.rank() < 3) throw ShapeError("augment expects an image");
    const std::size_t r = x.rank();
    const std::size_t c = x.dim(r - 3), h = x.dim(r - 2), w = x.dim(r - 1);
    const bool do_flip = flip && uniform01(rng) < 0.5;
    const std::size_t p = crop ? pad : 0;
    const std::size_t dy = crop ? uniform_index(rng, 2 * p + 1) : 0;
    const std::size_t dx = crop ? uniform_index(rng, 2 * p + 1) : 0;
    Tensor<float> out(x.shape());
    augment_into(x.data(), out.data(), c, h, w, do_flip, p, dy, dx);
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
public:
    Optimizer(const TrainConfig& cfg, std::set<std::string> decay_exempt = {})
        : cfg_(cfg), exempt_(std::move(decay_exempt)) {}

    void step(Bindings<float>& params, const std::map<std::string, Tensor<float>>& grads, double lr) {
        ++t_;
        for (auto& [name, w] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Tensor<float>& g = git->second;
            const double wd = exempt_.count(name) ? 0.0 : cfg_.weight_decay;
            auto& m = first_[name];
            if (m.empty()) m = Tensor<float>(w.shape());
            if (cfg_.optimizer == OptimizerKind::sgd_momentum) {
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const float gi = g[i] + static_cast<float>(wd) * w[i];
                    m[i] = static_cast<float>(cfg_.momentum) * m[i] + gi;
                    w[i] -= static_cast<float>(lr) * m[i];
                }
            } else {
                auto& v = second_[name];
                if (v.empty()) v = Tensor<float>(w.shape());
                const double b1 = cfg_.beta1, b2 = cfg_.beta2;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const float gi = g[i] + static_cast<float>(wd) * w[i];
                    m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
                    v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
                    const double mhat = m[i] / c1, vhat = v[i] / c2;
                    w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps));
                }
            }
        }
    }

private:
    TrainConfig cfg_;
    std::set<std::string> exempt_;
    std::size_t t_ = 0;
    std::map<std::string, Tensor<float>> first_;
    std::map<std::string, Tensor<float>> second_;
};

/// Folds the batch statistics of every training-mode batch-norm node into the running state.
inline void update_running_stats(const Network& net, const Evaluation<float>& ev, Bindings<float>& state,
                                 double momentum) {
    const auto& g = net.graph;
    for (NodeId id = 0; id < ev.size(); ++id) {
        const Node& nd = g.node(id);
        if (nd.op != Op::batch_norm) continue;
        const auto& aux = ev.aux(id);
        const std::size_t ch = aux.size() / 2;
        const auto& x = ev.value(nd.inputs[0]);
        const double m = static_cast<double>(x.size() / ch);
        auto& rm = state.at(g.node(nd.inputs[3]).name);
        auto& rv = state.at(g.node(nd.inputs[4]).name);
        for (std::size_t c = 0; c < ch; ++c) {
            rm[c] = static_cast<float>((1 - momentum) * rm[c] + momentum * aux[c]);
            rv[c] = static_cast<float>((1 - momentum) * rv[c] + momentum * aux[ch + c] * m / (m - 1));
        }
    }
}

struct TrainResult {
    std::vector<double> loss_curve;  // mean training loss per epoch
};

// called after every epoch with the epoch index and its mean loss
using EpochHook = std::function<void(std::size_t, double)>;

namespace detail {

template <typename MakeTargets>
TrainResult train_network(Network& net, NodeId loss, const Dataset& data, const TrainConfig& cfg,
                          const std::set<std::string>& decay_exempt, MakeTargets&& make_targets,
                          const EpochHook& hook) {
    cfg.validate();
    data.validate();
    if (data.size() < 2) throw DataError("training needs at least two samples");
    Rng rng(cfg.seed);
    Optimizer opt(cfg, decay_exempt);
    const auto names = net.graph.parameter_names();
    const std::set<std::string> wrt(names.begin(), names.end());
    const std::size_t c = data.images.dim(1), h = data.images.dim(2), w = data.images.dim(3);
    const std::size_t per = c * h * w;
    std::vector<std::size_t> order(data.size());
    TrainResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.lr_at(epoch);
        double total = 0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2) break;  // batch-norm needs two samples
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            Bindings<float> in;
            Tensor<float> batch = gather0(data.images, idx);
            if (cfg.random_flip || cfg.random_crop) {
                Tensor<float> aug(batch.shape());
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const bool flip = cfg.random_flip && uniform01(rng) < 0.5;
                    const std::size_t p = cfg.random_crop ? cfg.crop_pad : 0;
                    const std::size_t dy = cfg.random_crop ? uniform_index(rng, 2 * p + 1) : 0;
                    const std::size_t dx = cfg.random_crop ? uniform_index(rng, 2 * p + 1) : 0;
                    augment_into(batch.data() + i * per, aug.data() + i * per, c, h, w, flip, p, dy, dx);
                }
                batch = std::move(aug);
            }
            in["x"] = std::move(batch);
            make_targets(in, idx);
            try {
                const auto ev = net.run(in, true);
                const double l = ev.value(loss).item();
                auto grads = backward(net.graph, ev, loss, wrt);
                opt.step(net.params, grads, lr);
                update_running_stats(net, ev, net.state, cfg.bn_momentum);
                total += l * static_cast<double>(idx.size());
                seen += idx.size();
            } catch (const NumericError& e) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
            }
        }
        const double mean = total / static_cast<double>(seen);
        if (!std::isfinite(mean)) throw NumericError("training diverged at epoch " + std::to_string(epoch));
        result.loss_curve.push_back(mean);
        if (hook) hook(epoch, mean);
    }
    return result;
}

// The model's tensors live in the training network during the loop; swap them
// back while the hook runs so it can use the model.
template <typename Swap>
EpochHook visible(const EpochHook& hook, Swap& swap) {
    if (!hook) return {};
    return [&hook, &swap](std::size_t e, double l) {
        swap();
        try {
            hook(e, l);
        } catch (...) {
            swap();
            throw;
        }
        swap();
    };
}

}  // namespace detail

/// Cross-entropy training. Decomposed-head class centers are exempt from weight decay.
inline TrainResult train_classifier(ClassifierModel& model, const Dataset& data, const TrainConfig& cfg,
                                    const EpochHook& hook = {}) {
    if (!data.labeled()) throw DataError("classifier training needs labels");
    check_image_batch(data.images, model.spec().image);
    Network& net = model.network();
    // Extend a copy of the graph with the loss so the model graph stays loss-free.
    Network train_net{net.graph, {}, {}};
    const NodeId loss = append_cross_entropy(train_net.graph, model.logits_node(), train_net.graph.input("onehot"),
                                             model.classes());
    std::swap(train_net.params, net.params);
    std::swap(train_net.state, net.state);
    const std::size_t k = model.classes();
    std::set<std::string> exempt;
    if (model.head() == HeadKind::decomposed) exempt.insert("head.centers");
    auto restore = [&] {
        std::swap(train_net.params, net.params);
        std::swap(train_net.state, net.state);
    };
    try {
        auto r = detail::train_network(train_net, loss, data, cfg, exempt, [&](Bindings<float>& in, auto idx) {
            std::vector<std::size_t> labels;
            for (std::size_t i : idx) labels.push_back(data.labels[i]);
            in["onehot"] = one_hot<float>(labels, k);
        }, detail::visible(hook, restore));
        restore();
        return r;
    } catch (...) {
        restore();
        throw;
    }
}

/// Reconstruction training with the per-sample squared error averaged over the batch.
inline TrainResult train_autoencoder(AutoencoderModel& model, const Dataset& data, const TrainConfig& cfg,
                                     const EpochHook& hook = {}) {
    check_image_batch(data.images, model.spec().image);
    Network& net = model.network();
    Network train_net{net.graph, {}, {}};
    const NodeId loss = append_mse(train_net.graph, train_net.graph.leaf_id("x"), model.recon_node(),
                                   model.spec().image.pixels());
    std::swap(train_net.params, net.params);
    std::swap(train_net.state, net.state);
    auto restore = [&] {
        std::swap(train_net.params, net.params);
        std::swap(train_net.state, net.state);
    };
    try {
        auto r = detail::train_network(train_net, loss, data, cfg, {}, [](Bindings<float>&, auto) {},
                                      detail::visible(hook, restore));
        restore();
        return r;
    } catch (...) {
        restore();
        throw;
    }
}

}  // namespace readood
