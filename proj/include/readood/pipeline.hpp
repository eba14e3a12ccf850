#pragma once

// Pipeline stages shared by the CLI and the end-to-end runs: train the two
// networks, fit statistics and bounds, calibrate, evaluate.

#include <string>
#include <vector>

#include "readood/benchmark.hpp"
#include "readood/calibration.hpp"
#include "readood/config.hpp"
#include "readood/evaluation.hpp"
#include "readood/training.hpp"

namespace readood {

inline constexpr std::uint64_t kClassifierInitStream = 10;
inline constexpr std::uint64_t kAutoencoderInitStream = 11;

inline ImageSpec image_spec_of(const Tensor<float>& x) {
    if (x.rank() != 4) throw DataError("images must be [N,C,H,W], got " + to_string(x.shape()));
    return {x.dim(1), x.dim(2), x.dim(3)};
}

inline std::size_t class_count(const Dataset& d) {
    if (!d.labeled()) throw DataError("dataset has no labels");
    const std::size_t k = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
    if (k < 2) throw DataError("training labels contain a single class");
    return k;
}

/// Classifier for cfg.variant, shaped by the training data.
inline ClassifierModel fit_classifier(const RunConfig& cfg, const Dataset& train, const EpochHook& hook = {}) {
    ClassifierSpec spec = cfg.classifier_spec();
    spec.image = image_spec_of(train.images);
    spec.classes = class_count(train);
    Rng rng = bench::split_rng(cfg.seed, kClassifierInitStream);
    ClassifierModel clf(spec, rng);
    train_classifier(clf, train, cfg.classifier, hook);
    return clf;
}

inline AutoencoderModel fit_autoencoder(const RunConfig& cfg, const Dataset& train, const EpochHook& hook = {}) {
    AutoencoderSpec spec = cfg.autoencoder_spec();
    spec.image = image_spec_of(train.images);
    Rng rng = bench::split_rng(cfg.seed, kAutoencoderInitStream);
    AutoencoderModel ae(spec, rng);
    train_autoencoder(ae, train, cfg.autoencoder, hook);
    return ae;
}

inline double accuracy(const ClassifierModel& clf, const Dataset& d) {
    const auto pred = predict(clf, d.images);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i].label == d.labels.at(i);
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

/// Detector with class statistics (READ-MD) and complexity bounds fitted on `train`.
inline Detector assemble_detector(const RunConfig& cfg, ClassifierModel clf, AutoencoderModel ae, const Dataset& train) {
    if (clf.head() != cfg.head()) {
        throw ConfigError("variant " + to_string(cfg.variant) + " needs a classifier with a " + to_string(cfg.head()) +
                          " head, got " + to_string(clf.head()));
    }
    if (clf.spec().image != ae.spec().image) {
        throw DataError("classifier and autoencoder were trained on different image shapes");
    }
    Detector det{cfg.variant, std::move(clf), std::move(ae)};
    det.options = cfg.options;
    if (cfg.variant == Variant::read_md) {
        det.stats = ClassStats::fit(latents(det.classifier, train.images), train.labels, det.classifier.classes());
    }
    det.bounds = fit_bounds(complexities(train.images));
    return det;
}

inline CalibrationResult calibrate_detector(const RunConfig& cfg, Detector& det, const Tensor<float>& val) {
    Rng rng(cfg.calibration_seed);
    return calibrate(det, val, rng, cfg.epsilon_grid, cfg.pool_per_kind, cfg.synth);
}

/// Every stage on a generated benchmark, for cfg.variant.
inline EvalReport run_benchmark_pipeline(const RunConfig& cfg) {
    const Benchmark b = generate_benchmark(cfg.seed, cfg.benchmark);
    Detector det = assemble_detector(cfg, fit_classifier(cfg, b.train), fit_autoencoder(cfg, b.train), b.train);
    calibrate_detector(cfg, det, b.val.images);
    return evaluate_suite(det, NamedSet{"test", b.test.images}, b.ood);
}

}  // namespace readood
