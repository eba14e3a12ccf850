#pragma once

// Latent-space class distance and transformed reconstruction error, their
// complexity-adjusted aggregate, the signed-gradient input perturbation, and
// the end-to-end detector.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "readood/class_stats.hpp"
#include "readood/complexity.hpp"
#include "readood/graph.hpp"
#include "readood/models.hpp"

namespace readood {

enum class Variant { read_md, read_ed };

inline std::string to_string(Variant v) { return v == Variant::read_md ? "read-md" : "read-ed"; }
inline Variant parse_variant(const std::string& s) {
    if (s == "read-md") return Variant::read_md;
    if (s == "read-ed") return Variant::read_ed;
    throw ConfigError("unknown variant '" + s + "' (expected read-md or read-ed)");
}

enum class Verdict { id, ood };
inline std::string to_string(Verdict v) { return v == Verdict::id ? "ID" : "OOD"; }

// ---------------------------------------------------------------------------
// Score functions. Both components are negated squared distances: 0 is the
// most ID-like value.

struct ClassDistance {
    double score;
    std::size_t nearest;
};

/// -min_i (z - mu_i)^T P (z - mu_i) with the regularized tied precision.
inline ClassDistance score_cla_md(std::span<const double> z, const ClassStats& stats) {
    if (z.size() != stats.dim()) throw ShapeError("score_cla_md: latent dimension mismatch");
    ClassDistance best{-std::numeric_limits<double>::infinity(), 0};
    Vec r(z.size());
    for (std::size_t i = 0; i < stats.classes(); ++i) {
        for (std::size_t t = 0; t < z.size(); ++t) r[t] = z[t] - stats.means[i][t];
        const double s = -stats.mahalanobis_sq(r);
        if (s > best.score) best = {s, i};
    }
    return best;
}

/// -(z_x - z_recon)^T P (z_x - z_recon)
inline double score_rec_md(std::span<const double> z, std::span<const double> z_recon, const ClassStats& stats) {
    if (z.size() != z_recon.size()) throw ShapeError("score_rec_md: latent dimension mismatch");
    Vec r(z.size());
    for (std::size_t t = 0; t < z.size(); ++t) r[t] = z[t] - z_recon[t];
    return -stats.mahalanobis_sq(r);
}

/// -min_i ||z - center_i||^2 over the rows of `centers` ([K,d]).
template <typename T>
ClassDistance score_cla_ed(std::span<const double> z, const Tensor<T>& centers) {
    if (centers.rank() != 2 || centers.dim(1) != z.size()) throw ShapeError("score_cla_ed: center shape mismatch");
    ClassDistance best{-std::numeric_limits<double>::infinity(), 0};
    const std::size_t d = z.size();
    for (std::size_t i = 0; i < centers.dim(0); ++i) {
        double s = 0;
        for (std::size_t t = 0; t < d; ++t) {
            const double diff = z[t] - static_cast<double>(centers[i * d + t]);
            s += diff * diff;
        }
        if (-s > best.score) best = {-s, i};
    }
    return best;
}

inline ClassDistance score_cla_ed(std::span<const double> z, const ClassifierModel& model) {
    if (model.head() != HeadKind::decomposed) throw Error("score_cla_ed needs a classifier with a decomposed head");
    return score_cla_ed(z, model.centers());
}

/// -||z_x - z_recon||^2
inline double score_rec_ed(std::span<const double> z, std::span<const double> z_recon) {
    if (z.size() != z_recon.size()) throw ShapeError("score_rec_ed: latent dimension mismatch");
    double s = 0;
    for (std::size_t t = 0; t < z.size(); ++t) {
        const double d = z[t] - z_recon[t];
        s += d * d;
    }
    return -s;
}

/// score_cla + lambda * score_rec; higher means more ID-like.
inline double aggregate(double score_cla, double score_rec, double lambda) {
    if (lambda != 0.5 && lambda != 1.0) throw Error("lambda must be 0.5 or 1.0");
    return score_cla + lambda * score_rec;
}

// ---------------------------------------------------------------------------
// Detector state

struct CalibrationResult {
    double epsilon = 0.0;
    double tau = 0.0;
    std::vector<double> grid;
    // grid index -> synthetic kind -> FPR@95TPR
    std::vector<std::map<std::string, double>> fpr_table;
    std::vector<double> mean_fpr;  // per grid entry
    double id_tpr = 0.0;           // TPR on the ID validation set at tau
};

struct DetectorOptions {
    bool stop_gradient_recon = true;  // hold the reconstruction fixed when perturbing
    bool clamp_perturbed = false;     // clamp perturbed pixels to [0,1]
    bool paper_literal_sign = false;  // report -(score) in outputs
};

struct Detector {
    Variant variant = Variant::read_md;
    ClassifierModel classifier;
    AutoencoderModel autoencoder;
    std::optional<ClassStats> stats;
    std::optional<ComplexityBounds> bounds;
    std::optional<CalibrationResult> calibration;
    DetectorOptions options;

    void check_fitted() const {
        if (variant == Variant::read_md && !stats) throw Error("READ-MD detector has no class statistics; run fit-stats");
        if (variant == Variant::read_ed && classifier.head() != HeadKind::decomposed) {
            throw Error("READ-ED needs a classifier trained with the decomposed head");
        }
    }
};

struct ScoreBreakdown {
    double score_cla = 0.0;
    double score_rec_raw = 0.0;
    double lambda = 1.0;
    double complexity = 0.0;
    OodCharacter character = OodCharacter::within;
    double final_score = 0.0;
    Verdict verdict = Verdict::id;
    std::size_t predicted_class = 0;
};

// ---------------------------------------------------------------------------
// Batched pipeline pieces

inline constexpr std::size_t kScoreChunk = 128;

template <typename F>
void for_chunks(std::size_t n, F&& f) {
    for (std::size_t s = 0; s < n; s += kScoreChunk) f(s, std::min(n, s + kScoreChunk));
}

inline Tensor<double> latents(const ClassifierModel& clf, const Tensor<float>& x) {
    std::vector<Tensor<float>> parts;
    for_chunks(x.dim(0), [&](std::size_t a, std::size_t b) { parts.push_back(extract_latent(clf, x.slice0(a, b))); });
    return concat0<float>(parts).cast<double>();
}

inline Tensor<float> reconstruct(const AutoencoderModel& ae, const Tensor<float>& x) {
    std::vector<Tensor<float>> parts;
    for_chunks(x.dim(0), [&](std::size_t a, std::size_t b) { parts.push_back(ae_forward(ae, x.slice0(a, b))); });
    return concat0<float>(parts);
}

/// Everything about a batch that does not depend on the perturbation or on lambda.
struct Prepared {
    Tensor<float> x;
    Tensor<float> recon;
    Tensor<double> z;
    Tensor<double> z_recon;
    std::vector<double> complexity;
    std::vector<std::size_t> predicted;
};

inline Prepared prepare(const Detector& det, const Tensor<float>& x) {
    det.check_fitted();
    check_image_batch(x, det.classifier.spec().image);
    Prepared p;
    p.x = x;
    p.recon = reconstruct(det.autoencoder, x);
    p.z = latents(det.classifier, x);
    p.z_recon = latents(det.classifier, p.recon);
    p.complexity = complexities(x);
    for_chunks(x.dim(0), [&](std::size_t a, std::size_t b) {
        for (const auto& pr : predict(det.classifier, x.slice0(a, b))) p.predicted.push_back(pr.label);
    });
    return p;
}

namespace detail {

inline std::span<const double> row(const Tensor<double>& t, std::size_t i) {
    const std::size_t d = t.dim(1);
    return {t.data() + i * d, d};
}

// d(score_cla + score_rec)/dz and, for the reconstruction branch, d/dz_recon.
inline void score_latent_grads(const Detector& det, std::span<const double> z, std::span<const double> zr,
                               std::span<double> gz, std::span<double> gzr) {
    const std::size_t d = z.size();
    Vec rc(d), rr(d);
    if (det.variant == Variant::read_md) {
        const auto near = score_cla_md(z, *det.stats);
        for (std::size_t t = 0; t < d; ++t) {
            rc[t] = z[t] - det.stats->means[near.nearest][t];
            rr[t] = z[t] - zr[t];
        }
        const auto& p = det.stats->precision;
        for (std::size_t i = 0; i < d; ++i) {
            double a = 0, b = 0;
            for (std::size_t j = 0; j < d; ++j) {
                a += p(i, j) * rc[j];
                b += p(i, j) * rr[j];
            }
            gz[i] = -2.0 * (a + b);
            gzr[i] = 2.0 * b;
        }
    } else {
        const auto near = score_cla_ed(z, det.classifier);
        const auto& c = det.classifier.centers();
        for (std::size_t t = 0; t < d; ++t) {
            const double a = z[t] - static_cast<double>(c[near.nearest * d + t]);
            const double b = z[t] - zr[t];
            gz[t] = -2.0 * (a + b);
            gzr[t] = 2.0 * b;
        }
    }
}

// Vector-Jacobian product through a network: d(sum(out * seed))/d(input "x").
inline Tensor<float> vjp_input(const Network& net, NodeId out, const Tensor<float>& x, const Tensor<float>& seed) {
    ExprGraph g = net.graph;
    const NodeId s = g.sum(g.mul(out, g.input("__seed")));
    const Bindings<float> in{{"x", x}, {"__seed", seed}};
    const auto ev = evaluate(g, Feed<float>{&in, &net.params, &net.state}, EvalOptions{false}, s);
    return backward(g, ev, s, {"x"}).at("x");
}

}  // namespace detail

/// Gradient of score_cla(x) + score_rec(x, recon) with respect to x. The
/// reconstruction is held fixed unless stop_gradient_recon is off.
inline Tensor<float> score_input_gradient(const Detector& det, const Tensor<float>& x, const Tensor<float>& recon) {
    det.check_fitted();
    const std::size_t n = x.dim(0);
    const auto& clf = det.classifier;
    const Tensor<double> z = extract_latent(clf, x).cast<double>();
    const Tensor<double> zr = extract_latent(clf, recon).cast<double>();
    const std::size_t d = z.dim(1);
    Tensor<float> seed(Shape{n, d}), seed_r(Shape{n, d});
    Vec gz(d), gzr(d);
    for (std::size_t i = 0; i < n; ++i) {
        detail::score_latent_grads(det, detail::row(z, i), detail::row(zr, i), gz, gzr);
        for (std::size_t t = 0; t < d; ++t) {
            seed[i * d + t] = static_cast<float>(gz[t]);
            seed_r[i * d + t] = static_cast<float>(gzr[t]);
        }
    }
    Tensor<float> grad = detail::vjp_input(clf.network(), clf.z_node(), x, seed);
    if (!det.options.stop_gradient_recon) {
        const Tensor<float> g_recon = detail::vjp_input(clf.network(), clf.z_node(), recon, seed_r);
        const auto& ae = det.autoencoder;
        const Tensor<float> via_ae = detail::vjp_input(ae.network(), ae.recon_node(), x, g_recon);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += via_ae[i];
    }
    return grad;
}

/// x - eps * sign(-grad), i.e. one signed ascent step on the detection score.
inline Tensor<float> perturb_input(const Detector& det, const Tensor<float>& x, const Tensor<float>& recon,
                                   double epsilon) {
    if (epsilon < 0) throw Error("perturbation magnitude must be non-negative");
    if (epsilon == 0) return x;
    const Tensor<float> grad = score_input_gradient(det, x, recon);
    Tensor<float> out = x;
    const float e = static_cast<float>(epsilon);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float neg = -grad[i];
        const float s = neg > 0 ? 1.0f : (neg < 0 ? -1.0f : 0.0f);
        out[i] = x[i] - e * s;
        if (det.options.clamp_perturbed) out[i] = std::clamp(out[i], 0.0f, 1.0f);
    }
    return out;
}

/// Latents of the perturbed batch.
inline Tensor<double> perturbed_latents(const Detector& det, const Prepared& p, double epsilon) {
    if (epsilon == 0) return p.z;
    std::vector<Tensor<float>> parts;
    for_chunks(p.x.dim(0), [&](std::size_t a, std::size_t b) {
        const Tensor<float> xt = perturb_input(det, p.x.slice0(a, b), p.recon.slice0(a, b), epsilon);
        parts.push_back(extract_latent(det.classifier, xt));
    });
    return concat0<float>(parts).cast<double>();
}

struct ScoreOptions {
    bool use_cla = true;
    bool use_rec = true;
    bool adjust = true;  // lambda from the complexity band; 1.0 when off
};

/// Per-sample breakdowns from latents `z` (possibly perturbed) against the stored reconstructions.
/// Verdicts use `tau` when given.
inline std::vector<ScoreBreakdown> score_latents(const Detector& det, const Prepared& p, const Tensor<double>& z,
                                                 const ScoreOptions& opt, std::optional<double> tau = std::nullopt) {
    det.check_fitted();
    if (opt.adjust && !det.bounds) throw Error("complexity adjustment needs fitted complexity bounds; run fit-stats");
    const std::size_t n = z.dim(0);
    std::vector<ScoreBreakdown> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& s = out[i];
        const auto zi = detail::row(z, i);
        const auto zr = detail::row(p.z_recon, i);
        if (det.variant == Variant::read_md) {
            s.score_cla = score_cla_md(zi, *det.stats).score;
            s.score_rec_raw = score_rec_md(zi, zr, *det.stats);
        } else {
            s.score_cla = score_cla_ed(zi, det.classifier).score;
            s.score_rec_raw = score_rec_ed(zi, zr);
        }
        s.complexity = p.complexity[i];
        if (det.bounds) s.character = characterize(s.complexity, *det.bounds);
        s.lambda = opt.adjust ? lambda_for(s.character) : 1.0;
        s.final_score = aggregate(opt.use_cla ? s.score_cla : 0.0, opt.use_rec ? s.score_rec_raw : 0.0, s.lambda);
        s.predicted_class = p.predicted[i];
        if (tau) s.verdict = s.final_score >= *tau ? Verdict::id : Verdict::ood;
    }
    return out;
}

/// Full pipeline with the calibrated epsilon and threshold.
inline std::vector<ScoreBreakdown> detect(const Detector& det, const Tensor<float>& x) {
    if (!det.calibration) throw Error("detector is not calibrated; run calibrate");
    if (!det.bounds) throw Error("detector has no complexity bounds; run fit-stats");
    const Prepared p = prepare(det, x);
    const Tensor<double> z = perturbed_latents(det, p, det.calibration->epsilon);
    return score_latents(det, p, z, ScoreOptions{}, det.calibration->tau);
}

inline std::vector<double> final_scores(std::span<const ScoreBreakdown> rows) {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.final_score);
    return out;
}

}  // namespace readood
