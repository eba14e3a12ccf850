#pragma once

// Synthetic OOD corruptions of ID images and the selection of the
// perturbation magnitude and detection threshold from them.

#include <array>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "readood/metrics.hpp"
#include "readood/rng.hpp"
#include "readood/scoring.hpp"

namespace readood {

enum class SyntheticOodKind { uniform_noise, arithmetic_mean, geometric_mean, jigsaw, speckle, pixelate, rgb_ghost, invert };

inline constexpr std::array<SyntheticOodKind, 8> kSyntheticKinds{
    SyntheticOodKind::uniform_noise, SyntheticOodKind::arithmetic_mean, SyntheticOodKind::geometric_mean,
    SyntheticOodKind::jigsaw,        SyntheticOodKind::speckle,         SyntheticOodKind::pixelate,
    SyntheticOodKind::rgb_ghost,     SyntheticOodKind::invert};

inline std::string to_string(SyntheticOodKind k) {
    switch (k) {
        case SyntheticOodKind::uniform_noise: return "uniform-noise";
        case SyntheticOodKind::arithmetic_mean: return "arithmetic-mean";
        case SyntheticOodKind::geometric_mean: return "geometric-mean";
        case SyntheticOodKind::jigsaw: return "jigsaw";
        case SyntheticOodKind::speckle: return "speckle";
        case SyntheticOodKind::pixelate: return "pixelate";
        case SyntheticOodKind::rgb_ghost: return "rgb-ghost";
        case SyntheticOodKind::invert: return "invert";
    }
    return "?";
}

inline bool needs_partner(SyntheticOodKind k) {
    return k == SyntheticOodKind::arithmetic_mean || k == SyntheticOodKind::geometric_mean;
}

struct SynthParams {
    double speckle_sd = 0.2;
    std::size_t jigsaw_grid = 4;
    std::size_t pixelate_factor = 4;
    // (rows, cols) circular shift per channel, cycled when there are more channels
    std::vector<std::array<int, 2>> ghost_shifts{{2, 0}, {0, 2}, {-2, -2}};
};

namespace detail {

struct Chw {
    std::size_t c, h, w;
};

inline Chw image_dims(const Tensor<float>& x) {
    if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
    if (x.rank() == 4 && x.dim(0) == 1) return {x.dim(1), x.dim(2), x.dim(3)};
    throw ShapeError("expected a single image [C,H,W] or [1,C,H,W], got " + to_string(x.shape()));
}

inline std::size_t wrap(long v, std::size_t n) {
    const long m = static_cast<long>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
}

}  // namespace detail

/// Rearranges a grid x grid patch layout: output patch p takes input patch perm[p].
inline Tensor<float> jigsaw(const Tensor<float>& x, std::span<const std::size_t> perm, std::size_t grid = 4) {
    const auto [c, h, w] = detail::image_dims(x);
    if (grid == 0 || h % grid || w % grid) throw ShapeError("jigsaw grid must divide the image size");
    if (perm.size() != grid * grid) throw Error("jigsaw permutation has the wrong length");
    const std::size_t ph = h / grid, pw = w / grid;
    Tensor<float> out(x.shape());
    for (std::size_t p = 0; p < perm.size(); ++p) {
        const std::size_t sy = perm[p] / grid * ph, sx = perm[p] % grid * pw;
        const std::size_t dy = p / grid * ph, dx = p % grid * pw;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < ph; ++i)
                for (std::size_t j = 0; j < pw; ++j)
                    out[(ch * h + dy + i) * w + dx + j] = x[(ch * h + sy + i) * w + sx + j];
    }
    return out;
}

inline Tensor<float> synthesize(SyntheticOodKind kind, const Tensor<float>& x, Rng& rng,
                                const Tensor<float>* partner = nullptr, const SynthParams& sp = {}) {
    const auto [c, h, w] = detail::image_dims(x);
    if (needs_partner(kind)) {
        if (!partner) throw Error(to_string(kind) + " needs a partner image");
        if (partner->size() != x.size()) throw ShapeError(to_string(kind) + ": partner image shape differs");
    }
    Tensor<float> out(x.shape());
    switch (kind) {
        case SyntheticOodKind::uniform_noise:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(uniform01(rng));
            break;
        case SyntheticOodKind::arithmetic_mean:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] + (*partner)[i]) / 2;
            break;
        case SyntheticOodKind::geometric_mean:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(x[i] * (*partner)[i]);
            break;
        case SyntheticOodKind::jigsaw: {
            std::vector<std::size_t> perm(sp.jigsaw_grid * sp.jigsaw_grid);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            return jigsaw(x, perm, sp.jigsaw_grid);
        }
        case SyntheticOodKind::speckle:
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double n = normal(rng) * sp.speckle_sd;
                out[i] = static_cast<float>(std::clamp(x[i] + x[i] * n, 0.0, 1.0));
            }
            break;
        case SyntheticOodKind::pixelate: {
            const std::size_t f = sp.pixelate_factor;
            if (f == 0) throw Error("pixelate factor must be positive");
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        out[(ch * h + i) * w + j] = x[(ch * h + i / f * f) * w + j / f * f];
            break;
        }
        case SyntheticOodKind::rgb_ghost:
            if (sp.ghost_shifts.empty()) throw Error("rgb-ghost needs at least one shift");
            for (std::size_t ch = 0; ch < c; ++ch) {
                const auto [sy, sx] = sp.ghost_shifts[ch % sp.ghost_shifts.size()];
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j) {
                        const std::size_t si = detail::wrap(static_cast<long>(i) - sy, h);
                        const std::size_t sj = detail::wrap(static_cast<long>(j) - sx, w);
                        out[(ch * h + i) * w + j] = x[(ch * h + si) * w + sj];
                    }
            }
            break;
        case SyntheticOodKind::invert:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0f - x[i];
            break;
    }
    return out;
}

/// Equal-size batches of every synthetic kind built from ID validation images.
struct SyntheticPool {
    std::vector<SyntheticOodKind> kinds;
    std::vector<Tensor<float>> images;  // one [m,C,H,W] batch per kind
};

inline SyntheticPool build_pool(const Tensor<float>& val, Rng& rng, std::size_t per_kind = 1000,
                                const SynthParams& sp = {}) {
    if (val.rank() != 4 || val.dim(0) == 0) throw DataError("calibration needs a non-empty validation set");
    const std::size_t n = val.dim(0);
    const std::size_t m = std::min(per_kind, n);
    SyntheticPool pool;
    for (auto kind : kSyntheticKinds) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<Tensor<float>> imgs;
        imgs.reserve(m);
        for (std::size_t j = 0; j < m; ++j) {
            const Tensor<float> x = val.slice0(idx[j]);
            Tensor<float> partner;
            if (needs_partner(kind)) {
                std::size_t k = n > 1 ? uniform_index(rng, n - 1) : 0;
                if (n > 1 && k >= idx[j]) ++k;
                partner = val.slice0(k);
            }
            imgs.push_back(synthesize(kind, x, rng, needs_partner(kind) ? &partner : nullptr, sp));
        }
        pool.kinds.push_back(kind);
        pool.images.push_back(concat0<float>(imgs));
    }
    return pool;
}

/// tau for a 95% TPR on ID validation scores.
inline double select_threshold(std::span<const double> id_scores, double tpr = 0.95) {
    if (id_scores.size() < 20) throw DataError("threshold selection needs at least 20 ID scores");
    return threshold_at_tpr(id_scores, tpr);
}

inline const std::vector<double>& default_epsilon_grid() {
    static const std::vector<double> g{0, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.04};
    return g;
}

/// Pool and validation batches with perturbation-independent parts cached.
struct CalibrationData {
    Prepared val;
    std::vector<SyntheticOodKind> kinds;
    std::vector<Prepared> pool;
};

inline CalibrationData prepare_calibration(const Detector& det, const Tensor<float>& val, const SyntheticPool& pool) {
    CalibrationData cd;
    cd.val = prepare(det, val);
    cd.kinds = pool.kinds;
    for (const auto& b : pool.images) cd.pool.push_back(prepare(det, b));
    return cd;
}

struct EpsilonEval {
    std::vector<double> id_scores;
    std::map<std::string, double> fpr;
    double mean_fpr = 0.0;
};

inline EpsilonEval evaluate_epsilon(const Detector& det, const CalibrationData& cd, double epsilon) {
    EpsilonEval e;
    e.id_scores = final_scores(score_latents(det, cd.val, perturbed_latents(det, cd.val, epsilon), ScoreOptions{}));
    for (std::size_t k = 0; k < cd.pool.size(); ++k) {
        const auto& p = cd.pool[k];
        const auto ood = final_scores(score_latents(det, p, perturbed_latents(det, p, epsilon), ScoreOptions{}));
        const double f = fpr_at_tpr(e.id_scores, ood);
        e.fpr[to_string(cd.kinds[k])] = f;
        e.mean_fpr += f;
    }
    e.mean_fpr /= static_cast<double>(cd.pool.size());
    return e;
}

/// Grid search for epsilon minimizing the mean synthetic FPR@95TPR (ties go to
/// the smaller epsilon), then tau at that epsilon.
inline CalibrationResult search_epsilon(const Detector& det, const CalibrationData& cd, std::vector<double> grid) {
    if (grid.empty()) throw ConfigError("epsilon grid is empty");
    for (double e : grid)
        if (!(e >= 0) || !std::isfinite(e)) throw ConfigError("epsilon grid values must be finite and non-negative");
    std::sort(grid.begin(), grid.end());
    CalibrationResult r;
    r.grid = grid;
    std::vector<double> best_id;
    double best = std::numeric_limits<double>::infinity();
    for (double eps : grid) {
        EpsilonEval e = evaluate_epsilon(det, cd, eps);
        r.fpr_table.push_back(e.fpr);
        r.mean_fpr.push_back(e.mean_fpr);
        if (e.mean_fpr < best) {
            best = e.mean_fpr;
            r.epsilon = eps;
            best_id = std::move(e.id_scores);
        }
    }
    r.tau = select_threshold(best_id);
    r.id_tpr = accept_rate(best_id, r.tau);
    return r;
}

inline CalibrationResult calibrate(Detector& det, const Tensor<float>& val, Rng& rng,
                                   const std::vector<double>& grid = default_epsilon_grid(),
                                   std::size_t per_kind = 1000, const SynthParams& sp = {}) {
    const SyntheticPool pool = build_pool(val, rng, per_kind, sp);
    const CalibrationData cd = prepare_calibration(det, val, pool);
    det.calibration = search_epsilon(det, cd, grid);
    return *det.calibration;
}

}  // namespace readood
