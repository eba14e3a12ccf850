#pragma once

// Class-conditional Gaussians with a tied covariance over classifier latents.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "readood/error.hpp"
#include "readood/linalg.hpp"
#include "readood/tensor.hpp"

namespace readood {

using Vec = std::vector<double>;

inline void check_features(const Tensor<double>& z, std::span<const std::size_t> labels) {
    if (z.rank() != 2) throw ShapeError("features must be [N,d], got " + to_string(z.shape()));
    if (labels.size() != z.dim(0)) throw ShapeError("feature/label count mismatch");
}

/// Per-class arithmetic means; every class in [0, classes) needs a sample.
inline std::vector<Vec> fit_class_means(const Tensor<double>& z, std::span<const std::size_t> labels,
                                        std::size_t classes) {
    check_features(z, labels);
    const std::size_t d = z.dim(1);
    std::vector<Vec> means(classes, Vec(d, 0.0));
    std::vector<std::size_t> counts(classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
        ++counts[labels[i]];
        for (std::size_t t = 0; t < d; ++t) means[labels[i]][t] += z[i * d + t];
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no samples");
        for (auto& v : means[c]) v /= static_cast<double>(counts[c]);
    }
    return means;
}

/// Mean outer product of (z - mean[label]), normalized by the total sample count.
inline SquareMatrix fit_tied_covariance(const Tensor<double>& z, std::span<const std::size_t> labels,
                                        const std::vector<Vec>& means) {
    check_features(z, labels);
    const std::size_t n = z.dim(0), d = z.dim(1);
    if (n == 0) throw DataError("covariance of an empty feature set");
    SquareMatrix cov(d);
    Vec r(d);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec& mu = means.at(labels[i]);
        for (std::size_t t = 0; t < d; ++t) r[t] = z[i * d + t] - mu[t];
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) cov(a, b) += r[a] * r[b];
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) cov(b, a) = cov(a, b) = cov(a, b) / static_cast<double>(n);
    return cov;
}

struct Precision {
    SquareMatrix matrix;  // (covariance + reg I)^-1
    SquareMatrix factor;  // Cholesky factor of covariance + reg I
    double reg = 0.0;
};

/// Inverse of (cov + reg I) via Cholesky. Without an explicit reg, starts at
/// 1e-6 * trace/d and escalates by 10x up to 1e-2 * trace/d.
inline Precision precision(const SquareMatrix& cov, std::optional<double> reg = std::nullopt) {
    if (cov.max_asymmetry() > 1e-8) throw NumericError("covariance is not symmetric");
    std::vector<double> tries;
    if (reg) {
        tries.push_back(*reg);
    } else {
        const double scale = cov.trace() / static_cast<double>(cov.n);
        for (double f = 1e-6; f <= 1e-2 * 1.000001; f *= 10) tries.push_back(f * scale);
    }
    for (double r : tries) {
        auto l = cholesky(cov.plus_identity(r));
        if (l) return {cholesky_inverse(*l), std::move(*l), r};
    }
    throw NumericError("covariance is not positive definite even with regularization " + std::to_string(tries.back()));
}

struct ClassStats {
    std::vector<Vec> means;
    SquareMatrix covariance;
    SquareMatrix precision;
    SquareMatrix factor;
    double reg = 0.0;

    std::size_t classes() const { return means.size(); }
    std::size_t dim() const { return covariance.n; }

    static ClassStats fit(const Tensor<double>& z, std::span<const std::size_t> labels, std::size_t classes,
                          std::optional<double> reg = std::nullopt) {
        ClassStats s;
        s.means = fit_class_means(z, labels, classes);
        s.covariance = fit_tied_covariance(z, labels, s.means);
        s.set_covariance(s.covariance, reg);
        return s;
    }

    void set_covariance(SquareMatrix cov, std::optional<double> r = std::nullopt) {
        auto p = readood::precision(cov, r);
        covariance = std::move(cov);
        precision = std::move(p.matrix);
        factor = std::move(p.factor);
        reg = p.reg;
    }

    /// v^T P v with the regularized precision P.
    double mahalanobis_sq(std::span<const double> v) const {
        if (v.size() != dim()) throw ShapeError("mahalanobis: vector dimension mismatch");
        return quadratic_form(precision, v);
    }

    /// Same quantity through a triangular solve instead of the stored inverse.
    double mahalanobis_sq_solve(std::span<const double> v) const {
        const Vec x = cholesky_solve(factor, Vec(v.begin(), v.end()));
        double s = 0;
        for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * x[i];
        return s;
    }
};

}  // namespace readood
