#pragma once

// Small dense symmetric linear algebra in double precision.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "readood/error.hpp"

namespace readood {

/// Row-major square matrix.
struct SquareMatrix {
    std::size_t n = 0;
    std::vector<double> a;

    SquareMatrix() = default;
    explicit SquareMatrix(std::size_t dim, double fill = 0.0) : n(dim), a(dim * dim, fill) {}

    static SquareMatrix identity(std::size_t dim) {
        SquareMatrix m(dim);
        for (std::size_t i = 0; i < dim; ++i) m(i, i) = 1.0;
        return m;
    }
    static SquareMatrix diagonal(const std::vector<double>& d) {
        SquareMatrix m(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }

    double trace() const {
        double t = 0;
        for (std::size_t i = 0; i < n; ++i) t += (*this)(i, i);
        return t;
    }

    SquareMatrix operator*(const SquareMatrix& o) const {
        SquareMatrix r(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < n; ++k) {
                const double v = (*this)(i, k);
                for (std::size_t j = 0; j < n; ++j) r(i, j) += v * o(k, j);
            }
        return r;
    }

    SquareMatrix plus_identity(double reg) const {
        SquareMatrix r = *this;
        for (std::size_t i = 0; i < n; ++i) r(i, i) += reg;
        return r;
    }

    double max_asymmetry() const {
        double m = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::abs((*this)(i, j) - (*this)(j, i)));
        return m;
    }
};

/// Lower-triangular L with L L^T = m, or nullopt when m is not positive definite.
inline std::optional<SquareMatrix> cholesky(const SquareMatrix& m) {
    const std::size_t n = m.n;
    SquareMatrix l(n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = m(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0) || !std::isfinite(d)) return std::nullopt;
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = m(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

/// Solves L L^T x = b given the Cholesky factor.
inline std::vector<double> cholesky_solve(const SquareMatrix& l, std::vector<double> b) {
    const std::size_t n = l.n;
    if (b.size() != n) throw ShapeError("cholesky_solve: dimension mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * b[k];
        b[i] = s / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * b[k];
        b[i] = s / l(i, i);
    }
    return b;
}

/// Inverse from a Cholesky factor, symmetrized.
inline SquareMatrix cholesky_inverse(const SquareMatrix& l) {
    const std::size_t n = l.n;
    SquareMatrix inv(n);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> e(n, 0.0);
        e[c] = 1.0;
        const auto col = cholesky_solve(l, std::move(e));
        for (std::size_t r = 0; r < n; ++r) inv(r, c) = col[r];
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) inv(i, j) = inv(j, i) = 0.5 * (inv(i, j) + inv(j, i));
    return inv;
}

/// v^T M v
inline double quadratic_form(const SquareMatrix& m, std::span<const double> v) {
    double s = 0;
    for (std::size_t i = 0; i < m.n; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < m.n; ++j) row += m(i, j) * v[j];
        s += v[i] * row;
    }
    return s;
}

}  // namespace readood
