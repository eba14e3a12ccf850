#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "readood/error.hpp"
#include "readood/tensor.hpp"

namespace readood {

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <typename T>
Tensor<T> finite_difference_gradient(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
    if (!(h > T{})) throw Error("finite difference step must be positive");
    Tensor<T> grad(x.shape());
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + h;
        const T up = f(probe);
        probe[i] = orig - h;
        const T down = f(probe);
        probe[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("non-finite function value at coordinate " + std::to_string(i));
        }
        grad[i] = (up - down) / (T{2} * h);
    }
    return grad;
}

/// ||a - b|| / max(||a||, ||b||), with 0 when both vanish.
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("relative_error: shape mismatch");
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        diff += d * d;
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

}  // namespace readood
