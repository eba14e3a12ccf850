#pragma once

#include <cstdint>
#include <random>

#include "readood/tensor.hpp"

namespace readood {

// All stochastic code takes an Rng& explicitly; nothing draws from global state.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename T>
Tensor<T> random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(normal(rng, 0.0, stddev));
    return t;
}

template <typename T>
Tensor<T> random_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(lo + (hi - lo) * uniform01(rng));
    return t;
}

}  // namespace readood
