#pragma once

// Compression-based image complexity and the complexity-band adjustment.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "readood/dataset.hpp"
#include "readood/error.hpp"
#include "readood/tensor.hpp"

namespace readood {

inline constexpr const char* kCompressorId = "zlib-deflate-9/u8-planar";

/// Bits per dimension of the u8-quantized, channel-planar image after deflate at level 9.
inline double complexity(std::span<const float> image) {
    if (image.empty()) throw DataError("complexity of an empty image");
    std::vector<Bytef> raw(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        raw[i] = static_cast<Bytef>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 255.0f));
    }
    uLongf len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<Bytef> out(len);
    if (compress2(out.data(), &len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw Error("deflate failed");
    }
    return 8.0 * static_cast<double>(len) / static_cast<double>(image.size());
}

inline double complexity(const Tensor<float>& image) { return complexity(image.values()); }

/// One complexity value per image of an [N,C,H,W] batch.
inline std::vector<double> complexities(const Tensor<float>& batch) {
    if (batch.rank() != 4) throw ShapeError("complexities expects [N,C,H,W]");
    const std::size_t per = batch.size() / std::max<std::size_t>(batch.dim(0), 1);
    std::vector<double> out(batch.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = complexity(std::span<const float>(batch.data() + i * per, per));
    return out;
}

struct ComplexityBounds {
    double lower = 0.0;
    double upper = 0.0;
    double trim = 0.05;
    std::string compressor = kCompressorId;
};

/// Nearest-rank percentile (1-based rank ceil(q * n)), no interpolation.
inline double nearest_rank(std::vector<double> sorted_or_not, double q) {
    std::sort(sorted_or_not.begin(), sorted_or_not.end());
    const std::size_t n = sorted_or_not.size();
    auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return sorted_or_not[rank - 1];
}

inline ComplexityBounds fit_bounds(std::span<const double> training_complexities, double trim = 0.05) {
    if (training_complexities.size() < 20) {
        throw DataError("complexity bounds need at least 20 training samples, got " +
                        std::to_string(training_complexities.size()));
    }
    if (!(trim >= 0.0 && trim < 0.5)) throw ConfigError("trim fraction must be in [0, 0.5)");
    std::vector<double> c(training_complexities.begin(), training_complexities.end());
    return {nearest_rank(c, trim), nearest_rank(c, 1.0 - trim), trim, kCompressorId};
}

enum class OodCharacter { easy, within, hard };

inline std::string to_string(OodCharacter c) {
    switch (c) {
        case OodCharacter::easy: return "easy";
        case OodCharacter::within: return "within";
        case OodCharacter::hard: return "hard";
    }
    return "?";
}

/// Boundary values count as within the band.
inline OodCharacter characterize(double c, const ComplexityBounds& b) {
    if (c < b.lower) return OodCharacter::easy;
    if (c > b.upper) return OodCharacter::hard;
    return OodCharacter::within;
}

/// Halves the reconstruction term inside the ID complexity band; keeps it outside.
inline double lambda_for(OodCharacter c) { return c == OodCharacter::within ? 0.5 : 1.0; }

}  // namespace readood
