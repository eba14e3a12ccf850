#pragma once

#include <cstdint>
#include <vector>

#include "readood/error.hpp"
#include "readood/tensor.hpp"

namespace readood {

/// Images in [0,1], layout [N,C,H,W]; labels empty for unlabeled sets.
struct Dataset {
    Tensor<float> images;
    std::vector<std::size_t> labels;

    std::size_t size() const { return images.rank() ? images.dim(0) : 0; }
    bool labeled() const { return !labels.empty(); }

    void validate() const {
        if (images.rank() != 4) throw DataError("dataset images must be [N,C,H,W], got " + to_string(images.shape()));
        if (labeled() && labels.size() != size()) throw DataError("label count does not match image count");
    }

    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset out{gather0(images, idx), {}};
        if (labeled())
            for (std::size_t i : idx) out.labels.push_back(labels.at(i));
        return out;
    }
};

inline Tensor<std::uint8_t> quantize_u8(const Tensor<float>& x) {
    Tensor<std::uint8_t> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const float v = std::clamp(x[i], 0.0f, 1.0f);
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

inline Tensor<float> dequantize_u8(const Tensor<std::uint8_t>& x) {
    Tensor<float> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i]) / 255.0f;
    return out;
}

}  // namespace readood
