#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "readood/error.hpp"

namespace readood {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

enum class DType : std::uint8_t { u8 = 0, f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::u8; }
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

/// Dense row-major n-dimensional array. The element type fixes the dtype.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{})
        : shape_(std::move(shape)), data_(readood::numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != readood::numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
    static Tensor vector(std::initializer_list<T> v) { return Tensor(Shape{v.size()}, std::vector<T>(v)); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (readood::numel(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    // Sample `i` along the leading axis, keeping a leading axis of 1.
    Tensor slice0(std::size_t i) const { return slice0(i, i + 1); }
    Tensor slice0(std::size_t begin, std::size_t end) const {
        if (rank() == 0 || end > shape_[0] || begin > end) {
            throw ShapeError("slice0 out of range on " + to_string(shape_));
        }
        const std::size_t stride = data_.size() / std::max<std::size_t>(shape_[0], 1);
        Shape s = shape_;
        s[0] = end - begin;
        return Tensor(std::move(s), std::vector<T>(data_.begin() + begin * stride, data_.begin() + end * stride));
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        if constexpr (std::is_floating_point_v<T>) {
            return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
        }
        return true;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

/// Gathers the listed samples (leading axis) into a new batch.
template <typename T>
Tensor<T> gather0(const Tensor<T>& t, std::span<const std::size_t> idx) {
    const std::size_t stride = t.size() / std::max<std::size_t>(t.dim(0), 1);
    Shape s = t.shape();
    s[0] = idx.size();
    std::vector<T> out(idx.size() * stride);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= t.dim(0)) throw ShapeError("gather index out of range");
        std::copy_n(t.data() + idx[k] * stride, stride, out.data() + k * stride);
    }
    return Tensor<T>(std::move(s), std::move(out));
}

/// Concatenates tensors along the leading axis; trailing shapes must agree.
template <typename T>
Tensor<T> concat0(std::span<const Tensor<T>> parts) {
    if (parts.empty()) return {};
    Shape s = parts.front().shape();
    std::vector<T> out;
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
            throw ShapeError("concat0: trailing shapes differ " + to_string(p.shape()) + " vs " + to_string(s));
        }
        n += p.dim(0);
        out.insert(out.end(), p.storage().begin(), p.storage().end());
    }
    s[0] = n;
    return Tensor<T>(std::move(s), std::move(out));
}

}  // namespace readood
