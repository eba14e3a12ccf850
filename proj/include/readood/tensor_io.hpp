#pragma once

// TensorFile: "RTN1", dtype u8, rank u8, little-endian u32 dims, row-major
// little-endian payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <variant>

#include "readood/dataset.hpp"
#include "readood/tensor.hpp"

namespace readood {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline constexpr char kTensorMagic[4] = {'R', 'T', 'N', '1'};

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::u8: return 1;
        case DType::f32: return 4;
        case DType::f64: return 8;
    }
    return 0;
}

using AnyTensor = std::variant<Tensor<std::uint8_t>, Tensor<float>, Tensor<double>>;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    if (t.rank() > 255) throw ShapeError("tensor rank too large for a TensorFile");
    os.write(kTensorMagic, 4);
    const std::uint8_t head[2] = {static_cast<std::uint8_t>(dtype_of<T>()), static_cast<std::uint8_t>(t.rank())};
    os.write(reinterpret_cast<const char*>(head), 2);
    for (std::size_t d : t.shape()) {
        if (d > UINT32_MAX) throw ShapeError("tensor dimension does not fit in u32");
        const auto v = static_cast<std::uint32_t>(d);
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!os) throw Error("failed writing tensor data");
}

namespace detail {

inline void read_exact(std::istream& is, void* dst, std::size_t n, const char* what) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw DataError(std::string("truncated tensor file: ") + what);
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
    Tensor<T> t(std::move(shape));
    read_exact(is, t.data(), t.size() * sizeof(T), "payload");
    return t;
}

}  // namespace detail

inline AnyTensor read_any_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() == 0) throw DataError("empty tensor file");
    if (is.gcount() != 4 || std::memcmp(magic, kTensorMagic, 4) != 0) throw DataError("not a tensor file (bad magic)");
    std::uint8_t head[2];
    detail::read_exact(is, head, 2, "header");
    if (head[0] > 2) throw DataError("unknown tensor dtype code " + std::to_string(head[0]));
    Shape shape(head[1]);
    for (auto& d : shape) {
        std::uint32_t v;
        detail::read_exact(is, &v, 4, "dims");
        d = v;
    }
    switch (static_cast<DType>(head[0])) {
        case DType::u8: return detail::read_payload<std::uint8_t>(is, shape);
        case DType::f32: return detail::read_payload<float>(is, shape);
        case DType::f64: return detail::read_payload<double>(is, shape);
    }
    throw DataError("unknown tensor dtype");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    AnyTensor a = read_any_tensor(is);
    if (auto* t = std::get_if<Tensor<T>>(&a)) return std::move(*t);
    throw DataError("tensor file has dtype code " + std::to_string(a.index()) + ", expected " +
                    std::to_string(static_cast<int>(dtype_of<T>())));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path + " for writing");
    write_tensor(os, t);
}

inline AnyTensor load_any_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    try {
        return read_any_tensor(is);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

/// Image batch in [0,1] from a u8, f32 or f64 tensor file.
inline Tensor<float> load_images(const std::string& path) {
    AnyTensor a = load_any_tensor(path);
    Tensor<float> x = std::visit(
        [](auto& t) -> Tensor<float> {
            using T = typename std::decay_t<decltype(t)>::value_type;
            if constexpr (std::is_same_v<T, std::uint8_t>) return dequantize_u8(t);
            else return t.template cast<float>();
        },
        a);
    if (x.rank() != 4 || x.dim(0) == 0) throw DataError(path + ": expected a non-empty image batch [N,C,H,W], got " + to_string(x.shape()));
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x[i] >= 0.0f && x[i] <= 1.0f)) throw DataError(path + ": pixel values must lie in [0,1]");
    return x;
}

inline std::vector<std::size_t> load_labels(const std::string& path) {
    AnyTensor a = load_any_tensor(path);
    const auto* t = std::get_if<Tensor<std::uint8_t>>(&a);
    if (!t || t->rank() != 1) throw DataError(path + ": labels must be a rank-1 u8 tensor");
    return {t->values().begin(), t->values().end()};
}

inline void save_labels(const std::string& path, std::span<const std::size_t> labels) {
    Tensor<std::uint8_t> t(Shape{labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 255) throw DataError("label does not fit in u8");
        t[i] = static_cast<std::uint8_t>(labels[i]);
    }
    save_tensor(path, t);
}

/// `<stem>.images.rtn` plus `<stem>.labels.rtn` when labeled.
inline void save_dataset(const std::string& stem, const Dataset& d) {
    save_tensor(stem + ".images.rtn", quantize_u8(d.images));
    if (d.labeled()) save_labels(stem + ".labels.rtn", d.labels);
}

inline Dataset load_dataset(const std::string& stem, bool need_labels) {
    Dataset d;
    d.images = load_images(stem + ".images.rtn");
    if (need_labels || std::ifstream(stem + ".labels.rtn").good()) d.labels = load_labels(stem + ".labels.rtn");
    d.validate();
    return d;
}

/// IDX (MNIST-style) u8 image file: [N,H,W] or [N,C,H,W] -> [N,C,H,W] in [0,1].
inline Tensor<float> load_idx_images(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    std::uint8_t m[4];
    detail::read_exact(is, m, 4, "idx magic");
    if (m[0] != 0 || m[1] != 0 || m[2] != 0x08) throw DataError(path + ": not an unsigned-byte IDX file");
    const std::size_t rank = m[3];
    if (rank != 3 && rank != 4) throw DataError(path + ": IDX images must have rank 3 or 4");
    Shape shape(rank);
    for (auto& d : shape) {
        std::uint8_t b[4];
        detail::read_exact(is, b, 4, "idx dims");
        d = (std::size_t{b[0]} << 24) | (std::size_t{b[1]} << 16) | (std::size_t{b[2]} << 8) | b[3];
    }
    if (rank == 3) shape = {shape[0], 1, shape[1], shape[2]};
    return dequantize_u8(detail::read_payload<std::uint8_t>(is, shape));
}

inline std::vector<std::size_t> load_idx_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    std::uint8_t m[8];
    detail::read_exact(is, m, 8, "idx header");
    if (m[2] != 0x08 || m[3] != 1) throw DataError(path + ": IDX labels must be rank-1 unsigned bytes");
    const std::size_t n = (std::size_t{m[4]} << 24) | (std::size_t{m[5]} << 16) | (std::size_t{m[6]} << 8) | m[7];
    const auto t = detail::read_payload<std::uint8_t>(is, {n});
    return {t.values().begin(), t.values().end()};
}

}  // namespace readood
