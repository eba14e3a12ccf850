#pragma once

// Small single-threaded matrix kernels. Every kernel accumulates in a fixed
// order so results are bit-reproducible across runs.

#include <algorithm>
#include <array>
#include <cstddef>

namespace readood::detail {

// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill_n(c, m * n, T{});
    constexpr std::size_t jb = 256;
    constexpr std::size_t pb = 128;
    for (std::size_t j0 = 0; j0 < n; j0 += jb) {
        const std::size_t j1 = std::min(n, j0 + jb);
        for (std::size_t p0 = 0; p0 < k; p0 += pb) {
            const std::size_t p1 = std::min(k, p0 + pb);
            for (std::size_t i = 0; i < m; ++i) {
                T* crow = c + i * n;
                for (std::size_t p = p0; p < p1; ++p) {
                    const T av = a[i * k + p];
                    if (av == T{}) continue;
                    const T* brow = b + p * n;
                    for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
}

// C[M,N] (+)= A[K,M]^T * B[K,N].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill_n(c, m * n, T{});
    constexpr std::size_t jb = 256;
    for (std::size_t j0 = 0; j0 < n; j0 += jb) {
        const std::size_t j1 = std::min(n, j0 + jb);
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = a[p * m + i];
                if (av == T{}) continue;
                T* crow = c + i * n;
                for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

template <typename T>
T dot(const T* x, const T* y, std::size_t n) {
    constexpr std::size_t lanes = 8;
    std::array<T, lanes> acc{};
    const std::size_t body = n - n % lanes;
    for (std::size_t i = 0; i < body; i += lanes) {
        for (std::size_t l = 0; l < lanes; ++l) acc[l] += x[i + l] * y[i + l];
    }
    T tail{};
    for (std::size_t i = body; i < n; ++i) tail += x[i] * y[i];
    T s{};
    for (std::size_t l = 0; l < lanes; ++l) s += acc[l];
    return s + tail;
}

// C[M,N] (+)= A[M,K] * B[N,K]^T.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T v = dot(a + i * k, b + j * k, k);
            c[i * n + j] = accumulate ? c[i * n + j] + v : v;
        }
    }
}

struct ConvGeometry {
    std::size_t channels, height, width;  // image side
    std::size_t kh, kw, stride, pad;
    std::size_t out_h, out_w;             // grid side
};

// img [N][C][H][W] -> cols [C*kh*kw][N*out_h*out_w]
template <typename T>
void im2col(const T* img, std::size_t batch, const ConvGeometry& g, T* cols) {
    const std::size_t grid = g.out_h * g.out_w;
    const std::size_t row_len = batch * grid;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = cols + ((c * g.kh + ki) * g.kw + kj) * row_len;
                for (std::size_t n = 0; n < batch; ++n) {
                    const T* plane = img + (n * g.channels + c) * g.height * g.width;
                    T* dst = row + n * grid;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                                ix < static_cast<long>(g.width);
                            dst[oy * g.out_w + ox] = inside ? plane[iy * g.width + ix] : T{};
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatters cols back into img (img must be zeroed by caller).
template <typename T>
void col2im(const T* cols, std::size_t batch, const ConvGeometry& g, T* img) {
    const std::size_t grid = g.out_h * g.out_w;
    const std::size_t row_len = batch * grid;
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * row_len;
                for (std::size_t n = 0; n < batch; ++n) {
                    T* plane = img + (n * g.channels + c) * g.height * g.width;
                    const T* src = row + n * grid;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
                            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                            plane[iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

// [N][C][S] <-> [C][N][S]
template <typename T>
void swap_leading(const T* in, std::size_t a, std::size_t b, std::size_t inner, T* out) {
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            std::copy_n(in + (i * b + j) * inner, inner, out + (j * a + i) * inner);
        }
    }
}

}  // namespace readood::detail
