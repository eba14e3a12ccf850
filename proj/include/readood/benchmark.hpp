#pragma once

// Procedural desk-scale benchmark. ID classes are noisy two-colour textures
// (horizontal stripes, vertical stripes, checkerboard, dots). OOD suites:
// near-constant gradients (easy), held-out textures rendered the same way
// (medium: diagonal stripes, rings, sectors) and high-frequency patch
// collages (hard).

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "readood/dataset.hpp"
#include "readood/evaluation.hpp"
#include "readood/models.hpp"
#include "readood/rng.hpp"

namespace readood {

struct BenchmarkSpec {
    ImageSpec image;
    std::size_t classes = 4;
    std::size_t n_train = 1200;
    std::size_t n_val = 400;
    std::size_t n_test = 1000;
    std::size_t n_ood = 400;  // per suite
    double noise_lo = 0.005;
    double noise_hi = 0.02;

    void validate() const {
        if (classes < 2 || classes > 4) throw ConfigError("benchmark classes must be between 2 and 4");
        if (image.height < 16 || image.width < 16 || image.height % 4 || image.width % 4) {
            throw ConfigError("benchmark images must be at least 16x16 with sides divisible by 4");
        }
        if (image.channels == 0) throw ConfigError("benchmark images need at least one channel");
        if (n_train == 0 || n_val == 0 || n_test == 0 || n_ood == 0) throw ConfigError("benchmark split sizes must be positive");
        if (!(noise_lo >= 0 && noise_lo <= noise_hi && noise_hi < 0.5)) throw ConfigError("invalid benchmark noise range");
    }
};

struct Benchmark {
    Dataset train, val, test;
    std::vector<NamedSet> ood;  // easy, medium, hard

    const NamedSet& suite(const std::string& name) const {
        for (const auto& s : ood)
            if (s.name == name) return s;
        throw Error("no OOD suite named " + name);
    }
};

namespace bench {

enum class Pattern { hstripes, vstripes, checker, dots, diagonal, rings, sectors };

inline constexpr std::array<Pattern, 4> kIdPatterns{Pattern::hstripes, Pattern::vstripes, Pattern::checker, Pattern::dots};
inline constexpr std::array<Pattern, 3> kHeldOutPatterns{Pattern::diagonal, Pattern::rings, Pattern::sectors};

inline constexpr double kContrast = 0.4;

struct Canvas {
    std::size_t c, h, w;
    float* px;
    float& at(std::size_t ch, std::size_t y, std::size_t x) const { return px[(ch * h + y) * w + x]; }
};

struct PatternParams {
    double period, phase_y, phase_x, cy, cx;
};

// soft two-level pattern value in [0,1]
inline double pattern_value(Pattern p, double y, double x, const PatternParams& q) {
    constexpr double tau = 2 * std::numbers::pi;
    const double k = tau / q.period;
    double s = 0;
    switch (p) {
        case Pattern::hstripes: s = std::sin(k * y + q.phase_y); break;
        case Pattern::vstripes: s = std::sin(k * x + q.phase_x); break;
        case Pattern::checker: s = 2 * std::sin(k * y + q.phase_y) * std::sin(k * x + q.phase_x); break;
        case Pattern::dots: s = std::cos(k * y + q.phase_y) + std::cos(k * x + q.phase_x) - 0.8; break;
        case Pattern::diagonal: s = std::sin(k * (x + y) / std::numbers::sqrt2 + q.phase_x); break;
        case Pattern::rings: s = std::sin(k * std::hypot(y - q.cy, x - q.cx) + q.phase_x); break;
        case Pattern::sectors: s = std::sin(std::round(q.period) * std::atan2(y - q.cy, x - q.cx) + q.phase_x); break;
    }
    return std::clamp(0.5 + 1.5 * s, 0.0, 1.0);
}

inline std::vector<double> random_color(Rng& rng, std::size_t c) {
    std::vector<double> col(c);
    for (auto& v : col) v = uniform01(rng);
    return col;
}

inline void smooth_background(const Canvas& cv, Rng& rng, const std::vector<double>& base, double amp) {
    const double ang = uniform01(rng) * 2 * std::numbers::pi;
    const double gy = std::sin(ang), gx = std::cos(ang);
    for (std::size_t y = 0; y < cv.h; ++y)
        for (std::size_t x = 0; x < cv.w; ++x) {
            const double t = ((static_cast<double>(y) / cv.h - 0.5) * gy + (static_cast<double>(x) / cv.w - 0.5) * gx);
            for (std::size_t ch = 0; ch < cv.c; ++ch) cv.at(ch, y, x) = static_cast<float>(base[ch] + amp * t);
        }
}

inline void add_noise_clamp(const Canvas& cv, Rng& rng, double sd) {
    const std::size_t n = cv.c * cv.h * cv.w;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = cv.px[i] + (sd > 0 ? normal(rng, 0.0, sd) : 0.0);
        cv.px[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

// Random colours with the same per-channel contrast for every image.
inline void render_pattern(const Canvas& cv, Rng& rng, Pattern p, double noise_lo, double noise_hi) {
    std::vector<double> bg(cv.c), fg(cv.c);
    for (std::size_t ch = 0; ch < cv.c; ++ch) {
        bg[ch] = 0.1 + 0.5 * uniform01(rng);
        fg[ch] = bg[ch] + kContrast;
        if (uniform01(rng) < 0.5) std::swap(bg[ch], fg[ch]);
    }
    const double side = static_cast<double>(std::min(cv.h, cv.w));
    PatternParams q{side * (0.19 + 0.19 * uniform01(rng)), 2 * std::numbers::pi * uniform01(rng),
                    2 * std::numbers::pi * uniform01(rng), side * (0.25 + 0.5 * uniform01(rng)),
                    side * (0.25 + 0.5 * uniform01(rng))};
    for (std::size_t y = 0; y < cv.h; ++y)
        for (std::size_t x = 0; x < cv.w; ++x) {
            const double t = pattern_value(p, static_cast<double>(y), static_cast<double>(x), q);
            for (std::size_t ch = 0; ch < cv.c; ++ch) cv.at(ch, y, x) = static_cast<float>(bg[ch] + t * (fg[ch] - bg[ch]));
        }
    add_noise_clamp(cv, rng, noise_lo + (noise_hi - noise_lo) * uniform01(rng));
}

inline void render_easy(const Canvas& cv, Rng& rng) {
    smooth_background(cv, rng, random_color(rng, cv.c), 0.3 * uniform01(rng));
    add_noise_clamp(cv, rng, 0.002 * uniform01(rng));
}

inline void render_hard(const Canvas& cv, Rng& rng) {
    const std::size_t g = 4, ph = cv.h / g, pw = cv.w / g;
    for (std::size_t py = 0; py < g; ++py)
        for (std::size_t qx = 0; qx < g; ++qx) {
            const auto a = random_color(rng, cv.c), b = random_color(rng, cv.c);
            const std::size_t kind = uniform_index(rng, 3);
            const std::size_t period = 1 + uniform_index(rng, 2);
            for (std::size_t y = py * ph; y < (py + 1) * ph; ++y)
                for (std::size_t x = qx * pw; x < (qx + 1) * pw; ++x)
                    for (std::size_t ch = 0; ch < cv.c; ++ch) {
                        double v;
                        if (kind == 0) {
                            v = uniform01(rng);
                        } else if (kind == 1) {
                            v = ((y / period + x / period) % 2) ? a[ch] : b[ch];
                        } else {
                            v = ((x / period) % 2) ? a[ch] : b[ch];
                        }
                        cv.at(ch, y, x) = static_cast<float>(v);
                    }
        }
    add_noise_clamp(cv, rng, 0.1 + 0.1 * uniform01(rng));
}

inline Rng split_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return Rng(seq);
}

template <typename F>
Tensor<float> render_batch(const ImageSpec& im, std::size_t n, F&& draw) {
    Tensor<float> out(im.batch_shape(n));
    for (std::size_t i = 0; i < n; ++i) draw(Canvas{im.channels, im.height, im.width, out.data() + i * im.pixels()}, i);
    return out;
}

inline Dataset id_split(const BenchmarkSpec& s, std::size_t n, Rng rng) {
    Dataset d;
    d.labels.resize(n);
    d.images = render_batch(s.image, n, [&](const Canvas& cv, std::size_t i) {
        d.labels[i] = i % s.classes;
        render_pattern(cv, rng, kIdPatterns[d.labels[i]], s.noise_lo, s.noise_hi);
    });
    return d;
}

}  // namespace bench

inline Benchmark generate_benchmark(std::uint64_t seed, const BenchmarkSpec& spec = {}) {
    spec.validate();
    using namespace bench;
    Benchmark b;
    b.train = id_split(spec, spec.n_train, split_rng(seed, 1));
    b.val = id_split(spec, spec.n_val, split_rng(seed, 2));
    b.test = id_split(spec, spec.n_test, split_rng(seed, 3));
    {
        Rng rng = split_rng(seed, 4);
        b.ood.push_back({"easy", render_batch(spec.image, spec.n_ood, [&](const Canvas& cv, std::size_t) {
                             render_easy(cv, rng);
                         })});
    }
    {
        Rng rng = split_rng(seed, 5);
        b.ood.push_back({"medium", render_batch(spec.image, spec.n_ood, [&](const Canvas& cv, std::size_t i) {
                             render_pattern(cv, rng, kHeldOutPatterns[i % kHeldOutPatterns.size()], spec.noise_lo,
                                            spec.noise_hi);
                         })});
    }
    {
        Rng rng = split_rng(seed, 6);
        b.ood.push_back({"hard", render_batch(spec.image, spec.n_ood, [&](const Canvas& cv, std::size_t) {
                             render_hard(cv, rng);
                         })});
    }
    return b;
}

}  // namespace readood
