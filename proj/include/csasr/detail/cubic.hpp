#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace csasr::detail {

/// Cubic-convolution kernel with a = -0.5 (Catmull-Rom).
inline double cubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::fabs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    return 0.0;
}

/// Separable cubic resampling of one planar channel, row-major H x W.
/// Coordinates map half-pixel-centered: src = (dst + 0.5) * in/out - 0.5,
/// with edge-clamped taps. Width first, then height; taps accumulate in
/// double regardless of the sample type.
template <typename T>
std::vector<T> cubic_resample_plane(const std::vector<T>& src, std::size_t in_h, std::size_t in_w, std::size_t out_h,
                                    std::size_t out_w) {
    auto clamp_idx = [](long i, std::size_t n) {
        if (i < 0) return std::size_t(0);
        if (i >= static_cast<long>(n)) return n - 1;
        return static_cast<std::size_t>(i);
    };

    struct Taps {
        long base;
        double w[4];
    };
    auto make_taps = [](std::size_t out_n, std::size_t in_n) {
        std::vector<Taps> taps(out_n);
        const double ratio = static_cast<double>(in_n) / static_cast<double>(out_n);
        for (std::size_t o = 0; o < out_n; ++o) {
            const double s = (static_cast<double>(o) + 0.5) * ratio - 0.5;
            const double fl = std::floor(s);
            const double t = s - fl;
            taps[o].base = static_cast<long>(fl) - 1;
            for (int k = 0; k < 4; ++k) taps[o].w[k] = cubic_weight(t - static_cast<double>(k - 1));
        }
        return taps;
    };

    const auto wtaps = make_taps(out_w, in_w);
    std::vector<double> tmp(in_h * out_w);
    for (std::size_t y = 0; y < in_h; ++y) {
        const T* row = src.data() + y * in_w;
        for (std::size_t x = 0; x < out_w; ++x) {
            const Taps& tp = wtaps[x];
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += tp.w[k] * static_cast<double>(row[clamp_idx(tp.base + k, in_w)]);
            tmp[y * out_w + x] = acc;
        }
    }

    const auto htaps = make_taps(out_h, in_h);
    std::vector<T> dst(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const Taps& tp = htaps[y];
        for (std::size_t x = 0; x < out_w; ++x) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += tp.w[k] * tmp[clamp_idx(tp.base + k, in_h) * out_w + x];
            dst[y * out_w + x] = static_cast<T>(acc);
        }
    }
    return dst;
}

}  // namespace csasr::detail
