#pragma once

// Independent straight-line reference computations used as oracles by the
// selftest command and the test suites. Everything here works on raw
// double vectors with naive loops and deliberately shares no code with
// the tensor operations it is used to check.

#include <cmath>
#include <cstddef>
#include <vector>

namespace csasr::reference {

using Vec = std::vector<double>;

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t p) {
    Vec c(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * p + j];
            c[i * p + j] = acc;
        }
    return c;
}

inline Vec conv2d_single(const Vec& x, std::size_t cin, std::size_t h, std::size_t w, const Vec& kernel,
                         std::size_t cout, std::size_t kh, std::size_t kw, const Vec& bias, int padding) {
    const std::size_t ho = h + 2 * padding - kh + 1, wo = w + 2 * padding - kw + 1;
    Vec out(cout * ho * wo, 0.0);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double acc = bias.empty() ? 0.0 : bias[co];
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const long iy = static_cast<long>(oy + ky) - padding;
                            const long ix = static_cast<long>(ox + kx) - padding;
                            if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 || ix >= static_cast<long>(w)) continue;
                            acc += x[(ci * h + iy) * w + ix] * kernel[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                out[(co * ho + oy) * wo + ox] = acc;
            }
    return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Gate per channel: sigmoid(FC2(relu(FC1(maxpool_c + avgpool_c)))) with
/// the 1 -> hidden -> 1 dense stack shared across channels. f is one
/// sample (C,H,W); returns C gate values.
inline Vec channel_attention(const Vec& f, std::size_t c, std::size_t h, std::size_t w, const Vec& w1, const Vec& b1,
                             std::size_t hidden, const Vec& w2, double b2) {
    Vec gate(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
        double mx = f[ci * h * w];
        double sum = 0.0;
        for (std::size_t i = 0; i < h * w; ++i) {
            mx = std::max(mx, f[ci * h * w + i]);
            sum += f[ci * h * w + i];
        }
        const double pooled = mx + sum / static_cast<double>(h * w);
        double logit = b2;
        for (std::size_t j = 0; j < hidden; ++j) {
            const double hj = pooled * w1[j] + b1[j];
            logit += (hj > 0.0 ? hj : 0.0) * w2[j];
        }
        gate[ci] = sigmoid(logit);
    }
    return gate;
}

/// Gate per pixel: sigmoid(conv_k(maxpool_c + avgpool_c)), zero padding
/// k/2. f is one sample (C,H,W); returns H*W gate values.
inline Vec spatial_attention(const Vec& f, std::size_t c, std::size_t h, std::size_t w, const Vec& kernel,
                             std::size_t k, double bias) {
    Vec summed(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        double mx = f[i];
        double sum = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) {
            mx = std::max(mx, f[ci * h * w + i]);
            sum += f[ci * h * w + i];
        }
        summed[i] = mx + sum / static_cast<double>(c);
    }
    const int pad = static_cast<int>(k) / 2;
    Vec gate(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = bias;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const long iy = static_cast<long>(y + ky) - pad;
                    const long ix = static_cast<long>(x + kx) - pad;
                    if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 || ix >= static_cast<long>(w)) continue;
                    acc += summed[iy * w + ix] * kernel[ky * k + kx];
                }
            gate[y * w + x] = sigmoid(acc);
        }
    return gate;
}

/// Spatial-gate feed-forward for one sample of T = gh*gw tokens of width
/// d: split gelu(x W1 + b1) in two, 3x3 depth-wise conv on the second
/// half over the token grid, elementwise product, project back by W2.
inline Vec sgfn(const Vec& x, std::size_t t, std::size_t d, std::size_t gh, std::size_t gw, const Vec& w1,
                const Vec& b1, std::size_t hidden, const Vec& dw, const Vec& dwb, const Vec& w2, const Vec& b2) {
    const std::size_t half = hidden / 2;
    Vec h(t * hidden);
    for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t j = 0; j < hidden; ++j) {
            double acc = b1[j];
            for (std::size_t dd = 0; dd < d; ++dd) acc += x[tt * d + dd] * w1[dd * hidden + j];
            h[tt * hidden + j] = gelu(acc);
        }
    // depth-wise 3x3 on the second half, tokens laid out row-major gh x gw
    Vec mixed(t * half);
    for (std::size_t ch = 0; ch < half; ++ch)
        for (std::size_t y = 0; y < gh; ++y)
            for (std::size_t x2 = 0; x2 < gw; ++x2) {
                double acc = dwb[ch];
                for (int ky = -1; ky <= 1; ++ky)
                    for (int kx = -1; kx <= 1; ++kx) {
                        const long iy = static_cast<long>(y) + ky, ix = static_cast<long>(x2) + kx;
                        if (iy < 0 || iy >= static_cast<long>(gh) || ix < 0 || ix >= static_cast<long>(gw)) continue;
                        acc += h[(iy * gw + ix) * hidden + half + ch] * dw[ch * 9 + (ky + 1) * 3 + (kx + 1)];
                    }
                mixed[(y * gw + x2) * half + ch] = acc;
            }
    Vec out(t * d);
    for (std::size_t tt = 0; tt < t; ++tt)
        for (std::size_t dd = 0; dd < d; ++dd) {
            double acc = b2[dd];
            for (std::size_t ch = 0; ch < half; ++ch)
                acc += h[tt * hidden + ch] * mixed[tt * half + ch] * w2[ch * d + dd];
            out[tt * d + dd] = acc;
        }
    return out;
}

/// Multi-head attention for one sample: q [tq,d], kv [tk,d]; weights are
/// [d,d] row-major input-major, biases [d].
inline Vec attention(const Vec& q_src, const Vec& kv_src, std::size_t tq, std::size_t tk, std::size_t d,
                     std::size_t heads, const Vec& wq, const Vec& bq, const Vec& wk, const Vec& bk, const Vec& wv,
                     const Vec& bv, const Vec& wo, const Vec& bo) {
    const std::size_t hd = d / heads;
    auto project = [&](const Vec& src, std::size_t rows, const Vec& w, const Vec& b) {
        Vec out(rows * d);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = b[j];
                for (std::size_t i = 0; i < d; ++i) acc += src[r * d + i] * w[i * d + j];
                out[r * d + j] = acc;
            }
        return out;
    };
    const Vec q = project(q_src, tq, wq, bq);
    const Vec k = project(kv_src, tk, wk, bk);
    const Vec v = project(kv_src, tk, wv, bv);
    Vec merged(tq * d);
    for (std::size_t hh = 0; hh < heads; ++hh) {
        for (std::size_t i = 0; i < tq; ++i) {
            Vec logits(tk);
            double mx = -1e300;
            for (std::size_t j = 0; j < tk; ++j) {
                double acc = 0.0;
                for (std::size_t e = 0; e < hd; ++e) acc += q[i * d + hh * hd + e] * k[j * d + hh * hd + e];
                logits[j] = acc / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, logits[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
                logits[j] = std::exp(logits[j] - mx);
                z += logits[j];
            }
            for (std::size_t e = 0; e < hd; ++e) {
                double acc = 0.0;
                for (std::size_t j = 0; j < tk; ++j) acc += logits[j] / z * v[j * d + hh * hd + e];
                merged[i * d + hh * hd + e] = acc;
            }
        }
    }
    return project(merged, tq, wo, bo);
}

/// Direct (non-separable) cubic-convolution resampling of one plane with
/// the a = -0.5 kernel and half-pixel mapping.
inline Vec bicubic(const Vec& src, std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
    auto kern = [](double x) {
        constexpr double a = -0.5;
        x = std::fabs(x);
        if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
        if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
        return 0.0;
    };
    auto clampi = [](long v, long n) { return v < 0 ? 0L : (v >= n ? n - 1 : v); };
    Vec out(out_h * out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double sy = (oy + 0.5) * static_cast<double>(in_h) / out_h - 0.5;
            const double sx = (ox + 0.5) * static_cast<double>(in_w) / out_w - 0.5;
            const long by = static_cast<long>(std::floor(sy)), bx = static_cast<long>(std::floor(sx));
            double acc = 0.0;
            for (long ky = -1; ky <= 2; ++ky)
                for (long kx = -1; kx <= 2; ++kx) {
                    const double wgt = kern(sy - (by + ky)) * kern(sx - (bx + kx));
                    acc += wgt * src[clampi(by + ky, in_h) * in_w + clampi(bx + kx, in_w)];
                }
            out[oy * out_w + ox] = acc;
        }
    return out;
}

/// Scalar Adam trace: returns the parameter value after each of the
/// given gradient steps.
inline Vec adam_trace(double p0, const Vec& grads, double lr, double b1, double b2, double eps) {
    Vec trace;
    double p = p0, m = 0.0, v = 0.0;
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
        const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
        p -= lr * mhat / (std::sqrt(vhat) + eps);
        trace.push_back(p);
    }
    return trace;
}

}  // namespace csasr::reference
