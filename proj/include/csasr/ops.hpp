#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include "csasr/tensor.hpp"

namespace csasr {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const char* op, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
}

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape) {
    check_same_shape("add", a, b);
    auto out = zeros<T>(a->shape);
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (detail::track_binary(tape, a, b, out)) {
        tape->record("add", out.get(), [a, b, out] {
            const std::size_t n = out->numel();
            if (a->requires_grad)
                for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape) {
    check_same_shape("sub", a, b);
    auto out = zeros<T>(a->shape);
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (detail::track_binary(tape, a, b, out)) {
        tape->record("sub", out.get(), [a, b, out] {
            const std::size_t n = out->numel();
            if (a->requires_grad)
                for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < n; ++i) b->grad[i] -= out->grad[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape) {
    check_same_shape("mul", a, b);
    auto out = zeros<T>(a->shape);
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (detail::track_binary(tape, a, b, out)) {
        tape->record("mul", out.get(), [a, b, out] {
            const std::size_t n = out->numel();
            if (a->requires_grad)
                for (std::size_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->data[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->data[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& x, T factor, Tape<T>* tape) {
    auto out = zeros<T>(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) out->data[i] = x->data[i] * factor;
    if (detail::track_unary(tape, x, out)) {
        tape->record("scale", out.get(), [x, out, factor] {
            for (std::size_t i = 0; i < out->numel(); ++i) x->grad[i] += out->grad[i] * factor;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { Relu, Gelu, Sigmoid };

namespace detail {

template <typename T>
inline T gelu_fwd(T x) {
    // Exact Gaussian-CDF form: 0.5 * x * (1 + erf(x / sqrt(2))).
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475244)));
}

template <typename T>
inline T gelu_bwd(T x) {
    const T phi_big = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244)));
    const T phi_small = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
    return phi_big + x * phi_small;
}

template <typename T>
inline T sigmoid_fwd(T x) {
    // Branch on sign to avoid exp overflow.
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
TensorPtr<T> apply_activation(const TensorPtr<T>& x, Act kind, Tape<T>* tape) {
    auto out = zeros<T>(x->shape);
    const std::size_t n = x->numel();
    switch (kind) {
        case Act::Relu:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = x->data[i] > T(0) ? x->data[i] : T(0);
            break;
        case Act::Gelu:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = detail::gelu_fwd(x->data[i]);
            break;
        case Act::Sigmoid:
            for (std::size_t i = 0; i < n; ++i) out->data[i] = detail::sigmoid_fwd(x->data[i]);
            break;
    }
    if (detail::track_unary(tape, x, out)) {
        tape->record("activation", out.get(), [x, out, kind] {
            const std::size_t m = out->numel();
            switch (kind) {
                case Act::Relu:
                    for (std::size_t i = 0; i < m; ++i)
                        if (x->data[i] > T(0)) x->grad[i] += out->grad[i];
                    break;
                case Act::Gelu:
                    for (std::size_t i = 0; i < m; ++i) x->grad[i] += out->grad[i] * detail::gelu_bwd(x->data[i]);
                    break;
                case Act::Sigmoid:
                    for (std::size_t i = 0; i < m; ++i) {
                        const T s = out->data[i];
                        x->grad[i] += out->grad[i] * s * (T(1) - s);
                    }
                    break;
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& x, Tape<T>* tape) {
    return apply_activation(x, Act::Relu, tape);
}
template <typename T>
TensorPtr<T> gelu(const TensorPtr<T>& x, Tape<T>* tape) {
    return apply_activation(x, Act::Gelu, tape);
}
template <typename T>
TensorPtr<T> sigmoid(const TensorPtr<T>& x, Tape<T>* tape) {
    return apply_activation(x, Act::Sigmoid, tape);
}

// ---------------------------------------------------------------------------
// Matrix multiplication (optionally batched)
// ---------------------------------------------------------------------------

namespace detail {

// C[m,p] += A[m,k] * B[k,p] over contiguous row-major blocks.
template <typename T>
void mm_accum(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t P) {
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            const T aik = a[i * K + k];
            const T* brow = b + k * P;
            T* crow = c + i * P;
            for (std::size_t j = 0; j < P; ++j) crow[j] += aik * brow[j];
        }
    }
}

// C[m,p] += A[m,k] * B[p,k]^T
template <typename T>
void mm_accum_bt(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t P) {
    for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < P; ++j) {
            T acc = 0;
            const T* arow = a + i * K;
            const T* brow = b + j * K;
            for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            c[i * P + j] += acc;
        }
    }
}

// C[k,p] += A[m,k]^T * B[m,p]
template <typename T>
void mm_accum_at(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t P) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * P;
        for (std::size_t k = 0; k < K; ++k) {
            const T aik = arow[k];
            T* crow = c + k * P;
            for (std::size_t j = 0; j < P; ++j) crow[j] += aik * brow[j];
        }
    }
}

}  // namespace detail

/// Batched matrix product. Both operands must be at least rank 2; the
/// leading (batch) extents must match exactly, or be absent on one side,
/// in which case that operand is shared across the batch.
template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape) {
    if (a->rank() < 2 || b->rank() < 2) {
        throw ShapeError("matmul: operands must be at least rank 2, got " + shape_str(a->shape) + " and " +
                         shape_str(b->shape));
    }
    const std::size_t M = a->shape[a->rank() - 2];
    const std::size_t K = a->shape[a->rank() - 1];
    const std::size_t Kb = b->shape[b->rank() - 2];
    const std::size_t P = b->shape[b->rank() - 1];
    if (K != Kb) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a->shape) + " x " + shape_str(b->shape));
    }
    Shape abatch(a->shape.begin(), a->shape.end() - 2);
    Shape bbatch(b->shape.begin(), b->shape.end() - 2);
    if (!abatch.empty() && !bbatch.empty() && abatch != bbatch) {
        throw ShapeError("matmul: batch extents disagree, " + shape_str(a->shape) + " x " + shape_str(b->shape));
    }
    const Shape batch = abatch.empty() ? bbatch : abatch;
    const std::size_t nbatch = shape_numel(batch);
    const bool a_shared = abatch.empty() && !batch.empty();
    const bool b_shared = bbatch.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(P);
    auto out = zeros<T>(out_shape);

    for (std::size_t n = 0; n < nbatch; ++n) {
        const T* pa = a->data.data() + (a_shared ? 0 : n * M * K);
        const T* pb = b->data.data() + (b_shared ? 0 : n * K * P);
        detail::mm_accum(pa, pb, out->data.data() + n * M * P, M, K, P);
    }

    if (detail::track_binary(tape, a, b, out)) {
        tape->record("matmul", out.get(), [a, b, out, M, K, P, nbatch, a_shared, b_shared] {
            for (std::size_t n = 0; n < nbatch; ++n) {
                const T* go = out->grad.data() + n * M * P;
                if (a->requires_grad) {
                    // dA = dC * B^T
                    const T* pb = b->data.data() + (b_shared ? 0 : n * K * P);
                    T* ga = a->grad.data() + (a_shared ? 0 : n * M * K);
                    detail::mm_accum_bt(go, pb, ga, M, P, K);
                }
                if (b->requires_grad) {
                    // dB = A^T * dC
                    const T* pa = a->data.data() + (a_shared ? 0 : n * M * K);
                    T* gb = b->grad.data() + (b_shared ? 0 : n * K * P);
                    detail::mm_accum_at(pa, go, gb, M, K, P);
                }
            }
        });
    }
    return out;
}

/// Adds a length-D bias to the last axis of x.
template <typename T>
TensorPtr<T> add_bias_last(const TensorPtr<T>& x, const TensorPtr<T>& bias, Tape<T>* tape) {
    const std::size_t D = x->shape.back();
    if (bias->rank() != 1 || bias->shape[0] != D) {
        throw ShapeError("add_bias_last: bias " + shape_str(bias->shape) + " does not match last axis of " +
                         shape_str(x->shape));
    }
    auto out = zeros<T>(x->shape);
    const std::size_t rows = x->numel() / D;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) out->data[r * D + d] = x->data[r * D + d] + bias->data[d];
    if (detail::track_binary(tape, x, bias, out)) {
        tape->record("add_bias_last", out.get(), [x, bias, out, rows, D] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < out->numel(); ++i) x->grad[i] += out->grad[i];
            if (bias->requires_grad)
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t d = 0; d < D; ++d) bias->grad[d] += out->grad[r * D + d];
        });
    }
    return out;
}

/// x @ w (+ bias). x: [..., K], w: [K, P], bias: [P] or null.
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias, Tape<T>* tape) {
    auto y = matmul(x, w, tape);
    if (bias) y = add_bias_last(y, bias, tape);
    return y;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, stride 1, zero padding)
// ---------------------------------------------------------------------------

/// x: [N,Cin,H,W], w: [Cout,Cin/groups,kh,kw], bias: [Cout] or null.
/// Output H' = H + 2*padding - kh + 1 (same for W).
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias, int padding, int groups,
                    Tape<T>* tape) {
    if (x->rank() != 4 || w->rank() != 4) {
        throw ShapeError("conv2d: expected 4-axis input and kernel, got " + shape_str(x->shape) + " and " +
                         shape_str(w->shape));
    }
    const std::size_t N = x->shape[0], Cin = x->shape[1], H = x->shape[2], W = x->shape[3];
    const std::size_t Cout = w->shape[0], Cg = w->shape[1], kh = w->shape[2], kw = w->shape[3];
    if (groups < 1 || Cin % groups != 0 || Cout % groups != 0) {
        throw ShapeError("conv2d: groups=" + std::to_string(groups) + " must divide Cin=" + std::to_string(Cin) +
                         " and Cout=" + std::to_string(Cout));
    }
    if (Cg != Cin / static_cast<std::size_t>(groups)) {
        throw ShapeError("conv2d: kernel " + shape_str(w->shape) + " does not match input " + shape_str(x->shape) +
                         " with groups=" + std::to_string(groups));
    }
    if (kh % 2 == 0 || kw % 2 == 0) {
        throw ShapeError("conv2d: even kernel extents not supported, got " + shape_str(w->shape));
    }
    if (bias && (bias->rank() != 1 || bias->shape[0] != Cout)) {
        throw ShapeError("conv2d: bias " + shape_str(bias->shape) + " does not match Cout=" + std::to_string(Cout));
    }
    const long Ho = static_cast<long>(H) + 2 * padding - static_cast<long>(kh) + 1;
    const long Wo = static_cast<long>(W) + 2 * padding - static_cast<long>(kw) + 1;
    if (Ho < 1 || Wo < 1) {
        throw ShapeError("conv2d: output would be empty for input " + shape_str(x->shape) + " and kernel " +
                         shape_str(w->shape) + " with padding " + std::to_string(padding));
    }
    const std::size_t HO = static_cast<std::size_t>(Ho), WO = static_cast<std::size_t>(Wo);
    const std::size_t cout_g = Cout / static_cast<std::size_t>(groups);

    auto out = zeros<T>({N, Cout, HO, WO});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) {
            const std::size_t g = co / cout_g;
            const T b = bias ? bias->data[co] : T(0);
            for (std::size_t oy = 0; oy < HO; ++oy) {
                for (std::size_t ox = 0; ox < WO; ++ox) {
                    T acc = b;
                    for (std::size_t ci = 0; ci < Cg; ++ci) {
                        const std::size_t cin = g * Cg + ci;
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const long iy = static_cast<long>(oy) + static_cast<long>(ky) - padding;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const long ix = static_cast<long>(ox) + static_cast<long>(kx) - padding;
                                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                acc += x->data[((n * Cin + cin) * H + iy) * W + ix] *
                                       w->data[((co * Cg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out->data[((n * Cout + co) * HO + oy) * WO + ox] = acc;
                }
            }
        }
    }

    bool rec = tape && (x->requires_grad || w->requires_grad || (bias && bias->requires_grad));
    if (rec) {
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (bias && bias->requires_grad) bias->ensure_grad();
        out->requires_grad = true;
        out->ensure_grad();
        tape->record("conv2d", out.get(), [x, w, bias, out, N, Cin, H, W, Cout, Cg, kh, kw, HO, WO, cout_g, padding] {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t co = 0; co < Cout; ++co) {
                    const std::size_t g = co / cout_g;
                    for (std::size_t oy = 0; oy < HO; ++oy) {
                        for (std::size_t ox = 0; ox < WO; ++ox) {
                            const T go = out->grad[((n * Cout + co) * HO + oy) * WO + ox];
                            if (go == T(0)) continue;
                            if (bias && bias->requires_grad) bias->grad[co] += go;
                            for (std::size_t ci = 0; ci < Cg; ++ci) {
                                const std::size_t cin = g * Cg + ci;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const long iy = static_cast<long>(oy) + static_cast<long>(ky) - padding;
                                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const long ix = static_cast<long>(ox) + static_cast<long>(kx) - padding;
                                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                        const std::size_t xi = ((n * Cin + cin) * H + iy) * W + ix;
                                        const std::size_t wi = ((co * Cg + ci) * kh + ky) * kw + kx;
                                        if (x->requires_grad) x->grad[xi] += go * w->data[wi];
                                        if (w->requires_grad) w->grad[wi] += go * x->data[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

/// Per-vector normalization over the last axis, then affine by gamma/beta.
template <typename T>
TensorPtr<T> layer_norm(const TensorPtr<T>& x, const TensorPtr<T>& gamma, const TensorPtr<T>& beta, T eps,
                        Tape<T>* tape) {
    const std::size_t D = x->shape.back();
    if (gamma->rank() != 1 || gamma->shape[0] != D || beta->rank() != 1 || beta->shape[0] != D) {
        throw ShapeError("layer_norm: gamma " + shape_str(gamma->shape) + " / beta " + shape_str(beta->shape) +
                         " do not match last axis of " + shape_str(x->shape));
    }
    const std::size_t rows = x->numel() / D;
    auto out = zeros<T>(x->shape);
    // Saved for backward: normalized values and the inverse stddev per row.
    auto xhat = std::make_shared<std::vector<T>>(x->numel());
    auto inv = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x->data.data() + r * D;
        T mean = 0;
        for (std::size_t d = 0; d < D; ++d) mean += px[d];
        mean /= static_cast<T>(D);
        T var = 0;
        for (std::size_t d = 0; d < D; ++d) {
            const T c = px[d] - mean;
            var += c * c;
        }
        var /= static_cast<T>(D);
        const T istd = T(1) / std::sqrt(var + eps);
        (*inv)[r] = istd;
        for (std::size_t d = 0; d < D; ++d) {
            const T h = (px[d] - mean) * istd;
            (*xhat)[r * D + d] = h;
            out->data[r * D + d] = h * gamma->data[d] + beta->data[d];
        }
    }
    bool rec = tape && (x->requires_grad || gamma->requires_grad || beta->requires_grad);
    if (rec) {
        if (x->requires_grad) x->ensure_grad();
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        out->requires_grad = true;
        out->ensure_grad();
        tape->record("layer_norm", out.get(), [x, gamma, beta, out, xhat, inv, rows, D] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* go = out->grad.data() + r * D;
                const T* h = xhat->data() + r * D;
                if (gamma->requires_grad)
                    for (std::size_t d = 0; d < D; ++d) gamma->grad[d] += go[d] * h[d];
                if (beta->requires_grad)
                    for (std::size_t d = 0; d < D; ++d) beta->grad[d] += go[d];
                if (x->requires_grad) {
                    // dL/dx = inv * (dh - mean(dh) - xhat * mean(dh .* xhat))
                    T sum_dh = 0, sum_dh_h = 0;
                    for (std::size_t d = 0; d < D; ++d) {
                        const T dh = go[d] * gamma->data[d];
                        sum_dh += dh;
                        sum_dh_h += dh * h[d];
                    }
                    const T m1 = sum_dh / static_cast<T>(D);
                    const T m2 = sum_dh_h / static_cast<T>(D);
                    for (std::size_t d = 0; d < D; ++d) {
                        const T dh = go[d] * gamma->data[d];
                        x->grad[r * D + d] += (*inv)[r] * (dh - m1 - h[d] * m2);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> softmax_last_axis(const TensorPtr<T>& x, Tape<T>* tape) {
    const std::size_t D = x->shape.back();
    const std::size_t rows = x->numel() / D;
    auto out = zeros<T>(x->shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* px = x->data.data() + r * D;
        T* po = out->data.data() + r * D;
        T mx = px[0];
        for (std::size_t d = 1; d < D; ++d) mx = std::max(mx, px[d]);
        T sum = 0;
        for (std::size_t d = 0; d < D; ++d) {
            po[d] = std::exp(px[d] - mx);
            sum += po[d];
        }
        for (std::size_t d = 0; d < D; ++d) po[d] /= sum;
    }
    if (detail::track_unary(tape, x, out)) {
        tape->record("softmax", out.get(), [x, out, rows, D] {
            for (std::size_t r = 0; r < rows; ++r) {
                const T* s = out->data.data() + r * D;
                const T* go = out->grad.data() + r * D;
                T dot = 0;
                for (std::size_t d = 0; d < D; ++d) dot += go[d] * s[d];
                for (std::size_t d = 0; d < D; ++d) x->grad[r * D + d] += s[d] * (go[d] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolMode { ChannelMax, ChannelAvg, SpatialMax, SpatialAvg };

/// channel_*: [N,C,H,W] -> [N,C,1,1], global reduction over H,W.
/// spatial_*: [N,C,H,W] -> [N,1,H,W], reduction across channels.
/// Max gradients route to the argmax element; ties break to the lowest
/// flat index.
template <typename T>
TensorPtr<T> pool(const TensorPtr<T>& x, PoolMode mode, Tape<T>* tape) {
    if (x->rank() != 4) {
        throw ShapeError("pool: expected 4-axis input, got " + shape_str(x->shape));
    }
    const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const std::size_t hw = H * W;
    const bool channel = (mode == PoolMode::ChannelMax || mode == PoolMode::ChannelAvg);
    const bool is_max = (mode == PoolMode::ChannelMax || mode == PoolMode::SpatialMax);
    auto out = channel ? zeros<T>({N, C, 1, 1}) : zeros<T>({N, 1, H, W});
    auto argmax = is_max ? std::make_shared<std::vector<std::size_t>>(out->numel()) : nullptr;

    if (channel) {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                const T* p = x->data.data() + (n * C + c) * hw;
                if (is_max) {
                    std::size_t best = 0;
                    for (std::size_t i = 1; i < hw; ++i)
                        if (p[i] > p[best]) best = i;
                    out->data[n * C + c] = p[best];
                    (*argmax)[n * C + c] = (n * C + c) * hw + best;
                } else {
                    T acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
                    out->data[n * C + c] = acc / static_cast<T>(hw);
                }
            }
        }
    } else {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t i = 0; i < hw; ++i) {
                if (is_max) {
                    std::size_t best_c = 0;
                    T best = x->data[(n * C + 0) * hw + i];
                    for (std::size_t c = 1; c < C; ++c) {
                        const T v = x->data[(n * C + c) * hw + i];
                        if (v > best) {
                            best = v;
                            best_c = c;
                        }
                    }
                    out->data[n * hw + i] = best;
                    (*argmax)[n * hw + i] = (n * C + best_c) * hw + i;
                } else {
                    T acc = 0;
                    for (std::size_t c = 0; c < C; ++c) acc += x->data[(n * C + c) * hw + i];
                    out->data[n * hw + i] = acc / static_cast<T>(C);
                }
            }
        }
    }
    if (detail::track_unary(tape, x, out)) {
        tape->record("pool", out.get(), [x, out, argmax, mode, N, C, hw] {
            switch (mode) {
                case PoolMode::ChannelMax:
                case PoolMode::SpatialMax:
                    for (std::size_t i = 0; i < out->numel(); ++i) x->grad[(*argmax)[i]] += out->grad[i];
                    break;
                case PoolMode::ChannelAvg:
                    for (std::size_t nc = 0; nc < N * C; ++nc) {
                        const T g = out->grad[nc] / static_cast<T>(hw);
                        for (std::size_t i = 0; i < hw; ++i) x->grad[nc * hw + i] += g;
                    }
                    break;
                case PoolMode::SpatialAvg:
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < hw; ++i) {
                            const T g = out->grad[n * hw + i] / static_cast<T>(C);
                            for (std::size_t c = 0; c < C; ++c) x->grad[(n * C + c) * hw + i] += g;
                        }
                    break;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel shuffle (subpixel rearrangement)
// ---------------------------------------------------------------------------

/// out[n,c,h*r+i,w*r+j] = in[n, c*r*r + i*r + j, h, w]
template <typename T>
TensorPtr<T> pixel_shuffle(const TensorPtr<T>& x, int r, Tape<T>* tape) {
    if (x->rank() != 4) throw ShapeError("pixel_shuffle: expected 4-axis input, got " + shape_str(x->shape));
    const std::size_t rr = static_cast<std::size_t>(r) * static_cast<std::size_t>(r);
    const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (r < 1 || C % rr != 0) {
        throw ShapeError("pixel_shuffle: channel count " + std::to_string(C) + " not divisible by r^2=" +
                         std::to_string(rr));
    }
    const std::size_t Co = C / rr, Ho = H * r, Wo = W * r;
    auto out = zeros<T>({N, Co, Ho, Wo});
    const std::size_t R = static_cast<std::size_t>(r);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < Co; ++c)
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < R; ++j) {
                    const std::size_t cin = c * rr + i * R + j;
                    for (std::size_t h = 0; h < H; ++h)
                        for (std::size_t w = 0; w < W; ++w)
                            out->data[((n * Co + c) * Ho + h * R + i) * Wo + w * R + j] =
                                x->data[((n * C + cin) * H + h) * W + w];
                }
    if (detail::track_unary(tape, x, out)) {
        tape->record("pixel_shuffle", out.get(), [x, out, N, C, Co, H, W, Ho, Wo, R, rr] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < Co; ++c)
                    for (std::size_t i = 0; i < R; ++i)
                        for (std::size_t j = 0; j < R; ++j) {
                            const std::size_t cin = c * rr + i * R + j;
                            for (std::size_t h = 0; h < H; ++h)
                                for (std::size_t w = 0; w < W; ++w)
                                    x->grad[((n * C + cin) * H + h) * W + w] +=
                                        out->grad[((n * Co + c) * Ho + h * R + i) * Wo + w * R + j];
                        }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> pixel_unshuffle(const TensorPtr<T>& x, int r, Tape<T>* tape) {
    if (x->rank() != 4) throw ShapeError("pixel_unshuffle: expected 4-axis input, got " + shape_str(x->shape));
    const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const std::size_t R = static_cast<std::size_t>(r);
    if (r < 1 || H % R != 0 || W % R != 0) {
        throw ShapeError("pixel_unshuffle: spatial extents of " + shape_str(x->shape) + " not divisible by r=" +
                         std::to_string(r));
    }
    const std::size_t Ho = H / R, Wo = W / R, Co = C * R * R;
    auto out = zeros<T>({N, Co, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < R; ++j) {
                    const std::size_t cout = c * R * R + i * R + j;
                    for (std::size_t h = 0; h < Ho; ++h)
                        for (std::size_t w = 0; w < Wo; ++w)
                            out->data[((n * Co + cout) * Ho + h) * Wo + w] =
                                x->data[((n * C + c) * H + h * R + i) * W + w * R + j];
                }
    if (detail::track_unary(tape, x, out)) {
        tape->record("pixel_unshuffle", out.get(), [x, out, N, C, Co, H, W, Ho, Wo, R] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < R; ++i)
                        for (std::size_t j = 0; j < R; ++j) {
                            const std::size_t cout = c * R * R + i * R + j;
                            for (std::size_t h = 0; h < Ho; ++h)
                                for (std::size_t w = 0; w < Wo; ++w)
                                    x->grad[((n * C + c) * H + h * R + i) * W + w * R + j] +=
                                        out->grad[((n * Co + cout) * Ho + h) * Wo + w];
                        }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, Shape new_shape, Tape<T>* tape) {
    if (shape_numel(new_shape) != x->numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x->shape) + " as " + shape_str(new_shape));
    }
    auto out = tensor_from<T>(std::move(new_shape), x->data);
    if (detail::track_unary(tape, x, out)) {
        tape->record("reshape", out.get(), [x, out] {
            for (std::size_t i = 0; i < out->numel(); ++i) x->grad[i] += out->grad[i];
        });
    }
    return out;
}

/// General axis permutation: out axis i is input axis `axes[i]`.
template <typename T>
TensorPtr<T> permute(const TensorPtr<T>& x, const std::vector<std::size_t>& axes, Tape<T>* tape) {
    const std::size_t k = x->rank();
    if (axes.size() != k) throw ShapeError("permute: axes count does not match rank of " + shape_str(x->shape));
    std::vector<bool> seen(k, false);
    Shape out_shape(k);
    for (std::size_t i = 0; i < k; ++i) {
        if (axes[i] >= k || seen[axes[i]]) throw ShapeError("permute: invalid axes");
        seen[axes[i]] = true;
        out_shape[i] = x->shape[axes[i]];
    }
    const Shape in_str = shape_strides(x->shape);
    const Shape out_str = shape_strides(out_shape);
    auto out = zeros<T>(out_shape);
    const std::size_t n = x->numel();
    // Precompute for each output axis the matching input stride.
    std::vector<std::size_t> src_stride(k);
    for (std::size_t i = 0; i < k; ++i) src_stride[i] = in_str[axes[i]];
    // Captured by value: the tape closure outlives this frame.
    auto map_index = [out_str, src_stride, k](std::size_t oi) {
        std::size_t rem = oi, si = 0;
        for (std::size_t a = 0; a < k; ++a) {
            const std::size_t q = rem / out_str[a];
            rem -= q * out_str[a];
            si += q * src_stride[a];
        }
        return si;
    };
    for (std::size_t oi = 0; oi < n; ++oi) out->data[oi] = x->data[map_index(oi)];
    if (detail::track_unary(tape, x, out)) {
        tape->record("permute", out.get(), [x, out, map_index, n] {
            for (std::size_t oi = 0; oi < n; ++oi) x->grad[map_index(oi)] += out->grad[oi];
        });
    }
    return out;
}

/// Slice [from, to) of the last axis.
template <typename T>
TensorPtr<T> slice_last(const TensorPtr<T>& x, std::size_t from, std::size_t to, Tape<T>* tape) {
    const std::size_t D = x->shape.back();
    if (from >= to || to > D) {
        throw ShapeError("slice_last: [" + std::to_string(from) + "," + std::to_string(to) + ") out of range for " +
                         shape_str(x->shape));
    }
    Shape out_shape = x->shape;
    out_shape.back() = to - from;
    const std::size_t rows = x->numel() / D;
    const std::size_t Do = to - from;
    auto out = zeros<T>(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < Do; ++d) out->data[r * Do + d] = x->data[r * D + from + d];
    if (detail::track_unary(tape, x, out)) {
        tape->record("slice_last", out.get(), [x, out, rows, D, Do, from] {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t d = 0; d < Do; ++d) x->grad[r * D + from + d] += out->grad[r * Do + d];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch partition / reassembly
// ---------------------------------------------------------------------------

/// Partitions [N,C,H,W] into non-overlapping ph-x-pw patches and flattens
/// each one to length ph*pw*C with channels varying slowest, then rows,
/// then columns. Tokens are ordered row-major over the patch grid.
template <typename T>
TensorPtr<T> extract_patches(const TensorPtr<T>& x, std::size_t ph, std::size_t pw, Tape<T>* tape) {
    if (x->rank() != 4) throw ShapeError("extract_patches: expected 4-axis input, got " + shape_str(x->shape));
    const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (ph == 0 || pw == 0 || H % ph != 0 || W % pw != 0) {
        throw ShapeError("extract_patches: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                         " not divisible by patch " + std::to_string(ph) + "x" + std::to_string(pw));
    }
    const std::size_t GH = H / ph, GW = W / pw, TT = GH * GW, L = ph * pw * C;
    auto out = zeros<T>({N, TT, L});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t gy = 0; gy < GH; ++gy)
            for (std::size_t gx = 0; gx < GW; ++gx) {
                const std::size_t t = gy * GW + gx;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t py = 0; py < ph; ++py)
                        for (std::size_t px = 0; px < pw; ++px)
                            out->data[(n * TT + t) * L + (c * ph + py) * pw + px] =
                                x->data[((n * C + c) * H + gy * ph + py) * W + gx * pw + px];
            }
    if (detail::track_unary(tape, x, out)) {
        tape->record("extract_patches", out.get(), [x, out, N, C, H, W, GH, GW, TT, L, ph, pw] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t gy = 0; gy < GH; ++gy)
                    for (std::size_t gx = 0; gx < GW; ++gx) {
                        const std::size_t t = gy * GW + gx;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t py = 0; py < ph; ++py)
                                for (std::size_t px = 0; px < pw; ++px)
                                    x->grad[((n * C + c) * H + gy * ph + py) * W + gx * pw + px] +=
                                        out->grad[(n * TT + t) * L + (c * ph + py) * pw + px];
                    }
        });
    }
    return out;
}

/// Inverse of extract_patches: [N,T,ph*pw*C] -> [N,C,H,W].
template <typename T>
TensorPtr<T> place_patches(const TensorPtr<T>& t, std::size_t C, std::size_t H, std::size_t W, std::size_t ph,
                           std::size_t pw, Tape<T>* tape) {
    if (t->rank() != 3) throw ShapeError("place_patches: expected 3-axis tokens, got " + shape_str(t->shape));
    const std::size_t N = t->shape[0], TT = t->shape[1], L = t->shape[2];
    const std::size_t GH = H / ph, GW = W / pw;
    if (H % ph != 0 || W % pw != 0 || TT != GH * GW || L != ph * pw * C) {
        throw ShapeError("place_patches: tokens " + shape_str(t->shape) + " do not tile (" + std::to_string(C) + "," +
                         std::to_string(H) + "," + std::to_string(W) + ") with patch " + std::to_string(ph) + "x" +
                         std::to_string(pw));
    }
    auto out = zeros<T>({N, C, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t gy = 0; gy < GH; ++gy)
            for (std::size_t gx = 0; gx < GW; ++gx) {
                const std::size_t tok = gy * GW + gx;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t py = 0; py < ph; ++py)
                        for (std::size_t px = 0; px < pw; ++px)
                            out->data[((n * C + c) * H + gy * ph + py) * W + gx * pw + px] =
                                t->data[(n * TT + tok) * L + (c * ph + py) * pw + px];
            }
    if (detail::track_unary(tape, t, out)) {
        tape->record("place_patches", out.get(), [t, out, N, C, H, W, GH, GW, TT, L, ph, pw] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t gy = 0; gy < GH; ++gy)
                    for (std::size_t gx = 0; gx < GW; ++gx) {
                        const std::size_t tok = gy * GW + gx;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t py = 0; py < ph; ++py)
                                for (std::size_t px = 0; px < pw; ++px)
                                    t->grad[(n * TT + tok) * L + (c * ph + py) * pw + px] +=
                                        out->grad[((n * C + c) * H + gy * ph + py) * W + gx * pw + px];
                    }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Broadcast gates (the only two broadcast patterns the model needs)
// ---------------------------------------------------------------------------

/// x[N,C,H,W] * g[N,C,1,1], gate broadcast over H,W.
template <typename T>
TensorPtr<T> mul_gate_channel(const TensorPtr<T>& x, const TensorPtr<T>& g, Tape<T>* tape) {
    if (x->rank() != 4 || g->rank() != 4 || g->shape[0] != x->shape[0] || g->shape[1] != x->shape[1] ||
        g->shape[2] != 1 || g->shape[3] != 1) {
        throw ShapeError("mul_gate_channel: gate " + shape_str(g->shape) + " does not match input " +
                         shape_str(x->shape));
    }
    const std::size_t N = x->shape[0], C = x->shape[1], hw = x->shape[2] * x->shape[3];
    auto out = zeros<T>(x->shape);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T gv = g->data[nc];
        for (std::size_t i = 0; i < hw; ++i) out->data[nc * hw + i] = x->data[nc * hw + i] * gv;
    }
    if (detail::track_binary(tape, x, g, out)) {
        tape->record("mul_gate_channel", out.get(), [x, g, out, N, C, hw] {
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                if (x->requires_grad) {
                    const T gv = g->data[nc];
                    for (std::size_t i = 0; i < hw; ++i) x->grad[nc * hw + i] += out->grad[nc * hw + i] * gv;
                }
                if (g->requires_grad) {
                    T acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += out->grad[nc * hw + i] * x->data[nc * hw + i];
                    g->grad[nc] += acc;
                }
            }
        });
    }
    return out;
}

/// x[N,C,H,W] * g[N,1,H,W], gate broadcast over channels.
template <typename T>
TensorPtr<T> mul_gate_spatial(const TensorPtr<T>& x, const TensorPtr<T>& g, Tape<T>* tape) {
    if (x->rank() != 4 || g->rank() != 4 || g->shape[0] != x->shape[0] || g->shape[1] != 1 ||
        g->shape[2] != x->shape[2] || g->shape[3] != x->shape[3]) {
        throw ShapeError("mul_gate_spatial: gate " + shape_str(g->shape) + " does not match input " +
                         shape_str(x->shape));
    }
    const std::size_t N = x->shape[0], C = x->shape[1], hw = x->shape[2] * x->shape[3];
    auto out = zeros<T>(x->shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < hw; ++i)
                out->data[(n * C + c) * hw + i] = x->data[(n * C + c) * hw + i] * g->data[n * hw + i];
    if (detail::track_binary(tape, x, g, out)) {
        tape->record("mul_gate_spatial", out.get(), [x, g, out, N, C, hw] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < hw; ++i) {
                        const std::size_t xi = (n * C + c) * hw + i;
                        if (x->requires_grad) x->grad[xi] += out->grad[xi] * g->data[n * hw + i];
                        if (g->requires_grad) g->grad[n * hw + i] += out->grad[xi] * x->data[xi];
                    }
        });
    }
    return out;
}

/// x[N,T,D] + pos[T,D], positional table broadcast over the batch.
template <typename T>
TensorPtr<T> add_positional(const TensorPtr<T>& x, const TensorPtr<T>& pos, Tape<T>* tape) {
    if (x->rank() != 3 || pos->rank() != 2 || pos->shape[0] != x->shape[1] || pos->shape[1] != x->shape[2]) {
        throw ShapeError("add_positional: table " + shape_str(pos->shape) + " does not match tokens " +
                         shape_str(x->shape));
    }
    const std::size_t N = x->shape[0], td = x->shape[1] * x->shape[2];
    auto out = zeros<T>(x->shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < td; ++i) out->data[n * td + i] = x->data[n * td + i] + pos->data[i];
    if (detail::track_binary(tape, x, pos, out)) {
        tape->record("add_positional", out.get(), [x, pos, out, N, td] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < td; ++i) {
                    if (x->requires_grad) x->grad[n * td + i] += out->grad[n * td + i];
                    if (pos->requires_grad) pos->grad[i] += out->grad[n * td + i];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
TensorPtr<T> sum_all(const TensorPtr<T>& x, Tape<T>* tape) {
    T acc = 0;
    for (const T v : x->data) acc += v;
    auto out = scalar_tensor<T>(acc);
    if (detail::track_unary(tape, x, out)) {
        tape->record("sum_all", out.get(), [x, out] {
            const T g = out->grad[0];
            for (std::size_t i = 0; i < x->numel(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

/// Mean absolute error over all elements. The subgradient of |.| at zero
/// is taken as zero.
template <typename T>
TensorPtr<T> l1_loss(const TensorPtr<T>& sr, const TensorPtr<T>& hr, Tape<T>* tape) {
    check_same_shape("l1_loss", sr, hr);
    const std::size_t n = sr->numel();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(sr->data[i] - hr->data[i]);
    auto out = scalar_tensor<T>(acc / static_cast<T>(n));
    if (detail::track_binary(tape, sr, hr, out)) {
        tape->record("l1_loss", out.get(), [sr, hr, out, n] {
            const T g = out->grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const T d = sr->data[i] - hr->data[i];
                const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                if (sr->requires_grad) sr->grad[i] += g * s;
                if (hr->requires_grad) hr->grad[i] -= g * s;
            }
        });
    }
    return out;
}

}  // namespace csasr
