#pragma once

#include "csasr/ops.hpp"

namespace csasr {

struct CsaConfig {
    int channels = 16;
    int reduction = 16;     // bottleneck divisor of the shared dense layers
    int spatial_kernel = 7;
    bool stage_residual = true;

    int hidden() const { return std::max(1, channels / reduction); }

    void validate() const {
        if (channels < 1) throw ValueError("csa: channels must be >= 1, got " + std::to_string(channels));
        if (reduction < 1) throw ValueError("csa: reduction must be >= 1, got " + std::to_string(reduction));
        if (spatial_kernel < 1 || spatial_kernel % 2 == 0) {
            throw ValueError("csa: spatial_kernel must be odd and >= 1, got " + std::to_string(spatial_kernel));
        }
    }
};

/// The dense stack is shared across channels: each channel's pooled
/// scalar runs through the same 1 -> hidden -> 1 bottleneck, which is
/// what makes the gate permutation-equivariant over channels.
template <typename T>
struct ChannelAttentionParams {
    TensorPtr<T> fc1_w;  // [1, hidden]
    TensorPtr<T> fc1_b;  // [hidden]
    TensorPtr<T> fc2_w;  // [hidden, 1]
    TensorPtr<T> fc2_b;  // [1]
};

template <typename T>
struct SpatialAttentionParams {
    TensorPtr<T> conv_w;  // [1, 1, k, k]
    TensorPtr<T> conv_b;  // [1]
};

template <typename T>
struct CsaStageParams {
    TensorPtr<T> conv_w;  // [C, C, 3, 3]
    TensorPtr<T> conv_b;  // [C]
    ChannelAttentionParams<T> ca;
    SpatialAttentionParams<T> sa;
};

/// Per-channel gate: sigmoid(FC(ReLU(FC(maxpool + avgpool)))), the two
/// pooled statistics summed before the shared dense stack.
template <typename T>
TensorPtr<T> channel_attention(const TensorPtr<T>& f, const CsaConfig& cfg, const ChannelAttentionParams<T>& p,
                               Tape<T>* tape) {
    if (f->rank() != 4 || f->shape[1] != static_cast<std::size_t>(cfg.channels)) {
        throw ShapeError("channel_attention: input " + shape_str(f->shape) + " does not carry " +
                         std::to_string(cfg.channels) + " channels");
    }
    const std::size_t N = f->shape[0], C = f->shape[1];
    auto mp = pool(f, PoolMode::ChannelMax, tape);
    auto ap = pool(f, PoolMode::ChannelAvg, tape);
    auto pooled = reshape(add(mp, ap, tape), {N * C, 1}, tape);
    auto hidden = relu(linear(pooled, p.fc1_w, p.fc1_b, tape), tape);
    auto logits = linear(hidden, p.fc2_w, p.fc2_b, tape);
    auto gate = sigmoid(logits, tape);
    return reshape(gate, {N, C, 1, 1}, tape);
}

/// Per-pixel gate: sigmoid(conv(maxpool_c + avgpool_c)) with a single
/// k-x-k kernel on the summed cross-channel maps; padding preserves HxW.
template <typename T>
TensorPtr<T> spatial_attention(const TensorPtr<T>& f, const CsaConfig& cfg, const SpatialAttentionParams<T>& p,
                               Tape<T>* tape) {
    if (f->rank() != 4) throw ShapeError("spatial_attention: expected 4-axis input, got " + shape_str(f->shape));
    auto mp = pool(f, PoolMode::SpatialMax, tape);
    auto ap = pool(f, PoolMode::SpatialAvg, tape);
    auto summed = add(mp, ap, tape);
    auto conv = conv2d(summed, p.conv_w, p.conv_b, cfg.spatial_kernel / 2, 1, tape);
    return sigmoid(conv, tape);
}

/// Sequential gating: F' = M_c * F, F'' = M_s(F') * F'.
template <typename T>
TensorPtr<T> csa_block(const TensorPtr<T>& f, const CsaConfig& cfg, const ChannelAttentionParams<T>& ca,
                       const SpatialAttentionParams<T>& sa, Tape<T>* tape) {
    auto mc = channel_attention(f, cfg, ca, tape);
    auto fprime = mul_gate_channel(f, mc, tape);
    auto ms = spatial_attention(fprime, cfg, sa, tape);
    return mul_gate_spatial(fprime, ms, tape);
}

/// One extraction stage: 3x3 conv, the attention block, and a residual
/// connection back to the stage input (flag-controlled).
template <typename T>
TensorPtr<T> csa_fe_stage(const TensorPtr<T>& f, const CsaConfig& cfg, const CsaStageParams<T>& p, Tape<T>* tape) {
    auto g = conv2d(f, p.conv_w, p.conv_b, 1, 1, tape);
    auto gated = csa_block(g, cfg, p.ca, p.sa, tape);
    return cfg.stage_residual ? add(gated, f, tape) : gated;
}

}  // namespace csasr
