#pragma once

#include <vector>

#include "csasr/detail/cubic.hpp"
#include "csasr/ops.hpp"

namespace csasr {

inline constexpr double kLayerNormEps = 1e-6;

struct TransformerConfig {
    int patch_h = 4;
    int patch_w = 4;
    int embed_dim = 64;
    int num_heads = 4;
    int num_encoders = 2;
    int num_decoders = 2;
    int sgfn_expand = 2;
    bool use_positional_embedding = true;

    int head_dim() const { return embed_dim / num_heads; }
    int sgfn_hidden() const { return sgfn_expand * embed_dim; }

    void validate() const {
        if (patch_h < 1 || patch_w < 1) throw ValueError("transformer: patch extents must be >= 1");
        if (embed_dim < 1) throw ValueError("transformer: embed_dim must be >= 1");
        if (num_heads < 1 || embed_dim % num_heads != 0) {
            throw ValueError("transformer: embed_dim=" + std::to_string(embed_dim) +
                             " must be divisible by num_heads=" + std::to_string(num_heads));
        }
        if (num_encoders < 0 || num_decoders < 0) throw ValueError("transformer: negative stack depth");
        if (sgfn_expand < 1 || sgfn_hidden() % 2 != 0) {
            throw ValueError("transformer: sgfn hidden width " + std::to_string(sgfn_hidden()) +
                             " must be even (it is split in two)");
        }
    }
};

/// A token sequence plus the feature-map geometry it was cut from, which
/// is what un-embedding and the SGFN's token-grid reshape need.
template <typename T>
struct TokenSeq {
    TensorPtr<T> tokens;  // [N, T, D]
    std::size_t src_c = 0, src_h = 0, src_w = 0;
    std::size_t patch_h = 0, patch_w = 0;

    std::size_t grid_h() const { return src_h / patch_h; }
    std::size_t grid_w() const { return src_w / patch_w; }
    std::size_t token_count() const { return grid_h() * grid_w(); }
};

template <typename T>
struct PatchEmbedParams {
    TensorPtr<T> weight;          // [ph*pw*C, D]
    TensorPtr<T> pos;             // [T0, D] or null when positional embedding is off
    std::size_t pos_grid_h = 0;   // canonical grid the table was built for
    std::size_t pos_grid_w = 0;
};

template <typename T>
struct LayerNormParams {
    TensorPtr<T> gamma;  // [D]
    TensorPtr<T> beta;   // [D]
};

template <typename T>
struct AttentionParams {
    TensorPtr<T> wq, bq, wk, bk, wv, bv, wo, bo;  // all [D,D] / [D]
};

template <typename T>
struct SgfnParams {
    TensorPtr<T> w1, b1;      // [D, hidden], [hidden]
    TensorPtr<T> dw_w, dw_b;  // [hidden/2, 1, 3, 3], [hidden/2]
    TensorPtr<T> w2, b2;      // [hidden/2, D], [D]
};

template <typename T>
struct EncoderBlockParams {
    LayerNormParams<T> norm1;
    AttentionParams<T> attn;
    LayerNormParams<T> norm2;
    SgfnParams<T> sgfn;
};

template <typename T>
struct DecoderBlockParams {
    LayerNormParams<T> norm1;
    AttentionParams<T> self_attn;
    LayerNormParams<T> norm2;      // query side of the cross attention
    LayerNormParams<T> norm_mem;   // memory side of the cross attention
    AttentionParams<T> cross_attn;
    LayerNormParams<T> norm3;
    SgfnParams<T> sgfn;
};

template <typename T>
TensorPtr<T> layer_norm(const TensorPtr<T>& x, const LayerNormParams<T>& p, Tape<T>* tape) {
    return layer_norm(x, p.gamma, p.beta, static_cast<T>(kLayerNormEps), tape);
}

namespace detail {

/// Resamples a [T0,D] positional table from its canonical grid onto a new
/// grid with the cubic kernel, one embedding channel at a time. Inference
/// only; the result is detached from the table.
template <typename T>
TensorPtr<T> resample_pos_table(const PatchEmbedParams<T>& p, std::size_t gh, std::size_t gw) {
    const std::size_t D = p.pos->shape[1];
    auto out = zeros<T>({gh * gw, D});
    std::vector<T> plane(p.pos_grid_h * p.pos_grid_w);
    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t t = 0; t < plane.size(); ++t) plane[t] = p.pos->data[t * D + d];
        const auto resized = cubic_resample_plane(plane, p.pos_grid_h, p.pos_grid_w, gh, gw);
        for (std::size_t t = 0; t < resized.size(); ++t) out->data[t * D + d] = resized[t];
    }
    return out;
}

}  // namespace detail

/// As patch_embed but with explicit patch extents; the HR branch embeds
/// with the LR patch size scaled by the upsampling factor.
template <typename T>
TokenSeq<T> patch_embed_sized(const TensorPtr<T>& f, std::size_t patch_h, std::size_t patch_w,
                              const PatchEmbedParams<T>& p, Tape<T>* tape) {
    if (f->rank() != 4) throw ShapeError("patch_embed: expected 4-axis input, got " + shape_str(f->shape));
    const std::size_t C = f->shape[1], H = f->shape[2], W = f->shape[3];
    if (patch_h == 0 || patch_w == 0 || H % patch_h != 0 || W % patch_w != 0) {
        throw ShapeError("patch_embed: H=" + std::to_string(H) + ", W=" + std::to_string(W) +
                         " must be divisible by patch P_h=" + std::to_string(patch_h) +
                         ", P_w=" + std::to_string(patch_w));
    }
    if (p.weight->shape[0] != patch_h * patch_w * C) {
        throw ShapeError("patch_embed: projection " + shape_str(p.weight->shape) + " does not accept patches of " +
                         std::to_string(patch_h * patch_w * C) + " values");
    }
    auto raw = extract_patches(f, patch_h, patch_w, tape);
    auto tok = matmul(raw, p.weight, tape);
    if (p.pos) {
        const std::size_t gh = H / patch_h, gw = W / patch_w;
        if (gh == p.pos_grid_h && gw == p.pos_grid_w) {
            tok = add_positional(tok, p.pos, tape);
        } else if (tape == nullptr) {
            auto resized = detail::resample_pos_table(p, gh, gw);
            tok = add_positional(tok, resized, tape);
        } else {
            throw ShapeError("patch_embed: training requires the token grid " + std::to_string(gh) + "x" +
                             std::to_string(gw) + " to match the positional table grid " +
                             std::to_string(p.pos_grid_h) + "x" + std::to_string(p.pos_grid_w) +
                             " (set nominal_lr_size accordingly)");
        }
    }
    TokenSeq<T> seq;
    seq.tokens = tok;
    seq.src_c = C;
    seq.src_h = H;
    seq.src_w = W;
    seq.patch_h = patch_h;
    seq.patch_w = patch_w;
    return seq;
}

/// Cuts f into non-overlapping patches, projects each flattened patch by
/// the D-column matrix, and adds the learned positional table. When the
/// token grid differs from the table's canonical grid the table is
/// cubically resampled onto it, which is an inference-only path.
template <typename T>
TokenSeq<T> patch_embed(const TensorPtr<T>& f, const TransformerConfig& cfg, const PatchEmbedParams<T>& p,
                        Tape<T>* tape) {
    return patch_embed_sized(f, static_cast<std::size_t>(cfg.patch_h), static_cast<std::size_t>(cfg.patch_w), p,
                             tape);
}

/// Projects each token back to a flattened patch and reassembles the
/// spatial layout, inverting the embed partition order.
template <typename T>
TensorPtr<T> patch_unembed(const TokenSeq<T>& seq, const TensorPtr<T>& weight, Tape<T>* tape) {
    const std::size_t L = seq.patch_h * seq.patch_w * seq.src_c;
    if (weight->rank() != 2 || weight->shape[0] != seq.tokens->shape[2] || weight->shape[1] != L) {
        throw ShapeError("patch_unembed: projection " + shape_str(weight->shape) + " does not map D=" +
                         std::to_string(seq.tokens->shape[2]) + " tokens to patches of " + std::to_string(L) +
                         " values");
    }
    if (seq.tokens->shape[1] != seq.token_count()) {
        throw ShapeError("patch_unembed: token count " + std::to_string(seq.tokens->shape[1]) +
                         " does not tile the source shape");
    }
    auto raw = matmul(seq.tokens, weight, tape);
    return place_patches(raw, seq.src_c, seq.src_h, seq.src_w, seq.patch_h, seq.patch_w, tape);
}

/// Multi-head attention. Self-attention is the q_src == kv_src case; the
/// cross form reads queries from one sequence and keys/values from the
/// other. Logits are scaled by 1/sqrt(head_dim).
template <typename T>
TensorPtr<T> multi_head_attention(const TensorPtr<T>& q_src, const TensorPtr<T>& kv_src, const TransformerConfig& cfg,
                                  const AttentionParams<T>& p, Tape<T>* tape) {
    if (q_src->rank() != 3 || kv_src->rank() != 3 || q_src->shape[2] != kv_src->shape[2]) {
        throw ShapeError("multi_head_attention: token shapes " + shape_str(q_src->shape) + " and " +
                         shape_str(kv_src->shape) + " disagree");
    }
    const std::size_t N = q_src->shape[0], Tq = q_src->shape[1], Tk = kv_src->shape[1];
    const std::size_t D = q_src->shape[2];
    if (D != static_cast<std::size_t>(cfg.embed_dim) || cfg.embed_dim % cfg.num_heads != 0) {
        throw ShapeError("multi_head_attention: embed_dim " + std::to_string(D) + " incompatible with " +
                         std::to_string(cfg.num_heads) + " heads");
    }
    const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);
    const std::size_t hd = D / heads;

    auto split_heads = [&](const TensorPtr<T>& x, std::size_t Tn) {
        auto r = reshape(x, {N, Tn, heads, hd}, tape);
        return permute(r, {0, 2, 1, 3}, tape);  // [N, heads, Tn, hd]
    };

    auto q = split_heads(linear(q_src, p.wq, p.bq, tape), Tq);
    auto k = split_heads(linear(kv_src, p.wk, p.bk, tape), Tk);
    auto v = split_heads(linear(kv_src, p.wv, p.bv, tape), Tk);

    auto kt = permute(k, {0, 1, 3, 2}, tape);  // [N, heads, hd, Tk]
    auto logits = scale(matmul(q, kt, tape), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))), tape);
    auto attn = softmax_last_axis(logits, tape);
    auto ctx = matmul(attn, v, tape);                        // [N, heads, Tq, hd]
    auto merged = permute(ctx, {0, 2, 1, 3}, tape);          // [N, Tq, heads, hd]
    auto flat = reshape(merged, {N, Tq, D}, tape);
    return linear(flat, p.wo, p.bo, tape);
}

/// Spatial-gate feed-forward: X' = gelu(L1p x), split in half along the
/// channel axis; the second half is reshaped to its token grid, mixed by
/// a 3x3 depth-wise convolution, and gates the first half elementwise
/// before L2p projects back to D.
template <typename T>
TensorPtr<T> sgfn(const TensorPtr<T>& x, std::size_t grid_h, std::size_t grid_w, const TransformerConfig& cfg,
                  const SgfnParams<T>& p, Tape<T>* tape) {
    const std::size_t N = x->shape[0], Tn = x->shape[1];
    if (Tn != grid_h * grid_w) {
        throw ShapeError("sgfn: token count " + std::to_string(Tn) + " is not a full " + std::to_string(grid_h) +
                         "x" + std::to_string(grid_w) + " grid");
    }
    const std::size_t hidden = static_cast<std::size_t>(cfg.sgfn_hidden());
    const std::size_t half = hidden / 2;
    auto h = gelu(linear(x, p.w1, p.b1, tape), tape);       // [N, T, hidden]
    auto x1 = slice_last(h, 0, half, tape);                 // [N, T, half]
    auto x2 = slice_last(h, half, hidden, tape);            // [N, T, half]
    // Token grid layout for the depth-wise spatial mixer.
    auto x2_grid = reshape(permute(x2, {0, 2, 1}, tape), {N, half, grid_h, grid_w}, tape);
    auto mixed = conv2d(x2_grid, p.dw_w, p.dw_b, 1, static_cast<int>(half), tape);
    auto x2_tok = permute(reshape(mixed, {N, half, Tn}, tape), {0, 2, 1}, tape);
    auto gated = mul(x1, x2_tok, tape);
    return linear(gated, p.w2, p.b2, tape);
}

/// Pre-norm encoder block chain:
///   E'_x = MSA(PreNorm(E_{x-1})) + E_{x-1}
///   E_x  = SGFN(PreNorm(E'_x))  + E'_x
template <typename T>
TokenSeq<T> encoder_stack(const TokenSeq<T>& e0, const TransformerConfig& cfg,
                          const std::vector<EncoderBlockParams<T>>& blocks, Tape<T>* tape) {
    TokenSeq<T> seq = e0;
    for (const auto& b : blocks) {
        auto attn_in = layer_norm(seq.tokens, b.norm1, tape);
        auto after_attn = add(multi_head_attention(attn_in, attn_in, cfg, b.attn, tape), seq.tokens, tape);
        auto ff_in = layer_norm(after_attn, b.norm2, tape);
        seq.tokens = add(sgfn(ff_in, seq.grid_h(), seq.grid_w(), cfg, b.sgfn, tape), after_attn, tape);
    }
    return seq;
}

/// Decoder block chain with cross attention to a fixed memory sequence:
///   D'_x  = MSA(PreNorm(D_{x-1})) + D_{x-1}
///   D''_x = MSA(PreNorm(D'_x), PreNorm(memory)) + D'_x
///   D_x   = SGFN(PreNorm(D''_x)) + D''_x
template <typename T>
TokenSeq<T> decoder_stack(const TokenSeq<T>& d0, const TokenSeq<T>& memory, const TransformerConfig& cfg,
                          const std::vector<DecoderBlockParams<T>>& blocks, Tape<T>* tape) {
    if (d0.tokens->shape[2] != memory.tokens->shape[2]) {
        throw ShapeError("decoder_stack: embedding widths disagree, " + shape_str(d0.tokens->shape) + " vs " +
                         shape_str(memory.tokens->shape));
    }
    TokenSeq<T> seq = d0;
    for (const auto& b : blocks) {
        auto self_in = layer_norm(seq.tokens, b.norm1, tape);
        auto after_self = add(multi_head_attention(self_in, self_in, cfg, b.self_attn, tape), seq.tokens, tape);
        auto q_in = layer_norm(after_self, b.norm2, tape);
        auto mem_in = layer_norm(memory.tokens, b.norm_mem, tape);
        auto after_cross = add(multi_head_attention(q_in, mem_in, cfg, b.cross_attn, tape), after_self, tape);
        auto ff_in = layer_norm(after_cross, b.norm3, tape);
        seq.tokens = add(sgfn(ff_in, seq.grid_h(), seq.grid_w(), cfg, b.sgfn, tape), after_cross, tape);
    }
    return seq;
}

}  // namespace csasr
