#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "csasr/csa.hpp"
#include "csasr/rng.hpp"
#include "csasr/transformer.hpp"

namespace csasr {

struct ModelConfig {
    int scale = 2;  // one of {2,3,4}
    int in_channels = 3;
    int feat_channels = 16;
    int num_stages = 3;
    // Canonical LR input side length; fixes the positional-table grid and
    // therefore the parameter shapes. Inputs of other sizes still work at
    // inference via table resampling.
    int nominal_lr_size = 48;
    bool global_residual = false;
    CsaConfig csa;
    TransformerConfig transformer;

    void validate() const {
        if (scale < 2 || scale > 4) {
            throw ValueError("model: scale must be one of {2,3,4}, got " + std::to_string(scale));
        }
        if (in_channels < 1) throw ValueError("model: in_channels must be >= 1");
        if (feat_channels < 1) throw ValueError("model: feat_channels must be >= 1");
        if (num_stages < 1) throw ValueError("model: num_stages must be >= 1");
        csa.validate();
        transformer.validate();
        if (csa.channels != feat_channels) {
            throw ValueError("model: csa.channels=" + std::to_string(csa.channels) +
                             " must equal feat_channels=" + std::to_string(feat_channels));
        }
        if (nominal_lr_size < 1 || nominal_lr_size % transformer.patch_h != 0 ||
            nominal_lr_size % transformer.patch_w != 0) {
            throw ValueError("model: nominal_lr_size=" + std::to_string(nominal_lr_size) +
                             " must be a positive multiple of the patch size");
        }
    }
};

/// Named, ordered parameter map. Registration order is the canonical
/// serialization order for checkpoints and optimizer state.
template <typename T>
class ParamSet {
public:
    void add(const std::string& name, TensorPtr<T> t) {
        if (index_.count(name)) throw ValueError("params: duplicate name " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    const TensorPtr<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValueError("params: unknown name " + name);
        return items_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return items_.size(); }
    const std::vector<std::pair<std::string, TensorPtr<T>>>& items() const { return items_; }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t->numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : items_) t->zero_grad();
    }

private:
    std::vector<std::pair<std::string, TensorPtr<T>>> items_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
struct UpsampleStageParams {
    TensorPtr<T> conv_w, conv_b;
    int factor = 2;
};

/// The assembled network: shallow conv, CSA-FE stages, subpixel upsampler,
/// per-stage transformer encoders fused by a decoder chain on the HR token
/// sequence, then 1x1 reduction and the reconstruction conv.
template <typename T>
struct Model {
    ModelConfig cfg;
    ParamSet<T> params;

    TensorPtr<T> shallow_w, shallow_b;
    std::vector<CsaStageParams<T>> stages;
    std::vector<UpsampleStageParams<T>> upsample;
    std::vector<PatchEmbedParams<T>> stage_embeds;
    std::vector<std::vector<EncoderBlockParams<T>>> stage_encoders;
    PatchEmbedParams<T> hr_embed;
    std::vector<EncoderBlockParams<T>> hr_encoder;
    std::vector<std::vector<DecoderBlockParams<T>>> decoders;
    TensorPtr<T> unembed_w;
    TensorPtr<T> reduce_w, reduce_b;
    TensorPtr<T> recon_w, recon_b;

    TensorPtr<T> forward(const TensorPtr<T>& lr, Tape<T>* tape) const;
};

template <typename T>
TensorPtr<T> subpixel_upsample(const TensorPtr<T>& f, int scale, const std::vector<UpsampleStageParams<T>>& stages,
                               Tape<T>* tape) {
    if (scale < 2 || scale > 4) throw ValueError("subpixel_upsample: unsupported scale " + std::to_string(scale));
    auto x = f;
    for (const auto& st : stages) {
        x = conv2d(x, st.conv_w, st.conv_b, 1, 1, tape);
        x = pixel_shuffle(x, st.factor, tape);
    }
    return x;
}

template <typename T>
TensorPtr<T> Model<T>::forward(const TensorPtr<T>& lr, Tape<T>* tape) const {
    if (lr->rank() != 4 || lr->shape[1] != static_cast<std::size_t>(cfg.in_channels)) {
        throw ShapeError("forward: expected (N," + std::to_string(cfg.in_channels) + ",h,w) input, got " +
                         shape_str(lr->shape));
    }
    const auto& tc = cfg.transformer;
    const std::size_t h = lr->shape[2], w = lr->shape[3];
    if (h % tc.patch_h != 0 || w % tc.patch_w != 0) {
        throw ShapeError("forward: input " + shape_str(lr->shape) + " is not divisible by the transformer patch " +
                         std::to_string(tc.patch_h) + "x" + std::to_string(tc.patch_w) +
                         "; crop or pad the LR image to a patch multiple");
    }

    // 1. shallow feature extraction
    auto feat = conv2d(lr, shallow_w, shallow_b, 1, 1, tape);

    // 2. CSA-FE stages, retaining every stage output for fusion
    std::vector<TensorPtr<T>> stage_out;
    stage_out.reserve(stages.size());
    auto x = feat;
    for (const auto& st : stages) {
        x = csa_fe_stage(x, cfg.csa, st, tape);
        stage_out.push_back(x);
    }

    // 3. subpixel upsampling of the last stage to the HR grid
    auto up = subpixel_upsample(x, cfg.scale, upsample, tape);

    // 4. fusion: per-stage encoders on the LR grid, an encoder on the HR
    //    grid (patch size scaled so token counts match), then a decoder
    //    chain that cross-attends to each stage memory in order.
    std::vector<TokenSeq<T>> memories;
    for (std::size_t i = 0; i < stage_out.size(); ++i) {
        auto seq = patch_embed(stage_out[i], tc, stage_embeds[i], tape);
        memories.push_back(encoder_stack(seq, tc, stage_encoders[i], tape));
    }
    auto hr_seq = patch_embed_sized(up, static_cast<std::size_t>(tc.patch_h * cfg.scale),
                                    static_cast<std::size_t>(tc.patch_w * cfg.scale), hr_embed, tape);
    hr_seq = encoder_stack(hr_seq, tc, hr_encoder, tape);
    for (std::size_t i = 0; i < memories.size(); ++i) {
        hr_seq = decoder_stack(hr_seq, memories[i], tc, decoders[i], tape);
    }

    // 5.-7. back to the HR feature grid, 1x1 reduction, reconstruction
    auto fused = patch_unembed(hr_seq, unembed_w, tape);
    auto reduced = conv2d(fused, reduce_w, reduce_b, 0, 1, tape);
    auto out = conv2d(reduced, recon_w, recon_b, 1, 1, tape);
    if (cfg.global_residual) {
        // Experimental skip: bicubic-upscaled input added to the output.
        // The skip is constant w.r.t. the parameters, so it does not
        // appear on the tape.
        const std::size_t N = lr->shape[0], Cc = lr->shape[1];
        auto skip = zeros<T>(out->shape);
        const std::size_t sh = h * cfg.scale, sw = w * cfg.scale;
        std::vector<T> plane(h * w);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < Cc; ++c) {
                const T* src = lr->data.data() + (n * Cc + c) * h * w;
                std::copy(src, src + h * w, plane.begin());
                auto up_plane = detail::cubic_resample_plane(plane, h, w, sh, sw);
                std::copy(up_plane.begin(), up_plane.end(), skip->data.begin() + (n * Cc + c) * sh * sw);
            }
        }
        out = add(out, skip, tape);
    }
    return out;
}

namespace detail {

template <typename T>
TensorPtr<T> register_param(ParamSet<T>& ps, const std::string& name, Shape shape) {
    auto t = zeros<T>(std::move(shape), true);
    ps.add(name, t);
    return t;
}

template <typename T>
LayerNormParams<T> make_norm(ParamSet<T>& ps, const std::string& prefix, std::size_t dim) {
    LayerNormParams<T> n;
    n.gamma = register_param(ps, prefix + ".gamma", {dim});
    n.beta = register_param(ps, prefix + ".beta", {dim});
    std::fill(n.gamma->data.begin(), n.gamma->data.end(), T(1));
    return n;
}

template <typename T>
AttentionParams<T> make_attention(ParamSet<T>& ps, const std::string& prefix, std::size_t dim, Rng& rng) {
    AttentionParams<T> a;
    auto proj = [&](const char* nm) {
        auto w = register_param(ps, prefix + "." + nm + ".weight", {dim, dim});
        fill_kaiming_uniform(w, rng, dim);
        auto b = register_param(ps, prefix + "." + nm + ".bias", {dim});
        return std::make_pair(w, b);
    };
    std::tie(a.wq, a.bq) = proj("q");
    std::tie(a.wk, a.bk) = proj("k");
    std::tie(a.wv, a.bv) = proj("v");
    std::tie(a.wo, a.bo) = proj("o");
    return a;
}

template <typename T>
SgfnParams<T> make_sgfn(ParamSet<T>& ps, const std::string& prefix, const TransformerConfig& tc, Rng& rng) {
    SgfnParams<T> s;
    const std::size_t D = static_cast<std::size_t>(tc.embed_dim);
    const std::size_t hidden = static_cast<std::size_t>(tc.sgfn_hidden());
    const std::size_t half = hidden / 2;
    s.w1 = register_param(ps, prefix + ".proj_in.weight", {D, hidden});
    fill_kaiming_uniform(s.w1, rng, D);
    s.b1 = register_param(ps, prefix + ".proj_in.bias", {hidden});
    s.dw_w = register_param(ps, prefix + ".dw.weight", {half, 1, 3, 3});
    fill_kaiming_uniform(s.dw_w, rng, 9);
    s.dw_b = register_param(ps, prefix + ".dw.bias", {half});
    s.w2 = register_param(ps, prefix + ".proj_out.weight", {half, D});
    fill_kaiming_uniform(s.w2, rng, half);
    s.b2 = register_param(ps, prefix + ".proj_out.bias", {D});
    return s;
}

template <typename T>
EncoderBlockParams<T> make_encoder_block(ParamSet<T>& ps, const std::string& prefix, const TransformerConfig& tc,
                                         Rng& rng) {
    EncoderBlockParams<T> b;
    const std::size_t D = static_cast<std::size_t>(tc.embed_dim);
    b.norm1 = make_norm<T>(ps, prefix + ".norm1", D);
    b.attn = make_attention<T>(ps, prefix + ".attn", D, rng);
    b.norm2 = make_norm<T>(ps, prefix + ".norm2", D);
    b.sgfn = make_sgfn<T>(ps, prefix + ".sgfn", tc, rng);
    return b;
}

template <typename T>
DecoderBlockParams<T> make_decoder_block(ParamSet<T>& ps, const std::string& prefix, const TransformerConfig& tc,
                                         Rng& rng) {
    DecoderBlockParams<T> b;
    const std::size_t D = static_cast<std::size_t>(tc.embed_dim);
    b.norm1 = make_norm<T>(ps, prefix + ".norm1", D);
    b.self_attn = make_attention<T>(ps, prefix + ".self_attn", D, rng);
    b.norm2 = make_norm<T>(ps, prefix + ".norm2", D);
    b.norm_mem = make_norm<T>(ps, prefix + ".norm_mem", D);
    b.cross_attn = make_attention<T>(ps, prefix + ".cross_attn", D, rng);
    b.norm3 = make_norm<T>(ps, prefix + ".norm3", D);
    b.sgfn = make_sgfn<T>(ps, prefix + ".sgfn", tc, rng);
    return b;
}

template <typename T>
PatchEmbedParams<T> make_embed(ParamSet<T>& ps, const std::string& prefix, std::size_t patch_h, std::size_t patch_w,
                               std::size_t channels, const TransformerConfig& tc, std::size_t grid_h,
                               std::size_t grid_w, Rng& rng) {
    PatchEmbedParams<T> e;
    const std::size_t L = patch_h * patch_w * channels;
    const std::size_t D = static_cast<std::size_t>(tc.embed_dim);
    e.weight = register_param(ps, prefix + ".weight", {L, D});
    fill_kaiming_uniform(e.weight, rng, L);
    if (tc.use_positional_embedding) {
        e.pos = register_param(ps, prefix + ".pos", {grid_h * grid_w, D});
        fill_normal(e.pos, rng, 0.0, 0.02);
        e.pos_grid_h = grid_h;
        e.pos_grid_w = grid_w;
    }
    return e;
}

}  // namespace detail

/// Allocates and initializes every parameter of the network. Weights are
/// Kaiming-uniform by fan-in, biases zero, positional tables N(0, 0.02);
/// the draw order is the registration order, so a fixed seed gives a
/// bit-identical parameter set.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    auto& ps = m.params;

    const std::size_t C = static_cast<std::size_t>(cfg.feat_channels);
    const std::size_t in_c = static_cast<std::size_t>(cfg.in_channels);
    const auto& tc = cfg.transformer;
    const std::size_t grid_h = static_cast<std::size_t>(cfg.nominal_lr_size / tc.patch_h);
    const std::size_t grid_w = static_cast<std::size_t>(cfg.nominal_lr_size / tc.patch_w);

    m.shallow_w = detail::register_param(ps, "shallow.weight", {C, in_c, 3, 3});
    fill_kaiming_uniform(m.shallow_w, rng, in_c * 9);
    m.shallow_b = detail::register_param(ps, "shallow.bias", {C});

    const std::size_t hid = static_cast<std::size_t>(cfg.csa.hidden());
    for (int i = 0; i < cfg.num_stages; ++i) {
        const std::string sp = "stage." + std::to_string(i);
        CsaStageParams<T> st;
        st.conv_w = detail::register_param(ps, sp + ".conv.weight", {C, C, 3, 3});
        fill_kaiming_uniform(st.conv_w, rng, C * 9);
        st.conv_b = detail::register_param(ps, sp + ".conv.bias", {C});
        st.ca.fc1_w = detail::register_param(ps, sp + ".ca.fc1.weight", {1, hid});
        fill_kaiming_uniform(st.ca.fc1_w, rng, 1);
        st.ca.fc1_b = detail::register_param(ps, sp + ".ca.fc1.bias", {hid});
        st.ca.fc2_w = detail::register_param(ps, sp + ".ca.fc2.weight", {hid, 1});
        fill_kaiming_uniform(st.ca.fc2_w, rng, hid);
        st.ca.fc2_b = detail::register_param(ps, sp + ".ca.fc2.bias", {1});
        const std::size_t k = static_cast<std::size_t>(cfg.csa.spatial_kernel);
        st.sa.conv_w = detail::register_param(ps, sp + ".sa.conv.weight", {1, 1, k, k});
        fill_kaiming_uniform(st.sa.conv_w, rng, k * k);
        st.sa.conv_b = detail::register_param(ps, sp + ".sa.conv.bias", {1});
        m.stages.push_back(std::move(st));
    }

    const std::vector<int> factors = cfg.scale == 4 ? std::vector<int>{2, 2} : std::vector<int>{cfg.scale};
    for (std::size_t j = 0; j < factors.size(); ++j) {
        const std::string up = "upsample." + std::to_string(j);
        UpsampleStageParams<T> u;
        u.factor = factors[j];
        const std::size_t cout = C * static_cast<std::size_t>(factors[j] * factors[j]);
        u.conv_w = detail::register_param(ps, up + ".conv.weight", {cout, C, 3, 3});
        fill_kaiming_uniform(u.conv_w, rng, C * 9);
        u.conv_b = detail::register_param(ps, up + ".conv.bias", {cout});
        m.upsample.push_back(std::move(u));
    }

    for (int i = 0; i < cfg.num_stages; ++i) {
        const std::string fp = "fuse.enc" + std::to_string(i);
        m.stage_embeds.push_back(detail::make_embed<T>(ps, fp + ".embed", tc.patch_h, tc.patch_w, C, tc, grid_h,
                                                       grid_w, rng));
        std::vector<EncoderBlockParams<T>> blocks;
        for (int x = 0; x < tc.num_encoders; ++x) {
            blocks.push_back(detail::make_encoder_block<T>(ps, fp + ".block" + std::to_string(x), tc, rng));
        }
        m.stage_encoders.push_back(std::move(blocks));
    }

    const std::size_t hr_ph = static_cast<std::size_t>(tc.patch_h * cfg.scale);
    const std::size_t hr_pw = static_cast<std::size_t>(tc.patch_w * cfg.scale);
    m.hr_embed = detail::make_embed<T>(ps, "fuse.hr.embed", hr_ph, hr_pw, C, tc, grid_h, grid_w, rng);
    for (int x = 0; x < tc.num_encoders; ++x) {
        m.hr_encoder.push_back(detail::make_encoder_block<T>(ps, "fuse.hr.block" + std::to_string(x), tc, rng));
    }

    for (int i = 0; i < cfg.num_stages; ++i) {
        const std::string dp = "fuse.dec" + std::to_string(i);
        std::vector<DecoderBlockParams<T>> blocks;
        for (int x = 0; x < tc.num_decoders; ++x) {
            blocks.push_back(detail::make_decoder_block<T>(ps, dp + ".block" + std::to_string(x), tc, rng));
        }
        m.decoders.push_back(std::move(blocks));
    }

    const std::size_t D = static_cast<std::size_t>(tc.embed_dim);
    m.unembed_w = detail::register_param(ps, "unembed.weight", {D, hr_ph * hr_pw * C});
    fill_kaiming_uniform(m.unembed_w, rng, D);
    m.reduce_w = detail::register_param(ps, "reduce.weight", {C, C, 1, 1});
    fill_kaiming_uniform(m.reduce_w, rng, C);
    m.reduce_b = detail::register_param(ps, "reduce.bias", {C});
    m.recon_w = detail::register_param(ps, "recon.weight", {in_c, C, 3, 3});
    fill_kaiming_uniform(m.recon_w, rng, C * 9);
    m.recon_b = detail::register_param(ps, "recon.bias", {in_c});
    return m;
}

/// Toy configuration used by tests and smoke runs.
inline ModelConfig toy_model_config(int scale = 2, int nominal_lr_size = 48) {
    ModelConfig cfg;
    cfg.scale = scale;
    cfg.feat_channels = 16;
    cfg.num_stages = 3;
    cfg.nominal_lr_size = nominal_lr_size;
    cfg.csa.channels = 16;
    cfg.csa.reduction = 16;
    cfg.transformer.patch_h = 4;
    cfg.transformer.patch_w = 4;
    cfg.transformer.embed_dim = 64;
    cfg.transformer.num_heads = 4;
    cfg.transformer.num_encoders = 2;
    cfg.transformer.num_decoders = 2;
    return cfg;
}

/// Paper-scale configuration (depths/widths are assumptions, kept for
/// long exploratory runs only).
inline ModelConfig paper_model_config(int scale = 3, int nominal_lr_size = 48) {
    ModelConfig cfg;
    cfg.scale = scale;
    cfg.feat_channels = 64;
    cfg.num_stages = 3;
    cfg.nominal_lr_size = nominal_lr_size;
    cfg.csa.channels = 64;
    cfg.csa.reduction = 16;
    cfg.transformer.patch_h = 4;
    cfg.transformer.patch_w = 4;
    cfg.transformer.embed_dim = 256;
    cfg.transformer.num_heads = 8;
    cfg.transformer.num_encoders = 8;
    cfg.transformer.num_decoders = 1;
    return cfg;
}

}  // namespace csasr
