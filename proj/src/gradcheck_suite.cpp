#include <functional>
#include <iomanip>
#include <iostream>
#include <vector>

#include "csasr/gradcheck.hpp"
#include "csasr/model.hpp"
#include "csasr/suites.hpp"

namespace csasr {

namespace {

using Inputs = std::vector<TensorPtr<double>>;
using OpFn = std::function<TensorPtr<double>(const Inputs&, Tape<double>*)>;

TensorPtr<double> rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = zeros<double>(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

// Uniform magnitude in [0.1, 1] with random sign: keeps relu/abs kinks
// and pooling ties away from the probe points.
TensorPtr<double> rand_away_from_zero(Shape shape, Rng& rng) {
    auto t = zeros<double>(std::move(shape));
    for (auto& v : t->data) v = rng.uniform(0.1, 1.0) * (rng.next_unit() < 0.5 ? -1.0 : 1.0);
    return t;
}

struct Suite {
    std::ostream& os;
    int failures = 0;

    void check(const std::string& name, const OpFn& op, const Inputs& inputs, double h = 1e-5, double tol = 1e-4,
               std::size_t max_per_tensor = 0, bool expect_fail = false) {
        auto rep = grad_check_op(op, inputs, h, tol, max_per_tensor);
        const bool ok = expect_fail ? !rep.pass : rep.pass;
        os << (ok ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << name << " max_rel_err="
           << std::scientific << std::setprecision(3) << rep.max_rel_err << std::defaultfloat << " ("
           << rep.checked << " coords)" << (expect_fail ? " [expected detection]" : "") << "\n";
        if (!ok) ++failures;
    }
};

}  // namespace

int run_gradcheck_suite(std::ostream& os) {
    Suite s{os};
    Rng rng(2024);

    // --- primitive ops ---
    s.check("matmul", [](const Inputs& x, Tape<double>* t) { return matmul(x[0], x[1], t); },
            {rand_t({3, 4}, rng), rand_t({4, 2}, rng)}, 1e-3);
    s.check("matmul_batched", [](const Inputs& x, Tape<double>* t) { return matmul(x[0], x[1], t); },
            {rand_t({2, 3, 2, 4}, rng), rand_t({2, 3, 4, 2}, rng)});
    s.check("matmul_shared_rhs", [](const Inputs& x, Tape<double>* t) { return matmul(x[0], x[1], t); },
            {rand_t({2, 3, 4}, rng), rand_t({4, 2}, rng)});
    s.check("conv2d", [](const Inputs& x, Tape<double>* t) { return conv2d(x[0], x[1], x[2], 1, 1, t); },
            {rand_t({2, 3, 5, 5}, rng), rand_t({4, 3, 3, 3}, rng), rand_t({4}, rng)});
    s.check("conv2d_depthwise", [](const Inputs& x, Tape<double>* t) { return conv2d(x[0], x[1], x[2], 1, 4, t); },
            {rand_t({1, 4, 5, 5}, rng), rand_t({4, 1, 3, 3}, rng), rand_t({4}, rng)});
    s.check("conv2d_grouped", [](const Inputs& x, Tape<double>* t) { return conv2d(x[0], x[1], x[2], 2, 2, t); },
            {rand_t({1, 4, 4, 4}, rng), rand_t({6, 2, 5, 5}, rng), rand_t({6}, rng)});
    s.check("relu", [](const Inputs& x, Tape<double>* t) { return relu(x[0], t); },
            {rand_away_from_zero({3, 7}, rng)});
    s.check("gelu", [](const Inputs& x, Tape<double>* t) { return gelu(x[0], t); }, {rand_t({3, 7}, rng, -2, 2)});
    s.check("sigmoid", [](const Inputs& x, Tape<double>* t) { return sigmoid(x[0], t); },
            {rand_t({3, 7}, rng, -3, 3)});
    s.check("layer_norm", [](const Inputs& x, Tape<double>* t) { return layer_norm(x[0], x[1], x[2], 1e-6, t); },
            {rand_t({4, 6}, rng), rand_t({6}, rng), rand_t({6}, rng)});
    s.check("softmax", [](const Inputs& x, Tape<double>* t) { return softmax_last_axis(x[0], t); },
            {rand_t({4, 5}, rng, -2, 2)});
    s.check("pool_channel_max", [](const Inputs& x, Tape<double>* t) { return pool(x[0], PoolMode::ChannelMax, t); },
            {rand_t({2, 3, 4, 4}, rng)});
    s.check("pool_channel_avg", [](const Inputs& x, Tape<double>* t) { return pool(x[0], PoolMode::ChannelAvg, t); },
            {rand_t({2, 3, 4, 4}, rng)});
    s.check("pool_spatial_max", [](const Inputs& x, Tape<double>* t) { return pool(x[0], PoolMode::SpatialMax, t); },
            {rand_t({2, 3, 4, 4}, rng)});
    s.check("pool_spatial_avg", [](const Inputs& x, Tape<double>* t) { return pool(x[0], PoolMode::SpatialAvg, t); },
            {rand_t({2, 3, 4, 4}, rng)});
    s.check("pixel_shuffle", [](const Inputs& x, Tape<double>* t) { return pixel_shuffle(x[0], 2, t); },
            {rand_t({1, 8, 3, 3}, rng)});
    s.check("pixel_unshuffle", [](const Inputs& x, Tape<double>* t) { return pixel_unshuffle(x[0], 2, t); },
            {rand_t({1, 2, 4, 4}, rng)});
    s.check("add", [](const Inputs& x, Tape<double>* t) { return add(x[0], x[1], t); },
            {rand_t({3, 4}, rng), rand_t({3, 4}, rng)});
    s.check("mul", [](const Inputs& x, Tape<double>* t) { return mul(x[0], x[1], t); },
            {rand_t({3, 4}, rng), rand_t({3, 4}, rng)});
    s.check("scale", [](const Inputs& x, Tape<double>* t) { return scale(x[0], 0.37, t); }, {rand_t({3, 4}, rng)});
    s.check("add_bias_last", [](const Inputs& x, Tape<double>* t) { return add_bias_last(x[0], x[1], t); },
            {rand_t({3, 4}, rng), rand_t({4}, rng)});
    s.check("add_positional", [](const Inputs& x, Tape<double>* t) { return add_positional(x[0], x[1], t); },
            {rand_t({2, 3, 4}, rng), rand_t({3, 4}, rng)});
    s.check("permute", [](const Inputs& x, Tape<double>* t) { return permute(x[0], {2, 0, 1}, t); },
            {rand_t({2, 3, 4}, rng)});
    s.check("reshape", [](const Inputs& x, Tape<double>* t) { return reshape(x[0], {6, 4}, t); },
            {rand_t({2, 3, 4}, rng)});
    s.check("slice_last", [](const Inputs& x, Tape<double>* t) { return slice_last(x[0], 1, 4, t); },
            {rand_t({2, 5}, rng)});
    s.check("extract_patches", [](const Inputs& x, Tape<double>* t) { return extract_patches(x[0], 2, 2, t); },
            {rand_t({1, 3, 4, 4}, rng)});
    s.check("place_patches", [](const Inputs& x, Tape<double>* t) { return place_patches(x[0], 3, 4, 4, 2, 2, t); },
            {rand_t({1, 4, 12}, rng)});
    s.check("mul_gate_channel", [](const Inputs& x, Tape<double>* t) { return mul_gate_channel(x[0], x[1], t); },
            {rand_t({2, 3, 4, 4}, rng), rand_t({2, 3, 1, 1}, rng)});
    s.check("mul_gate_spatial", [](const Inputs& x, Tape<double>* t) { return mul_gate_spatial(x[0], x[1], t); },
            {rand_t({2, 3, 4, 4}, rng), rand_t({2, 1, 4, 4}, rng)});
    s.check("l1_loss", [](const Inputs& x, Tape<double>* t) { return l1_loss(x[0], x[1], t); },
            {rand_t({3, 4}, rng, 0.5, 1.0), rand_t({3, 4}, rng, -1.0, -0.5)});

    // --- attention / extractor composites ---
    CsaConfig ccfg;
    ccfg.channels = 8;
    ccfg.reduction = 4;
    ChannelAttentionParams<double> ca{rand_t({1, 2}, rng), rand_t({2}, rng), rand_t({2, 1}, rng), rand_t({1}, rng)};
    SpatialAttentionParams<double> sa{rand_t({1, 1, 7, 7}, rng), rand_t({1}, rng)};
    CsaStageParams<double> st{rand_t({8, 8, 3, 3}, rng, -0.2, 0.2), rand_t({8}, rng), ca, sa};

    s.check("channel_attention",
            [ccfg](const Inputs& x, Tape<double>* t) {
                ChannelAttentionParams<double> p{x[1], x[2], x[3], x[4]};
                return channel_attention(x[0], ccfg, p, t);
            },
            {rand_t({1, 8, 6, 6}, rng), ca.fc1_w, ca.fc1_b, ca.fc2_w, ca.fc2_b});
    s.check("spatial_attention",
            [ccfg](const Inputs& x, Tape<double>* t) {
                SpatialAttentionParams<double> p{x[1], x[2]};
                return spatial_attention(x[0], ccfg, p, t);
            },
            {rand_t({1, 8, 6, 6}, rng), sa.conv_w, sa.conv_b});
    s.check("csa_block",
            [ccfg](const Inputs& x, Tape<double>* t) {
                ChannelAttentionParams<double> pca{x[1], x[2], x[3], x[4]};
                SpatialAttentionParams<double> psa{x[5], x[6]};
                return csa_block(x[0], ccfg, pca, psa, t);
            },
            {rand_t({1, 8, 6, 6}, rng), ca.fc1_w, ca.fc1_b, ca.fc2_w, ca.fc2_b, sa.conv_w, sa.conv_b});
    s.check("csa_fe_stage",
            [ccfg, st](const Inputs& x, Tape<double>* t) {
                CsaStageParams<double> p{x[1], x[2], {x[3], x[4], x[5], x[6]}, {x[7], x[8]}};
                return csa_fe_stage(x[0], ccfg, p, t);
            },
            {rand_t({1, 8, 8, 8}, rng), st.conv_w, st.conv_b, ca.fc1_w, ca.fc1_b, ca.fc2_w, ca.fc2_b, sa.conv_w,
             sa.conv_b});

    // --- transformer composites ---
    TransformerConfig tc;
    tc.embed_dim = 8;
    tc.num_heads = 2;
    tc.num_encoders = 2;
    tc.num_decoders = 1;
    tc.sgfn_expand = 2;
    auto attn_inputs = [&rng](std::size_t d) {
        return Inputs{rand_t({d, d}, rng), rand_t({d}, rng), rand_t({d, d}, rng), rand_t({d}, rng),
                      rand_t({d, d}, rng), rand_t({d}, rng), rand_t({d, d}, rng), rand_t({d}, rng)};
    };
    {
        Inputs in = {rand_t({1, 3, 8}, rng)};
        auto ap = attn_inputs(8);
        in.insert(in.end(), ap.begin(), ap.end());
        s.check("msa_self",
                [tc](const Inputs& x, Tape<double>* t) {
                    AttentionParams<double> p{x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8]};
                    return multi_head_attention(x[0], x[0], tc, p, t);
                },
                in);
    }
    {
        Inputs in = {rand_t({1, 4, 8}, rng), rand_t({1, 6, 8}, rng)};
        auto ap = attn_inputs(8);
        in.insert(in.end(), ap.begin(), ap.end());
        s.check("msa_cross",
                [tc](const Inputs& x, Tape<double>* t) {
                    AttentionParams<double> p{x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9]};
                    return multi_head_attention(x[0], x[1], tc, p, t);
                },
                in);
    }
    {
        Inputs in = {rand_t({1, 4, 8}, rng),       rand_t({8, 16}, rng), rand_t({16}, rng),
                     rand_t({8, 1, 3, 3}, rng),    rand_t({8}, rng),     rand_t({8, 8}, rng),
                     rand_t({8}, rng)};
        s.check("sgfn",
                [tc](const Inputs& x, Tape<double>* t) {
                    SgfnParams<double> p{x[1], x[2], x[3], x[4], x[5], x[6]};
                    return sgfn(x[0], 2, 2, tc, p, t);
                },
                in);
    }

    // Encoder / decoder stacks: parameters come from a seeded build so the
    // check exercises the exact training wiring.
    {
        auto cfg = toy_model_config(2, 8);
        cfg.transformer.embed_dim = 8;
        cfg.transformer.num_heads = 2;
        auto model = build_model<double>(cfg, 11);
        Inputs enc_in = {rand_t({1, 4, 8}, rng)};
        for (const auto& [name, p] : model.params.items()) {
            if (name.rfind("fuse.enc0.block", 0) == 0) enc_in.push_back(p);
        }
        auto& m = model;
        s.check("encoder_stack",
                [&m, cfg](const Inputs& x, Tape<double>* t) {
                    TokenSeq<double> seq{x[0], 16, 8, 8, 4, 4};
                    return encoder_stack(seq, cfg.transformer, m.stage_encoders[0], t).tokens;
                },
                enc_in, 1e-5, 1e-4, 6);

        Inputs dec_in = {rand_t({1, 4, 8}, rng), rand_t({1, 4, 8}, rng)};
        for (const auto& [name, p] : model.params.items()) {
            if (name.rfind("fuse.dec0.block", 0) == 0) dec_in.push_back(p);
        }
        s.check("decoder_stack",
                [&m, cfg](const Inputs& x, Tape<double>* t) {
                    TokenSeq<double> d0{x[0], 16, 8, 8, 4, 4};
                    TokenSeq<double> mem{x[1], 16, 8, 8, 4, 4};
                    return decoder_stack(d0, mem, cfg.transformer, m.decoders[0], t).tokens;
                },
                dec_in, 1e-5, 1e-4, 6);

        Inputs embed_in = {rand_t({1, 16, 8, 8}, rng), m.stage_embeds[0].weight};
        if (m.stage_embeds[0].pos) embed_in.push_back(m.stage_embeds[0].pos);
        s.check("patch_embed",
                [&m, cfg](const Inputs& x, Tape<double>* t) {
                    return patch_embed(x[0], cfg.transformer, m.stage_embeds[0], t).tokens;
                },
                embed_in, 1e-5, 1e-4, 12);
        s.check("patch_unembed",
                [&m](const Inputs& x, Tape<double>* t) {
                    TokenSeq<double> seq{x[0], 16, 16, 16, 8, 8};
                    return patch_unembed(seq, m.unembed_w, t);
                },
                {rand_t({1, 4, 8}, rng), m.unembed_w}, 1e-5, 1e-4, 12);
        Inputs up_in = {rand_t({1, 16, 4, 4}, rng)};
        for (const auto& u : m.upsample) {
            up_in.push_back(u.conv_w);
            up_in.push_back(u.conv_b);
        }
        s.check("subpixel_upsample",
                [&m](const Inputs& x, Tape<double>* t) { return subpixel_upsample(x[0], m.cfg.scale, m.upsample, t); },
                up_in, 1e-5, 1e-4, 12);
    }

    // --- harness sanity: a corrupted backward must be detected ---
    s.check("harness_detects_fault",
            [](const Inputs& x, Tape<double>* t) {
                // sigmoid with its backward deliberately scaled by 1.01
                auto out = zeros<double>(x[0]->shape);
                for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = detail::sigmoid_fwd(x[0]->data[i]);
                if (t && x[0]->requires_grad) {
                    x[0]->ensure_grad();
                    out->requires_grad = true;
                    out->ensure_grad();
                    auto xi = x[0];
                    t->record("bad_sigmoid", out.get(), [xi, out] {
                        for (std::size_t i = 0; i < out->numel(); ++i) {
                            const double s = out->data[i];
                            xi->grad[i] += 1.01 * out->grad[i] * s * (1.0 - s);
                        }
                    });
                }
                return out;
            },
            {rand_t({3, 5}, rng, -2, 2)}, 1e-5, 1e-4, 0, true);

    // --- assembled toy model, sampled coordinates ---
    {
        auto cfg = toy_model_config(2, 8);
        auto model = build_model<double>(cfg, 5);
        auto x = rand_t({1, 3, 8, 8}, rng, 0.05, 0.95);
        auto target = rand_t({1, 3, 16, 16}, rng, 0.0, 1.0);
        Inputs inputs = {x};
        for (const auto& [name, p] : model.params.items()) inputs.push_back(p);
        auto& m = model;
        auto f = [&m, target](const Inputs& xs, Tape<double>* tape) {
            auto y = m.forward(xs[0], tape);
            auto d = sub(y, target, tape);
            return sum_all(mul(d, d, tape), tape);
        };
        auto rep = grad_check(f, inputs, 1e-5, 1e-3, 2, 99);
        s.os << (rep.pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(28) << "full_model_end_to_end"
             << " max_rel_err=" << std::scientific << std::setprecision(3) << rep.max_rel_err << std::defaultfloat
             << " (" << rep.checked << " coords)\n";
        if (!rep.pass) ++s.failures;
    }

    return s.failures;
}

}  // namespace csasr
