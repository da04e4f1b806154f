#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>

#include "csasr/config.hpp"
#include "csasr/dataset.hpp"
#include "csasr/image.hpp"
#include "csasr/model.hpp"
#include "csasr/reference.hpp"
#include "csasr/suites.hpp"
#include "csasr/trainer.hpp"

namespace fs = std::filesystem;

namespace csasr {

namespace {

struct Runner {
    std::ostream& os;
    int failures = 0;

    void run(const std::string& name, const std::function<void()>& fn) {
        try {
            fn();
            os << "[PASS] " << name << "\n";
        } catch (const std::exception& e) {
            os << "[FAIL] " << name << ": " << e.what() << "\n";
            ++failures;
        }
    }
};

void expect(bool cond, const std::string& what) {
    if (!cond) throw ValueError(what);
}

void expect_near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
        throw ValueError(what + ": got " + std::to_string(got) + ", want " + std::to_string(want) + " +- " +
                         std::to_string(tol));
    }
}

template <typename T>
void expect_all_near(const TensorPtr<T>& got, const std::vector<T>& want, double tol, const std::string& what) {
    expect(got->data.size() == want.size(), what + ": size mismatch");
    for (std::size_t i = 0; i < want.size(); ++i) {
        expect_near(static_cast<double>(got->data[i]), static_cast<double>(want[i]), tol,
                    what + "[" + std::to_string(i) + "]");
    }
}

TensorPtr<float> randf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = zeros<float>(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

fs::path scratch_dir() {
    auto p = fs::temp_directory_path() / "csasr_selftest";
    fs::create_directories(p);
    return p;
}

ImageF32 synth_image(int h, int w, std::uint64_t seed) {
    ImageF32 img;
    img.channels = 3;
    img.height = h;
    img.width = w;
    img.samples.resize(static_cast<std::size_t>(3) * h * w);
    Rng rng(seed);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double wave = 0.5 + 0.3 * std::sin(0.7 * x + 1.3 * y + c) + 0.2 * rng.uniform(-0.5, 0.5);
                img.at(c, y, x) = static_cast<float>(std::clamp(wave, 0.0, 1.0));
            }
    return img;
}

void register_tensor_checks(Runner& r) {
    r.run("matmul identity", [] {
        auto i2 = tensor_from<float>({2, 2}, {1, 0, 0, 1});
        auto a = tensor_from<float>({2, 2}, {1, 2, 3, 4});
        expect_all_near(matmul(i2, a, (Tape<float>*)nullptr), {1, 2, 3, 4}, 0, "I2*A");
    });
    r.run("matmul 1x2 * 2x1", [] {
        auto a = tensor_from<float>({1, 2}, {1, 2});
        auto b = tensor_from<float>({2, 1}, {3, 4});
        expect_all_near(matmul(a, b, (Tape<float>*)nullptr), {11}, 0, "dot");
    });
    r.run("matmul triple-loop oracle", [] {
        Rng rng(1);
        auto a = zeros<double>({4, 5});
        auto b = zeros<double>({5, 3});
        fill_uniform(a, rng, -1, 1);
        fill_uniform(b, rng, -1, 1);
        auto got = matmul(a, b, (Tape<double>*)nullptr);
        auto want = reference::matmul(a->data, b->data, 4, 5, 3);
        for (std::size_t i = 0; i < want.size(); ++i) expect_near(got->data[i], want[i], 1e-6, "matmul oracle");
    });
    r.run("conv2d all-ones summation", [] {
        auto x = full<float>({1, 1, 3, 3}, 1.0f);
        auto w = full<float>({1, 1, 3, 3}, 1.0f);
        auto y = conv2d(x, w, TensorPtr<float>(), 1, 1, (Tape<float>*)nullptr);
        expect_near(y->data[4], 9.0, 0, "center");
        expect_near(y->data[0], 4.0, 0, "corner");
        expect_near(y->data[2], 4.0, 0, "corner");
        auto want = reference::conv2d_single(std::vector<double>(9, 1.0), 1, 3, 3, std::vector<double>(9, 1.0), 1, 3,
                                             3, {}, 1);
        for (int i = 0; i < 9; ++i) expect_near(y->data[i], want[i], 1e-6, "direct summation");
    });
    r.run("conv2d identity kernel", [] {
        Rng rng(2);
        auto x = randf({1, 1, 4, 4}, rng);
        auto w = tensor_from<float>({1, 1, 1, 1}, {1.0f});
        auto y = conv2d(x, w, TensorPtr<float>(), 0, 1, (Tape<float>*)nullptr);
        expect_all_near(y, x->data, 0, "identity kernel");
    });
    r.run("conv2d zero kernel", [] {
        Rng rng(3);
        auto x = randf({1, 2, 4, 4}, rng);
        auto w = zeros<float>({3, 2, 3, 3});
        auto b = zeros<float>({3});
        auto y = conv2d(x, w, b, 1, 1, (Tape<float>*)nullptr);
        for (float v : y->data) expect(v == 0.0f, "zero kernel output");
    });
    r.run("activation values", [] {
        auto x = tensor_from<float>({4}, {0.0f, -2.0f, 3.0f, 0.0f});
        expect_near(sigmoid(x, (Tape<float>*)nullptr)->data[0], 0.5, 1e-7, "sigmoid(0)");
        expect_near(relu(x, (Tape<float>*)nullptr)->data[1], 0.0, 0, "relu(-2)");
        expect_near(relu(x, (Tape<float>*)nullptr)->data[2], 3.0, 0, "relu(3)");
        expect_near(gelu(x, (Tape<float>*)nullptr)->data[0], 0.0, 0, "gelu(0)");
    });
    r.run("gelu erf closed form", [] {
        for (double v : {-2.0, -1.0, 1.0, 2.0}) {
            auto x = scalar_tensor<double>(v);
            const double want = 0.5 * v * (1.0 + static_cast<double>(std::erf(static_cast<long double>(v) /
                                                                              std::sqrt(2.0L))));
            expect_near(gelu(x, (Tape<double>*)nullptr)->data[0], want, 1e-12, "gelu erf form");
        }
    });
    r.run("layer_norm closed forms", [] {
        auto g1 = full<float>({2}, 1.0f);
        auto b0 = zeros<float>({2});
        auto c = full<float>({3, 2}, 0.7f);
        for (float v : layer_norm(c, g1, b0, 1e-6f, (Tape<float>*)nullptr)->data)
            expect_near(v, 0.0, 1e-5, "constant row");
        auto x = tensor_from<float>({1, 2}, {1.0f, -1.0f});
        auto y = layer_norm(x, g1, b0, 1e-6f, (Tape<float>*)nullptr);
        expect_near(y->data[0], 1.0, 1e-5, "[1,-1] norm");
        expect_near(y->data[1], -1.0, 1e-5, "[1,-1] norm");
        auto g0 = zeros<float>({2});
        auto beta = tensor_from<float>({2}, {0.3f, -0.4f});
        auto z = layer_norm(x, g0, beta, 1e-6f, (Tape<float>*)nullptr);
        expect_near(z->data[0], 0.3, 1e-7, "beta recovery");
        expect_near(z->data[1], -0.4, 1e-7, "beta recovery");
    });
    r.run("softmax closed forms", [] {
        auto a = tensor_from<float>({1, 2}, {0.0f, 0.0f});
        expect_all_near(softmax_last_axis(a, (Tape<float>*)nullptr), {0.5f, 0.5f}, 1e-7, "zeros");
        auto b = tensor_from<float>({1, 2}, {1000.0f, 1000.0f});
        expect_all_near(softmax_last_axis(b, (Tape<float>*)nullptr), {0.5f, 0.5f}, 1e-7, "large shift");
        auto c = tensor_from<float>({2, 1}, {3.0f, -7.0f});
        expect_all_near(softmax_last_axis(c, (Tape<float>*)nullptr), {1.0f, 1.0f}, 1e-7, "singleton");
    });
    r.run("pool arithmetic", [] {
        auto x = tensor_from<float>({1, 1, 2, 2}, {1, 3, 5, 7});
        expect_near(pool(x, PoolMode::ChannelMax, (Tape<float>*)nullptr)->data[0], 7, 0, "channel max");
        expect_near(pool(x, PoolMode::ChannelAvg, (Tape<float>*)nullptr)->data[0], 4, 0, "channel avg");
        auto c = full<float>({1, 3, 2, 2}, 0.25f);
        for (auto mode : {PoolMode::ChannelMax, PoolMode::ChannelAvg, PoolMode::SpatialMax, PoolMode::SpatialAvg})
            for (float v : pool(c, mode, (Tape<float>*)nullptr)->data) expect_near(v, 0.25, 0, "constant pool");
        auto s = tensor_from<float>({1, 2, 1, 1}, {2.0f, -4.0f});
        expect_near(pool(s, PoolMode::SpatialMax, (Tape<float>*)nullptr)->data[0], 2, 0, "spatial max");
        expect_near(pool(s, PoolMode::SpatialAvg, (Tape<float>*)nullptr)->data[0], -1, 0, "spatial avg");
    });
    r.run("pixel_shuffle convention", [] {
        auto x = tensor_from<float>({1, 4, 1, 1}, {1, 2, 3, 4});
        expect_all_near(pixel_shuffle(x, 2, (Tape<float>*)nullptr), {1, 2, 3, 4}, 0, "(1,4,1,1) r2");
        Rng rng(4);
        auto y = randf({1, 3, 2, 2}, rng);
        expect_all_near(pixel_shuffle(y, 1, (Tape<float>*)nullptr), y->data, 0, "r1 identity");
        auto z = randf({2, 8, 3, 3}, rng);
        auto round = pixel_unshuffle(pixel_shuffle(z, 2, (Tape<float>*)nullptr), 2, (Tape<float>*)nullptr);
        expect(round->data == z->data, "shuffle/unshuffle bit-exact");
    });
    r.run("backward linear and quadratic", [] {
        auto x = tensor_from<float>({3}, {1, 2, 3}, true);
        Tape<float> tape;
        tape.backward(sum_all(x, &tape));
        expect_all_near(x, {1, 1, 1}, 0, "grad of sum");
        auto y = tensor_from<float>({2}, {1, 2}, true);
        Tape<float> tape2;
        tape2.backward(sum_all(mul(y, y, &tape2), &tape2));
        expect(y->grad[0] == 2.0f && y->grad[1] == 4.0f, "grad of sum(x*x)");
    });
    r.run("gradient accumulation across fan-out", [] {
        auto x = tensor_from<float>({2}, {3, 5}, true);
        Tape<float> tape;
        auto y = add(x, x, &tape);
        tape.backward(sum_all(y, &tape));
        expect(x->grad[0] == 2.0f && x->grad[1] == 2.0f, "fan-out grads add");
    });
    r.run("row-major index round-trip", [] {
        const Shape shape{2, 3, 4, 5};
        const Shape str = shape_strides(shape);
        std::size_t flat = 0;
        for (std::size_t i0 = 0; i0 < 2; ++i0)
            for (std::size_t i1 = 0; i1 < 3; ++i1)
                for (std::size_t i2 = 0; i2 < 4; ++i2)
                    for (std::size_t i3 = 0; i3 < 5; ++i3, ++flat)
                        expect(i0 * str[0] + i1 * str[1] + i2 * str[2] + i3 * str[3] == flat, "stride mapping");
    });
}

void register_csa_checks(Runner& r) {
    CsaConfig cfg;
    cfg.channels = 16;
    cfg.reduction = 16;
    r.run("channel_attention zero params -> 0.5", [cfg] {
        Rng rng(5);
        ChannelAttentionParams<float> p{zeros<float>({1, 1}), zeros<float>({1}), zeros<float>({1, 1}),
                                        zeros<float>({1})};
        auto f = randf({2, 16, 4, 4}, rng);
        for (float v : channel_attention(f, cfg, p, (Tape<float>*)nullptr)->data)
            expect_near(v, 0.5, 1e-7, "sigmoid(0)");
    });
    r.run("channel_attention equal channels", [cfg] {
        Rng rng(6);
        ChannelAttentionParams<float> p{randf({1, 1}, rng), randf({1}, rng), randf({1, 1}, rng), randf({1}, rng)};
        auto one = randf({1, 1, 4, 4}, rng);
        auto f = zeros<float>({1, 16, 4, 4});
        for (int c = 0; c < 16; ++c) std::copy(one->data.begin(), one->data.end(), f->data.begin() + c * 16);
        auto mc = channel_attention(f, cfg, p, (Tape<float>*)nullptr);
        for (int c = 0; c < 16; ++c) expect_near(mc->data[c], mc->data[0], 0, "all gate entries equal");
    });
    r.run("channel_attention scripted oracle", [cfg] {
        Rng rng(7);
        ChannelAttentionParams<float> p{randf({1, 1}, rng), randf({1}, rng), randf({1, 1}, rng), randf({1}, rng)};
        auto f = randf({1, 16, 4, 4}, rng);
        auto got = channel_attention(f, cfg, p, (Tape<float>*)nullptr);
        std::vector<double> fd(f->data.begin(), f->data.end());
        auto want = reference::channel_attention(fd, 16, 4, 4, {p.fc1_w->data.begin(), p.fc1_w->data.end()},
                                                 {p.fc1_b->data.begin(), p.fc1_b->data.end()}, 1,
                                                 {p.fc2_w->data.begin(), p.fc2_w->data.end()}, p.fc2_b->data[0]);
        for (int c = 0; c < 16; ++c) expect_near(got->data[c], want[c], 1e-6, "eq 1-2 oracle");
    });
    r.run("spatial_attention closed forms", [cfg] {
        Rng rng(8);
        SpatialAttentionParams<float> zp{zeros<float>({1, 1, 7, 7}), zeros<float>({1})};
        auto f = randf({1, 8, 9, 9}, rng);
        for (float v : spatial_attention(f, cfg, zp, (Tape<float>*)nullptr)->data)
            expect_near(v, 0.5, 1e-7, "zero conv -> 0.5");
        SpatialAttentionParams<float> p{randf({1, 1, 7, 7}, rng), randf({1}, rng)};
        auto c = full<float>({1, 8, 9, 9}, 0.3f);
        auto ms = spatial_attention(c, cfg, p, (Tape<float>*)nullptr);
        // constant input: interior gate values equal (index 3..5 each axis)
        const float ref = ms->data[4 * 9 + 4];
        for (int y = 3; y <= 5; ++y)
            for (int x = 3; x <= 5; ++x) expect_near(ms->data[y * 9 + x], ref, 1e-6, "interior constant");
    });
    r.run("spatial_attention scripted oracle", [cfg] {
        Rng rng(9);
        SpatialAttentionParams<float> p{randf({1, 1, 7, 7}, rng), randf({1}, rng)};
        auto f = randf({1, 8, 9, 9}, rng);
        auto got = spatial_attention(f, cfg, p, (Tape<float>*)nullptr);
        auto want = reference::spatial_attention({f->data.begin(), f->data.end()}, 8, 9, 9,
                                                 {p.conv_w->data.begin(), p.conv_w->data.end()}, 7,
                                                 p.conv_b->data[0]);
        for (std::size_t i = 0; i < want.size(); ++i) expect_near(got->data[i], want[i], 1e-6, "eq 3 oracle");
    });
    r.run("csa_block algebra", [cfg] {
        Rng rng(10);
        ChannelAttentionParams<float> zca{zeros<float>({1, 1}), zeros<float>({1}), zeros<float>({1, 1}),
                                          zeros<float>({1})};
        SpatialAttentionParams<float> zsa{zeros<float>({1, 1, 7, 7}), zeros<float>({1})};
        auto f0 = zeros<float>({1, 16, 8, 8});
        for (float v : csa_block(f0, cfg, zca, zsa, (Tape<float>*)nullptr)->data) expect(v == 0.0f, "zero input");
        auto f = randf({1, 16, 8, 8}, rng);
        auto y = csa_block(f, cfg, zca, zsa, (Tape<float>*)nullptr);
        for (std::size_t i = 0; i < y->numel(); ++i)
            expect_near(y->data[i], 0.25 * f->data[i], 1e-6, "0.25*f with 0.5 gates");
        ChannelAttentionParams<float> rca{randf({1, 1}, rng), randf({1}, rng), randf({1, 1}, rng), randf({1}, rng)};
        SpatialAttentionParams<float> rsa{randf({1, 1, 7, 7}, rng), randf({1}, rng)};
        auto z = csa_block(f, cfg, rca, rsa, (Tape<float>*)nullptr);
        for (std::size_t i = 0; i < z->numel(); ++i)
            expect(std::abs(z->data[i]) <= std::abs(f->data[i]) + 1e-7f, "|out| <= |f|");
    });
    r.run("csa_fe_stage residual identity", [cfg] {
        Rng rng(11);
        CsaStageParams<float> p{zeros<float>({16, 16, 3, 3}),
                                zeros<float>({16}),
                                {zeros<float>({1, 1}), zeros<float>({1}), zeros<float>({1, 1}), zeros<float>({1})},
                                {zeros<float>({1, 1, 7, 7}), zeros<float>({1})}};
        auto f = randf({1, 16, 8, 8}, rng);
        auto y = csa_fe_stage(f, cfg, p, (Tape<float>*)nullptr);
        expect_all_near(y, f->data, 1e-7, "zero stage params -> identity");
        expect(y->shape == f->shape, "stage preserves shape");
    });
}

void register_transformer_checks(Runner& r) {
    TransformerConfig tc;
    tc.embed_dim = 8;
    tc.num_heads = 2;
    r.run("patch partition arithmetic", [] {
        Rng rng(12);
        auto f = randf({1, 8, 8, 8}, rng);
        auto raw = extract_patches(f, 4, 4, (Tape<float>*)nullptr);
        expect(raw->shape == Shape{1, 4, 128}, "T=4 tokens of 128 raw values");
    });
    r.run("patch_embed zero projection", [tc] {
        Rng rng(13);
        PatchEmbedParams<float> p;
        p.weight = zeros<float>({128, 8});
        p.pos = randf({4, 8}, rng);
        p.pos_grid_h = p.pos_grid_w = 2;
        auto f = randf({1, 8, 8, 8}, rng);
        TransformerConfig cfg = tc;
        cfg.patch_h = cfg.patch_w = 4;
        auto seq = patch_embed(f, cfg, p, (Tape<float>*)nullptr);
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t d = 0; d < 8; ++d)
                expect_near(seq.tokens->data[t * 8 + d], p.pos->data[t * 8 + d], 0, "tokens = positional table");
    });
    r.run("embed/unembed round trip", [] {
        // square projection = identity, positional off -> exact inverse
        Rng rng(14);
        const std::size_t L = 2 * 2 * 3;
        PatchEmbedParams<float> p;
        p.weight = zeros<float>({L, L});
        for (std::size_t i = 0; i < L; ++i) p.weight->data[i * L + i] = 1.0f;
        auto unembed_w = p.weight;  // identity is its own inverse
        TransformerConfig cfg;
        cfg.patch_h = cfg.patch_w = 2;
        cfg.embed_dim = static_cast<int>(L);
        cfg.num_heads = 2;
        auto f = randf({2, 3, 4, 4}, rng);
        auto seq = patch_embed(f, cfg, p, (Tape<float>*)nullptr);
        auto back = patch_unembed(seq, unembed_w, (Tape<float>*)nullptr);
        expect(back->data == f->data, "bit-exact reconstruction");
    });
    r.run("msa singleton key", [tc] {
        Rng rng(15);
        AttentionParams<float> p{randf({8, 8}, rng), randf({8}, rng), randf({8, 8}, rng), randf({8}, rng),
                                 randf({8, 8}, rng), randf({8}, rng), randf({8, 8}, rng), randf({8}, rng)};
        auto kv = randf({1, 1, 8}, rng);
        auto q1 = randf({1, 3, 8}, rng);
        auto q2 = randf({1, 3, 8}, rng);
        auto y1 = multi_head_attention(q1, kv, tc, p, (Tape<float>*)nullptr);
        auto y2 = multi_head_attention(q2, kv, tc, p, (Tape<float>*)nullptr);
        expect_all_near(y1, y2->data, 1e-6, "output independent of query content");
    });
    r.run("msa key permutation invariance", [tc] {
        Rng rng(16);
        AttentionParams<float> p{randf({8, 8}, rng), randf({8}, rng), randf({8, 8}, rng), randf({8}, rng),
                                 randf({8, 8}, rng), randf({8}, rng), randf({8, 8}, rng), randf({8}, rng)};
        auto q = randf({1, 2, 8}, rng);
        auto kv = randf({1, 4, 8}, rng);
        auto kvp = zeros<float>({1, 4, 8});
        const std::size_t perm[4] = {2, 0, 3, 1};
        for (std::size_t t = 0; t < 4; ++t)
            std::copy(kv->data.begin() + perm[t] * 8, kv->data.begin() + (perm[t] + 1) * 8,
                      kvp->data.begin() + t * 8);
        auto y1 = multi_head_attention(q, kv, tc, p, (Tape<float>*)nullptr);
        auto y2 = multi_head_attention(q, kvp, tc, p, (Tape<float>*)nullptr);
        expect_all_near(y1, y2->data, 1e-5, "kv order irrelevant");
    });
    r.run("msa scripted oracle", [tc] {
        Rng rng(17);
        AttentionParams<double> p{zeros<double>({8, 8}), zeros<double>({8}), zeros<double>({8, 8}),
                                  zeros<double>({8}), zeros<double>({8, 8}), zeros<double>({8}),
                                  zeros<double>({8, 8}), zeros<double>({8})};
        for (auto& t : {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}) fill_uniform(t, rng, -1, 1);
        auto x = zeros<double>({1, 3, 8});
        fill_uniform(x, rng, -1, 1);
        auto got = multi_head_attention(x, x, tc, p, (Tape<double>*)nullptr);
        auto want = reference::attention(x->data, x->data, 3, 3, 8, 2, p.wq->data, p.bq->data, p.wk->data, p.bk->data,
                                         p.wv->data, p.bv->data, p.wo->data, p.bo->data);
        for (std::size_t i = 0; i < want.size(); ++i) expect_near(got->data[i], want[i], 1e-6, "attention oracle");
    });
    r.run("sgfn closed forms", [tc] {
        Rng rng(18);
        SgfnParams<float> p{randf({8, 16}, rng), randf({16}, rng), zeros<float>({8, 1, 3, 3}), zeros<float>({8}),
                            randf({8, 8}, rng), randf({8}, rng)};
        auto x = randf({1, 4, 8}, rng);
        auto y = sgfn(x, 2, 2, tc, p, (Tape<float>*)nullptr);
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t d = 0; d < 8; ++d)
                expect_near(y->data[t * 8 + d], p.b2->data[d], 1e-6, "zero dw kernel -> bias");
        SgfnParams<float> z{zeros<float>({8, 16}), zeros<float>({16}), randf({8, 1, 3, 3}, rng), randf({8}, rng),
                            zeros<float>({8, 8}), randf({8}, rng)};
        auto y2 = sgfn(x, 2, 2, tc, z, (Tape<float>*)nullptr);
        for (std::size_t t = 0; t < 4; ++t)
            for (std::size_t d = 0; d < 8; ++d)
                expect_near(y2->data[t * 8 + d], z.b2->data[d], 1e-6, "zero projections -> bias");
    });
    r.run("sgfn scripted oracle", [tc] {
        Rng rng(19);
        SgfnParams<double> p{zeros<double>({8, 16}), zeros<double>({16}), zeros<double>({8, 1, 3, 3}),
                             zeros<double>({8}), zeros<double>({8, 8}), zeros<double>({8})};
        for (auto& t : {p.w1, p.b1, p.dw_w, p.dw_b, p.w2, p.b2}) fill_uniform(t, rng, -1, 1);
        auto x = zeros<double>({1, 4, 8});
        fill_uniform(x, rng, -1, 1);
        auto got = sgfn(x, 2, 2, tc, p, (Tape<double>*)nullptr);
        auto want = reference::sgfn(x->data, 4, 8, 2, 2, p.w1->data, p.b1->data, 16, p.dw_w->data, p.dw_b->data,
                                    p.w2->data, p.b2->data);
        for (std::size_t i = 0; i < want.size(); ++i) expect_near(got->data[i], want[i], 1e-6, "eq 9 oracle");
    });
    r.run("encoder/decoder residual identity", [] {
        auto cfg = toy_model_config(2, 8);
        cfg.transformer.embed_dim = 8;
        cfg.transformer.num_heads = 2;
        auto m = build_model<float>(cfg, 21);
        // zero every MSA output projection and SGFN final projection
        for (const auto& [name, p] : m.params.items()) {
            if (name.find(".o.weight") != std::string::npos || name.find(".o.bias") != std::string::npos ||
                name.find("proj_out") != std::string::npos) {
                std::fill(p->data.begin(), p->data.end(), 0.0f);
            }
        }
        Rng rng(22);
        TokenSeq<float> seq{randf({1, 4, 8}, rng), 16, 8, 8, 4, 4};
        auto enc = encoder_stack(seq, cfg.transformer, m.stage_encoders[0], (Tape<float>*)nullptr);
        expect_all_near(enc.tokens, seq.tokens->data, 1e-6, "encoder identity");
        TokenSeq<float> mem{randf({1, 4, 8}, rng), 16, 8, 8, 4, 4};
        auto dec = decoder_stack(seq, mem, cfg.transformer, m.decoders[0], (Tape<float>*)nullptr);
        expect_all_near(dec.tokens, seq.tokens->data, 1e-6, "decoder identity");
        // empty stack is the identity by construction
        auto empty = encoder_stack(seq, cfg.transformer, {}, (Tape<float>*)nullptr);
        expect(empty.tokens->data == seq.tokens->data, "L_e=0 identity");
    });
}

void register_model_checks(Runner& r) {
    r.run("build_model determinism", [] {
        auto cfg = toy_model_config(2, 16);
        auto a = build_model<float>(cfg, 77);
        auto b = build_model<float>(cfg, 77);
        expect(a.params.size() == b.params.size(), "same structure");
        for (std::size_t i = 0; i < a.params.size(); ++i) {
            expect(a.params.items()[i].second->data == b.params.items()[i].second->data, "bit-identical params");
        }
    });
    r.run("build_model rejects bad scale", [] {
        auto cfg = toy_model_config(2, 16);
        cfg.scale = 5;
        try {
            build_model<float>(cfg, 0);
            throw IoError("unreachable");
        } catch (const ValueError&) {
        }
    });
    r.run("forward shape contract", [] {
        for (int s : {2, 3, 4}) {
            auto cfg = toy_model_config(s, 48);
            auto m = build_model<float>(cfg, 1);
            auto x = zeros<float>({1, 3, 48, 48});
            auto y = m.forward(x, nullptr);
            expect(y->shape == Shape({1, 3, static_cast<std::size_t>(48 * s), static_cast<std::size_t>(48 * s)}),
                   "shape (1,3," + std::to_string(48 * s) + "," + std::to_string(48 * s) + ")");
        }
    });
    r.run("subpixel_upsample shapes", [] {
        Rng rng(23);
        auto cfg = toy_model_config(3, 16);
        cfg.feat_channels = 8;
        cfg.csa.channels = 8;
        auto m = build_model<float>(cfg, 2);
        auto f = randf({1, 8, 6, 6}, rng);
        auto y = subpixel_upsample(f, 3, m.upsample, (Tape<float>*)nullptr);
        expect(y->shape == Shape({1, 8, 18, 18}), "(1,8,6,6) x3 -> (1,8,18,18)");
        for (auto& u : m.upsample) {
            std::fill(u.conv_w->data.begin(), u.conv_w->data.end(), 0.0f);
            std::fill(u.conv_b->data.begin(), u.conv_b->data.end(), 0.0f);
        }
        for (float v : subpixel_upsample(f, 3, m.upsample, (Tape<float>*)nullptr)->data)
            expect(v == 0.0f, "zero conv -> zero output");
        auto cfg4 = toy_model_config(4, 16);
        auto m4 = build_model<float>(cfg4, 2);
        expect(m4.upsample.size() == 2 && m4.upsample[0].factor == 2 && m4.upsample[1].factor == 2,
               "x4 = two cascaded x2 stages");
    });
    r.run("l1_loss values and gradient", [] {
        auto a = tensor_from<float>({1, 1, 1, 2}, {1.0f, 4.0f});
        auto b = tensor_from<float>({1, 1, 1, 2}, {0.0f, 1.0f});
        expect_near(l1_loss(a, b, (Tape<float>*)nullptr)->data[0], 2.0, 1e-7, "mean(|1|,|3|)");
        expect_near(l1_loss(a, a, (Tape<float>*)nullptr)->data[0], 0.0, 0, "identical");
        auto sr = tensor_from<float>({2}, {0.5f, -0.5f}, true);
        auto hr = zeros<float>({2});
        Tape<float> tape;
        tape.backward(l1_loss(sr, hr, &tape));
        expect(sr->grad[0] == 0.5f && sr->grad[1] == -0.5f, "sign/K gradient");
    });
    r.run("parameter coverage after one backward", [] {
        auto cfg = toy_model_config(2, 8);
        auto m = build_model<float>(cfg, 3);
        Rng rng(24);
        auto x = randf({1, 3, 8, 8}, rng, 0, 1);
        auto hr = randf({1, 3, 16, 16}, rng, 0, 1);
        Tape<float> tape;
        auto loss = l1_loss(m.forward(x, &tape), hr, &tape);
        tape.backward(loss);
        for (const auto& [name, p] : m.params.items()) {
            expect(p->has_grad(), "grad populated: " + name);
            bool nonzero = false;
            for (float g : p->grad) nonzero |= (g != 0.0f);
            expect(nonzero, "grad reaches " + name);
        }
    });
}

void register_imaging_checks(Runner& r) {
    r.run("image save/load round trip", [] {
        auto dir = scratch_dir();
        ImageU8 img;
        img.width = img.height = 8;
        img.channels = 3;
        Rng rng(25);
        img.pixels.resize(8 * 8 * 3);
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(256));
        const std::string path = (dir / "roundtrip.png").string();
        save_image(path, img);
        auto back = load_image(path);
        expect(back.pixels == img.pixels, "identical pixel array");
    });
    r.run("rounding rule 0.5 -> 128", [] {
        ImageF32 img;
        img.channels = 3;
        img.height = img.width = 1;
        img.samples = {0.5f, 0.0f, 1.0f};
        auto u8 = to_u8(img);
        expect(u8.pixels[0] == 128, "0.5*255 rounds away from zero");
        expect(u8.pixels[1] == 0 && u8.pixels[2] == 255, "endpoints");
    });
    r.run("non-image load is an error", [] {
        auto dir = scratch_dir();
        const std::string path = (dir / "not_an_image.png").string();
        std::ofstream(path) << "plainly not a raster";
        try {
            load_image(path);
            throw ValueError("load unexpectedly succeeded");
        } catch (const IoError&) {
        }
    });
    r.run("bicubic constants and identity", [] {
        ImageF32 c;
        c.channels = 3;
        c.height = c.width = 7;
        c.samples.assign(3 * 7 * 7, 0.37f);
        for (float v : bicubic_resize(c, 5, 11).samples) expect_near(v, 0.37, 1e-6, "constant preserved");
        auto img = synth_image(8, 8, 26);
        auto same = bicubic_resize(img, 8, 8);
        for (std::size_t i = 0; i < img.samples.size(); ++i)
            expect_near(same.samples[i], img.samples[i], 1e-6, "unit scale identity");
    });
    r.run("bicubic ramp oracle", [] {
        ImageF32 img;
        img.channels = 1;
        img.height = img.width = 8;
        img.samples.resize(64);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) img.samples[y * 8 + x] = static_cast<float>(y * 8 + x) / 63.0f;
        auto got = bicubic_resize(img, 4, 4);
        auto want = reference::bicubic({img.samples.begin(), img.samples.end()}, 8, 8, 4, 4);
        for (int i = 0; i < 16; ++i) expect_near(got.samples[i], want[i], 1e-5, "direct summation oracle");
    });
    r.run("psnr closed forms", [] {
        auto a = synth_image(8, 8, 27);
        expect(std::isinf(psnr(a, a, 1.0)), "identical -> +inf sentinel");
        ImageF32 b = a;
        for (auto& v : b.samples) v += 1.0f;  // uniform difference of 1 on a peak-255 scale... scaled below
        expect_near(psnr(a, b, 255.0), 20.0 * std::log10(255.0), 1e-3, "uniform unit difference");
        ImageF32 c = a, d = a;
        for (std::size_t i = 0; i < c.samples.size(); ++i) {
            c.samples[i] += 0.02f;
            d.samples[i] += 0.01f;
        }
        expect_near(psnr(a, d, 1.0) - psnr(a, c, 1.0), 10.0 * std::log10(4.0), 1e-3, "MSE/4 -> +6.0206 dB");
    });
    r.run("ssim closed forms", [] {
        auto a = synth_image(16, 16, 28);
        expect_near(ssim(a, a), 1.0, 0, "ssim(a,a) = 1");
        ImageF32 u = a, v = a;
        u.samples.assign(u.samples.size(), 0.5f);
        v.samples.assign(v.samples.size(), 0.25f);
        expect_near(ssim(u, v), (2 * 0.5 * 0.25 + 1e-4) / (0.25 * 0.25 + 0.5 * 0.5 + 1e-4), 1e-6,
                    "constant closed form");
        auto b = synth_image(16, 16, 29);
        expect_near(ssim(a, b), ssim(b, a), 1e-9, "symmetry");
    });
    r.run("degrade crop rule", [] {
        auto img = synth_image(256, 256, 30);
        auto p2 = degrade(img, 2);
        expect(p2.hr.height == 256 && p2.lr.height == 128, "x2: 256 -> 128");
        auto p3 = degrade(img, 3);
        expect(p3.hr.height == 255 && p3.hr.width == 255 && p3.lr.height == 85, "x3: crop 255, LR 85");
        ImageF32 c;
        c.channels = 3;
        c.height = c.width = 12;
        c.samples.assign(3 * 12 * 12, 0.6f);
        auto pc = degrade(c, 2);
        for (float v : pc.lr.samples) expect_near(v, 0.6, 1e-6, "constant degrades to constant");
    });
}

void register_dataset_checks(Runner& r) {
    r.run("scan + splits on a synthetic tree", [] {
        auto root = scratch_dir() / "tree";
        fs::remove_all(root);
        for (const std::string cls : {"beta", "alpha"}) {
            fs::create_directories(root / cls);
            for (int i = 0; i < 3; ++i) {
                save_image((root / cls / ("img" + std::to_string(i) + ".png")).string(),
                           to_u8(synth_image(16, 16, i)));
            }
        }
        auto index = scan_dataset(root.string());
        expect(index.entries.size() == 6 && index.class_names.size() == 2, "6 entries, 2 classes");
        expect(index.entries.front().class_name == "alpha", "lexicographic class order");
        auto s1 = make_splits(index, 9);
        auto s2 = make_splits(index, 9);
        expect(s1.train == s2.train && s1.val == s2.val && s1.test == s2.test, "seed-deterministic splits");
        std::vector<std::size_t> all;
        for (auto& v : {s1.train, s1.val, s1.test}) all.insert(all.end(), v.begin(), v.end());
        std::sort(all.begin(), all.end());
        expect(all == std::vector<std::size_t>({0, 1, 2, 3, 4, 5}), "partition of the index");
    });
    r.run("empty dataset root is an error", [] {
        auto root = scratch_dir() / "empty";
        fs::create_directories(root);
        try {
            scan_dataset(root.string());
            throw ValueError("scan unexpectedly succeeded");
        } catch (const IoError&) {
        }
    });
    r.run("split cardinalities for a 100-image class", [] {
        auto root = scratch_dir() / "hundred";
        if (!fs::exists(root / "only" / "img99.png")) {
            fs::create_directories(root / "only");
            for (int i = 0; i < 100; ++i) {
                char name[32];
                std::snprintf(name, sizeof name, "img%02d.png", i);
                save_image((root / "only" / name).string(), to_u8(synth_image(8, 8, 1000 + i)));
            }
        }
        auto index = scan_dataset(root.string());
        auto split = make_splits(index, 4);
        expect(split.test.size() == 50 && split.train.size() == 40 && split.val.size() == 10, "50/40/10 split");
    });
    r.run("batch sampling determinism", [] {
        auto root = scratch_dir() / "batching";
        if (!fs::exists(root / "c" / "a.png")) {
            fs::create_directories(root / "c");
            save_image((root / "c" / "a.png").string(), to_u8(synth_image(100, 100, 31)));
            save_image((root / "c" / "b.png").string(), to_u8(synth_image(100, 100, 32)));
        }
        auto index = scan_dataset(root.string());
        std::vector<std::size_t> split{0, 1};
        Rng r1(5), r2(5);
        auto b1 = next_batch(index, split, 2, 96, 6, r1);
        auto b2 = next_batch(index, split, 2, 96, 6, r2);
        expect(b1.size() == 6, "batch size honored");
        for (std::size_t i = 0; i < b1.size(); ++i) {
            expect(b1[i].lr.height == 48 && b1[i].hr.height == 96, "patch pair dims");
            expect(b1[i].lr.samples == b2[i].lr.samples && b1[i].crop_y == b2[i].crop_y, "identical batch sequence");
        }
    });
}

void register_trainer_checks(Runner& r) {
    r.run("adam first step and zero-grad no-op", [] {
        TrainConfig cfg;
        cfg.lr = 1e-4;
        ParamSet<double> ps;
        auto p = zeros<double>({1}, true);
        p->data[0] = 1.0;
        ps.add("p", p);
        auto st = AdamState<double>::init(ps);
        p->grad[0] = 1.0;
        adam_step(ps, st, cfg);
        expect_near(1.0 - p->data[0], 1e-4 / (1.0 + 1e-8), 1e-12, "first-step magnitude");
        for (int i = 0; i < 5; ++i) {
            p->grad[0] = 0.0;
            const double before = p->data[0];
            adam_step(ps, st, cfg);
            expect(p->data[0] == before, "zero gradient is a no-op");
        }
    });
    r.run("adam 10-step scripted oracle", [] {
        TrainConfig cfg;
        ParamSet<double> ps;
        auto p = zeros<double>({1}, true);
        p->data[0] = 0.5;
        ps.add("p", p);
        auto st = AdamState<double>::init(ps);
        Rng rng(33);
        std::vector<double> grads;
        for (int i = 0; i < 10; ++i) grads.push_back(rng.uniform(-1, 1));
        auto want = reference::adam_trace(0.5, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        for (int i = 0; i < 10; ++i) {
            p->grad[0] = grads[i];
            adam_step(ps, st, cfg);
            expect_near(p->data[0], want[i], 1e-10, "step " + std::to_string(i + 1));
        }
    });
    r.run("checkpoint round trip", [] {
        auto dir = scratch_dir();
        auto cfg = toy_model_config(2, 8);
        auto m = build_model<float>(cfg, 44);
        TrainState state;
        state.opt = AdamState<float>::init(m.params);
        state.epoch = 3;
        state.best_val_psnr = 21.5f;
        for (auto& t : state.opt.m) {
            Rng rr(7);
            fill_uniform(t, rr, -1, 1);
        }
        TrainConfig tcfg;
        const std::string p1 = (dir / "a.ckpt").string();
        const std::string p2 = (dir / "b.ckpt").string();
        save_checkpoint(p1, m, state, tcfg);
        auto ck = load_checkpoint(p1);
        for (std::size_t i = 0; i < m.params.size(); ++i) {
            expect(ck.model.params.items()[i].second->data == m.params.items()[i].second->data,
                   "tensor round trip bit-exact");
            expect(ck.state.opt.m[i]->data == state.opt.m[i]->data, "moment round trip");
        }
        save_checkpoint(p2, ck.model, ck.state, ck.train_cfg);
        std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        expect(s1 == s2, "save-load-save byte identical");
    });
}

}  // namespace

int run_selftest(std::ostream& os) {
    Runner r{os};
    register_tensor_checks(r);
    register_csa_checks(r);
    register_transformer_checks(r);
    register_model_checks(r);
    register_imaging_checks(r);
    register_dataset_checks(r);
    register_trainer_checks(r);
    os << (r.failures == 0 ? "selftest: all checks passed\n"
                           : "selftest: " + std::to_string(r.failures) + " check(s) failed\n");
    return r.failures;
}

}  // namespace csasr
