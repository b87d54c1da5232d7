#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gda/serialize.hpp"
#include "gda/synthesis.hpp"

using namespace gda;
using namespace gda::synth;
namespace fs = std::filesystem;

namespace {

bool same_data(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (long i = 0; i < a.numel(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

Tensor unit_rows(int n, int d, uint64_t seed) {
    Rng rng(seed);
    Tensor t = Tensor::randn({n, d}, rng);
    for (int i = 0; i < n; ++i) {
        real nn = 0;
        for (int j = 0; j < d; ++j) nn += t.at(i, j) * t.at(i, j);
        nn = std::sqrt(nn);
        for (int j = 0; j < d; ++j) t.at(i, j) /= nn;
    }
    return t;
}

Value pt(std::vector<int> shape, std::vector<real> data) {
    return param(Tensor(std::move(shape), std::move(data)));
}

}  // namespace

TEST_CASE("schedule: hand values, monotonicity, independent recomputation, errors") {
    NoiseSchedule s2 = make_schedule(2, 0.5, 0.5);
    CHECK(s2.betas[0] == 0.5);
    CHECK(s2.betas[1] == 0.5);
    CHECK(s2.alphas_cumprod[0] == 0.5);
    CHECK(s2.alphas_cumprod[1] == 0.25);

    Rng rng(7);
    for (int k = 0; k < 20; ++k) {
        int T = rng.uniform_int(2, 300);
        real lo = rng.uniform(1e-5, 0.01), hi = lo + rng.uniform(0.0, 0.4);
        NoiseSchedule s = make_schedule(T, lo, hi);
        for (int t = 1; t < T; ++t) {
            CHECK(s.alphas_cumprod[t] < s.alphas_cumprod[t - 1]);
            CHECK(s.betas[t] >= s.betas[t - 1]);
        }
        CHECK(s.alphas_cumprod[0] > 0);
        CHECK(s.alphas_cumprod[T - 1] > 0);
        CHECK(s.alphas_cumprod[0] < 1);
    }

    // scalar recomputation of the default schedule at t in {1, 100, 200}
    NoiseSchedule d = make_schedule();
    CHECK(d.T == 200);
    auto beta_at = [](int t) { return 1e-4 + (0.02 - 1e-4) * (t - 1) / 199.0; };
    real run = 1.0;
    for (int t = 1; t <= 200; ++t) {
        run *= 1.0 - beta_at(t);
        if (t == 1 || t == 100 || t == 200) {
            CHECK(d.alphas_cumprod[t - 1] == doctest::Approx(run).epsilon(1e-12));
            CHECK(d.betas[t - 1] == doctest::Approx(beta_at(t)).epsilon(1e-12));
        }
    }
    CHECK(d.alphas_cumprod[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-12));

    CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.02), DomainError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), DomainError);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), DomainError);
    CHECK_THROWS_AS(make_schedule(10, 0.5, 1.0), DomainError);
}

TEST_CASE("forward diffusion: exact scaling, near-identity limit, Monte-Carlo variance") {
    NoiseSchedule s = make_schedule();
    Rng rng(11);
    Tensor x0 = Tensor::randn({2, 2}, rng);
    Tensor zero = Tensor::zeros({2, 2});

    Tensor xt = forward_diffuse(x0, 150, zero, s);
    real sa = std::sqrt(s.alphas_cumprod[149]);
    for (int i = 0; i < 4; ++i) CHECK(xt.data[i] == sa * x0.data[i]);

    // t = 1 on a tiny-beta schedule stays within sqrt(1-abar_1)*||noise||
    NoiseSchedule tiny = make_schedule(10, 1e-8, 1e-8);
    Tensor n1 = Tensor::randn({2, 2}, rng);
    Tensor x1 = forward_diffuse(x0, 1, n1, tiny);
    real bound = std::sqrt(1.0 - tiny.alphas_cumprod[0]);
    real nn = 0;
    for (int i = 0; i < 4; ++i) nn += n1.data[i] * n1.data[i];
    nn = std::sqrt(nn);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(x1.data[i] - x0.data[i]) <= bound * nn + 1e-12);

    // empirical variance of x_t over unit-Gaussian draws is (1-abar_t) +- 3%
    int t = 100;
    real want = 1.0 - s.alphas_cumprod[t - 1];
    real sa_t = std::sqrt(s.alphas_cumprod[t - 1]);
    real acc = 0;
    int draws = 10000;
    Rng mc(19);
    for (int k = 0; k < draws; ++k) {
        Tensor nz = Tensor::randn({2, 2}, mc);
        Tensor xk = forward_diffuse(x0, t, nz, s);
        for (int i = 0; i < 4; ++i) {
            real dev = xk.data[i] - sa_t * x0.data[i];
            acc += dev * dev;
        }
    }
    real got = acc / (4.0 * draws);
    CHECK(std::abs(got - want) / want < 0.03);

    CHECK_THROWS_AS(forward_diffuse(x0, 0, zero, s), DomainError);
    CHECK_THROWS_AS(forward_diffuse(x0, 201, zero, s), DomainError);
    CHECK_THROWS_AS(forward_diffuse(x0, 5, Tensor::zeros({3}), s), DomainError);
}

TEST_CASE("lora_linear: init identity, alpha gate, dense materialization oracle") {
    Rng rng(23);
    int in = 6, out = 5, r = 2, n = 3;
    Value x = constant(Tensor::randn({n, in}, rng));
    Value w = param(Tensor::randn({out, in}, rng, 0.3));

    LoraPair zero;
    zero.a = param(Tensor::randn({r, in}, rng, 0.3));
    zero.b = param(Tensor::zeros({out, r}));
    zero.alpha = 1.0;
    Value base = matmul(x, w, false, true);
    CHECK(same_data(lora_linear(x, w, zero)->val, base->val));

    LoraPair live;
    live.a = param(Tensor::randn({r, in}, rng, 0.5));
    live.b = param(Tensor::randn({out, r}, rng, 0.5));
    live.alpha = 0.0;
    CHECK(same_data(lora_linear(x, w, live)->val, base->val));

    live.alpha = 0.7;
    Value y = lora_linear(x, w, live);
    // dense oracle: (W + alpha B A) x
    for (int i = 0; i < n; ++i)
        for (int o = 0; o < out; ++o) {
            real want = 0;
            for (int j = 0; j < in; ++j) {
                real wij = w->val.at(o, j);
                for (int q = 0; q < r; ++q)
                    wij += live.alpha * live.b->val.at(o, q) * live.a->val.at(q, j);
                want += wij * x->val.at(i, j);
            }
            CHECK(y->val.at(i, o) == doctest::Approx(want).epsilon(1e-6));
        }

    LoraPair bad = live;
    bad.b = param(Tensor::randn({out + 1, r}, rng));
    CHECK_THROWS_AS(lora_linear(x, w, bad), DomainError);
    CHECK_THROWS_AS(lora_linear(x, param(Tensor::randn({out, in + 1}, rng)), live), DomainError);
}

namespace {

// hand-set scalar cross-attention instance: 1 spatial token of width 2,
// d_attn = d_model = 1, L text keys of width 1.
struct ScalarCa {
    CrossAttn p;
    real a = 0.3, b = -0.9;   // the token
    real w1 = 0.8, w2 = -0.4; // wq
    real kk = 1.3, vv = 0.7;  // text key/value weights
    real o1 = 1.1, o2 = -0.6; // wo
    real ki = 0.9, vi = -1.2; // image adapter weights

    ScalarCa() {
        p.ln_g = pt({1, 2}, {1, 1});
        p.ln_b = pt({1, 2}, {0, 0});
        p.wq = pt({1, 2}, {w1, w2});
        p.wk_txt = pt({1, 1}, {kk});
        p.wv_txt = pt({1, 1}, {vv});
        p.wo = pt({2, 1}, {o1, o2});
        p.wk_img = pt({1, 1}, {ki});
        p.wv_img = pt({1, 1}, {vi});
    }

    // layer-norm of (a, b) with the engine's epsilon
    std::pair<real, real> ln() const {
        real m = (a + b) / 2;
        real var = ((a - m) * (a - m) + (b - m) * (b - m)) / 2;
        real inv = 1.0 / std::sqrt(var + 1e-5);
        return {(a - m) * inv, (b - m) * inv};
    }

    real q() const {
        auto [h1, h2] = ln();
        return w1 * h1 + w2 * h2;
    }
};

}  // namespace

TEST_CASE("cross attention: scalar oracle, lambda weighting, null-text branch") {
    ScalarCa s;
    Value z = constant(Tensor({1, 2}, {s.a, s.b}));

    // single text key: the softmax weight is exactly 1
    CondFeatures one;
    one.c_txt = constant(Tensor({1, 1}, {0.5}));
    one.txt_mask = Tensor::zeros({1, 1});
    Value out1 = cross_attn_block(s.p, z, 1, one, 0.0, false);
    real zatt1 = s.vv * 0.5;
    CHECK(out1->val.at(0, 0) == doctest::Approx(s.a + s.o1 * zatt1).epsilon(1e-12));
    CHECK(out1->val.at(0, 1) == doctest::Approx(s.b + s.o2 * zatt1).epsilon(1e-12));

    // two text keys: hand-computed softmax-weighted sum
    real c1 = 0.5, c2 = -1.4;
    CondFeatures two;
    two.c_txt = constant(Tensor({2, 1}, {c1, c2}));
    two.txt_mask = Tensor::zeros({1, 2});
    Value out2 = cross_attn_block(s.p, z, 1, two, 0.0, false);
    real q = s.q();
    real s1 = q * s.kk * c1, sc2 = q * s.kk * c2;
    real mx = std::max(s1, sc2);
    real e1 = std::exp(s1 - mx), e2 = std::exp(sc2 - mx);
    real zatt = (e1 * (s.vv * c1) + e2 * (s.vv * c2)) / (e1 + e2);
    CHECK(out2->val.at(0, 0) == doctest::Approx(s.a + s.o1 * zatt).epsilon(1e-10));
    CHECK(out2->val.at(0, 1) == doctest::Approx(s.b + s.o2 * zatt).epsilon(1e-10));

    // lambda weighting with one image token
    real g = 1.8;
    CondFeatures both = two;
    both.c_img = constant(Tensor({1, 1}, {g}));
    Value outl = cross_attn_block(s.p, z, 1, both, 0.7, false);
    real zimg = s.vi * g;  // single image key, weight 1
    CHECK(outl->val.at(0, 0) == doctest::Approx(s.a + s.o1 * (zatt + 0.7 * zimg)).epsilon(1e-10));
    CHECK(outl->val.at(0, 1) == doctest::Approx(s.b + s.o2 * (zatt + 0.7 * zimg)).epsilon(1e-10));

    // zeroed text values: lambda=1 output equals the image attention alone
    ScalarCa zv;
    zv.p.wv_txt = pt({1, 1}, {0.0});
    Value outz = cross_attn_block(zv.p, z, 1, both, 1.0, false);
    CHECK(outz->val.at(0, 0) == doctest::Approx(s.a + s.o1 * zimg).epsilon(1e-12));
    CHECK(outz->val.at(0, 1) == doctest::Approx(s.b + s.o2 * zimg).epsilon(1e-12));

    // lambda=0 never touches the image features: junk vs absent is bitwise equal
    CondFeatures junk = two;
    junk.c_img = constant(Tensor({1, 1}, {1e18}));
    CHECK(same_data(cross_attn_block(s.p, z, 1, junk, 0.0, false)->val,
                    cross_attn_block(s.p, z, 1, two, 0.0, false)->val));

    CHECK_THROWS_AS(cross_attn_block(s.p, z, 1, CondFeatures{}, 0.0, false), ContractError);
    CondFeatures wide = two;
    wide.c_txt = constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    CHECK_THROWS_AS(cross_attn_block(s.p, z, 1, wide, 0.0, false), DomainError);
}

TEST_CASE("attention masking: -1e30 keys carry exactly zero weight") {
    ScalarCa s;
    Value z = constant(Tensor({1, 2}, {s.a, s.b}));
    CondFeatures m1, m2;
    m1.c_txt = constant(Tensor({3, 1}, {0.5, -1.4, 123.0}));
    m2.c_txt = constant(Tensor({3, 1}, {0.5, -1.4, -77.0}));
    m1.txt_mask = Tensor({1, 3}, {0.0, 0.0, -1e30});
    m2.txt_mask = m1.txt_mask;
    Value o1 = cross_attn_block(s.p, z, 1, m1, 0.0, false);
    Value o2 = cross_attn_block(s.p, z, 1, m2, 0.0, false);
    CHECK(same_data(o1->val, o2->val));

    // and the masked result equals dropping the key outright
    CondFeatures two;
    two.c_txt = constant(Tensor({2, 1}, {0.5, -1.4}));
    two.txt_mask = Tensor::zeros({1, 2});
    Value o3 = cross_attn_block(s.p, z, 1, two, 0.0, false);
    CHECK(o1->val.at(0, 0) == doctest::Approx(o3->val.at(0, 0)).epsilon(1e-12));
    CHECK(o1->val.at(0, 1) == doctest::Approx(o3->val.at(0, 1)).epsilon(1e-12));
}

TEST_CASE("projector: determinism, token count, residual identity, unit-norm contract") {
    int d = 8;
    Denoiser dn = make_denoiser(8, d, 2, 1.0, 1.0, 42);
    Value f = constant(unit_rows(3, d, 5));
    Value p1 = project_image_embedding(dn.proj, f);
    Value p2 = project_image_embedding(dn.proj, f);
    CHECK(p1->val.rows() == 3 * kImgTokens);
    CHECK(p1->val.cols() == d);
    CHECK(same_data(p1->val, p2->val));

    Value single = project_image_embedding(dn.proj, constant(unit_rows(1, d, 6)));
    CHECK(single->val.rows() == kImgTokens);

    // zero every fc: the fc sub-layer becomes the identity, so the output
    // equals the attention-only recursion
    Denoiser dz = make_denoiser(8, d, 2, 1.0, 1.0, 42);
    for (auto& b : dz.proj.blocks) {
        std::fill(b.fw->val.data.begin(), b.fw->val.data.end(), 0.0);
        std::fill(b.fb->val.data.begin(), b.fb->val.data.end(), 0.0);
    }
    Value fz = constant(unit_rows(2, d, 7));
    Value got = project_image_embedding(dz.proj, fz);
    std::vector<int> tile;
    for (int i = 0; i < 2; ++i)
        for (int q = 0; q < kImgTokens; ++q) tile.push_back(q);
    Value t = gather_rows(dz.proj.query, tile);
    for (const ProjBlock& b : dz.proj.blocks) {
        Value q = matmul(t, b.wq, false, true);
        Value k = reshape(matmul(fz, b.wk, false, true), {2, 1, d});
        Value v = reshape(matmul(fz, b.wv, false, true), {2, 1, d});
        Value sc = scale(bmm(reshape(q, {2, kImgTokens, d}), k, false, true),
                         1.0 / std::sqrt(static_cast<real>(d)));
        Value at = softmax_rows(reshape(sc, {2 * kImgTokens, 1}));
        Value av = bmm(reshape(at, {2, kImgTokens, 1}), v);
        t = add(t, matmul(reshape(av, {2 * kImgTokens, d}), b.wo, false, true));
    }
    CHECK(same_data(got->val, t->val));

    Tensor off = unit_rows(1, d, 8);
    for (real& v : off.data) v *= 1.01;
    CHECK_THROWS_AS(project_image_embedding(dn.proj, constant(off)), ContractError);
}

TEST_CASE("condition dropout: identity at zero, forced both, event frequencies") {
    glyph::ClassTable table = glyph::class_table(8, 4);
    Vocab vocab = glyph::build_vocab(table);
    Cond c;
    c.tokens = vocab.null_prompt();
    c.tokens[3] = 5;  // make it distinguishable from the null prompt
    c.embed = unit_rows(1, 4, 9);
    Tensor null_e = unit_rows(1, 4, 10);

    Rng rng(123);
    Cond same = apply_condition_dropout(c, vocab, null_e, rng, 0, 0, 0);
    CHECK(same.tokens == c.tokens);
    CHECK(same_data(same.embed, c.embed));
    CHECK_FALSE(same.drop_text);
    CHECK_FALSE(same.drop_image);

    for (int k = 0; k < 5; ++k) {
        Cond both = apply_condition_dropout(c, vocab, null_e, rng, 0, 0, 1.0);
        CHECK(both.drop_text);
        CHECK(both.drop_image);
        CHECK(both.tokens == vocab.null_prompt());
        CHECK(same_data(both.embed, null_e));
    }

    int n_img = 0, n_txt = 0, n_both = 0;
    int draws = 100000;
    Rng freq(77);
    for (int k = 0; k < draws; ++k) {
        Cond out = apply_condition_dropout(c, vocab, null_e, freq);
        if (out.drop_image && out.drop_text)
            ++n_both;
        else if (out.drop_image)
            ++n_img;
        else if (out.drop_text)
            ++n_txt;
    }
    for (int count : {n_img, n_txt, n_both}) {
        real f = static_cast<real>(count) / draws;
        CHECK(f >= 0.045);
        CHECK(f <= 0.055);
    }

    CHECK_THROWS_AS(apply_condition_dropout(c, vocab, null_e, rng, 0.5, 0.4, 0.2), ConfigError);
}

TEST_CASE("text encoding: shape, padding mask wiring, input validation") {
    Denoiser dn = make_denoiser(12, 16, 2, 1.0, 1.0, 3);
    std::vector<int> ids(Vocab::MAX_TEXT_LEN, 0);
    ids[0] = 1;
    ids[1] = 5;
    ids[2] = 2;
    Value enc = encode_text(dn.text, {ids, ids});
    CHECK(enc->val.rows() == 2 * Vocab::MAX_TEXT_LEN);
    CHECK(enc->val.cols() == 16);
    CHECK(same_data(enc->val, encode_text(dn.text, {ids, ids})->val));

    Tensor mask = text_key_mask({ids});
    CHECK(mask.at(0, 0) == 0.0);
    CHECK(mask.at(0, 2) == 0.0);
    CHECK(mask.at(0, 3) == -1e30);
    CHECK(mask.at(0, Vocab::MAX_TEXT_LEN - 1) == -1e30);

    CHECK_THROWS_AS(encode_text(dn.text, {{1, 2, 0}}), DomainError);
    std::vector<int> oov = ids;
    oov[1] = 99;
    CHECK_THROWS_AS(encode_text(dn.text, {oov}), DomainError);
}

TEST_CASE("time embedding: range, determinism, distinct steps") {
    Tensor e = time_embedding({1, 50, 200}, 64);
    CHECK(e.rows() == 3);
    CHECK(e.cols() == 64);
    for (real v : e.data) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    CHECK(e.at(0, 32) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
    bool differ = false;
    for (int j = 0; j < 64; ++j) differ |= e.at(0, j) != e.at(1, j);
    CHECK(differ);
}

namespace {

struct MicroSetup {
    Denoiser dn;
    Value x;
    Tensor target;
    Tensor f;
    std::vector<int> padded;
    std::vector<int> ts{3};

    explicit MicroSetup(uint64_t seed) : dn(make_denoiser(8, 8, 2, 1.0, 1.0, seed)) {
        Rng rng(derive_seed(seed, 90, 0));
        // randomize every weight so zero-initialized layers do not stall
        // gradient flow through the paths under test
        for (auto& [name, v] : named_base(dn))
            for (real& w : v->val.data) w = rng.normal() * 0.05;
        for (auto& [name, v] : named_adapter(dn))
            for (real& w : v->val.data) w = rng.normal() * 0.05;
        x = constant(Tensor::randn({1, 3, 4, 4}, rng));
        target = Tensor::randn({1, 3, 4, 4}, rng);
        padded.assign(Vocab::MAX_TEXT_LEN, 0);
        std::vector<int> ids = {1, 4, 5, 2, 0};
        std::copy(ids.begin(), ids.end(), padded.begin());
        f = unit_rows(1, 8, seed + 1);
    }

    // rebuilt from scratch every call so finite differences see perturbed
    // text-encoder and projector weights
    Value loss() {
        CondFeatures cond;
        cond.c_txt = encode_text(dn.text, {padded});
        cond.txt_mask = text_key_mask({padded});
        cond.c_img = project_image_embedding(dn.proj, constant(f));
        Value eps = predict_eps(dn, x, ts, cond, true, true);
        Value diff = sub(eps, constant(target));
        return mean_all(mul(diff, diff));
    }
};

}  // namespace

TEST_CASE("epsilon-loss gradients match central differences on a 4x4 instance") {
    MicroSetup ms(31);
    Value l = ms.loss();
    backward(l);

    struct Probe {
        Value v;
        int idx;
    };
    Denoiser& dn = ms.dn;
    std::vector<Probe> probes = {
        {dn.unet.a1.ca.wk_img, 3},       {dn.unet.a2.ca.wv_img, 10},
        {dn.unet.am.sa.lq.b, 1},         {dn.unet.a4.ca.lk.a, 5},
        {dn.proj.blocks[2].fw, 12},      {dn.proj.query, 7},
        {dn.unet.r3.tw, 20},             {dn.text.b0.wv, 9},
    };
    real h = 1e-3;
    for (auto& p : probes) {
        REQUIRE(p.v->grad.numel() > 0);
        real g = p.v->grad.data[p.idx];
        real keep = p.v->val.data[p.idx];
        p.v->val.data[p.idx] = keep + h;
        real lp = ms.loss()->val.data[0];
        p.v->val.data[p.idx] = keep - h;
        real lm = ms.loss()->val.data[0];
        p.v->val.data[p.idx] = keep;
        real fd = (lp - lm) / (2 * h);
        real rel = std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)});
        CHECK(rel < 1e-2);
    }
}

TEST_CASE("full denoiser: LoRA init identity and lambda=0 text equivalence") {
    Denoiser dn = make_denoiser(10, 8, 4, 1.0, 1.0, 17);
    Rng rng(55);
    Value x = constant(Tensor::randn({2, 3, 8, 8}, rng));
    std::vector<int> ts = {4, 9};
    std::vector<int> padded(Vocab::MAX_TEXT_LEN, 0);
    padded[0] = 1;
    padded[1] = 6;
    padded[2] = 2;
    CondFeatures cond;
    cond.c_txt = encode_text(dn.text, {padded, padded});
    cond.txt_mask = text_key_mask({padded, padded});
    cond.c_img = project_image_embedding(dn.proj, constant(unit_rows(2, 8, 18)));

    // zero-initialized B: LoRA on equals LoRA off, adapter path included
    Value on = predict_eps(dn, x, ts, cond, true, true);
    Value off = predict_eps(dn, x, ts, cond, false, true);
    CHECK(same_data(on->val, off->val));
    CHECK(on->val.shape == x->val.shape);

    // lambda=0 with junk image features equals the text-only network
    Denoiser dz = make_denoiser(10, 8, 4, 1.0, 0.0, 17);
    // give LoRA a nonzero delta so the equivalence covers it
    Rng lr(56);
    for (auto& [name, v] : named_adapter(dz))
        if (name.ends_with(".b")) for (real& w : v->val.data) w = lr.normal() * 0.1;
    CondFeatures junk = cond;
    junk.c_img = constant(Tensor::full({2 * kImgTokens, 8}, 1e9));
    CondFeatures none = cond;
    none.c_img = Value{};
    Value a = predict_eps(dz, x, ts, junk, true, true);
    Value b = predict_eps(dz, x, ts, none, true, false);
    CHECK(same_data(a->val, b->val));

    // determinism
    CHECK(same_data(predict_eps(dn, x, ts, cond, true, true)->val, on->val));

    CHECK_THROWS_AS(predict_eps(dn, constant(Tensor::randn({1, 3, 5, 5}, rng)), {1}, cond, true, true),
                    DomainError);
}

TEST_CASE("cfg_epsilon: exact endpoints, affine in g, elementwise recomputation") {
    Rng rng(61);
    Tensor c = Tensor::randn({2, 5}, rng);
    Tensor u = Tensor::randn({2, 5}, rng);

    CHECK(same_data(cfg_epsilon(c, u, 1.0), c));
    CHECK(same_data(cfg_epsilon(c, u, 0.0), u));

    Tensor g5 = cfg_epsilon(c, u, 5.0);
    for (long i = 0; i < g5.numel(); ++i)
        CHECK(g5.data[i] == doctest::Approx(u.data[i] + 5.0 * (c.data[i] - u.data[i])).epsilon(1e-15));

    Tensor e0 = cfg_epsilon(c, u, 0.0);
    Tensor e1 = cfg_epsilon(c, u, 1.0);
    for (int k = 0; k < 5; ++k) {
        real g = rng.uniform(-2.0, 8.0);
        Tensor eg = cfg_epsilon(c, u, g);
        for (long i = 0; i < eg.numel(); ++i) {
            real affine = e0.data[i] + g * (e1.data[i] - e0.data[i]);
            CHECK(eg.data[i] == doctest::Approx(affine).epsilon(1e-10));
        }
    }

    CHECK_THROWS_AS(cfg_epsilon(c, Tensor::zeros({2, 4}), 5.0), DomainError);
}

// ---- trained fixture: one tiny pipeline shared by the expensive cases ----

namespace {

struct Fixture {
    glyph::DatasetSplit split;
    Vocab vocab;
    emb::EmbedTrainResult sca;
    SynthTrainResult base;
    std::vector<Tensor> frozen;
    std::vector<real> adapter_trace;
};

const Fixture& fixture() {
    static Fixture* fx = [] {
        auto* f = new Fixture;
        glyph::SplitConfig sc;
        sc.kind = "conventional";
        sc.num_classes = 8;
        sc.num_meta = 4;
        sc.train_per_class = 8;
        sc.test_per_class = 2;
        sc.seed = 11;
        f->split = glyph::make_split(sc);
        f->vocab = glyph::build_vocab(glyph::class_table(sc.num_classes, sc.num_meta));

        emb::EmbedTrainConfig ec;
        ec.epochs = 5;
        ec.batch_size = 64;
        ec.seed = 3;
        f->sca = emb::train_embedding(f->split, ec, "SCA");

        SynthTrainConfig bc;
        bc.epochs = 6;
        bc.batch_size = 16;
        bc.lr = 1e-3;
        bc.seed = 5;
        f->base = train_base_denoiser(f->split, f->vocab, bc);

        for (auto& [name, v] : named_base(f->base.model)) f->frozen.push_back(v->val);

        SynthTrainConfig ac = bc;
        ac.epochs = 8;
        ac.seed = 6;
        f->adapter_trace = train_synthesis(f->base.model, f->base.sched, f->split, f->vocab,
                                           f->sca.encoder, f->sca.mean_embedding, ac);
        return f;
    }();
    return *fx;
}

real mean2(const std::vector<real>& v, bool front) {
    return front ? (v[0] + v[1]) / 2 : (v[v.size() - 1] + v[v.size() - 2]) / 2;
}

}  // namespace

TEST_CASE("training: loss traces decrease and the frozen base never moves") {
    const Fixture& f = fixture();
    REQUIRE(f.base.epoch_loss.size() == 6);
    REQUIRE(f.adapter_trace.size() == 8);
    CHECK(mean2(f.base.epoch_loss, false) < mean2(f.base.epoch_loss, true));
    CHECK(mean2(f.adapter_trace, false) < mean2(f.adapter_trace, true));
    for (real l : f.base.epoch_loss) CHECK(std::isfinite(l));

    // regression bounds frozen from the first recorded run
    CHECK(f.base.epoch_loss.back() < 1.0);
    CHECK(f.adapter_trace.back() < 1.0);

    // freeze contract: every base tensor bitwise identical through stage 2
    auto names = named_base(f.base.model);
    REQUIRE(names.size() == f.frozen.size());
    for (size_t i = 0; i < names.size(); ++i) CHECK(same_data(names[i].second->val, f.frozen[i]));
    for (auto& [name, v] : names) CHECK_FALSE(v->requires_grad);
}

TEST_CASE("training: lr=0 leaves trainable parameters bitwise unchanged") {
    const Fixture& f = fixture();
    SynthTrainConfig bc;
    bc.epochs = 0;
    bc.seed = 5;
    SynthTrainResult fresh = train_base_denoiser(f.split, f.vocab, bc);
    CHECK(fresh.epoch_loss.empty());

    std::vector<Tensor> before;
    for (auto& [name, v] : named_adapter(fresh.model)) before.push_back(v->val);
    SynthTrainConfig zc;
    zc.epochs = 1;
    zc.batch_size = 16;
    zc.lr = 0.0;
    zc.seed = 9;
    train_synthesis(fresh.model, fresh.sched, f.split, f.vocab, f.sca.encoder,
                    f.sca.mean_embedding, zc);
    auto after = named_adapter(fresh.model);
    for (size_t i = 0; i < after.size(); ++i) CHECK(same_data(after[i].second->val, before[i]));
}

TEST_CASE("training: deterministic given the seed") {
    const Fixture& f = fixture();
    glyph::SplitConfig sc = f.split.config;
    sc.train_per_class = 2;
    glyph::DatasetSplit tiny = glyph::make_split(sc);
    SynthTrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.seed = 21;
    SynthTrainResult r1 = train_base_denoiser(tiny, f.vocab, cfg);
    SynthTrainResult r2 = train_base_denoiser(tiny, f.vocab, cfg);
    CHECK(r1.epoch_loss == r2.epoch_loss);
    auto n1 = named_base(r1.model), n2 = named_base(r2.model);
    for (size_t i = 0; i < n1.size(); ++i) CHECK(same_data(n1[i].second->val, n2[i].second->val));
}

TEST_CASE("sampler: determinism, range, per-sample streams, config errors") {
    const Fixture& f = fixture();
    const Denoiser& dn = f.base.model;
    std::vector<std::vector<int>> ids = {f.split.train[0].prompt.token_ids,
                                         f.split.train[9].prompt.token_ids};
    Tensor embeds({2, dn.d_model});
    Tensor e0 = emb::embed(f.sca.encoder, f.split.train[0].img.pixels);
    Tensor e1 = emb::embed(f.sca.encoder, f.split.train[9].img.pixels);
    for (int j = 0; j < dn.d_model; ++j) {
        embeds.at(0, j) = e0.at(0, j);
        embeds.at(1, j) = e1.at(0, j);
    }
    SamplerConfig cfg;
    cfg.steps = 3;
    cfg.seed = 100;
    CHECK(SamplerConfig{}.steps == 50);
    CHECK(SamplerConfig{}.guidance == 5.0);
    CHECK(SamplerConfig{}.eta == 0.0);

    Tensor out = sample_batch(dn, f.base.sched, ids, embeds, f.sca.mean_embedding, f.vocab, cfg,
                              {0, 1});
    CHECK(out.shape == std::vector<int>{2, 3, 32, 32});
    for (real v : out.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    Tensor again = sample_batch(dn, f.base.sched, ids, embeds, f.sca.mean_embedding, f.vocab, cfg,
                                {0, 1});
    CHECK(same_data(out, again));

    // a sample's stream depends on its index, not its batch position
    Tensor solo({1, dn.d_model});
    for (int j = 0; j < dn.d_model; ++j) solo.at(0, j) = embeds.at(1, j);
    Tensor one = sample_batch(dn, f.base.sched, {ids[1]}, solo, f.sca.mean_embedding, f.vocab, cfg,
                              {1});
    long per = 3L * 32 * 32;
    for (long k = 0; k < per; ++k) CHECK(one.data[k] == out.data[per + k]);

    SamplerConfig bad = cfg;
    bad.steps = f.base.sched.T + 1;
    CHECK_THROWS_AS(
        sample_batch(dn, f.base.sched, ids, embeds, f.sca.mean_embedding, f.vocab, bad, {0, 1}),
        ConfigError);
    SamplerConfig neg = cfg;
    neg.guidance = -1;
    CHECK_THROWS_AS(
        sample_batch(dn, f.base.sched, ids, embeds, f.sca.mean_embedding, f.vocab, neg, {0, 1}),
        DomainError);

    // single-sample wrapper matches the batch path
    Tensor w = sample(dn, f.base.sched, f.sca.encoder, f.sca.mean_embedding, f.split.train[9].img,
                      f.split.train[9].prompt, f.vocab, cfg, 1);
    CHECK(same_data(w, one));
}

TEST_CASE("checkpoint: bitwise round trip, hash refusal, malformed input") {
    const Fixture& f = fixture();
    fs::path dir = fs::temp_directory_path() / "gda_synth_ckpt";
    fs::create_directories(dir);
    std::string path = (dir / "synth.json").string();

    SynthCheckpoint c;
    c.model = f.base.model;
    c.sched = f.base.sched;
    c.stage = "adapter";
    c.vocab_hash = f.vocab.hash();
    c.sca_hash = "abc123";
    c.mean_embedding = f.sca.mean_embedding;
    c.config_hash = "cfg";
    c.epoch_loss = f.adapter_trace;
    save_synth_checkpoint(path, c);

    SynthCheckpoint l = load_synth_checkpoint(path, f.vocab.hash(), "abc123");
    CHECK(l.stage == "adapter");
    CHECK(l.model.lambda == f.base.model.lambda);
    CHECK(l.epoch_loss == f.adapter_trace);
    CHECK(same_data(l.mean_embedding, f.sca.mean_embedding));
    for (size_t i = 0; i < f.base.sched.betas.size(); ++i) {
        CHECK(l.sched.betas[i] == f.base.sched.betas[i]);
        CHECK(l.sched.alphas_cumprod[i] == f.base.sched.alphas_cumprod[i]);
    }
    auto orig = named_base(f.base.model);
    auto got = named_base(l.model);
    for (size_t i = 0; i < orig.size(); ++i) CHECK(same_data(orig[i].second->val, got[i].second->val));
    auto orig_a = named_adapter(f.base.model);
    auto got_a = named_adapter(l.model);
    for (size_t i = 0; i < orig_a.size(); ++i)
        CHECK(same_data(orig_a[i].second->val, got_a[i].second->val));

    // the restored model predicts identically
    Rng rng(71);
    Value x = constant(Tensor::randn({1, 3, 32, 32}, rng));
    std::vector<int> ids = f.split.train[3].prompt.token_ids;
    CondFeatures c1, c2;
    c1.c_txt = encode_text(f.base.model.text, {ids});
    c1.txt_mask = text_key_mask({ids});
    c1.c_img = project_image_embedding(f.base.model.proj, constant(unit_rows(1, 64, 72)));
    c2.c_txt = encode_text(l.model.text, {ids});
    c2.txt_mask = c1.txt_mask;
    c2.c_img = project_image_embedding(l.model.proj, constant(unit_rows(1, 64, 72)));
    CHECK(same_data(predict_eps(f.base.model, x, {5}, c1, true, true)->val,
                    predict_eps(l.model, x, {5}, c2, true, true)->val));

    CHECK_THROWS_AS(load_synth_checkpoint(path, "wrong", "abc123"), IntegrityError);
    CHECK_THROWS_AS(load_synth_checkpoint(path, f.vocab.hash(), "wrong"), IntegrityError);
    CHECK_NOTHROW(load_synth_checkpoint(path));

    Json j = load_json(path);
    j["kind"] = "other";
    std::string bad1 = (dir / "bad1.json").string();
    save_json(bad1, j);
    CHECK_THROWS_AS(load_synth_checkpoint(bad1), ParseError);

    j = load_json(path);
    j["base_params"].erase("stem.w");
    std::string bad2 = (dir / "bad2.json").string();
    save_json(bad2, j);
    CHECK_THROWS_AS(load_synth_checkpoint(bad2), ParseError);

    j = load_json(path);
    j["stage"] = "mystery";
    std::string bad3 = (dir / "bad3.json").string();
    save_json(bad3, j);
    CHECK_THROWS_AS(load_synth_checkpoint(bad3), ParseError);
    fs::remove_all(dir);
}
