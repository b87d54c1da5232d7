#include "gda/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gda/common.hpp"
#include "gda/optim.hpp"
#include "gda/serialize.hpp"

namespace gda::synth {

namespace {

constexpr int kGroups = 8;
constexpr int kC1 = 16, kC2 = 32, kC3 = 48;
constexpr real kMaskNegInf = -1e30;

std::vector<real> acp_from_betas(const std::vector<real>& betas) {
    std::vector<real> acp(betas.size());
    real run = 1.0;
    for (size_t i = 0; i < betas.size(); ++i) {
        run *= 1.0 - betas[i];
        acp[i] = run;
    }
    return acp;
}

}  // namespace

NoiseSchedule make_schedule(int T, real beta_min, real beta_max) {
    if (T < 2) throw DomainError("schedule needs T >= 2");
    if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
        throw DomainError("schedule needs 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(T);
    for (int t = 0; t < T; ++t)
        s.betas[t] = beta_min + (beta_max - beta_min) * static_cast<real>(t) / (T - 1);
    s.alphas_cumprod = acp_from_betas(s.betas);
    return s;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) throw DomainError("diffusion timestep out of [1,T]");
    if (!x0.same_shape(noise)) throw DomainError("forward_diffuse noise shape mismatch");
    real abar = sched.alphas_cumprod[t - 1];
    real sa = std::sqrt(abar), sn = std::sqrt(1.0 - abar);
    Tensor out = x0;
    for (long i = 0; i < out.numel(); ++i) out.data[i] = sa * x0.data[i] + sn * noise.data[i];
    return out;
}

// ---- construction ----

namespace {

Value init_conv(int out, int in, Rng& rng) {
    return param(Tensor::randn({out, in, 3, 3}, rng, std::sqrt(2.0 / (9.0 * in))));
}

Value init_mat(int out, int in, Rng& rng) {
    return param(Tensor::randn({out, in}, rng, std::sqrt(1.0 / in)));
}

LoraPair init_lora(int out, int in, int rank, real alpha, Rng& rng) {
    LoraPair p;
    p.a = param(Tensor::randn({rank, in}, rng, std::sqrt(1.0 / in)));
    p.b = param(Tensor::zeros({out, rank}));
    p.alpha = alpha;
    return p;
}

SelfAttn init_self_attn(int ch, int da, int rank, real alpha, Rng& rng) {
    SelfAttn s;
    s.ln_g = param(Tensor::full({1, ch}, 1.0));
    s.ln_b = param(Tensor::zeros({1, ch}));
    s.wq = init_mat(da, ch, rng);
    s.wk = init_mat(da, ch, rng);
    s.wv = init_mat(da, ch, rng);
    s.wo = param(Tensor::zeros({ch, da}));
    s.lq = init_lora(da, ch, rank, alpha, rng);
    s.lk = init_lora(da, ch, rank, alpha, rng);
    s.lv = init_lora(da, ch, rank, alpha, rng);
    return s;
}

CrossAttn init_cross_attn(int ch, int da, int dm, int rank, real alpha, Rng& rng) {
    CrossAttn c;
    c.ln_g = param(Tensor::full({1, ch}, 1.0));
    c.ln_b = param(Tensor::zeros({1, ch}));
    c.wq = init_mat(da, ch, rng);
    c.wk_txt = init_mat(da, dm, rng);
    c.wv_txt = init_mat(da, dm, rng);
    c.wo = param(Tensor::zeros({ch, da}));
    c.lq = init_lora(da, ch, rank, alpha, rng);
    c.lk = init_lora(da, dm, rank, alpha, rng);
    c.lv = init_lora(da, dm, rank, alpha, rng);
    // Adapter values start at zero so a fresh adapter stage begins as a
    // no-op on the pretrained base; keys stay random so value gradients
    // see distinct attention weights from step one.
    c.wk_img = init_mat(da, dm, rng);
    c.wv_img = param(Tensor::zeros({da, dm}));
    return c;
}

ResConv init_resconv(int in, int out, int dm, Rng& rng) {
    ResConv r;
    r.g1 = param(Tensor::full({in}, 1.0));
    r.n1 = param(Tensor::zeros({in}));
    r.w1 = init_conv(out, in, rng);
    r.c1 = param(Tensor::zeros({out}));
    r.tw = init_mat(out, dm, rng);
    r.tb = param(Tensor::zeros({1, out}));
    r.g2 = param(Tensor::full({out}, 1.0));
    r.n2 = param(Tensor::zeros({out}));
    r.w2 = param(Tensor::zeros({out, out, 3, 3}));
    r.c2 = param(Tensor::zeros({out}));
    if (in != out) {
        r.ws = init_mat(out, in, rng);
        r.cs = param(Tensor::zeros({1, out}));
    }
    return r;
}

AttnSite init_site(int ch, int dm, int rank, real alpha, Rng& rng) {
    AttnSite s;
    s.sa = init_self_attn(ch, dm, rank, alpha, rng);
    s.ca = init_cross_attn(ch, dm, dm, rank, alpha, rng);
    return s;
}

TextBlock init_text_block(int dm, Rng& rng) {
    TextBlock b;
    b.lng1 = param(Tensor::full({1, dm}, 1.0));
    b.lnb1 = param(Tensor::zeros({1, dm}));
    b.wq = init_mat(dm, dm, rng);
    b.wk = init_mat(dm, dm, rng);
    b.wv = init_mat(dm, dm, rng);
    b.wo = init_mat(dm, dm, rng);
    b.lng2 = param(Tensor::full({1, dm}, 1.0));
    b.lnb2 = param(Tensor::zeros({1, dm}));
    b.f1w = init_mat(2 * dm, dm, rng);
    b.f1b = param(Tensor::zeros({1, 2 * dm}));
    b.f2w = init_mat(dm, 2 * dm, rng);
    b.f2b = param(Tensor::zeros({1, dm}));
    return b;
}

}  // namespace

Denoiser make_denoiser(int vocab_size, int d_model, int lora_rank, real lora_alpha, real lambda,
                       uint64_t seed) {
    GDA_CHECK(vocab_size > 3 && d_model >= 2 && d_model % 2 == 0, "bad denoiser dimensions");
    GDA_CHECK(lora_rank >= 1, "lora rank must be >= 1");
    GDA_CHECK(lambda >= 0, "lambda must be non-negative");
    Rng rng(derive_seed(seed, 20, 0));
    Denoiser d;
    d.d_model = d_model;
    d.vocab_size = vocab_size;
    d.lora_rank = lora_rank;
    d.lora_alpha = lora_alpha;
    d.lambda = lambda;

    d.text.tok = param(Tensor::randn({vocab_size, d_model}, rng, 0.02));
    d.text.pos = param(Tensor::randn({Vocab::MAX_TEXT_LEN, d_model}, rng, 0.02));
    d.text.b0 = init_text_block(d_model, rng);
    d.text.b1 = init_text_block(d_model, rng);
    d.text.lng = param(Tensor::full({1, d_model}, 1.0));
    d.text.lnb = param(Tensor::zeros({1, d_model}));

    d.proj.query = param(Tensor::randn({kImgTokens, d_model}, rng, 0.02));
    for (auto& b : d.proj.blocks) {
        b.wq = init_mat(d_model, d_model, rng);
        b.wk = init_mat(d_model, d_model, rng);
        b.wv = init_mat(d_model, d_model, rng);
        b.wo = init_mat(d_model, d_model, rng);
        b.fw = init_mat(d_model, d_model, rng);
        b.fb = param(Tensor::zeros({1, d_model}));
    }

    UNet& u = d.unet;
    u.t1w = init_mat(d_model, d_model, rng);
    u.t1b = param(Tensor::zeros({1, d_model}));
    u.t2w = init_mat(d_model, d_model, rng);
    u.t2b = param(Tensor::zeros({1, d_model}));
    u.stem_w = init_conv(kC1, 3, rng);
    u.stem_b = param(Tensor::zeros({kC1}));
    u.r1 = init_resconv(kC1, kC1, d_model, rng);
    u.d1w = init_conv(kC2, kC1, rng);
    u.d1b = param(Tensor::zeros({kC2}));
    u.a1 = init_site(kC2, d_model, lora_rank, lora_alpha, rng);
    u.r2 = init_resconv(kC2, kC2, d_model, rng);
    u.d2w = init_conv(kC3, kC2, rng);
    u.d2b = param(Tensor::zeros({kC3}));
    u.a2 = init_site(kC3, d_model, lora_rank, lora_alpha, rng);
    u.rm = init_resconv(kC3, kC3, d_model, rng);
    u.am = init_site(kC3, d_model, lora_rank, lora_alpha, rng);
    u.a3 = init_site(kC3, d_model, lora_rank, lora_alpha, rng);
    u.r3 = init_resconv(kC3 + kC2, kC2, d_model, rng);
    u.a4 = init_site(kC2, d_model, lora_rank, lora_alpha, rng);
    u.r4 = init_resconv(kC2 + kC1, kC1, d_model, rng);
    u.og = param(Tensor::full({kC1}, 1.0));
    u.ob = param(Tensor::zeros({kC1}));
    u.out_w = param(Tensor::zeros({3, kC1, 3, 3}));
    u.out_b = param(Tensor::zeros({3}));
    return d;
}

namespace {

using Named = std::vector<std::pair<std::string, Value>>;

void push_resconv(Named& out, const std::string& p, const ResConv& r) {
    out.push_back({p + ".g1", r.g1});
    out.push_back({p + ".n1", r.n1});
    out.push_back({p + ".w1", r.w1});
    out.push_back({p + ".c1", r.c1});
    out.push_back({p + ".tw", r.tw});
    out.push_back({p + ".tb", r.tb});
    out.push_back({p + ".g2", r.g2});
    out.push_back({p + ".n2", r.n2});
    out.push_back({p + ".w2", r.w2});
    out.push_back({p + ".c2", r.c2});
    if (r.ws) {
        out.push_back({p + ".ws", r.ws});
        out.push_back({p + ".cs", r.cs});
    }
}

void push_site_base(Named& out, const std::string& p, const AttnSite& s) {
    out.push_back({p + ".sa.ln_g", s.sa.ln_g});
    out.push_back({p + ".sa.ln_b", s.sa.ln_b});
    out.push_back({p + ".sa.wq", s.sa.wq});
    out.push_back({p + ".sa.wk", s.sa.wk});
    out.push_back({p + ".sa.wv", s.sa.wv});
    out.push_back({p + ".sa.wo", s.sa.wo});
    out.push_back({p + ".ca.ln_g", s.ca.ln_g});
    out.push_back({p + ".ca.ln_b", s.ca.ln_b});
    out.push_back({p + ".ca.wq", s.ca.wq});
    out.push_back({p + ".ca.wk_txt", s.ca.wk_txt});
    out.push_back({p + ".ca.wv_txt", s.ca.wv_txt});
    out.push_back({p + ".ca.wo", s.ca.wo});
}

void push_lora(Named& out, const std::string& p, const LoraPair& l) {
    out.push_back({p + ".a", l.a});
    out.push_back({p + ".b", l.b});
}

void push_site_adapter(Named& out, const std::string& p, const AttnSite& s) {
    push_lora(out, p + ".sa.lq", s.sa.lq);
    push_lora(out, p + ".sa.lk", s.sa.lk);
    push_lora(out, p + ".sa.lv", s.sa.lv);
    push_lora(out, p + ".ca.lq", s.ca.lq);
    push_lora(out, p + ".ca.lk", s.ca.lk);
    push_lora(out, p + ".ca.lv", s.ca.lv);
    out.push_back({p + ".ca.wk_img", s.ca.wk_img});
    out.push_back({p + ".ca.wv_img", s.ca.wv_img});
}

void push_text_block(Named& out, const std::string& p, const TextBlock& b) {
    out.push_back({p + ".lng1", b.lng1});
    out.push_back({p + ".lnb1", b.lnb1});
    out.push_back({p + ".wq", b.wq});
    out.push_back({p + ".wk", b.wk});
    out.push_back({p + ".wv", b.wv});
    out.push_back({p + ".wo", b.wo});
    out.push_back({p + ".lng2", b.lng2});
    out.push_back({p + ".lnb2", b.lnb2});
    out.push_back({p + ".f1w", b.f1w});
    out.push_back({p + ".f1b", b.f1b});
    out.push_back({p + ".f2w", b.f2w});
    out.push_back({p + ".f2b", b.f2b});
}

}  // namespace

std::vector<std::pair<std::string, Value>> named_base(const Denoiser& d) {
    Named out;
    const UNet& u = d.unet;
    out.push_back({"time.t1w", u.t1w});
    out.push_back({"time.t1b", u.t1b});
    out.push_back({"time.t2w", u.t2w});
    out.push_back({"time.t2b", u.t2b});
    out.push_back({"stem.w", u.stem_w});
    out.push_back({"stem.b", u.stem_b});
    push_resconv(out, "r1", u.r1);
    out.push_back({"d1.w", u.d1w});
    out.push_back({"d1.b", u.d1b});
    push_site_base(out, "a1", u.a1);
    push_resconv(out, "r2", u.r2);
    out.push_back({"d2.w", u.d2w});
    out.push_back({"d2.b", u.d2b});
    push_site_base(out, "a2", u.a2);
    push_resconv(out, "rm", u.rm);
    push_site_base(out, "am", u.am);
    push_site_base(out, "a3", u.a3);
    push_resconv(out, "r3", u.r3);
    push_site_base(out, "a4", u.a4);
    push_resconv(out, "r4", u.r4);
    out.push_back({"out.g", u.og});
    out.push_back({"out.b", u.ob});
    out.push_back({"out.w", u.out_w});
    out.push_back({"out.c", u.out_b});
    out.push_back({"text.tok", d.text.tok});
    out.push_back({"text.pos", d.text.pos});
    push_text_block(out, "text.b0", d.text.b0);
    push_text_block(out, "text.b1", d.text.b1);
    out.push_back({"text.lng", d.text.lng});
    out.push_back({"text.lnb", d.text.lnb});
    return out;
}

std::vector<std::pair<std::string, Value>> named_adapter(const Denoiser& d) {
    Named out;
    push_site_adapter(out, "a1", d.unet.a1);
    push_site_adapter(out, "a2", d.unet.a2);
    push_site_adapter(out, "am", d.unet.am);
    push_site_adapter(out, "a3", d.unet.a3);
    push_site_adapter(out, "a4", d.unet.a4);
    out.push_back({"proj.query", d.proj.query});
    for (size_t k = 0; k < d.proj.blocks.size(); ++k) {
        const ProjBlock& b = d.proj.blocks[k];
        std::string p = "proj.b" + std::to_string(k);
        out.push_back({p + ".wq", b.wq});
        out.push_back({p + ".wk", b.wk});
        out.push_back({p + ".wv", b.wv});
        out.push_back({p + ".wo", b.wo});
        out.push_back({p + ".fw", b.fw});
        out.push_back({p + ".fb", b.fb});
    }
    return out;
}

void freeze_base(Denoiser& d) {
    for (auto& [name, v] : named_base(d)) v->requires_grad = false;
}

// ---- conditioning ----

Value lora_linear(const Value& x, const Value& w, const LoraPair& p) {
    if (x->val.rank() != 2 || w->val.rank() != 2 || x->val.cols() != w->val.cols())
        throw DomainError("lora_linear shape mismatch");
    if (p.a->val.cols() != w->val.cols() || p.b->val.rows() != w->val.rows() ||
        p.b->val.cols() != p.a->val.rows())
        throw DomainError("lora factor shape mismatch");
    Value base = matmul(x, w, false, true);
    if (p.alpha == 0) return base;
    Value delta = matmul(matmul(x, p.a, false, true), p.b, false, true);
    return add(base, scale(delta, p.alpha));
}

Cond apply_condition_dropout(const Cond& c, const Vocab& vocab, const Tensor& null_embed,
                             Rng& rng, real p_img, real p_txt, real p_both) {
    GDA_CHECK(p_img >= 0 && p_txt >= 0 && p_both >= 0, "dropout probabilities must be >= 0");
    if (p_img + p_txt + p_both > 1.0)
        throw ConfigError("condition dropout probabilities sum past 1");
    Cond out = c;
    real u = rng.uniform();
    if (u < p_img) {
        out.drop_image = true;
    } else if (u < p_img + p_txt) {
        out.drop_text = true;
    } else if (u < p_img + p_txt + p_both) {
        out.drop_image = true;
        out.drop_text = true;
    }
    if (out.drop_text) out.tokens = vocab.null_prompt();
    if (out.drop_image) {
        GDA_CHECK(null_embed.same_shape(c.embed), "null embedding shape mismatch");
        out.embed = null_embed;
    }
    return out;
}

Tensor text_key_mask(const std::vector<std::vector<int>>& ids) {
    int n = static_cast<int>(ids.size());
    GDA_CHECK(n > 0, "text_key_mask on empty batch");
    int L = static_cast<int>(ids[0].size());
    Tensor m({n, L});
    for (int i = 0; i < n; ++i) {
        GDA_CHECK(static_cast<int>(ids[i].size()) == L, "ragged token batch");
        for (int j = 0; j < L; ++j) m.at(i, j) = ids[i][j] == 0 ? kMaskNegInf : 0.0;
    }
    return m;
}

namespace {

// [N, L] key mask -> [N*Q, L]: every query row of sample n gets n's mask.
Tensor tile_key_mask(const Tensor& m, int q) {
    int n = m.rows(), L = m.cols();
    Tensor out({n * q, L});
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < q; ++t)
            std::copy(m.data.begin() + static_cast<long>(i) * L,
                      m.data.begin() + static_cast<long>(i + 1) * L,
                      out.data.begin() + (static_cast<long>(i) * q + t) * L);
    return out;
}

// q,k,v: [N*Tq, da] / [N*Tk, da]; masked scaled-dot-product attention.
Value attend(const Value& q, const Value& k, const Value& v, int n, const Tensor* key_mask) {
    int da = q->val.cols();
    int tq = q->val.rows() / n, tk = k->val.rows() / n;
    Value q3 = reshape(q, {n, tq, da});
    Value k3 = reshape(k, {n, tk, da});
    Value v3 = reshape(v, {n, tk, da});
    Value sc = scale(bmm(q3, k3, false, true), 1.0 / std::sqrt(static_cast<real>(da)));
    Value flat = reshape(sc, {n * tq, tk});
    if (key_mask) {
        GDA_CHECK(key_mask->rows() == n && key_mask->cols() == tk, "key mask shape mismatch");
        flat = add(flat, constant(tile_key_mask(*key_mask, tq)));
    }
    Value at = softmax_rows(flat);
    Value av = bmm(reshape(at, {n, tq, tk}), v3);
    return reshape(av, {n * tq, da});
}

}  // namespace

Value encode_text(const TextEncoder& te, const std::vector<std::vector<int>>& ids) {
    int n = static_cast<int>(ids.size());
    GDA_CHECK(n > 0, "encode_text on empty batch");
    int L = Vocab::MAX_TEXT_LEN;
    int vocab = te.tok->val.rows();
    std::vector<int> flat, posidx;
    flat.reserve(static_cast<size_t>(n) * L);
    posidx.reserve(static_cast<size_t>(n) * L);
    for (const auto& row : ids) {
        if (static_cast<int>(row.size()) != L)
            throw DomainError("prompt token sequence must have length MAX_TEXT_LEN");
        for (int j = 0; j < L; ++j) {
            if (row[j] < 0 || row[j] >= vocab) throw DomainError("token id out of vocabulary");
            flat.push_back(row[j]);
            posidx.push_back(j);
        }
    }
    Tensor mask = text_key_mask(ids);
    Value t = add(gather_rows(te.tok, flat), gather_rows(te.pos, posidx));
    for (const TextBlock* b : {&te.b0, &te.b1}) {
        Value h = layer_norm_rows(t, b->lng1, b->lnb1);
        Value q = matmul(h, b->wq, false, true);
        Value k = matmul(h, b->wk, false, true);
        Value v = matmul(h, b->wv, false, true);
        Value av = attend(q, k, v, n, &mask);
        t = add(t, matmul(av, b->wo, false, true));
        Value h2 = layer_norm_rows(t, b->lng2, b->lnb2);
        t = add(t, linear(silu(linear(h2, b->f1w, b->f1b)), b->f2w, b->f2b));
    }
    return layer_norm_rows(t, te.lng, te.lnb);
}

Value project_image_embedding(const Projector& p, const Value& f) {
    GDA_CHECK(f->val.rank() == 2, "projector input must be [N, d]");
    int n = f->val.rows(), d = f->val.cols();
    GDA_CHECK(p.query->val.cols() == d, "projector width mismatch with embedding");
    for (int i = 0; i < n; ++i) {
        real n2 = 0;
        for (int j = 0; j < d; ++j) n2 += f->val.at(i, j) * f->val.at(i, j);
        GDA_CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-6, "projector input row not unit-norm");
    }
    std::vector<int> tile(static_cast<size_t>(n) * kImgTokens);
    for (int i = 0; i < n; ++i)
        for (int q = 0; q < kImgTokens; ++q) tile[static_cast<size_t>(i) * kImgTokens + q] = q;
    Value t = gather_rows(p.query, tile);  // [N*4, d]
    for (const ProjBlock& b : p.blocks) {
        Value q = matmul(t, b.wq, false, true);
        Value k = matmul(f, b.wk, false, true);
        Value v = matmul(f, b.wv, false, true);
        Value av = attend(q, k, v, n, nullptr);
        t = add(t, matmul(av, b.wo, false, true));
        t = add(t, linear(t, b.fw, b.fb));
    }
    return t;
}

// ---- denoiser forward ----

Tensor time_embedding(const std::vector<int>& ts, int d) {
    GDA_CHECK(d >= 2 && d % 2 == 0, "time embedding width must be even");
    int n = static_cast<int>(ts.size());
    int half = d / 2;
    real denom = half > 1 ? static_cast<real>(half - 1) : 1.0;
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < half; ++k) {
            real w = std::exp(-std::log(10000.0) * static_cast<real>(k) / denom);
            out.at(i, k) = std::sin(ts[i] * w);
            out.at(i, half + k) = std::cos(ts[i] * w);
        }
    return out;
}

Value self_attn_block(const SelfAttn& p, const Value& z, int n_batch, bool use_lora) {
    if (z->val.rank() != 2 || z->val.rows() % n_batch != 0)
        throw DomainError("self attention tokens must be [N*T, C]");
    if (z->val.cols() != p.wq->val.cols()) throw DomainError("self attention width mismatch");
    Value h = layer_norm_rows(z, p.ln_g, p.ln_b);
    Value q = use_lora ? lora_linear(h, p.wq, p.lq) : matmul(h, p.wq, false, true);
    Value k = use_lora ? lora_linear(h, p.wk, p.lk) : matmul(h, p.wk, false, true);
    Value v = use_lora ? lora_linear(h, p.wv, p.lv) : matmul(h, p.wv, false, true);
    Value av = attend(q, k, v, n_batch, nullptr);
    return add(z, matmul(av, p.wo, false, true));
}

Value cross_attn_block(const CrossAttn& p, const Value& z, int n_batch, const CondFeatures& cond,
                       real lambda, bool use_lora) {
    if (z->val.rank() != 2 || z->val.rows() % n_batch != 0)
        throw DomainError("cross attention tokens must be [N*T, C]");
    if (z->val.cols() != p.wq->val.cols()) throw DomainError("cross attention width mismatch");
    if (lambda < 0) throw DomainError("lambda must be non-negative");
    GDA_CHECK(cond.c_txt, "cross attention needs text features");
    if (cond.c_txt->val.cols() != p.wk_txt->val.cols())
        throw DomainError("text feature width mismatch");
    if (cond.c_txt->val.rows() % n_batch != 0)
        throw DomainError("text feature batch mismatch");
    Value h = layer_norm_rows(z, p.ln_g, p.ln_b);
    Value q = use_lora ? lora_linear(h, p.wq, p.lq) : matmul(h, p.wq, false, true);
    Value kt =
        use_lora ? lora_linear(cond.c_txt, p.wk_txt, p.lk) : matmul(cond.c_txt, p.wk_txt, false, true);
    Value vt =
        use_lora ? lora_linear(cond.c_txt, p.wv_txt, p.lv) : matmul(cond.c_txt, p.wv_txt, false, true);
    Value z_att = attend(q, kt, vt, n_batch, &cond.txt_mask);
    if (lambda != 0) {
        GDA_CHECK(cond.c_img, "image branch enabled but no image features");
        if (cond.c_img->val.cols() != p.wk_img->val.cols())
            throw DomainError("image feature width mismatch");
        Value ki = matmul(cond.c_img, p.wk_img, false, true);
        Value vi = matmul(cond.c_img, p.wv_img, false, true);
        z_att = add(z_att, scale(attend(q, ki, vi, n_batch, nullptr), lambda));
    }
    return add(z, matmul(z_att, p.wo, false, true));
}

namespace {

Value conv1x1(const Value& x, const Value& w, const Value& b) {
    int n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
    Value t = reshape(nchw_to_ntc(x), {n * h * wd, c});
    t = linear(t, w, b);
    return ntc_to_nchw(reshape(t, {n, h * wd, w->val.rows()}), h, wd);
}

Value resconv(const ResConv& p, const Value& x, const Value& tf) {
    Value h = conv2d(silu(group_norm(x, kGroups, p.g1, p.n1)), p.w1, p.c1, 1);
    h = add_chan_bcast(h, linear(tf, p.tw, p.tb));
    h = conv2d(silu(group_norm(h, kGroups, p.g2, p.n2)), p.w2, p.c2, 1);
    Value skip = p.ws ? conv1x1(x, p.ws, p.cs) : x;
    return add(h, skip);
}

Value attn_site(const AttnSite& s, const Value& x, const CondFeatures& cond, real lambda,
                bool use_lora) {
    int n = x->val.dim(0), c = x->val.dim(1), h = x->val.dim(2), w = x->val.dim(3);
    Value z = reshape(nchw_to_ntc(x), {n * h * w, c});
    z = self_attn_block(s.sa, z, n, use_lora);
    z = cross_attn_block(s.ca, z, n, cond, lambda, use_lora);
    return ntc_to_nchw(reshape(z, {n, h * w, c}), h, w);
}

}  // namespace

Value predict_eps(const Denoiser& d, const Value& x_t, const std::vector<int>& ts,
                  const CondFeatures& cond, bool use_lora, bool use_image) {
    if (x_t->val.rank() != 4 || x_t->val.dim(1) != 3) throw DomainError("x_t must be [N,3,H,W]");
    int n = x_t->val.dim(0), hh = x_t->val.dim(2), ww = x_t->val.dim(3);
    if (hh % 4 != 0 || ww % 4 != 0 || hh < 4 || ww < 4)
        throw DomainError("spatial dims must be divisible by 4");
    GDA_CHECK(static_cast<int>(ts.size()) == n, "one timestep per sample");
    for (int t : ts) GDA_CHECK(t >= 1, "timesteps start at 1");
    real lam = use_image ? d.lambda : 0.0;
    const UNet& u = d.unet;

    Value tf = constant(time_embedding(ts, d.d_model));
    tf = linear(silu(linear(tf, u.t1w, u.t1b)), u.t2w, u.t2b);

    Value h = conv2d(x_t, u.stem_w, u.stem_b, 1);
    h = resconv(u.r1, h, tf);
    Value s1 = h;
    h = conv2d(h, u.d1w, u.d1b, 2);
    h = attn_site(u.a1, h, cond, lam, use_lora);
    h = resconv(u.r2, h, tf);
    Value s2 = h;
    h = conv2d(h, u.d2w, u.d2b, 2);
    h = attn_site(u.a2, h, cond, lam, use_lora);
    h = resconv(u.rm, h, tf);
    h = attn_site(u.am, h, cond, lam, use_lora);
    h = attn_site(u.a3, h, cond, lam, use_lora);
    h = nearest_up2(h);
    h = concat_channels(h, s2);
    h = resconv(u.r3, h, tf);
    h = attn_site(u.a4, h, cond, lam, use_lora);
    h = nearest_up2(h);
    h = concat_channels(h, s1);
    h = resconv(u.r4, h, tf);
    h = silu(group_norm(h, kGroups, u.og, u.ob));
    return conv2d(h, u.out_w, u.out_b, 1);
}

// ---- training ----

namespace {

Tensor batch_x0(const std::vector<glyph::Record>& recs, const std::vector<int>& order, size_t lo,
                size_t hi) {
    int B = static_cast<int>(hi - lo);
    Tensor X({B, 3, glyph::kImageSize, glyph::kImageSize});
    long per = 3L * glyph::kImageSize * glyph::kImageSize;
    for (int i = 0; i < B; ++i) {
        const Tensor& px = recs[order[lo + i]].img.pixels;
        for (long k = 0; k < per; ++k) X.data[i * per + k] = 2.0 * px.data[k] - 1.0;
    }
    return X;
}

struct NoisyBatch {
    Tensor x_t;
    Tensor noise;
    std::vector<int> ts;
};

NoisyBatch diffuse_batch(const Tensor& x0, const NoiseSchedule& sched, Rng& rng) {
    int B = x0.dim(0);
    long per = x0.numel() / B;
    NoisyBatch nb;
    nb.x_t = Tensor(x0.shape);
    nb.noise = Tensor(x0.shape);
    for (int i = 0; i < B; ++i) {
        int t = rng.uniform_int(1, sched.T);
        nb.ts.push_back(t);
        real sa = std::sqrt(sched.alphas_cumprod[t - 1]);
        real sn = std::sqrt(1.0 - sched.alphas_cumprod[t - 1]);
        for (long k = 0; k < per; ++k) {
            real eps = rng.normal();
            nb.noise.data[i * per + k] = eps;
            nb.x_t.data[i * per + k] = sa * x0.data[i * per + k] + sn * eps;
        }
    }
    return nb;
}

real run_step(AdamW& opt, const Value& loss, int epoch) {
    real lv = loss->val.data[0];
    if (!std::isfinite(lv))
        throw TrainingError("synthesis loss non-finite at epoch " + std::to_string(epoch));
    opt.zero_grad();
    backward(loss);
    opt.step();
    return lv;
}

void validate_train_config(const SynthTrainConfig& cfg) {
    GDA_CHECK(cfg.epochs >= 0 && cfg.batch_size > 0, "bad training config");
    GDA_CHECK(cfg.text_drop >= 0 && cfg.text_drop <= 1, "bad text dropout");
}

}  // namespace

SynthTrainResult train_base_denoiser(const glyph::DatasetSplit& split, const Vocab& vocab,
                                     const SynthTrainConfig& cfg) {
    if (split.train.empty()) throw DomainError("train_base_denoiser needs a non-empty train split");
    validate_train_config(cfg);
    SynthTrainResult r;
    r.sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
    r.model = make_denoiser(vocab.size(), cfg.d_model, cfg.lora_rank, cfg.lora_alpha, cfg.lambda,
                            derive_seed(cfg.seed, 21, 0));

    std::vector<Value> params;
    for (auto& [name, v] : named_base(r.model)) params.push_back(v);
    AdamW opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});

    int n = static_cast<int>(split.train.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 100 + static_cast<uint64_t>(epoch), 0));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
        Rng draw(derive_seed(cfg.seed, 200 + static_cast<uint64_t>(epoch), 0));
        real epoch_sum = 0;
        for (size_t lo = 0; lo < static_cast<size_t>(n); lo += cfg.batch_size) {
            size_t hi = std::min<size_t>(lo + cfg.batch_size, n);
            std::vector<std::vector<int>> ids;
            for (size_t k = lo; k < hi; ++k) {
                bool drop = draw.bernoulli(cfg.text_drop);
                ids.push_back(drop ? vocab.null_prompt()
                                   : split.train[order[k]].prompt.token_ids);
            }
            NoisyBatch nb = diffuse_batch(batch_x0(split.train, order, lo, hi), r.sched, draw);
            CondFeatures cond;
            cond.c_txt = encode_text(r.model.text, ids);
            cond.txt_mask = text_key_mask(ids);
            Value eps = predict_eps(r.model, constant(nb.x_t), nb.ts, cond, false, false);
            Value diff = sub(eps, constant(nb.noise));
            real lv = run_step(opt, mean_all(mul(diff, diff)), epoch);
            epoch_sum += lv * static_cast<real>(hi - lo);
        }
        r.epoch_loss.push_back(epoch_sum / n);
    }
    return r;
}

std::vector<real> train_synthesis(Denoiser& model, const NoiseSchedule& sched,
                                  const glyph::DatasetSplit& split, const Vocab& vocab,
                                  const emb::Encoder& sca, const Tensor& mean_embed,
                                  const SynthTrainConfig& cfg) {
    if (split.train.empty()) throw DomainError("train_synthesis needs a non-empty train split");
    validate_train_config(cfg);
    if (sca.d != model.d_model)
        throw ConfigError("SCA embedding width does not match denoiser d_model");
    if (cfg.p_img + cfg.p_txt + cfg.p_both > 1.0)
        throw ConfigError("condition dropout probabilities sum past 1");

    freeze_base(model);
    std::vector<Value> params;
    for (auto& [name, v] : named_adapter(model)) params.push_back(v);
    AdamW opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});

    // The encoder is frozen, so per-record embeddings are fixed; compute once.
    int n = static_cast<int>(split.train.size());
    Tensor all({n, 3, glyph::kImageSize, glyph::kImageSize});
    long per = 3L * glyph::kImageSize * glyph::kImageSize;
    for (int i = 0; i < n; ++i)
        std::copy(split.train[i].img.pixels.data.begin(), split.train[i].img.pixels.data.end(),
                  all.data.begin() + i * per);
    Tensor embeds = emb::embed(sca, all);

    std::vector<real> trace;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 300 + static_cast<uint64_t>(epoch), 0));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
        Rng draw(derive_seed(cfg.seed, 400 + static_cast<uint64_t>(epoch), 0));
        real epoch_sum = 0;
        for (size_t lo = 0; lo < static_cast<size_t>(n); lo += cfg.batch_size) {
            size_t hi = std::min<size_t>(lo + cfg.batch_size, n);
            int B = static_cast<int>(hi - lo);
            std::vector<std::vector<int>> ids;
            Tensor emb_rows({B, model.d_model});
            for (int i = 0; i < B; ++i) {
                const glyph::Record& rec = split.train[order[lo + i]];
                Cond c;
                c.tokens = rec.prompt.token_ids;
                c.embed = Tensor({1, model.d_model});
                for (int j = 0; j < model.d_model; ++j) c.embed.at(0, j) = embeds.at(order[lo + i], j);
                c = apply_condition_dropout(c, vocab, mean_embed.reshaped({1, model.d_model}), draw,
                                            cfg.p_img, cfg.p_txt, cfg.p_both);
                ids.push_back(c.tokens);
                for (int j = 0; j < model.d_model; ++j) emb_rows.at(i, j) = c.embed.at(0, j);
            }
            NoisyBatch nb = diffuse_batch(batch_x0(split.train, order, lo, hi), sched, draw);
            CondFeatures cond;
            cond.c_txt = encode_text(model.text, ids);
            cond.txt_mask = text_key_mask(ids);
            cond.c_img = project_image_embedding(model.proj, constant(emb_rows));
            Value eps = predict_eps(model, constant(nb.x_t), nb.ts, cond, true, true);
            Value diff = sub(eps, constant(nb.noise));
            real lv = run_step(opt, mean_all(mul(diff, diff)), epoch);
            epoch_sum += lv * static_cast<real>(hi - lo);
        }
        trace.push_back(epoch_sum / n);
    }
    return trace;
}

// ---- guidance + sampling ----

Tensor cfg_epsilon(const Tensor& eps_cond, const Tensor& eps_uncond, real g) {
    if (!eps_cond.same_shape(eps_uncond)) throw DomainError("cfg_epsilon shape mismatch");
    // the endpoints are contractually exact, which u + g*(c-u) is not in
    // floating point
    if (g == 1.0) return eps_cond;
    if (g == 0.0) return eps_uncond;
    Tensor out = eps_uncond;
    for (long i = 0; i < out.numel(); ++i)
        out.data[i] = eps_uncond.data[i] + g * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

Tensor sample_batch(const Denoiser& d, const NoiseSchedule& sched,
                    const std::vector<std::vector<int>>& token_ids, const Tensor& embeds,
                    const Tensor& mean_embed, const Vocab& vocab, const SamplerConfig& cfg,
                    const std::vector<uint64_t>& sample_indices) {
    int n = static_cast<int>(token_ids.size());
    GDA_CHECK(n > 0, "sample_batch on empty batch");
    if (cfg.steps < 1 || cfg.steps > sched.T)
        throw ConfigError("sampler steps must be in [1, T]");
    if (cfg.guidance < 0) throw DomainError("guidance must be non-negative");
    if (cfg.eta < 0) throw DomainError("eta must be non-negative");
    GDA_CHECK(embeds.rank() == 2 && embeds.rows() == n && embeds.cols() == d.d_model,
              "embeddings must be [n, d_model]");
    GDA_CHECK(mean_embed.numel() == d.d_model, "mean embedding width mismatch");
    GDA_CHECK(sample_indices.size() == static_cast<size_t>(n), "one stream index per sample");

    const int sz = glyph::kImageSize;
    long per = 3L * sz * sz;
    Tensor x({n, 3, sz, sz});
    std::vector<Rng> rngs;
    rngs.reserve(n);
    for (int i = 0; i < n; ++i) {
        rngs.emplace_back(derive_seed(cfg.seed, 40, sample_indices[i]));
        for (long k = 0; k < per; ++k) x.data[i * per + k] = rngs[i].normal();
    }

    std::vector<std::vector<int>> null_ids(n, vocab.null_prompt());
    CondFeatures cond_c, cond_u;
    cond_c.c_txt = encode_text(d.text, token_ids);
    cond_c.txt_mask = text_key_mask(token_ids);
    cond_c.c_img = project_image_embedding(d.proj, constant(embeds));
    cond_u.c_txt = encode_text(d.text, null_ids);
    cond_u.txt_mask = text_key_mask(null_ids);
    Tensor null_rows({n, d.d_model});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d.d_model; ++j) null_rows.at(i, j) = mean_embed.data[j];
    cond_u.c_img = project_image_embedding(d.proj, constant(null_rows));

    std::vector<int> taus(cfg.steps);
    for (int i = 0; i < cfg.steps; ++i)
        taus[i] = static_cast<int>((static_cast<long>(i + 1) * sched.T) / cfg.steps);

    for (int s = cfg.steps - 1; s >= 0; --s) {
        int t = taus[s];
        int prev = s > 0 ? taus[s - 1] : 0;
        real abar = sched.alphas_cumprod[t - 1];
        real abar_prev = prev > 0 ? sched.alphas_cumprod[prev - 1] : 1.0;
        std::vector<int> ts(n, t);
        Tensor eps_c = predict_eps(d, constant(x), ts, cond_c, true, true)->val;
        Tensor eps_u = predict_eps(d, constant(x), ts, cond_u, true, true)->val;
        Tensor eps = cfg_epsilon(eps_c, eps_u, cfg.guidance);
        real sa = std::sqrt(abar), sn = std::sqrt(1.0 - abar);
        real sigma = cfg.eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) *
                     std::sqrt(1.0 - abar / abar_prev);
        real dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
        real sp = std::sqrt(abar_prev);
        for (int i = 0; i < n; ++i)
            for (long k = 0; k < per; ++k) {
                long ix = i * per + k;
                real x0 = (x.data[ix] - sn * eps.data[ix]) / sa;
                x0 = std::clamp(x0, -1.0, 1.0);
                real z = sigma > 0 ? rngs[i].normal() : 0.0;
                x.data[ix] = sp * x0 + dir * eps.data[ix] + sigma * z;
            }
    }
    for (long i = 0; i < x.numel(); ++i) x.data[i] = std::clamp(0.5 * (x.data[i] + 1.0), 0.0, 1.0);
    return x;
}

Tensor sample(const Denoiser& d, const NoiseSchedule& sched, const emb::Encoder& sca,
              const Tensor& mean_embed, const LabeledImage& image_prompt,
              const PromptRecord& prompt, const Vocab& vocab, const SamplerConfig& cfg,
              uint64_t sample_index) {
    Tensor e = emb::embed(sca, image_prompt.pixels);
    return sample_batch(d, sched, {prompt.token_ids}, e, mean_embed, vocab, cfg, {sample_index});
}

// ---- persistence ----

void save_synth_checkpoint(const std::string& path, const SynthCheckpoint& c) {
    GDA_CHECK(c.stage == "base" || c.stage == "adapter", "stage must be base or adapter");
    Json j;
    j["version"] = 1;
    j["kind"] = "synthesis";
    j["stage"] = c.stage;
    j["d_model"] = c.model.d_model;
    j["vocab_size"] = c.model.vocab_size;
    j["lora_rank"] = c.model.lora_rank;
    j["lora_alpha"] = c.model.lora_alpha;
    j["lambda"] = c.model.lambda;
    j["T"] = c.sched.T;
    j["betas"] = c.sched.betas;
    j["vocab_hash"] = c.vocab_hash;
    j["sca_hash"] = c.sca_hash;
    j["mean_embedding"] = tensor_to_json(c.mean_embedding);
    j["config_hash"] = c.config_hash;
    j["epoch_loss"] = c.epoch_loss;
    Json base = Json::object(), adapter = Json::object();
    for (const auto& [name, v] : named_base(c.model)) base[name] = tensor_to_json(v->val);
    for (const auto& [name, v] : named_adapter(c.model)) adapter[name] = tensor_to_json(v->val);
    j["base_params"] = base;
    j["adapter_params"] = adapter;
    save_json(path, j);
}

SynthCheckpoint load_synth_checkpoint(const std::string& path, const std::string& expect_vocab,
                                      const std::string& expect_sca) {
    Json j = load_json(path);
    try {
        if (j.at("version").get<int>() != 1) throw ParseError("unsupported checkpoint version");
        if (j.at("kind").get<std::string>() != "synthesis")
            throw ParseError("not a synthesis checkpoint: " + path);
        SynthCheckpoint c;
        c.stage = j.at("stage").get<std::string>();
        if (c.stage != "base" && c.stage != "adapter")
            throw ParseError("unknown checkpoint stage " + c.stage);
        c.vocab_hash = j.at("vocab_hash").get<std::string>();
        c.sca_hash = j.at("sca_hash").get<std::string>();
        if (!expect_vocab.empty() && c.vocab_hash != expect_vocab)
            throw IntegrityError("checkpoint vocabulary hash does not match dataset");
        if (!expect_sca.empty() && c.sca_hash != expect_sca)
            throw IntegrityError("checkpoint SCA hash does not match embedding checkpoint");
        c.model = make_denoiser(j.at("vocab_size").get<int>(), j.at("d_model").get<int>(),
                                j.at("lora_rank").get<int>(), j.at("lora_alpha").get<real>(),
                                j.at("lambda").get<real>(), 0);
        c.sched.T = j.at("T").get<int>();
        c.sched.betas = j.at("betas").get<std::vector<real>>();
        if (static_cast<int>(c.sched.betas.size()) != c.sched.T || c.sched.T < 2)
            throw ParseError("checkpoint schedule malformed");
        c.sched.alphas_cumprod = acp_from_betas(c.sched.betas);
        c.mean_embedding = tensor_from_json(j.at("mean_embedding"));
        c.config_hash = j.at("config_hash").get<std::string>();
        c.epoch_loss = j.at("epoch_loss").get<std::vector<real>>();
        const Json& base = j.at("base_params");
        const Json& adapter = j.at("adapter_params");
        auto restore = [&](const Json& src, const Named& names) {
            for (const auto& [name, v] : names) {
                if (!src.contains(name)) throw ParseError("checkpoint missing parameter " + name);
                Tensor t = tensor_from_json(src.at(name));
                if (t.shape != v->val.shape)
                    throw IntegrityError("checkpoint parameter " + name + " has wrong shape");
                v->val = std::move(t);
            }
        };
        restore(base, named_base(c.model));
        restore(adapter, named_adapter(c.model));
        return c;
    } catch (const Json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

}  // namespace gda::synth
