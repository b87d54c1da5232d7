#include "gda/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "gda/common.hpp"
#include "gda/hash.hpp"
#include "gda/optim.hpp"
#include "gda/serialize.hpp"

namespace gda::emb {

namespace {

constexpr int kGnGroups = 8;
constexpr int kFeatChannels[3] = {16, 32, 64};

Value init_conv(int out, int in, Rng& rng) {
    real std = std::sqrt(2.0 / (9.0 * in));
    return param(Tensor::randn({out, in, 3, 3}, rng, std));
}

Value init_linear_w(int out, int in, Rng& rng) {
    return param(Tensor::randn({out, in}, rng, std::sqrt(1.0 / in)));
}

}  // namespace

Encoder make_encoder(const std::string& mode, int d, int num_classes, uint64_t seed) {
    GDA_CHECK(mode == "SCA" || mode == "CE", "encoder mode must be SCA or CE");
    GDA_CHECK(d > 0 && num_classes > 0, "encoder dims must be positive");
    Rng rng(derive_seed(seed, 0, 0));
    Encoder e;
    e.mode = mode;
    e.d = d;
    e.num_classes = num_classes;
    int in = 3;
    for (int b = 0; b < 3; ++b) {
        int out = kFeatChannels[b];
        ConvBlock blk;
        blk.w1 = init_conv(out, in, rng);
        blk.b1 = param(Tensor::zeros({out}));
        blk.g1 = param(Tensor::full({out}, 1.0));
        blk.n1 = param(Tensor::zeros({out}));
        blk.w2 = init_conv(out, out, rng);
        blk.b2 = param(Tensor::zeros({out}));
        blk.g2 = param(Tensor::full({out}, 1.0));
        blk.n2 = param(Tensor::zeros({out}));
        e.blocks.push_back(blk);
        in = out;
    }
    e.head_w = init_linear_w(d, kFeatChannels[2], rng);
    e.head_b = param(Tensor::zeros({1, d}));
    if (mode == "CE") {
        e.ce_w = init_linear_w(num_classes, d, rng);
        e.ce_b = param(Tensor::zeros({1, num_classes}));
    }
    return e;
}

std::vector<Value> Encoder::params() const {
    std::vector<Value> p;
    for (const auto& b : blocks)
        for (const Value& v : {b.w1, b.b1, b.g1, b.n1, b.w2, b.b2, b.g2, b.n2}) p.push_back(v);
    p.push_back(head_w);
    p.push_back(head_b);
    if (ce_w) {
        p.push_back(ce_w);
        p.push_back(ce_b);
    }
    return p;
}

Value Encoder::features(const Value& x) const {
    GDA_CHECK(x->val.rank() == 4 && x->val.dim(1) == 3 && x->val.dim(2) == glyph::kImageSize &&
                  x->val.dim(3) == glyph::kImageSize,
              "encoder expects [N,3,32,32]");
    Value h = x;
    for (const auto& b : blocks) {
        h = silu(group_norm(conv2d(h, b.w1, b.b1, 1), kGnGroups, b.g1, b.n1));
        h = silu(group_norm(conv2d(h, b.w2, b.b2, 2), kGnGroups, b.g2, b.n2));
    }
    return linear(avg_pool_all(h), head_w, head_b);
}

Value Encoder::embed_batch(const Value& x) const { return l2_normalize_rows(features(x)); }

MarginHead make_margin_head(int d, int num_classes, real s, real c, uint64_t seed) {
    GDA_CHECK(s > 0, "margin scale must be positive");
    GDA_CHECK(c >= 0 && c < M_PI / 2, "margin must be in [0, pi/2)");
    Rng rng(derive_seed(seed, 1, 0));
    MarginHead h;
    h.W = param(Tensor::randn({d, num_classes}, rng, 0.01));
    h.s = s;
    h.c = c;
    return h;
}

namespace {

void check_margin_inputs(const Value& F, const std::vector<int>& labels, const MarginHead& head) {
    GDA_CHECK(F->val.rank() == 2, "embeddings must be [B,d]");
    int B = F->val.rows(), d = F->val.cols();
    GDA_CHECK(head.W->val.rank() == 2 && head.W->val.rows() == d,
              "margin head dim mismatch with embeddings");
    GDA_CHECK(head.s > 0 && head.c >= 0 && head.c < M_PI / 2, "margin hyperparameters out of range");
    GDA_CHECK(static_cast<int>(labels.size()) == B, "one label per embedding row");
    int C = head.W->val.cols();
    for (int l : labels) GDA_CHECK(l >= 0 && l < C, "label out of range");
    for (int i = 0; i < B; ++i) {
        real n2 = 0;
        for (int j = 0; j < d; ++j) n2 += F->val.at(i, j) * F->val.at(i, j);
        GDA_CHECK(std::abs(std::sqrt(n2) - 1.0) <= 1e-6, "embedding row not unit-norm");
    }
}

}  // namespace

Value margin_logits_v(const Value& F, const std::vector<int>& labels, const MarginHead& head) {
    check_margin_inputs(F, labels, head);
    int B = F->val.rows(), C = head.W->val.cols();
    Value Wn = transpose2d(l2_normalize_rows(transpose2d(head.W)));
    Value cosM = matmul(F, Wn);  // [B,C]
    Value base = scale(cosM, head.s);
    if (head.c == 0.0) return base;  // zero margin is the exact identity

    Value t = clamp_v(gather_cols(cosM, labels), -1.0 + 1e-7, 1.0 - 1e-7);  // [B,1]
    // cos(theta + c) = t cos c - sqrt(1 - t^2) sin c
    Value sin_theta = sqrt_v(add_scalar(scale(mul(t, t), -1.0), 1.0));
    Value phi = sub(scale(t, std::cos(head.c)), scale(sin_theta, std::sin(head.c)));
    // past pi (t < -cos c): linear surrogate t - c sin c
    Value surrogate = add_scalar(t, -head.c * std::sin(head.c));
    Tensor in_range({B, 1});
    for (int i = 0; i < B; ++i)
        in_range.data[i] = t->val.data[i] >= -std::cos(head.c) ? 1.0 : 0.0;
    Tensor out_range = in_range;
    for (auto& v : out_range.data) v = 1.0 - v;
    Value target =
        scale(add(mul(phi, constant(in_range)), mul(surrogate, constant(out_range))), head.s);

    Tensor onehot({B, C});
    for (int i = 0; i < B; ++i) onehot.at(i, labels[i]) = 1.0;
    // replace the label column: base + onehot * (target - base_label)
    return add(base, mul_colvec(constant(onehot), sub(target, gather_cols(base, labels))));
}

Value margin_loss_v(const Value& F, const std::vector<int>& labels, const MarginHead& head) {
    if (F->val.numel() == 0 || labels.empty()) throw DomainError("margin_loss on empty batch");
    Value logits = margin_logits_v(F, labels, head);
    Value nll = sub(logsumexp_rows(logits), gather_cols(logits, labels));
    return mean_all(nll);
}

std::vector<real> margin_logits(const Tensor& f, int label, const Tensor& W, real s, real c) {
    MarginHead h;
    h.W = constant(W);
    h.s = s;
    h.c = c;
    Value F = constant(f.rank() == 1 ? f.reshaped({1, static_cast<int>(f.numel())}) : f);
    Value out = margin_logits_v(F, {label}, h);
    return out->val.data;
}

real margin_loss(const Tensor& F, const std::vector<int>& labels, const Tensor& W, real s,
                 real c) {
    MarginHead h;
    h.W = constant(W);
    h.s = s;
    h.c = c;
    return margin_loss_v(constant(F), labels, h)->val.data[0];
}

// ---- training ----

namespace {

Tensor batch_images(const std::vector<glyph::Record>& recs, const std::vector<int>& idx,
                    size_t lo, size_t hi) {
    int B = static_cast<int>(hi - lo);
    Tensor X({B, 3, glyph::kImageSize, glyph::kImageSize});
    long per = 3L * glyph::kImageSize * glyph::kImageSize;
    for (int i = 0; i < B; ++i) {
        const Tensor& px = recs[idx[lo + i]].img.pixels;
        std::copy(px.data.begin(), px.data.end(), X.data.begin() + i * per);
    }
    return X;
}

Value softmax_ce(const Value& logits, const std::vector<int>& labels) {
    return mean_all(sub(logsumexp_rows(logits), gather_cols(logits, labels)));
}

}  // namespace

EmbedTrainResult train_embedding(const DatasetSplit& split, const EmbedTrainConfig& cfg,
                                 const std::string& mode) {
    if (split.train.empty()) throw DomainError("train_embedding needs a non-empty train split");
    GDA_CHECK(mode == "SCA" || mode == "CE", "mode must be SCA or CE");
    GDA_CHECK(cfg.epochs >= 0 && cfg.batch_size > 0, "bad training config");
    int C = split.config.num_classes;

    EmbedTrainResult r;
    r.encoder = make_encoder(mode, cfg.d, C, derive_seed(cfg.seed, 10, 0));
    r.head = make_margin_head(cfg.d, C, cfg.s, cfg.c, derive_seed(cfg.seed, 11, 0));

    std::vector<Value> params = r.encoder.params();
    if (mode == "SCA") params.push_back(r.head.W);
    AdamW opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});

    int n = static_cast<int>(split.train.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, 100 + static_cast<uint64_t>(epoch), 0));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
        real epoch_sum = 0;
        for (size_t lo = 0; lo < static_cast<size_t>(n); lo += cfg.batch_size) {
            size_t hi = std::min<size_t>(lo + cfg.batch_size, n);
            std::vector<int> labels;
            for (size_t k = lo; k < hi; ++k)
                labels.push_back(split.train[order[k]].img.cls.class_id);
            Value x = constant(batch_images(split.train, order, lo, hi));
            Value h = r.encoder.features(x);
            Value loss;
            if (mode == "SCA")
                loss = margin_loss_v(l2_normalize_rows(h), labels, r.head);
            else
                loss = softmax_ce(linear(h, r.encoder.ce_w, r.encoder.ce_b), labels);
            real lv = loss->val.data[0];
            if (!std::isfinite(lv))
                throw TrainingError("embedding loss non-finite at epoch " + std::to_string(epoch));
            opt.zero_grad();
            backward(loss);
            opt.step();
            epoch_sum += lv * static_cast<real>(hi - lo);
        }
        r.epoch_loss.push_back(epoch_sum / n);
    }

    r.mean_embedding = dataset_mean_embedding(split, r.encoder);
    return r;
}

Tensor embed(const Encoder& enc, const Tensor& images) {
    Tensor x = images;
    if (x.rank() == 3) x = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != glyph::kImageSize ||
        x.dim(3) != glyph::kImageSize)
        throw DomainError("embed expects [3,32,32] or [N,3,32,32] images");
    int N = x.dim(0);
    Tensor out({N, enc.d});
    const int kChunk = 256;
    long per = 3L * glyph::kImageSize * glyph::kImageSize;
    for (int lo = 0; lo < N; lo += kChunk) {
        int hi = std::min(N, lo + kChunk);
        Tensor chunk({hi - lo, 3, glyph::kImageSize, glyph::kImageSize});
        std::copy(x.data.begin() + lo * per, x.data.begin() + hi * per, chunk.data.begin());
        Value e = enc.embed_batch(constant(std::move(chunk)));
        std::copy(e->val.data.begin(), e->val.data.end(), out.data.begin() + static_cast<long>(lo) * enc.d);
    }
    return out;
}

Tensor mean_of_embeddings(const Tensor& embeddings) {
    if (embeddings.numel() == 0) throw DomainError("mean of empty embedding set");
    GDA_CHECK(embeddings.rank() == 2, "embeddings must be [n,d]");
    int n = embeddings.rows(), d = embeddings.cols();
    Tensor mean({1, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean.data[j] += embeddings.at(i, j);
    real norm2 = 0;
    for (int j = 0; j < d; ++j) {
        mean.data[j] /= n;
        norm2 += mean.data[j] * mean.data[j];
    }
    real norm = std::sqrt(norm2);
    if (norm < 1e-6) throw DomainError("degenerate mean embedding (norm < 1e-6)");
    for (int j = 0; j < d; ++j) mean.data[j] /= norm;
    return mean;
}

Tensor dataset_mean_embedding(const DatasetSplit& split, const Encoder& enc) {
    if (split.train.empty()) throw DomainError("mean embedding of empty split");
    int n = static_cast<int>(split.train.size());
    Tensor all({n, 3, glyph::kImageSize, glyph::kImageSize});
    long per = 3L * glyph::kImageSize * glyph::kImageSize;
    for (int i = 0; i < n; ++i)
        std::copy(split.train[i].img.pixels.data.begin(), split.train[i].img.pixels.data.end(),
                  all.data.begin() + i * per);
    return mean_of_embeddings(embed(enc, all));
}

GeometryReport geometry_report(const Tensor& embeddings, const std::vector<int>& labels,
                               const Tensor& swapped) {
    GDA_CHECK(embeddings.rank() == 2 && swapped.rank() == 2, "embeddings must be [n,d]");
    int n = embeddings.rows(), d = embeddings.cols();
    GDA_CHECK(static_cast<int>(labels.size()) == n, "one label per row");
    GDA_CHECK(swapped.rows() == n && swapped.cols() == d, "swapped set must mirror embeddings");
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    if (counts.size() < 2) throw DomainError("geometry_report needs at least 2 classes");
    for (const auto& [l, c] : counts)
        if (c < 2) throw DomainError("geometry_report needs >=2 samples per class");

    auto dot = [&](const Tensor& A, int i, const Tensor& B, int j) {
        real s = 0;
        for (int k = 0; k < d; ++k) s += A.at(i, k) * B.at(j, k);
        return s;
    };
    real intra = 0, inter = 0, swap = 0;
    long n_intra = 0, n_inter = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            real cs = dot(embeddings, i, embeddings, j);
            if (labels[i] == labels[j]) {
                intra += cs;
                ++n_intra;
            } else {
                inter += cs;
                ++n_inter;
            }
        }
        swap += dot(embeddings, i, swapped, i);
    }
    GeometryReport rep;
    rep.intra_class_cos = intra / n_intra;
    rep.inter_class_cos = inter / n_inter;
    rep.bg_swap_cos = swap / n;
    return rep;
}

real linear_probe(const Tensor& train_emb, const std::vector<int>& train_labels,
                  const Tensor& test_emb, const std::vector<int>& test_labels,
                  const ProbeConfig& cfg) {
    GDA_CHECK(train_emb.rank() == 2 && test_emb.rank() == 2, "embeddings must be [n,d]");
    GDA_CHECK(train_emb.rows() == static_cast<int>(train_labels.size()), "label count mismatch");
    GDA_CHECK(test_emb.rows() == static_cast<int>(test_labels.size()), "label count mismatch");
    int C = 0;
    for (int l : train_labels) C = std::max(C, l + 1);
    std::set<int> distinct(train_labels.begin(), train_labels.end());
    if (distinct.size() < 2) throw DomainError("linear_probe needs at least 2 classes");

    int d = train_emb.cols();
    Rng rng(derive_seed(cfg.seed, 2, 0));
    Value w = param(Tensor::randn({C, d}, rng, 0.01));
    Value b = param(Tensor::zeros({1, C}));
    AdamW opt({w, b}, {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    Value X = constant(train_emb);
    for (int it = 0; it < cfg.iters; ++it) {
        Value loss = softmax_ce(linear(X, w, b), train_labels);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    Value logits = linear(constant(test_emb), w, b);
    int correct = 0;
    for (int i = 0; i < test_emb.rows(); ++i) {
        int best = 0;
        for (int q = 1; q < C; ++q)
            if (logits->val.at(i, q) > logits->val.at(i, best)) best = q;
        if (best == test_labels[i]) ++correct;
    }
    return test_emb.rows() == 0 ? 0.0 : static_cast<real>(correct) / test_emb.rows();
}

// ---- persistence ----

namespace {

std::vector<std::pair<std::string, Value>> named_params(const Encoder& e, const MarginHead* head) {
    std::vector<std::pair<std::string, Value>> out;
    for (size_t i = 0; i < e.blocks.size(); ++i) {
        const auto& b = e.blocks[i];
        std::string p = "b" + std::to_string(i) + ".";
        out.push_back({p + "w1", b.w1});
        out.push_back({p + "b1", b.b1});
        out.push_back({p + "g1", b.g1});
        out.push_back({p + "n1", b.n1});
        out.push_back({p + "w2", b.w2});
        out.push_back({p + "b2", b.b2});
        out.push_back({p + "g2", b.g2});
        out.push_back({p + "n2", b.n2});
    }
    out.push_back({"head.w", e.head_w});
    out.push_back({"head.b", e.head_b});
    if (e.ce_w) {
        out.push_back({"ce.w", e.ce_w});
        out.push_back({"ce.b", e.ce_b});
    }
    if (head) out.push_back({"margin.W", head->W});
    return out;
}

}  // namespace

void save_embed_checkpoint(const std::string& path, const EmbedTrainResult& r,
                           const std::string& config_hash) {
    Json j;
    j["version"] = 1;
    j["kind"] = "sca_embedding";
    j["mode"] = r.encoder.mode;
    j["d"] = r.encoder.d;
    j["num_classes"] = r.encoder.num_classes;
    j["s"] = r.head.s;
    j["c"] = r.head.c;
    j["config_hash"] = config_hash;
    j["epoch_loss"] = r.epoch_loss;
    j["mean_embedding"] = tensor_to_json(r.mean_embedding);
    Json params = Json::object();
    const MarginHead* head = r.encoder.mode == "SCA" ? &r.head : nullptr;
    for (const auto& [name, v] : named_params(r.encoder, head))
        params[name] = tensor_to_json(v->val);
    j["params"] = params;
    save_json(path, j);
}

EmbedCheckpoint load_embed_checkpoint(const std::string& path, int expect_d, int expect_classes) {
    Json j = load_json(path);
    try {
        if (j.at("version").get<int>() != 1) throw ParseError("unsupported checkpoint version");
        if (j.at("kind").get<std::string>() != "sca_embedding")
            throw ParseError("not an embedding checkpoint: " + path);
        std::string mode = j.at("mode").get<std::string>();
        int d = j.at("d").get<int>();
        int C = j.at("num_classes").get<int>();
        if (expect_d >= 0 && d != expect_d)
            throw IntegrityError("checkpoint d=" + std::to_string(d) + " does not match expected " +
                                 std::to_string(expect_d));
        if (expect_classes >= 0 && C != expect_classes)
            throw IntegrityError("checkpoint num_classes=" + std::to_string(C) +
                                 " does not match expected " + std::to_string(expect_classes));
        EmbedCheckpoint ck;
        ck.encoder = make_encoder(mode, d, C, 0);
        MarginHead head = make_margin_head(d, C, j.at("s").get<real>(), j.at("c").get<real>(), 0);
        ck.config_hash = j.at("config_hash").get<std::string>();
        ck.mean_embedding = tensor_from_json(j.at("mean_embedding"));
        const Json& params = j.at("params");
        const MarginHead* headp = mode == "SCA" ? &head : nullptr;
        for (auto& [name, v] : named_params(ck.encoder, headp)) {
            if (!params.contains(name)) throw ParseError("checkpoint missing parameter " + name);
            Tensor t = tensor_from_json(params.at(name));
            if (t.shape != v->val.shape)
                throw IntegrityError("checkpoint parameter " + name + " has wrong shape");
            v->val = std::move(t);
        }
        if (mode == "SCA") ck.head = head;
        return ck;
    } catch (const Json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
}

}  // namespace gda::emb
