#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gda/glyphworld.hpp"
#include "gda/graph.hpp"

namespace gda::emb {

using glyph::DatasetSplit;

// Small conv encoder: three blocks of (conv3x3 s1, conv3x3 s2), GroupNorm +
// SiLU after every conv, channels 16/32/64, global average pool, linear head
// to d. `mode` picks the training loss downstream: SCA (margin head on the
// normalized embedding) or CE (linear classifier on the raw feature).
struct ConvBlock {
    Value w1, b1, g1, n1;  // conv s1 + groupnorm affine
    Value w2, b2, g2, n2;  // conv s2 + groupnorm affine
};

struct Encoder {
    std::string mode;  // "SCA" | "CE"
    int d = 64;
    int num_classes = 0;
    std::vector<ConvBlock> blocks;
    Value head_w, head_b;  // feature head: [d,64], [1,d]
    Value ce_w, ce_b;      // CE classifier: [C,d], [1,C]; unused in SCA mode

    std::vector<Value> params() const;
    Value features(const Value& x) const;  // [B,3,32,32] -> [B,d], pre-normalization
    Value embed_batch(const Value& x) const;  // l2-normalized [B,d]
};

Encoder make_encoder(const std::string& mode, int d, int num_classes, uint64_t seed);

struct MarginHead {
    Value W;  // [d,C]; columns are normalized inside the loss
    real s = 32.0;
    real c = 0.35;
};

MarginHead make_margin_head(int d, int num_classes, real s, real c, uint64_t seed);

// Additive angular margin logits for a batch of unit-norm embeddings.
// Non-target columns: s * cos(theta_q). Target column: s * cos(theta_p + c)
// with the cosine clamped to +-(1 - 1e-7) before the angle is taken; when
// theta_p + c would pass pi the linear surrogate s * (cos theta_p - c sin c)
// is used instead. F must be row-normalized (ContractError otherwise).
Value margin_logits_v(const Value& F, const std::vector<int>& labels, const MarginHead& head);
Value margin_loss_v(const Value& F, const std::vector<int>& labels, const MarginHead& head);

// Convenience scalar evaluators (fresh graph, no grad kept).
std::vector<real> margin_logits(const Tensor& f, int label, const Tensor& W, real s, real c);
real margin_loss(const Tensor& F, const std::vector<int>& labels, const Tensor& W, real s,
                 real c);

struct EmbedTrainConfig {
    int epochs = 20;
    int batch_size = 128;
    real lr = 2e-3;
    real weight_decay = 1e-4;
    real s = 32.0;
    real c = 0.35;
    int d = 64;
    uint64_t seed = 0;
};

struct EmbedTrainResult {
    Encoder encoder;
    MarginHead head;              // meaningful in SCA mode
    std::vector<real> epoch_loss;
    Tensor mean_embedding;        // of split.train, normalized
};

// Deterministic given config.seed. Throws TrainingError naming the epoch if
// the loss goes non-finite.
EmbedTrainResult train_embedding(const DatasetSplit& split, const EmbedTrainConfig& cfg,
                                 const std::string& mode);

// Single image [3,32,32] (or batch [N,3,32,32]) -> unit-norm embedding rows.
Tensor embed(const Encoder& enc, const Tensor& images);

// Normalized mean of all train embeddings; DomainError if the pre-normalization
// norm collapses below 1e-6 or the split is empty.
Tensor dataset_mean_embedding(const DatasetSplit& split, const Encoder& enc);
Tensor mean_of_embeddings(const Tensor& embeddings);  // same degenerate-mean contract

struct GeometryReport {
    real intra_class_cos = 0;
    real inter_class_cos = 0;
    real bg_swap_cos = 0;
};

// embeddings/swapped: [n,d] row-normalized; swapped[i] re-renders sample i's
// class under fresh nuisance. Needs >=2 classes and >=2 samples per class.
GeometryReport geometry_report(const Tensor& embeddings, const std::vector<int>& labels,
                               const Tensor& swapped);

struct ProbeConfig {
    int iters = 300;
    real lr = 1e-2;
    real weight_decay = 0.0;
    uint64_t seed = 0;
};

// Trains a linear softmax head on frozen features; returns test Top-1.
real linear_probe(const Tensor& train_emb, const std::vector<int>& train_labels,
                  const Tensor& test_emb, const std::vector<int>& test_labels,
                  const ProbeConfig& cfg);

// ---- persistence ----

struct EmbedCheckpoint {
    Encoder encoder;
    std::optional<MarginHead> head;
    Tensor mean_embedding;
    std::string config_hash;
};

void save_embed_checkpoint(const std::string& path, const EmbedTrainResult& r,
                           const std::string& config_hash);
// expect_d / expect_classes of -1 skip that validation.
EmbedCheckpoint load_embed_checkpoint(const std::string& path, int expect_d = -1,
                                      int expect_classes = -1);

}  // namespace gda::emb
