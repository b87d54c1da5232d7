#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gda/augmentor.hpp"
#include "gda/embedding.hpp"

namespace gda::eval {

using glyph::Bucket;
using glyph::DatasetSplit;

// ---- attribute probes ----

// Tiny convnet: two stride-2 conv blocks (GroupNorm + SiLU), global average
// pool, linear head. Enough capacity to read background texture and color
// off 32x32 pixels.
struct ProbeNet {
    Value w1, b1, g1, n1;  // conv 3->16 s2
    Value w2, b2, g2, n2;  // conv 16->32 s2
    Value head_w, head_b;  // [C,32], [1,C]
    int num_classes = 0;

    std::vector<Value> params() const;
    Value logits(const Value& x) const;  // [N,3,32,32] -> [N,C]
};

struct AttributeProbes {
    ProbeNet texture;  // BgTexture, 3 classes
    ProbeNet hue;      // background hue slot, 8 classes
    real texture_acc = 0, hue_acc = 0;  // held-out, clean data
    bool texture_gate_skipped = false;  // single label value in train
    bool hue_gate_skipped = false;
    bool trained = false;
};

struct ProbeTrainConfig {
    int epochs = 6;
    int batch_size = 64;
    real lr = 2e-3;
    real weight_decay = 0;
    real gate = 0.95;
    uint64_t seed = 0;
};

// Trains both probes on split.train nuisance metadata and gates each at
// `gate` held-out accuracy on split.test. A probe whose train labels are all
// one value skips its gate with a warning flag. TrainingError (naming the
// attained accuracy) on gate failure or non-finite loss.
AttributeProbes train_attribute_probes(const DatasetSplit& split, const ProbeTrainConfig& cfg);

// Softmax probabilities, rows aligned with the input batch. [N,3] / [N,8].
Tensor probe_probs(const ProbeNet& net, const Tensor& images);

void save_probes(const std::string& path, const AttributeProbes& p);
AttributeProbes load_probes(const std::string& path);

// ---- metrics ----

// exp of the eigenvalue entropy of the cosine kernel K/n. Rows are
// normalized internally; the diagonal is pinned at exactly 1. Eigenvalues
// in [-1e-10, 0) are zeroed; anything below -1e-8 raises NumericalError.
// DomainError on an empty set. 1 <= result <= n.
real vendi_score(const Tensor& embeddings);

struct OracleClassifier {
    emb::Encoder enc;  // CE mode, includes the linear classifier
    real clean_acc = 0;
    std::string table_hash;  // class table identity
};

struct OracleTrainConfig {
    int per_class = 64;    // fresh clean renders per class
    int test_per_class = 16;
    int epochs = 10;
    int batch_size = 64;
    real lr = 2e-3;
    real weight_decay = 1e-4;
    real gate = 0.99;
    uint64_t seed = 0;
};

// Trains the in-domain expert on freshly rendered images disjoint (by seed
// stream) from every experiment split. TrainingError below the gate.
OracleClassifier train_oracle(int num_classes, int num_meta, const OracleTrainConfig& cfg);
void save_oracle(const std::string& path, const OracleClassifier& oracle);
// Re-applies the 0.99 gate: IntegrityError if the stored accuracy fails it.
OracleClassifier load_oracle(const std::string& path);

// Oracle top-k class predictions, [N][k], most confident first.
std::vector<std::vector<int>> oracle_topk(const OracleClassifier& oracle, const Tensor& images,
                                          int k);

// Fraction of kept pool samples whose conditioning class is in the oracle's
// top-k. DomainError on an empty kept set or k < 1.
real gen_topk(const aug::SyntheticPool& pool, const OracleClassifier& oracle, int k);

struct MetricsReport {
    real vendi = 0;
    real concept_consistency = 0;  // referee-encoder cosine, generated vs source
    real text_consistency = 0;     // mean text_score over kept samples
    real gen_top1 = 0, gen_top5 = 0;
    real downstream_top1 = 0;
    std::map<std::string, real> bucket_top1;  // head/mid/tail, long_tail only
    std::string config_hash, checkpoint_hash;
};

// Pool-side metrics: vendi + concept consistency under the referee encoder
// (the oracle's CE encoder — a family that did not train the pool), text
// consistency from stored scores, gen top-1/top-5 from the oracle.
MetricsReport evaluate_pool(const aug::SyntheticPool& pool, const DatasetSplit& split,
                            const OracleClassifier& oracle);

// ---- downstream classifier ----

struct MlpHead {
    Value ln1g, ln1b, w1, b1;  // LN + linear d->d, silu
    Value ln2g, ln2b, w2, b2;  // LN + linear d->d, silu
    Value w3, b3;              // linear d->C logits
};

struct DownstreamClassifier {
    emb::Encoder backbone;  // feature extractor (head_w/head_b feed the MLP)
    MlpHead head;
    std::string protocol;  // conventional|few_shot|long_tail|ood
    int num_classes = 0;
    std::vector<real> lws_log_scales;  // empty until lws_finetune runs
};

struct DownstreamConfig {
    int epochs = 12;
    int batch_size = 64;
    real lr = 2e-3;
    real weight_decay = 1e-4;
    uint64_t seed = 0;
    int aux_pretrain_epochs = 8;  // few_shot encoder pretraining on aux classes
};

struct DownstreamResult {
    DownstreamClassifier cls;
    MetricsReport report;  // downstream_top1 (+ bucket_top1) filled
    std::vector<real> epoch_loss;
};

// Trains backbone + 3-layer MLP head with cross-entropy. A pool switches the
// batches to mixed real/synthetic sampling (instance mode, or
// longtail_balanced under the long_tail protocol — vanilla long_tail runs use
// the same balanced real sampling so pool-vs-none comparisons isolate the
// synthetic data). rho=0 draws the identical stream as pool=none. few_shot
// pretrains the encoder on auxiliary classes, freezes it, and trains the head
// only. ConfigError when protocol != split.config.kind.
DownstreamResult train_downstream(const DatasetSplit& split, const aug::SyntheticPool* pool,
                                  const aug::MixConfig& mix, const std::string& protocol,
                                  const DownstreamConfig& cfg);

// Top-1 on split.test; per-bucket mean class accuracy for long_tail.
real test_top1(const DownstreamClassifier& cls, const DatasetSplit& split);
std::map<std::string, real> bucket_top1(const DownstreamClassifier& cls,
                                        const DatasetSplit& split);

// Logits for a batch, LWS scales applied when present.
Tensor classify(const DownstreamClassifier& cls, const Tensor& images);

// Freezes every network weight and learns per-class positive logit scales
// (exp-parametrized, initialized to 1) on class-balanced real / instance-
// balanced synthetic batches. ConfigError unless cls.protocol == "long_tail".
// 0 epochs leaves all scales at exactly 1.
void lws_finetune(DownstreamClassifier& cls, const DatasetSplit& split,
                  const aug::SyntheticPool& pool, real rho, int epochs,
                  const DownstreamConfig& cfg);

// ---- sweeps & reports ----

struct SweepPoint {
    real rho = 0;
    real multiplier = 0;
    real top1 = 0;
};

struct SweepConfig {
    std::vector<real> rho_values;
    std::vector<real> multiplier_values;
    aug::PoolGenConfig gen;      // mix.pool_multiplier / synthetic_fraction overridden per point
    DownstreamConfig downstream;
    std::string protocol = "conventional";
    std::string out_dir;
};

// Grid of train_downstream runs with shared seeds; one pool per multiplier.
// Writes sweep.csv plus top1-vs-rho and top1-vs-multiplier line plots.
std::vector<SweepPoint> sweep(const DatasetSplit& split, const synth::SynthCheckpoint& ckpt,
                              const emb::Encoder& sca, const AttributeProbes& probes,
                              const OracleClassifier& oracle, const SweepConfig& cfg);

// report.json + report.csv (one header row + one value row, fixed column
// order). IoError on unwritable paths.
void emit_report(const MetricsReport& report, const std::string& dir);
MetricsReport load_report(const std::string& dir);

// Simple line plot to a PNG tensor file: one series per curve, shared x.
void save_line_plot(const std::string& path, const std::vector<real>& xs,
                    const std::vector<std::vector<real>>& series,
                    const std::vector<std::string>& labels);

}  // namespace gda::eval
