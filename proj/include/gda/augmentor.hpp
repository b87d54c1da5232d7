#pragma once

#include <map>
#include <string>
#include <vector>

#include "gda/embedding.hpp"
#include "gda/synthesis.hpp"

namespace gda::eval {
struct AttributeProbes;
}

namespace gda::aug {

using glyph::DatasetSplit;
using glyph::PromptRecord;
using glyph::Vocab;

struct SyntheticSample {
    Tensor image;           // [3,32,32] in [0,1], quantized to the 1/255 grid
    int source_index = -1;  // into split.train; always the sample's own class
    int class_id = -1;
    PromptRecord prompt;
    real concept_score = 0;  // cos(SCA(generated), SCA(source))
    real text_score = 0;     // mean probe probability of the requested attributes
    bool scored = false;
    bool kept = true;
    uint64_t sample_seed = 0;  // pool-wide index; also the noise stream id
};

struct MixConfig {
    real pool_multiplier = 5.0;
    int per_class_floor = 250;
    real synthetic_fraction = 0.5;  // rho
};

struct SyntheticPool {
    std::vector<SyntheticSample> samples;
    std::map<int, int> per_class_counts;
    std::vector<int> skipped_classes;  // no real sample to condition on
    std::string config_hash;           // generation-relevant knobs + seed
    std::string checkpoint_hash;       // synthesis checkpoint provenance
    bool filtered = false;
    real decile = 0;
};

// n fresh prompts for one class: background attributes sampled independently
// per prompt, class token swapped for the meta name with probability
// meta_prob. DomainError on an unknown class id.
std::vector<PromptRecord> build_prompt_pool(const glyph::ClassTable& table, const Vocab& vocab,
                                            int class_id, int n, real meta_prob, Rng& rng);

struct PoolGenConfig {
    MixConfig mix;
    synth::SamplerConfig sampler;  // sampler.seed is overridden by seed below
    uint64_t seed = 0;
    int batch_size = 16;          // throughput knob; outputs are batch-invariant
    std::string checkpoint_hash;  // provenance passthrough (e.g. file sha)
};

// For each class with n real train samples, generates
// max(round(pool_multiplier*n), per_class_floor) images, each conditioned on
// a uniformly drawn real image of that class and a fresh prompt. Sample i's
// prompt/source draws come from derive_seed(seed, 50, i) and its noise from
// the sampler stream for index i, so any subset regenerates bit-identically.
// Classes with zero real samples are recorded in skipped_classes.
// ConfigError on a non-positive multiplier or negative floor; IntegrityError
// if the checkpoint's vocab hash does not match the split's vocab.
SyntheticPool generate_pool(const DatasetSplit& split, const synth::SynthCheckpoint& ckpt,
                            const emb::Encoder& sca, const PoolGenConfig& cfg);

// Fills concept_score (SCA cosine between generated image and its source) and
// text_score (mean probe probability that the image shows the prompt's
// requested background texture and color). ConfigError if the probes are
// untrained; ContractError on dangling source indices.
void score_pool(SyntheticPool& pool, const DatasetSplit& split, const emb::Encoder& sca,
                const eval::AttributeProbes& probes);

// Pool-wide per-score bottom deciles: exactly floor(decile*n) samples fall
// below each cut (ties broken toward lower sample index), and kept=false iff
// a sample is in either bottom set. Touches only kept flags. ContractError on
// unscored samples, DomainError for decile outside [0,1].
void filter_pool(SyntheticPool& pool, real decile = 0.10);

enum class MixMode { instance, longtail_balanced };

struct MixedRef {
    bool synthetic = false;
    int index = 0;  // into split.train or pool.samples
};

// One batch: each element independently synthetic with probability rho (one
// uniform draw per element, consumed even when rho is 0 or 1, so equal seeds
// give identical streams across rho settings). instance: uniform over train /
// over kept samples. longtail_balanced: real side uniform over classes then
// uniform within the class; synthetic side stays instance-balanced. Only kept
// samples are ever emitted. DomainError for rho outside [0,1]; ConfigError
// when rho>0 with nothing kept or rho<1 with an empty train split.
std::vector<MixedRef> mixed_batch(const DatasetSplit& split, const SyntheticPool& pool, real rho,
                                  MixMode mode, int batch_size, Rng& rng);

// Directory layout: images/{i}.png + pool.jsonl (one record per sample:
// source_index, class_id, prompt, scores, kept, seed) + pool.json
// (provenance + counts). Images are on the 1/255 grid so the round trip is
// exact.
void save_pool(const SyntheticPool& pool, const std::string& dir);
SyntheticPool load_pool(const std::string& dir);  // IoError / ParseError

}  // namespace gda::aug
