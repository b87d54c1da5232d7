#pragma once

#include <array>
#include <string>
#include <vector>

#include "gda/embedding.hpp"
#include "gda/glyphworld.hpp"
#include "gda/graph.hpp"
#include "gda/rng.hpp"

// Toy conditional denoising diffusion in pixel space. A small UNet with
// self-attention plus dual text/image cross-attention denoises 32x32 images;
// a frozen SCA embedding enters through a 4-token projector and per-layer
// image key/value adapters, LoRA deltas adapt the frozen base, and sampling
// is deterministic DDIM with multi-modal classifier-free guidance.
namespace gda::synth {

using glyph::LabeledImage;
using glyph::PromptRecord;
using glyph::Vocab;

// ---- diffusion schedule ----

struct NoiseSchedule {
    int T = 200;
    std::vector<real> betas;           // betas[t-1] = beta_t
    std::vector<real> alphas_cumprod;  // alphas_cumprod[t-1] = abar_t, strictly decreasing
};

// Linear beta interpolation; DomainError outside 0 < beta_min <= beta_max < 1 or T < 2.
NoiseSchedule make_schedule(int T = 200, real beta_min = 1e-4, real beta_max = 0.02);

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise. t in [1,T]; DomainError otherwise.
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched);

// ---- parameter blocks ----

// Rank-r delta on a frozen base matrix: y = W x + alpha * B (A x). B starts
// at zero so the delta is exactly absent at init.
struct LoraPair {
    Value a;  // [r, in]
    Value b;  // [out, r]
    real alpha = 1.0;
};

// x [n,in] -> [n,out], no bias. DomainError on inconsistent shapes.
Value lora_linear(const Value& x, const Value& w, const LoraPair& p);

struct SelfAttn {
    Value ln_g, ln_b;      // pre-norm over token rows
    Value wq, wk, wv;      // [d_attn, C]
    Value wo;              // [C, d_attn]
    LoraPair lq, lk, lv;
};

struct CrossAttn {
    Value ln_g, ln_b;
    Value wq;              // [d_attn, C]
    Value wk_txt, wv_txt;  // [d_attn, d_model]
    Value wo;              // [C, d_attn]
    LoraPair lq, lk, lv;   // deltas for wq / wk_txt / wv_txt
    Value wk_img, wv_img;  // image adapter, [d_attn, d_model]
};

struct ResConv {
    Value g1, n1, w1, c1;  // GN + 3x3 conv (in -> out)
    Value tw, tb;          // time feature -> per-channel shift
    Value g2, n2, w2, c2;  // GN + 3x3 conv (out -> out)
    Value ws, cs;          // 1x1 skip projection when in != out, else empty
};

struct AttnSite {
    SelfAttn sa;
    CrossAttn ca;
};

struct TextBlock {
    Value lng1, lnb1, wq, wk, wv, wo;
    Value lng2, lnb2, f1w, f1b, f2w, f2b;
};

// Token + learned position embedding, 2 pre-norm self-attention blocks,
// final layer norm. Padding positions are masked out as keys everywhere.
struct TextEncoder {
    Value tok;  // [vocab, d_model]
    Value pos;  // [MAX_TEXT_LEN, d_model]
    TextBlock b0, b1;
    Value lng, lnb;
};

struct ProjBlock {
    Value wq, wk, wv, wo;  // [d_model, d_model]
    Value fw, fb;          // fc d_model -> d_model
};

// 4 learnable query tokens attend to the embedding (a length-1 key/value
// sequence) through 4 blocks; each block is t += attn, then t += fc(t).
struct Projector {
    Value query;  // [4, d_model]
    std::array<ProjBlock, 4> blocks;
};

constexpr int kImgTokens = 4;

// Channel plan: stem 16 @32x32, down to 32 @16x16 and 48 @8x8. Attention
// runs at 16x16 and 8x8 only.
struct UNet {
    Value t1w, t1b, t2w, t2b;  // time MLP d_model -> d_model
    Value stem_w, stem_b;      // 3 -> 16
    ResConv r1;                // 16 @32
    Value d1w, d1b;            // stride-2, 16 -> 32
    AttnSite a1;               // @16, C=32
    ResConv r2;                // 32 @16
    Value d2w, d2b;            // stride-2, 32 -> 48
    AttnSite a2;               // @8, C=48
    ResConv rm;                // bottleneck, 48 @8
    AttnSite am;               // @8
    AttnSite a3;               // up path @8, C=48
    ResConv r3;                // 80 -> 32 @16 (after upsample + skip concat)
    AttnSite a4;               // @16, C=32
    ResConv r4;                // 48 -> 16 @32
    Value og, ob;              // output GN
    Value out_w, out_b;        // 16 -> 3, zero-init
};

struct Denoiser {
    int d_model = 64;
    int vocab_size = 0;
    int lora_rank = 4;
    real lora_alpha = 1.0;
    real lambda = 1.0;  // image-attention weight; 0 skips the image branch bitwise
    TextEncoder text;
    Projector proj;
    UNet unet;
};

Denoiser make_denoiser(int vocab_size, int d_model, int lora_rank, real lora_alpha, real lambda,
                       uint64_t seed);

// Base weights (UNet + text encoder + time MLP) vs. adaptation weights
// (LoRA pairs, image adapters, projector), in stable checkpoint order.
std::vector<std::pair<std::string, Value>> named_base(const Denoiser& d);
std::vector<std::pair<std::string, Value>> named_adapter(const Denoiser& d);

// Marks every base weight requires_grad=false; backward then treats them as
// constants and the optimizer never sees them.
void freeze_base(Denoiser& d);

// ---- conditioning ----

// Per-sample conditioning before encoding: prompt token ids plus the frozen
// SCA embedding row. Dropout substitutes the null text / mean embedding.
struct Cond {
    std::vector<int> tokens;  // length MAX_TEXT_LEN
    Tensor embed;             // [1, d] unit-norm
    bool drop_text = false;
    bool drop_image = false;
};

// One mutually exclusive draw per sample: image only, text only, both, or
// neither. ConfigError if the probabilities sum past 1.
Cond apply_condition_dropout(const Cond& c, const Vocab& vocab, const Tensor& null_embed,
                             Rng& rng, real p_img = 0.05, real p_txt = 0.05, real p_both = 0.05);

// Additive key mask: 0 where the token is real, -1e30 at padding. [N, L].
Tensor text_key_mask(const std::vector<std::vector<int>>& ids);

// Batched text features, [N*MAX_TEXT_LEN, d_model].
Value encode_text(const TextEncoder& te, const std::vector<std::vector<int>>& ids);

// f: [N, d] unit-norm rows -> [N*4, d_model]. ContractError off the unit sphere.
Value project_image_embedding(const Projector& p, const Value& f);

// Encoded conditioning for one batch.
struct CondFeatures {
    Value c_txt;      // [N*L, d_model]
    Tensor txt_mask;  // [N, L]
    Value c_img;      // [N*4, d_model]; empty Value when the image branch is off
};

// ---- denoiser forward ----

// Sinusoidal embedding of integer timesteps, [n, d].
Tensor time_embedding(const std::vector<int>& ts, int d);

// z: [N*T, C] spatial tokens. Residual attention blocks; cross attention is
// text attention + lambda * image attention through the shared output
// projection. lambda == 0 never touches cond.c_img.
Value self_attn_block(const SelfAttn& p, const Value& z, int n_batch, bool use_lora);
Value cross_attn_block(const CrossAttn& p, const Value& z, int n_batch, const CondFeatures& cond,
                       real lambda, bool use_lora);

// eps prediction. x_t: [N,3,H,W] with H,W divisible by 4; ts: one timestep
// per sample. use_lora=false / use_image=false is the base-pretraining path;
// use_image applies the model's lambda, so lambda==0 still skips the branch.
Value predict_eps(const Denoiser& d, const Value& x_t, const std::vector<int>& ts,
                  const CondFeatures& cond, bool use_lora, bool use_image);

// ---- training ----

struct SynthTrainConfig {
    int epochs = 12;
    int batch_size = 32;
    real lr = 1e-3;  // toy-scale; the reference setup uses 1e-5 at SDXL scale
    real weight_decay = 0.0;
    int T = 200;
    real beta_min = 1e-4;
    real beta_max = 0.02;
    real text_drop = 0.1;                            // base stage null-text probability
    real p_img = 0.05, p_txt = 0.05, p_both = 0.05;  // adapter stage dropout
    int d_model = 64;
    int lora_rank = 4;
    real lora_alpha = 1.0;
    real lambda = 1.0;
    uint64_t seed = 0;
};

struct SynthTrainResult {
    Denoiser model;
    NoiseSchedule sched;
    std::vector<real> epoch_loss;  // mean eps-MSE per epoch
};

// Stage 1: text-only pretraining of base UNet + text encoder (image branch
// off, no LoRA). TrainingError naming the epoch on non-finite loss.
SynthTrainResult train_base_denoiser(const glyph::DatasetSplit& split, const Vocab& vocab,
                                     const SynthTrainConfig& cfg);

// Stage 2: freezes the base, then trains LoRA + image adapters + projector on
// (SCA embedding, prompt, image) triplets with condition dropout. Returns the
// per-epoch loss trace.
std::vector<real> train_synthesis(Denoiser& model, const NoiseSchedule& sched,
                                  const glyph::DatasetSplit& split, const Vocab& vocab,
                                  const emb::Encoder& sca, const Tensor& mean_embed,
                                  const SynthTrainConfig& cfg);

// ---- guidance + sampling ----

// eps_uncond + g (eps_cond - eps_uncond); DomainError on shape mismatch.
Tensor cfg_epsilon(const Tensor& eps_cond, const Tensor& eps_uncond, real g);

struct SamplerConfig {
    int steps = 50;  // <= T
    real guidance = 5.0;
    uint64_t seed = 0;
    real eta = 0.0;  // 0 = deterministic
};

// DDIM over `steps` evenly sub-sampled timesteps. The unconditional branch
// uses null text and the mean embedding simultaneously. Initial noise (and
// eta>0 perturbations) come from derive_seed(cfg.seed, 40, sample_index[i]),
// so a sample's output depends only on its own inputs, seed, and index.
// Returns [n, 3, 32, 32] in [0,1].
Tensor sample_batch(const Denoiser& d, const NoiseSchedule& sched,
                    const std::vector<std::vector<int>>& token_ids, const Tensor& embeds,
                    const Tensor& mean_embed, const Vocab& vocab, const SamplerConfig& cfg,
                    const std::vector<uint64_t>& sample_indices);

// Single-sample convenience: embeds the image prompt with the SCA encoder.
Tensor sample(const Denoiser& d, const NoiseSchedule& sched, const emb::Encoder& sca,
              const Tensor& mean_embed, const LabeledImage& image_prompt,
              const PromptRecord& prompt, const Vocab& vocab, const SamplerConfig& cfg,
              uint64_t sample_index = 0);

// ---- persistence ----

struct SynthCheckpoint {
    Denoiser model;
    NoiseSchedule sched;
    std::string stage;       // "base" | "adapter"
    std::string vocab_hash;
    std::string sca_hash;        // adapter stage: hash of the SCA checkpoint file
    Tensor mean_embedding;       // adapter stage: null-image conditioning vector
    std::string config_hash;
    std::vector<real> epoch_loss;
};

void save_synth_checkpoint(const std::string& path, const SynthCheckpoint& c);

// Non-empty expectations must match the stored hashes (IntegrityError), so a
// generator can never silently mix checkpoints from different pipelines.
SynthCheckpoint load_synth_checkpoint(const std::string& path,
                                      const std::string& expect_vocab = "",
                                      const std::string& expect_sca = "");

}  // namespace gda::synth
