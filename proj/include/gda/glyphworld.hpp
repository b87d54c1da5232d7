#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "gda/rng.hpp"
#include "gda/tensor.hpp"

namespace gda::glyph {

enum class Shape { circle, triangle, square, cross, star };
enum class BgTexture { solid, stripes, checker };

const char* shape_name(Shape s);
const char* texture_name(BgTexture t);
BgTexture texture_from_name(const std::string& s);  // ParseError on unknown

// Eight named hue slots, 45 degrees apart, used for both class hues and
// background color words.
extern const char* const kHueNames[8];
int nearest_hue_slot(real hue_deg);

struct GlyphClassSpec {
    int class_id = 0;
    int meta_class_id = 0;
    Shape shape = Shape::circle;
    int detail_count = 2;  // 2..5
    real primary_hue = 0;  // [0,360)
};

struct NuisanceSpec {
    real bg_hue = 0;  // [0,360)
    BgTexture bg_texture = BgTexture::solid;
    int distractor_count = 0;  // 0..3
    real offset_x = 0, offset_y = 0;  // pixels, [-4,4]
    real glyph_scale = 0.8;  // [0.6,1.0]
};

struct LabeledImage {
    Tensor pixels;  // [3,32,32], values on the 1/255 grid
    GlyphClassSpec cls;
    NuisanceSpec nuisance;
    uint64_t seed = 0;
};

constexpr int kImageSize = 32;

// Class tables. Within one meta-class all classes share the shape and
// enumerate distinct (detail_count, hue slot) pairs, so class_id ->
// (shape, detail, hue) is injective; names like "star-2-red" are unique.
struct ClassTable {
    std::vector<GlyphClassSpec> classes;
    int num_meta = 0;
    std::string class_name(int class_id) const;
    std::string meta_name(int meta_class_id) const;
};
ClassTable class_table(int num_classes, int num_meta);
// Same shapes, disjoint (detail, hue) pairs — for pretraining an encoder on
// classes never seen downstream. Requires num_classes <= 4 * num_meta.
ClassTable aux_class_table(int num_classes, int num_meta);

// ---- rendering ----

// Pure: same arguments give bit-identical pixels. Pixels inside the glyph
// mask depend only on (class, offsets, scale); everything else depends only
// on (nuisance, seed). Throws DomainError for out-of-range fields.
LabeledImage render_image(const GlyphClassSpec& cls, const NuisanceSpec& nu, uint64_t seed);

// The exact set of pixels render_image paints with glyph/spot color.
// [32,32] of 0/1.
Tensor glyph_mask(const GlyphClassSpec& cls, const NuisanceSpec& nu);

NuisanceSpec sample_nuisance(Rng& rng);

// ---- prompts ----

struct PromptRecord {
    std::string class_token;
    bool used_meta = false;
    std::vector<std::string> bg_attributes;  // [texture, color]
    std::string rendered_text;
    std::vector<int> token_ids;  // length MAX_TEXT_LEN, <bos> ... <eos> <pad>*
};

struct Vocab {
    static constexpr int MAX_TEXT_LEN = 16;
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;

    int pad_id() const { return 0; }
    int bos_id() const { return 1; }
    int eos_id() const { return 2; }
    int size() const { return static_cast<int>(tokens.size()); }

    std::vector<int> encode(const std::string& text) const;  // ParseError on unknown word
    std::string decode(const std::vector<int>& ids) const;
    std::vector<int> null_prompt() const;  // <bos> <eos> <pad>*
    std::string hash() const;
};
Vocab build_vocab(const ClassTable& table);

PromptRecord build_prompt(const ClassTable& table, const Vocab& vocab,
                          const GlyphClassSpec& cls, const NuisanceSpec& nu, bool use_meta);
PromptRecord sample_prompt(const ClassTable& table, const Vocab& vocab,
                           const GlyphClassSpec& cls, const NuisanceSpec& nu,
                           real meta_prob, Rng& rng);

// ---- splits ----

enum class Bucket { head, mid, tail };

struct SplitConfig {
    std::string kind = "conventional";  // conventional|few_shot|long_tail|ood
    int num_classes = 20;
    int num_meta = 5;
    int train_per_class = 50;
    int test_per_class = 20;
    int k_shot = 10;        // few_shot
    int lt_max = 100;       // long_tail head count
    int lt_min = 5;         // long_tail tail count
    real correlation = 0.95;  // ood train-time texture/meta alignment
    real meta_prompt_prob = 0.5;
    uint64_t seed = 0;
};

struct Record {
    LabeledImage img;
    PromptRecord prompt;
};

struct DatasetSplit {
    SplitConfig config;
    std::vector<Record> train;
    std::vector<Record> test;
    std::map<int, int> per_class_counts;     // train counts
    std::map<int, Bucket> buckets;           // long_tail only
    real correlation = 0;                    // ood only
};

DatasetSplit make_split(const SplitConfig& cfg);  // ConfigError on infeasible configs

// Directory layout: images/{train,test}/{index}.png + meta/{train,test}.jsonl
// + dataset.json. Loading re-reads pixels from the PNGs; render_image output
// is already byte-quantized so the round trip is exact.
void save_dataset(const DatasetSplit& split, const std::string& dir);
DatasetSplit load_dataset(const std::string& dir);

const char* bucket_name(Bucket b);

}  // namespace gda::glyph
