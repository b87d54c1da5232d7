#include "gda/glyphworld.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gda/common.hpp"
#include "gda/hash.hpp"
#include "gda/png_io.hpp"
#include "gda/serialize.hpp"

namespace fs = std::filesystem;

namespace gda::glyph {

const char* const kHueNames[8] = {"red",  "orange", "yellow", "green",
                                  "cyan", "blue",   "purple", "magenta"};

const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::triangle: return "triangle";
        case Shape::square: return "square";
        case Shape::cross: return "cross";
        case Shape::star: return "star";
    }
    throw DomainError("bad shape enum");
}

const char* texture_name(BgTexture t) {
    switch (t) {
        case BgTexture::solid: return "solid";
        case BgTexture::stripes: return "stripes";
        case BgTexture::checker: return "checker";
    }
    throw DomainError("bad texture enum");
}

BgTexture texture_from_name(const std::string& s) {
    if (s == "solid") return BgTexture::solid;
    if (s == "stripes") return BgTexture::stripes;
    if (s == "checker") return BgTexture::checker;
    throw ParseError("unknown texture name: " + s);
}

int nearest_hue_slot(real hue_deg) {
    int slot = static_cast<int>(std::lround(hue_deg / 45.0)) % 8;
    return slot < 0 ? slot + 8 : slot;
}

const char* bucket_name(Bucket b) {
    switch (b) {
        case Bucket::head: return "head";
        case Bucket::mid: return "mid";
        case Bucket::tail: return "tail";
    }
    throw DomainError("bad bucket enum");
}

// ---- class tables ----

namespace {

ClassTable table_with_slots(int num_classes, int num_meta, int slot_offset) {
    GDA_CHECK(num_meta >= 1 && num_meta <= 5, "num_meta must be in [1,5]");
    GDA_CHECK(num_classes >= num_meta, "need at least one class per meta");
    ClassTable t;
    t.num_meta = num_meta;
    int base = num_classes / num_meta, extra = num_classes % num_meta;
    int cid = 0;
    for (int m = 0; m < num_meta; ++m) {
        int n = base + (m < extra ? 1 : 0);
        GDA_CHECK(n <= 32, "too many classes per meta-class");
        for (int j = 0; j < n; ++j) {
            GlyphClassSpec c;
            c.class_id = cid++;
            c.meta_class_id = m;
            c.shape = static_cast<Shape>(m);
            c.detail_count = 2 + j / 8;
            int slot = (j % 8 + slot_offset) % 8;
            c.primary_hue = slot * 45.0;
            t.classes.push_back(c);
        }
    }
    // injectivity of class_id -> (shape, detail, hue)
    for (size_t i = 0; i < t.classes.size(); ++i)
        for (size_t j = i + 1; j < t.classes.size(); ++j) {
            const auto &a = t.classes[i], &b = t.classes[j];
            GDA_CHECK(a.shape != b.shape || a.detail_count != b.detail_count ||
                          a.primary_hue != b.primary_hue,
                      "class table not injective");
        }
    return t;
}

}  // namespace

ClassTable class_table(int num_classes, int num_meta) {
    return table_with_slots(num_classes, num_meta, 0);
}

ClassTable aux_class_table(int num_classes, int num_meta) {
    GDA_CHECK(num_classes <= 4 * num_meta,
              "aux table disjointness needs at most 4 classes per meta");
    return table_with_slots(num_classes, num_meta, 4);
}

std::string ClassTable::class_name(int class_id) const {
    GDA_CHECK(class_id >= 0 && class_id < static_cast<int>(classes.size()),
              "class_id out of range");
    const auto& c = classes[class_id];
    return std::string(shape_name(c.shape)) + "-" + std::to_string(c.detail_count) + "-" +
           kHueNames[nearest_hue_slot(c.primary_hue)];
}

std::string ClassTable::meta_name(int meta_class_id) const {
    GDA_CHECK(meta_class_id >= 0 && meta_class_id < num_meta, "meta_class_id out of range");
    return shape_name(static_cast<Shape>(meta_class_id));
}

// ---- rendering ----

namespace {

struct Rgb {
    real r, g, b;
};

Rgb hsv_to_rgb(real h, real s, real v) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    real c = v * s;
    real hp = h / 60.0;
    real x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    real r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    return {r + (v - c), g + (v - c), b + (v - c)};
}

bool point_in_poly(real px, real py, const std::vector<std::pair<real, real>>& v) {
    bool in = false;
    for (size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
        if ((v[i].second > py) != (v[j].second > py) &&
            px < (v[j].first - v[i].first) * (py - v[i].second) /
                         (v[j].second - v[i].second) +
                     v[i].first)
            in = !in;
    }
    return in;
}

bool in_shape(Shape s, real dx, real dy, real r) {
    switch (s) {
        case Shape::circle:
            return dx * dx + dy * dy <= r * r;
        case Shape::square:
            return std::abs(dx) <= 0.78 * r && std::abs(dy) <= 0.78 * r;
        case Shape::cross:
            return (std::abs(dx) <= 0.32 * r && std::abs(dy) <= r) ||
                   (std::abs(dy) <= 0.32 * r && std::abs(dx) <= r);
        case Shape::triangle: {
            std::vector<std::pair<real, real>> v;
            for (int k = 0; k < 3; ++k) {
                real a = -M_PI / 2 + 2.0 * M_PI * k / 3.0;
                v.push_back({r * std::cos(a), r * std::sin(a)});
            }
            return point_in_poly(dx, dy, v);
        }
        case Shape::star: {
            std::vector<std::pair<real, real>> v;
            for (int k = 0; k < 10; ++k) {
                real a = -M_PI / 2 + M_PI * k / 5.0;
                real rad = (k % 2 == 0) ? r : 0.45 * r;
                v.push_back({rad * std::cos(a), rad * std::sin(a)});
            }
            return point_in_poly(dx, dy, v);
        }
    }
    throw DomainError("bad shape enum");
}

void validate_class(const GlyphClassSpec& c) {
    if (static_cast<int>(c.shape) < 0 || static_cast<int>(c.shape) > 4)
        throw DomainError("shape out of domain");
    if (c.detail_count < 2 || c.detail_count > 5)
        throw DomainError("detail_count must be in [2,5]");
    if (!(c.primary_hue >= 0 && c.primary_hue < 360)) throw DomainError("primary_hue out of [0,360)");
}

void validate_nuisance(const NuisanceSpec& n) {
    if (!(n.bg_hue >= 0 && n.bg_hue < 360)) throw DomainError("bg_hue out of [0,360)");
    if (static_cast<int>(n.bg_texture) < 0 || static_cast<int>(n.bg_texture) > 2)
        throw DomainError("bg_texture out of domain");
    if (n.distractor_count < 0 || n.distractor_count > 3)
        throw DomainError("distractor_count must be in [0,3]");
    if (std::abs(n.offset_x) > 4 || std::abs(n.offset_y) > 4)
        throw DomainError("glyph offsets must be in [-4,4]");
    if (!(n.glyph_scale >= 0.6 && n.glyph_scale <= 1.0))
        throw DomainError("glyph_scale must be in [0.6,1.0]");
}

struct Geometry {
    real cx, cy, r;
};

Geometry geometry_of(const NuisanceSpec& nu) {
    return {kImageSize / 2.0 + nu.offset_x, kImageSize / 2.0 + nu.offset_y,
            10.0 * nu.glyph_scale};
}

bool mask_at(const GlyphClassSpec& cls, const Geometry& g, int x, int y) {
    real px = x + 0.5, py = y + 0.5;
    return in_shape(cls.shape, px - g.cx, py - g.cy, g.r);
}

bool spot_at(const GlyphClassSpec& cls, const Geometry& g, int x, int y) {
    real px = x + 0.5, py = y + 0.5;
    real rs = std::max(1.1, 0.13 * g.r);
    for (int k = 0; k < cls.detail_count; ++k) {
        real a = -M_PI / 2 + 2.0 * M_PI * k / cls.detail_count;
        real sx = g.cx + 0.55 * g.r * std::cos(a);
        real sy = g.cy + 0.55 * g.r * std::sin(a);
        if ((px - sx) * (px - sx) + (py - sy) * (py - sy) <= rs * rs) return true;
    }
    return false;
}

}  // namespace

Tensor glyph_mask(const GlyphClassSpec& cls, const NuisanceSpec& nu) {
    validate_class(cls);
    validate_nuisance(nu);
    Geometry g = geometry_of(nu);
    Tensor m({kImageSize, kImageSize});
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            m.at(y, x) = mask_at(cls, g, x, y) ? 1.0 : 0.0;
    return m;
}

LabeledImage render_image(const GlyphClassSpec& cls, const NuisanceSpec& nu, uint64_t seed) {
    validate_class(cls);
    validate_nuisance(nu);
    Geometry g = geometry_of(nu);
    Rng rng(seed);

    // fixed draw order: background wash, texture variant, distractors, glyph
    real bg_s = 0.35 + 0.25 * rng.uniform();
    real bg_v = 0.45 + 0.35 * rng.uniform();
    Rgb base = hsv_to_rgb(nu.bg_hue, bg_s, bg_v);
    Rgb variant = hsv_to_rgb(nu.bg_hue, bg_s, bg_v * 0.62);
    int phase = rng.uniform_int(0, 3);
    int cox = rng.uniform_int(0, 3), coy = rng.uniform_int(0, 3);

    struct Distractor {
        real x, y, r;
        Rgb color;
    };
    std::vector<Distractor> ds;
    for (int k = 0; k < nu.distractor_count; ++k) {
        Distractor d;
        d.x = 2.0 + 28.0 * rng.uniform();
        d.y = 2.0 + 28.0 * rng.uniform();
        d.r = 1.2 + 1.6 * rng.uniform();
        real h = std::fmod(nu.bg_hue + 180.0 + 60.0 * (rng.uniform() - 0.5), 360.0);
        if (h < 0) h += 360.0;
        d.color = hsv_to_rgb(h, 0.7, 0.8);
        ds.push_back(d);
    }

    Rgb glyph_col = hsv_to_rgb(cls.primary_hue, 0.85, 0.95);
    Rgb spot_col = hsv_to_rgb(cls.primary_hue, 0.85, 0.35);

    LabeledImage out;
    out.cls = cls;
    out.nuisance = nu;
    out.seed = seed;
    out.pixels = Tensor({3, kImageSize, kImageSize});
    long plane = static_cast<long>(kImageSize) * kImageSize;

    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            Rgb px;
            if (mask_at(cls, g, x, y)) {
                px = spot_at(cls, g, x, y) ? spot_col : glyph_col;
            } else {
                bool alt = false;
                if (nu.bg_texture == BgTexture::stripes)
                    alt = ((y + phase) / 4) % 2 == 1;
                else if (nu.bg_texture == BgTexture::checker)
                    alt = (((x + cox) / 4) + ((y + coy) / 4)) % 2 == 1;
                px = alt ? variant : base;
                for (const auto& d : ds) {
                    real ddx = x + 0.5 - d.x, ddy = y + 0.5 - d.y;
                    if (ddx * ddx + ddy * ddy <= d.r * d.r) px = d.color;
                }
            }
            // byte-quantize so PNG save/load is an exact round trip
            out.pixels.data[0 * plane + y * kImageSize + x] =
                std::lround(std::min(1.0, std::max(0.0, px.r)) * 255.0) / 255.0;
            out.pixels.data[1 * plane + y * kImageSize + x] =
                std::lround(std::min(1.0, std::max(0.0, px.g)) * 255.0) / 255.0;
            out.pixels.data[2 * plane + y * kImageSize + x] =
                std::lround(std::min(1.0, std::max(0.0, px.b)) * 255.0) / 255.0;
        }
    return out;
}

NuisanceSpec sample_nuisance(Rng& rng) {
    NuisanceSpec n;
    n.bg_hue = std::min(rng.uniform() * 360.0, 359.999);
    n.bg_texture = static_cast<BgTexture>(rng.uniform_int(0, 2));
    n.distractor_count = rng.uniform_int(0, 3);
    n.offset_x = rng.uniform(-3.0, 3.0);
    n.offset_y = rng.uniform(-3.0, 3.0);
    n.glyph_scale = rng.uniform(0.6, 1.0);
    return n;
}

// ---- prompts ----

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> ids = {bos_id()};
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) {
        auto it = index.find(word);
        if (it == index.end()) throw ParseError("word not in vocabulary: " + word);
        ids.push_back(it->second);
    }
    ids.push_back(eos_id());
    GDA_CHECK(static_cast<int>(ids.size()) <= MAX_TEXT_LEN, "prompt exceeds MAX_TEXT_LEN");
    while (static_cast<int>(ids.size()) < MAX_TEXT_LEN) ids.push_back(pad_id());
    return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size()) throw ParseError("token id out of range");
        if (id == pad_id() || id == bos_id()) continue;
        if (id == eos_id()) break;
        if (!out.empty()) out += ' ';
        out += tokens[id];
    }
    return out;
}

std::vector<int> Vocab::null_prompt() const {
    std::vector<int> ids = {bos_id(), eos_id()};
    while (static_cast<int>(ids.size()) < MAX_TEXT_LEN) ids.push_back(pad_id());
    return ids;
}

std::string Vocab::hash() const {
    std::string joined;
    for (const auto& t : tokens) {
        joined += t;
        joined += '\n';
    }
    return sha256_hex(joined);
}

Vocab build_vocab(const ClassTable& table) {
    Vocab v;
    auto push = [&](const std::string& w) {
        if (!v.index.count(w)) {
            v.index[w] = v.size();
            v.tokens.push_back(w);
        }
    };
    push("<pad>");
    push("<bos>");
    push("<eos>");
    for (const char* w : {"a", "photo", "of", "on", "background"}) push(w);
    for (int t = 0; t < 3; ++t) push(texture_name(static_cast<BgTexture>(t)));
    for (const char* h : kHueNames) push(h);
    for (int m = 0; m < table.num_meta; ++m) push(table.meta_name(m));
    for (size_t c = 0; c < table.classes.size(); ++c) push(table.class_name(static_cast<int>(c)));
    return v;
}

PromptRecord build_prompt(const ClassTable& table, const Vocab& vocab,
                          const GlyphClassSpec& cls, const NuisanceSpec& nu, bool use_meta) {
    PromptRecord p;
    p.used_meta = use_meta;
    p.class_token = use_meta ? table.meta_name(cls.meta_class_id) : table.class_name(cls.class_id);
    p.bg_attributes = {texture_name(nu.bg_texture), kHueNames[nearest_hue_slot(nu.bg_hue)]};
    p.rendered_text = "a photo of a " + p.class_token + " on a " + p.bg_attributes[0] + " " +
                      p.bg_attributes[1] + " background";
    p.token_ids = vocab.encode(p.rendered_text);
    return p;
}

PromptRecord sample_prompt(const ClassTable& table, const Vocab& vocab,
                           const GlyphClassSpec& cls, const NuisanceSpec& nu,
                           real meta_prob, Rng& rng) {
    return build_prompt(table, vocab, cls, nu, rng.bernoulli(meta_prob));
}

// ---- splits ----

namespace {

// per-sample stream ids under derive_seed(sample_seed, stream, 0)
constexpr uint64_t kStreamNuisance = 0;
constexpr uint64_t kStreamPromptCoin = 1;
constexpr uint64_t kStreamRender = 2;
constexpr uint64_t kStreamOodCoin = 3;

Record make_record(const ClassTable& table, const Vocab& vocab, const SplitConfig& cfg,
                   int class_id, uint64_t sample_seed, bool is_train) {
    Rng nrng(derive_seed(sample_seed, kStreamNuisance, 0));
    NuisanceSpec nu = sample_nuisance(nrng);
    if (cfg.kind == "ood") {
        Rng orng(derive_seed(sample_seed, kStreamOodCoin, 0));
        real align_p = is_train ? cfg.correlation : 1.0 - cfg.correlation;
        int meta = table.classes[class_id].meta_class_id;
        int aligned_tex = meta % 3;
        if (orng.bernoulli(align_p)) {
            nu.bg_texture = static_cast<BgTexture>(aligned_tex);
        } else {
            int other = orng.uniform_int(0, 1);
            nu.bg_texture = static_cast<BgTexture>((aligned_tex + 1 + other) % 3);
        }
    }
    Record rec;
    rec.img = render_image(table.classes[class_id], nu, derive_seed(sample_seed, kStreamRender, 0));
    Rng prng(derive_seed(sample_seed, kStreamPromptCoin, 0));
    rec.prompt = sample_prompt(table, vocab, table.classes[class_id], nu, cfg.meta_prompt_prob, prng);
    return rec;
}

}  // namespace

DatasetSplit make_split(const SplitConfig& cfg) {
    if (cfg.kind != "conventional" && cfg.kind != "few_shot" && cfg.kind != "long_tail" &&
        cfg.kind != "ood")
        throw ConfigError("unknown split kind: " + cfg.kind);
    if (cfg.num_classes < 1 || cfg.num_meta < 1) throw ConfigError("class counts must be positive");
    if (cfg.test_per_class < 1) throw ConfigError("test_per_class must be positive");
    if (cfg.kind == "few_shot") {
        if (cfg.k_shot < 1) throw ConfigError("k_shot must be positive");
        if (cfg.k_shot > cfg.train_per_class)
            throw ConfigError("k_shot exceeds the per-class train pool");
    } else if (cfg.kind == "long_tail") {
        if (cfg.lt_min < 1 || cfg.lt_min > cfg.lt_max)
            throw ConfigError("long_tail needs 1 <= lt_min <= lt_max");
        if (cfg.num_classes < 2) throw ConfigError("long_tail needs at least 2 classes");
    } else if (cfg.kind == "ood") {
        if (!(cfg.correlation >= 0 && cfg.correlation <= 1))
            throw ConfigError("correlation must be in [0,1]");
        if (cfg.num_meta < 2) throw ConfigError("ood needs at least 2 meta-classes");
    } else {
        if (cfg.train_per_class < 1) throw ConfigError("train_per_class must be positive");
    }

    ClassTable table = class_table(cfg.num_classes, cfg.num_meta);
    Vocab vocab = build_vocab(table);

    std::vector<int> train_counts(cfg.num_classes, 0);
    if (cfg.kind == "conventional" || cfg.kind == "ood")
        std::fill(train_counts.begin(), train_counts.end(), cfg.train_per_class);
    else if (cfg.kind == "few_shot")
        std::fill(train_counts.begin(), train_counts.end(), cfg.k_shot);
    else {
        real ratio = static_cast<real>(cfg.lt_min) / cfg.lt_max;
        for (int c = 0; c < cfg.num_classes; ++c) {
            real f = static_cast<real>(c) / (cfg.num_classes - 1);
            train_counts[c] = std::max(
                cfg.lt_min, static_cast<int>(std::lround(cfg.lt_max * std::pow(ratio, f))));
        }
    }

    DatasetSplit split;
    split.config = cfg;
    uint64_t idx = 0;
    for (int c = 0; c < cfg.num_classes; ++c) {
        split.per_class_counts[c] = train_counts[c];
        for (int i = 0; i < train_counts[c]; ++i)
            split.train.push_back(
                make_record(table, vocab, cfg, c, derive_seed(cfg.seed, 0, idx++), true));
    }
    idx = 0;
    for (int c = 0; c < cfg.num_classes; ++c)
        for (int i = 0; i < cfg.test_per_class; ++i)
            split.test.push_back(
                make_record(table, vocab, cfg, c, derive_seed(cfg.seed, 1, idx++), false));

    if (cfg.kind == "long_tail") {
        for (int c = 0; c < cfg.num_classes; ++c) {
            real frac = static_cast<real>(train_counts[c]) / cfg.lt_max;
            split.buckets[c] =
                frac > 0.66 ? Bucket::head : (frac < 0.33 ? Bucket::tail : Bucket::mid);
        }
    }
    if (cfg.kind == "ood") split.correlation = cfg.correlation;
    return split;
}

// ---- persistence ----

namespace {

Json record_to_json(const Record& r, int index) {
    Json j;
    j["index"] = index;
    j["class_id"] = r.img.cls.class_id;
    j["meta_class_id"] = r.img.cls.meta_class_id;
    j["bg_hue"] = r.img.nuisance.bg_hue;
    j["bg_texture"] = texture_name(r.img.nuisance.bg_texture);
    j["distractor_count"] = r.img.nuisance.distractor_count;
    j["offset_x"] = r.img.nuisance.offset_x;
    j["offset_y"] = r.img.nuisance.offset_y;
    j["glyph_scale"] = r.img.nuisance.glyph_scale;
    j["seed"] = r.img.seed;
    j["class_token"] = r.prompt.class_token;
    j["used_meta"] = r.prompt.used_meta;
    j["bg_attributes"] = r.prompt.bg_attributes;
    j["rendered_text"] = r.prompt.rendered_text;
    j["token_ids"] = r.prompt.token_ids;
    return j;
}

void save_part(const std::vector<Record>& recs, const std::string& dir, const std::string& part) {
    fs::create_directories(fs::path(dir) / "images" / part);
    fs::create_directories(fs::path(dir) / "meta");
    std::string jsonl;
    for (size_t i = 0; i < recs.size(); ++i) {
        png_save((fs::path(dir) / "images" / part / (std::to_string(i) + ".png")).string(),
                 recs[i].img.pixels);
        jsonl += record_to_json(recs[i], static_cast<int>(i)).dump() + "\n";
    }
    write_text_atomic((fs::path(dir) / "meta" / (part + ".jsonl")).string(), jsonl);
}

std::vector<Record> load_part(const std::string& dir, const std::string& part,
                              const ClassTable& table) {
    std::string meta_path = (fs::path(dir) / "meta" / (part + ".jsonl")).string();
    std::istringstream lines(read_text(meta_path));
    std::vector<Record> out;
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (line.empty()) continue;
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw ParseError(meta_path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            Record r;
            int class_id = j.at("class_id").get<int>();
            if (class_id < 0 || class_id >= static_cast<int>(table.classes.size()))
                throw ParseError("class_id out of range");
            r.img.cls = table.classes[class_id];
            if (j.at("meta_class_id").get<int>() != r.img.cls.meta_class_id)
                throw ParseError("meta_class_id inconsistent with class table");
            r.img.nuisance.bg_hue = j.at("bg_hue").get<real>();
            r.img.nuisance.bg_texture = texture_from_name(j.at("bg_texture").get<std::string>());
            r.img.nuisance.distractor_count = j.at("distractor_count").get<int>();
            r.img.nuisance.offset_x = j.at("offset_x").get<real>();
            r.img.nuisance.offset_y = j.at("offset_y").get<real>();
            r.img.nuisance.glyph_scale = j.at("glyph_scale").get<real>();
            r.img.seed = j.at("seed").get<uint64_t>();
            r.prompt.class_token = j.at("class_token").get<std::string>();
            r.prompt.used_meta = j.at("used_meta").get<bool>();
            r.prompt.bg_attributes = j.at("bg_attributes").get<std::vector<std::string>>();
            r.prompt.rendered_text = j.at("rendered_text").get<std::string>();
            r.prompt.token_ids = j.at("token_ids").get<std::vector<int>>();
            int index = j.at("index").get<int>();
            std::string img_path =
                (fs::path(dir) / "images" / part / (std::to_string(index) + ".png")).string();
            if (!fs::exists(img_path)) throw IntegrityError("missing image file: " + img_path);
            r.img.pixels = png_load(img_path);
            out.push_back(std::move(r));
        } catch (const Json::exception& e) {
            throw ParseError(meta_path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    size_t image_count = 0;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / "images" / part))
        if (e.path().extension() == ".png") ++image_count;
    if (image_count != out.size())
        throw IntegrityError("image/metadata count mismatch in " + dir + "/" + part);
    return out;
}

}  // namespace

void save_dataset(const DatasetSplit& split, const std::string& dir) {
    fs::create_directories(dir);
    save_part(split.train, dir, "train");
    save_part(split.test, dir, "test");
    Json j;
    j["kind"] = split.config.kind;
    Json& c = j["config"];
    c["num_classes"] = split.config.num_classes;
    c["num_meta"] = split.config.num_meta;
    c["train_per_class"] = split.config.train_per_class;
    c["test_per_class"] = split.config.test_per_class;
    c["k_shot"] = split.config.k_shot;
    c["lt_max"] = split.config.lt_max;
    c["lt_min"] = split.config.lt_min;
    c["correlation"] = split.config.correlation;
    c["meta_prompt_prob"] = split.config.meta_prompt_prob;
    c["seed"] = split.config.seed;
    Json counts = Json::object();
    for (const auto& [k, v] : split.per_class_counts) counts[std::to_string(k)] = v;
    j["per_class_counts"] = counts;
    Json buckets = Json::object();
    for (const auto& [k, v] : split.buckets) buckets[std::to_string(k)] = bucket_name(v);
    j["buckets"] = buckets;
    j["correlation"] = split.correlation;
    j["counts"] = {{"train", split.train.size()}, {"test", split.test.size()}};
    save_json((fs::path(dir) / "dataset.json").string(), j);
}

DatasetSplit load_dataset(const std::string& dir) {
    Json j = load_json((fs::path(dir) / "dataset.json").string());
    DatasetSplit split;
    try {
        split.config.kind = j.at("kind").get<std::string>();
        const Json& c = j.at("config");
        split.config.num_classes = c.at("num_classes").get<int>();
        split.config.num_meta = c.at("num_meta").get<int>();
        split.config.train_per_class = c.at("train_per_class").get<int>();
        split.config.test_per_class = c.at("test_per_class").get<int>();
        split.config.k_shot = c.at("k_shot").get<int>();
        split.config.lt_max = c.at("lt_max").get<int>();
        split.config.lt_min = c.at("lt_min").get<int>();
        split.config.correlation = c.at("correlation").get<real>();
        split.config.meta_prompt_prob = c.at("meta_prompt_prob").get<real>();
        split.config.seed = c.at("seed").get<uint64_t>();
        for (const auto& [k, v] : j.at("per_class_counts").items())
            split.per_class_counts[std::stoi(k)] = v.get<int>();
        for (const auto& [k, v] : j.at("buckets").items()) {
            std::string b = v.get<std::string>();
            split.buckets[std::stoi(k)] =
                b == "head" ? Bucket::head : (b == "tail" ? Bucket::tail : Bucket::mid);
        }
        split.correlation = j.at("correlation").get<real>();
    } catch (const Json::exception& e) {
        throw ParseError(dir + "/dataset.json: " + e.what());
    }
    ClassTable table = class_table(split.config.num_classes, split.config.num_meta);
    split.train = load_part(dir, "train", table);
    split.test = load_part(dir, "test", table);
    return split;
}

}  // namespace gda::glyph
