#include "gda/augmentor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "gda/evaluation.hpp"
#include "gda/hash.hpp"
#include "gda/png_io.hpp"
#include "gda/serialize.hpp"

namespace gda::aug {

namespace fs = std::filesystem;

namespace {

constexpr long kPixels = 3L * glyph::kImageSize * glyph::kImageSize;

void check_mix(const MixConfig& mix) {
    if (mix.pool_multiplier <= 0) throw ConfigError("pool_multiplier must be positive");
    if (mix.per_class_floor < 0) throw ConfigError("per_class_floor must be non-negative");
    if (mix.synthetic_fraction < 0 || mix.synthetic_fraction > 1)
        throw ConfigError("synthetic_fraction must be in [0,1]");
}

// SCA embeddings for a list of train records, chunked so one graph never
// holds the whole split.
Tensor embed_records(const emb::Encoder& enc, const std::vector<const glyph::Record*>& recs) {
    int n = static_cast<int>(recs.size());
    Tensor out({n, enc.d});
    int chunk = 128;
    for (int s = 0; s < n; s += chunk) {
        int m = std::min(chunk, n - s);
        Tensor batch({m, 3, glyph::kImageSize, glyph::kImageSize});
        for (int i = 0; i < m; ++i)
            std::copy(recs[s + i]->img.pixels.data.begin(), recs[s + i]->img.pixels.data.end(),
                      batch.data.begin() + i * kPixels);
        Tensor e = emb::embed(enc, batch);
        std::copy(e.data.begin(), e.data.end(), out.data.begin() + static_cast<long>(s) * enc.d);
    }
    return out;
}

Tensor batch_images(const SyntheticPool& pool, const std::vector<int>& idxs) {
    Tensor batch({static_cast<int>(idxs.size()), 3, glyph::kImageSize, glyph::kImageSize});
    for (size_t i = 0; i < idxs.size(); ++i)
        std::copy(pool.samples[idxs[i]].image.data.begin(), pool.samples[idxs[i]].image.data.end(),
                  batch.data.begin() + static_cast<long>(i) * kPixels);
    return batch;
}

int hue_slot_of_word(const std::string& word) {
    for (int i = 0; i < 8; ++i)
        if (word == glyph::kHueNames[i]) return i;
    throw ContractError("unknown hue word in prompt: " + word);
}

// Indices of the floor(decile*n) lowest scores, ties to the lower index.
std::set<int> bottom_indices(const std::vector<std::pair<real, int>>& scored, long k) {
    std::vector<std::pair<real, int>> order = scored;
    std::sort(order.begin(), order.end());
    std::set<int> out;
    for (long i = 0; i < k; ++i) out.insert(order[i].second);
    return out;
}

}  // namespace

std::vector<glyph::PromptRecord> build_prompt_pool(const glyph::ClassTable& table,
                                                   const Vocab& vocab, int class_id, int n,
                                                   real meta_prob, Rng& rng) {
    if (class_id < 0 || class_id >= static_cast<int>(table.classes.size()))
        throw DomainError("unknown class id " + std::to_string(class_id));
    if (n < 1) throw DomainError("prompt pool size must be at least 1");
    std::vector<glyph::PromptRecord> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        glyph::NuisanceSpec nu = glyph::sample_nuisance(rng);
        out.push_back(glyph::sample_prompt(table, vocab, table.classes[class_id], nu, meta_prob, rng));
    }
    return out;
}

SyntheticPool generate_pool(const DatasetSplit& split, const synth::SynthCheckpoint& ckpt,
                            const emb::Encoder& sca, const PoolGenConfig& cfg) {
    check_mix(cfg.mix);
    glyph::ClassTable table = glyph::class_table(split.config.num_classes, split.config.num_meta);
    Vocab vocab = glyph::build_vocab(table);
    if (!ckpt.vocab_hash.empty() && ckpt.vocab_hash != vocab.hash())
        throw IntegrityError("synthesis checkpoint was trained against a different vocab");

    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < static_cast<int>(split.train.size()); ++i)
        by_class[split.train[i].img.cls.class_id].push_back(i);

    SyntheticPool pool;
    Json cj;
    cj["multiplier"] = cfg.mix.pool_multiplier;
    cj["floor"] = cfg.mix.per_class_floor;
    cj["steps"] = cfg.sampler.steps;
    cj["guidance"] = cfg.sampler.guidance;
    cj["eta"] = cfg.sampler.eta;
    cj["seed"] = cfg.seed;
    pool.config_hash = json_sha256(cj);
    pool.checkpoint_hash = cfg.checkpoint_hash.empty() ? ckpt.config_hash : cfg.checkpoint_hash;

    Tensor train_emb = embed_records(sca, [&] {
        std::vector<const glyph::Record*> rs;
        rs.reserve(split.train.size());
        for (const auto& r : split.train) rs.push_back(&r);
        return rs;
    }());

    struct Pending {
        uint64_t g;
        int cls, src;
        glyph::PromptRecord prompt;
    };
    std::vector<Pending> pending;
    uint64_t g = 0;
    for (int c = 0; c < split.config.num_classes; ++c) {
        auto it = by_class.find(c);
        if (it == by_class.end() || it->second.empty()) {
            pool.skipped_classes.push_back(c);
            continue;
        }
        const std::vector<int>& idxs = it->second;
        long n_c = static_cast<long>(idxs.size());
        long m_c = std::max(std::lround(cfg.mix.pool_multiplier * static_cast<real>(n_c)),
                            static_cast<long>(cfg.mix.per_class_floor));
        pool.per_class_counts[c] = static_cast<int>(m_c);
        for (long j = 0; j < m_c; ++j, ++g) {
            Rng rg(derive_seed(cfg.seed, 50, g));
            int src = idxs[rg.uniform_int(0, static_cast<int>(n_c) - 1)];
            glyph::NuisanceSpec nu = glyph::sample_nuisance(rg);
            pending.push_back({g, c, src,
                               glyph::sample_prompt(table, vocab, table.classes[c], nu,
                                                    split.config.meta_prompt_prob, rg)});
        }
    }

    synth::SamplerConfig sc = cfg.sampler;
    sc.seed = cfg.seed;
    int bs = std::max(1, cfg.batch_size);
    pool.samples.reserve(pending.size());
    for (size_t s = 0; s < pending.size(); s += bs) {
        size_t m = std::min(static_cast<size_t>(bs), pending.size() - s);
        std::vector<std::vector<int>> ids(m);
        std::vector<uint64_t> gs(m);
        Tensor embeds({static_cast<int>(m), sca.d});
        for (size_t i = 0; i < m; ++i) {
            const Pending& p = pending[s + i];
            ids[i] = p.prompt.token_ids;
            gs[i] = p.g;
            for (int j = 0; j < sca.d; ++j) embeds.at(static_cast<int>(i), j) = train_emb.at(p.src, j);
        }
        Tensor out = synth::sample_batch(ckpt.model, ckpt.sched, ids, embeds, ckpt.mean_embedding,
                                         vocab, sc, gs);
        for (size_t i = 0; i < m; ++i) {
            const Pending& p = pending[s + i];
            SyntheticSample smp;
            smp.image = Tensor({3, glyph::kImageSize, glyph::kImageSize});
            for (long j = 0; j < kPixels; ++j) {
                // byte grid, same quantization as the PNG writer, so saved
                // pools round-trip exactly
                real v = out.data[i * kPixels + j];
                smp.image.data[j] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
            }
            smp.source_index = p.src;
            smp.class_id = p.cls;
            smp.prompt = p.prompt;
            smp.sample_seed = p.g;
            pool.samples.push_back(std::move(smp));
        }
    }
    return pool;
}

void score_pool(SyntheticPool& pool, const DatasetSplit& split, const emb::Encoder& sca,
                const eval::AttributeProbes& probes) {
    if (!probes.trained) throw ConfigError("attribute probes not trained");
    int n = static_cast<int>(pool.samples.size());
    std::vector<const glyph::Record*> sources(n);
    for (int i = 0; i < n; ++i) {
        const SyntheticSample& s = pool.samples[i];
        if (s.source_index < 0 || s.source_index >= static_cast<int>(split.train.size()))
            throw ContractError("pool sample source index out of range");
        const glyph::Record& rec = split.train[s.source_index];
        if (rec.img.cls.class_id != s.class_id)
            throw ContractError("pool sample source class mismatch");
        sources[i] = &rec;
    }
    Tensor src_emb = embed_records(sca, sources);

    int chunk = 128;
    for (int s = 0; s < n; s += chunk) {
        int m = std::min(chunk, n - s);
        std::vector<int> idxs(m);
        std::iota(idxs.begin(), idxs.end(), s);
        Tensor batch = batch_images(pool, idxs);
        Tensor gen_emb = emb::embed(sca, batch);
        Tensor pt = eval::probe_probs(probes.texture, batch);
        Tensor ph = eval::probe_probs(probes.hue, batch);
        for (int i = 0; i < m; ++i) {
            SyntheticSample& smp = pool.samples[s + i];
            real dot = 0;
            for (int j = 0; j < sca.d; ++j) dot += gen_emb.at(i, j) * src_emb.at(s + i, j);
            smp.concept_score = std::clamp(dot, -1.0, 1.0);
            int want_tex = static_cast<int>(glyph::texture_from_name(smp.prompt.bg_attributes.at(0)));
            int want_hue = hue_slot_of_word(smp.prompt.bg_attributes.at(1));
            smp.text_score = (pt.at(i, want_tex) + ph.at(i, want_hue)) / 2.0;
            smp.scored = true;
        }
    }
}

void filter_pool(SyntheticPool& pool, real decile) {
    if (decile < 0 || decile > 1) throw DomainError("decile must be in [0,1]");
    long n = static_cast<long>(pool.samples.size());
    std::vector<std::pair<real, int>> concept(n), text(n);
    for (long i = 0; i < n; ++i) {
        if (!pool.samples[i].scored) throw ContractError("filter_pool: unscored sample");
        concept[i] = {pool.samples[i].concept_score, static_cast<int>(i)};
        text[i] = {pool.samples[i].text_score, static_cast<int>(i)};
    }
    long k = static_cast<long>(std::floor(decile * static_cast<real>(n)));
    std::set<int> drop = bottom_indices(concept, k);
    std::set<int> drop_t = bottom_indices(text, k);
    drop.insert(drop_t.begin(), drop_t.end());
    for (long i = 0; i < n; ++i) pool.samples[i].kept = drop.count(static_cast<int>(i)) == 0;
    pool.filtered = true;
    pool.decile = decile;
}

std::vector<MixedRef> mixed_batch(const DatasetSplit& split, const SyntheticPool& pool, real rho,
                                  MixMode mode, int batch_size, Rng& rng) {
    if (rho < 0 || rho > 1) throw DomainError("rho must be in [0,1]");
    if (batch_size < 1) throw DomainError("batch size must be positive");
    std::vector<int> kept;
    for (int i = 0; i < static_cast<int>(pool.samples.size()); ++i)
        if (pool.samples[i].kept) kept.push_back(i);
    if (rho > 0 && kept.empty()) throw ConfigError("rho > 0 with an empty kept pool");
    if (rho < 1 && split.train.empty()) throw ConfigError("rho < 1 with an empty train split");

    std::map<int, std::vector<int>> by_class;
    std::vector<int> classes;
    if (mode == MixMode::longtail_balanced && rho < 1) {
        for (int i = 0; i < static_cast<int>(split.train.size()); ++i)
            by_class[split.train[i].img.cls.class_id].push_back(i);
        for (const auto& [c, v] : by_class) classes.push_back(c);
    }

    std::vector<MixedRef> batch(batch_size);
    for (int b = 0; b < batch_size; ++b) {
        // always consume one uniform so equal seeds give identical streams
        // for every rho, including 0 and 1
        bool synthetic = rng.uniform() < rho;
        if (synthetic) {
            batch[b] = {true, kept[rng.uniform_int(0, static_cast<int>(kept.size()) - 1)]};
        } else if (mode == MixMode::longtail_balanced) {
            const std::vector<int>& in_c =
                by_class[classes[rng.uniform_int(0, static_cast<int>(classes.size()) - 1)]];
            batch[b] = {false, in_c[rng.uniform_int(0, static_cast<int>(in_c.size()) - 1)]};
        } else {
            batch[b] = {false, rng.uniform_int(0, static_cast<int>(split.train.size()) - 1)};
        }
    }
    return batch;
}

// ---- persistence ----

namespace {

Json prompt_to_json(const glyph::PromptRecord& p) {
    Json j;
    j["class_token"] = p.class_token;
    j["used_meta"] = p.used_meta;
    j["bg_attributes"] = p.bg_attributes;
    j["rendered_text"] = p.rendered_text;
    j["token_ids"] = p.token_ids;
    return j;
}

glyph::PromptRecord prompt_from_json(const Json& j) {
    glyph::PromptRecord p;
    p.class_token = j.at("class_token").get<std::string>();
    p.used_meta = j.at("used_meta").get<bool>();
    p.bg_attributes = j.at("bg_attributes").get<std::vector<std::string>>();
    p.rendered_text = j.at("rendered_text").get<std::string>();
    p.token_ids = j.at("token_ids").get<std::vector<int>>();
    return p;
}

}  // namespace

void save_pool(const SyntheticPool& pool, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    std::ostringstream lines;
    for (size_t i = 0; i < pool.samples.size(); ++i) {
        const SyntheticSample& s = pool.samples[i];
        png_save((fs::path(dir) / "images" / (std::to_string(i) + ".png")).string(), s.image);
        Json j;
        j["source_index"] = s.source_index;
        j["class_id"] = s.class_id;
        j["prompt"] = prompt_to_json(s.prompt);
        j["concept_score"] = s.concept_score;
        j["text_score"] = s.text_score;
        j["scored"] = s.scored;
        j["kept"] = s.kept;
        j["seed"] = s.sample_seed;
        lines << j.dump() << '\n';
    }
    write_text_atomic((fs::path(dir) / "pool.jsonl").string(), lines.str());

    Json meta;
    meta["kind"] = "pool";
    meta["version"] = 1;
    meta["count"] = pool.samples.size();
    meta["config_hash"] = pool.config_hash;
    meta["checkpoint_hash"] = pool.checkpoint_hash;
    meta["filtered"] = pool.filtered;
    meta["decile"] = pool.decile;
    Json counts = Json::object();
    for (const auto& [c, n] : pool.per_class_counts) counts[std::to_string(c)] = n;
    meta["per_class_counts"] = counts;
    meta["skipped_classes"] = pool.skipped_classes;
    save_json((fs::path(dir) / "pool.json").string(), meta);
}

SyntheticPool load_pool(const std::string& dir) {
    SyntheticPool pool;
    try {
        Json meta = load_json((fs::path(dir) / "pool.json").string());
        if (meta.at("kind").get<std::string>() != "pool")
            throw ParseError("not a pool directory: " + dir);
        pool.config_hash = meta.at("config_hash").get<std::string>();
        pool.checkpoint_hash = meta.at("checkpoint_hash").get<std::string>();
        pool.filtered = meta.at("filtered").get<bool>();
        pool.decile = meta.at("decile").get<real>();
        for (const auto& [key, v] : meta.at("per_class_counts").items())
            pool.per_class_counts[std::stoi(key)] = v.get<int>();
        pool.skipped_classes = meta.at("skipped_classes").get<std::vector<int>>();
        size_t count = meta.at("count").get<size_t>();

        std::istringstream in(read_text((fs::path(dir) / "pool.jsonl").string()));
        std::string line;
        size_t i = 0;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            Json j = Json::parse(line);
            SyntheticSample s;
            s.source_index = j.at("source_index").get<int>();
            s.class_id = j.at("class_id").get<int>();
            s.prompt = prompt_from_json(j.at("prompt"));
            s.concept_score = j.at("concept_score").get<real>();
            s.text_score = j.at("text_score").get<real>();
            s.scored = j.at("scored").get<bool>();
            s.kept = j.at("kept").get<bool>();
            s.sample_seed = j.at("seed").get<uint64_t>();
            s.image = png_load((fs::path(dir) / "images" / (std::to_string(i) + ".png")).string());
            pool.samples.push_back(std::move(s));
            ++i;
        }
        if (i != count) throw ParseError("pool.jsonl line count does not match pool.json count");
    } catch (const Json::exception& e) {
        throw ParseError(std::string("malformed pool: ") + e.what());
    }
    return pool;
}

}  // namespace gda::aug
