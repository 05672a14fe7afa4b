#pragma once
// Run orchestration: hashed run configuration, the two pretraining loops,
// float32 embedding caches, and the probe/eval pipeline with its exports.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "somnus/checkpoint.hpp"
#include "somnus/cohort.hpp"
#include "somnus/eval.hpp"
#include "somnus/macro.hpp"
#include "somnus/micro.hpp"

namespace somnus {

// --- run configuration -------------------------------------------------------

struct CohortRunConfig {
    std::size_t subjects = 128;
    std::size_t min_epochs = 200, max_epochs = 250;
};

struct MicroTrainConfig {
    std::string preset = "desk";  // desk | reference | tiny
    std::size_t batch = 8;        // crops per optimizer step
    std::size_t crop_epochs = 2;  // 60 s inputs
    std::size_t crops_per_record = 4;
    std::size_t train_epochs = 1;  // passes over the pretraining split
    std::size_t warmup = 0;
    double lr = 5e-4;
    double weight_decay = 0.05;
};

struct MacroTrainConfig {
    std::string preset = "desk";  // desk | tiny ; in_dim always follows the micro stage
    std::size_t batch = 4;        // subjects per step
    std::size_t train_epochs = 1;
    std::size_t max_epochs = 1080;  // head-first truncation bound
    std::size_t warmup = 4;
    double lr = 1e-4;
    double weight_decay = 0.05;
    double upsilon = 0.5;
    double rho = 0.1;
};

struct ProbeRunConfig {
    std::size_t steps = 300;
    std::size_t sdb_batch = 1024;  // one-second rows per step; 0 = full batch
    double lr = 0.0;               // 0 = per-task default
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out = "run";
    std::string stage = "all";  // synth | micro | macro | probe:<task> | eval | all
    CohortRunConfig cohort;
    MicroTrainConfig micro;
    MacroTrainConfig macro;
    ProbeRunConfig probe;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const char* where,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(std::string("config: ") + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known |= it.key() == k;
        if (!known)
            throw ConfigError(std::string("config: unknown key '") + where + it.key() + "'");
    }
}

template <typename T>
void fetch(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) try {
    detail::check_keys(j, "", {"seed", "out", "stage", "cohort", "micro", "macro", "probe"});
    RunConfig c;
    detail::fetch(j, "seed", c.seed);
    detail::fetch(j, "out", c.out);
    detail::fetch(j, "stage", c.stage);
    if (j.contains("cohort")) {
        const auto& s = j.at("cohort");
        detail::check_keys(s, "cohort.", {"subjects", "min_epochs", "max_epochs"});
        detail::fetch(s, "subjects", c.cohort.subjects);
        detail::fetch(s, "min_epochs", c.cohort.min_epochs);
        detail::fetch(s, "max_epochs", c.cohort.max_epochs);
    }
    if (j.contains("micro")) {
        const auto& s = j.at("micro");
        detail::check_keys(s, "micro.",
                           {"preset", "batch", "crop_epochs", "crops_per_record",
                            "train_epochs", "warmup", "lr", "weight_decay"});
        detail::fetch(s, "preset", c.micro.preset);
        detail::fetch(s, "batch", c.micro.batch);
        detail::fetch(s, "crop_epochs", c.micro.crop_epochs);
        detail::fetch(s, "crops_per_record", c.micro.crops_per_record);
        detail::fetch(s, "train_epochs", c.micro.train_epochs);
        detail::fetch(s, "warmup", c.micro.warmup);
        detail::fetch(s, "lr", c.micro.lr);
        detail::fetch(s, "weight_decay", c.micro.weight_decay);
    }
    if (j.contains("macro")) {
        const auto& s = j.at("macro");
        detail::check_keys(s, "macro.",
                           {"preset", "batch", "train_epochs", "max_epochs", "warmup",
                            "lr", "weight_decay", "upsilon", "rho"});
        detail::fetch(s, "preset", c.macro.preset);
        detail::fetch(s, "batch", c.macro.batch);
        detail::fetch(s, "train_epochs", c.macro.train_epochs);
        detail::fetch(s, "max_epochs", c.macro.max_epochs);
        detail::fetch(s, "warmup", c.macro.warmup);
        detail::fetch(s, "lr", c.macro.lr);
        detail::fetch(s, "weight_decay", c.macro.weight_decay);
        detail::fetch(s, "upsilon", c.macro.upsilon);
        detail::fetch(s, "rho", c.macro.rho);
    }
    if (j.contains("probe")) {
        const auto& s = j.at("probe");
        detail::check_keys(s, "probe.", {"steps", "sdb_batch", "lr"});
        detail::fetch(s, "steps", c.probe.steps);
        detail::fetch(s, "sdb_batch", c.probe.sdb_batch);
        detail::fetch(s, "lr", c.probe.lr);
    }
    return c;
} catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
}

// Every field in a fixed order; nlohmann objects iterate sorted, so the dump
// is canonical and its hash stable across round trips.
inline nlohmann::json run_config_json(const RunConfig& c) {
    return nlohmann::json{
        {"seed", c.seed},
        {"out", c.out},
        {"stage", c.stage},
        {"cohort",
         {{"subjects", c.cohort.subjects},
          {"min_epochs", c.cohort.min_epochs},
          {"max_epochs", c.cohort.max_epochs}}},
        {"micro",
         {{"preset", c.micro.preset},
          {"batch", c.micro.batch},
          {"crop_epochs", c.micro.crop_epochs},
          {"crops_per_record", c.micro.crops_per_record},
          {"train_epochs", c.micro.train_epochs},
          {"warmup", c.micro.warmup},
          {"lr", c.micro.lr},
          {"weight_decay", c.micro.weight_decay}}},
        {"macro",
         {{"preset", c.macro.preset},
          {"batch", c.macro.batch},
          {"train_epochs", c.macro.train_epochs},
          {"max_epochs", c.macro.max_epochs},
          {"warmup", c.macro.warmup},
          {"lr", c.macro.lr},
          {"weight_decay", c.macro.weight_decay},
          {"upsilon", c.macro.upsilon},
          {"rho", c.macro.rho}}},
        {"probe",
         {{"steps", c.probe.steps}, {"sdb_batch", c.probe.sdb_batch}, {"lr", c.probe.lr}}}};
}

namespace detail {

inline std::string hash_of_json(const nlohmann::json& j) {
    std::string dump = j.dump();
    std::uint64_t h = fnv1a64(std::string_view(dump));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace detail

// The hash identifies the experiment: where the run lives and which stage is
// being executed are excluded, so artifacts stay valid across moves and stages.
inline std::string config_hash(const RunConfig& c) {
    nlohmann::json j = run_config_json(c);
    j.erase("out");
    j.erase("stage");
    return detail::hash_of_json(j);
}

// Each artifact is keyed by the config subset that determines its content, so
// a change to, say, a probe setting never invalidates cohorts, checkpoints, or
// embedding caches built upstream of it.
inline std::string cohort_scope_hash(const RunConfig& c) {
    nlohmann::json j = run_config_json(c);
    return detail::hash_of_json({{"seed", j["seed"]}, {"cohort", j["cohort"]}});
}

inline std::string micro_scope_hash(const RunConfig& c) {
    nlohmann::json j = run_config_json(c);
    return detail::hash_of_json(
        {{"seed", j["seed"]}, {"cohort", j["cohort"]}, {"micro", j["micro"]}});
}

inline std::string macro_scope_hash(const RunConfig& c) {
    nlohmann::json j = run_config_json(c);
    return detail::hash_of_json({{"seed", j["seed"]},
                                 {"cohort", j["cohort"]},
                                 {"micro", j["micro"]},
                                 {"macro", j["macro"]}});
}

// Environment overrides, prefix SOMNUS_ (e.g. SOMNUS_SEED, SOMNUS_MICRO_LR,
// SOMNUS_COHORT_SUBJECTS). Values parse as the target field's type.
inline void apply_env_overrides(
    RunConfig& c, const std::function<const char*(const char*)>& getenv_fn = [](const char* k) {
        return std::getenv(k);
    }) {
    auto parse_u64 = [](const char* name, const std::string& v) -> std::uint64_t {
        try {
            std::size_t used = 0;
            std::uint64_t out = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError(std::string("config: ") + name + " is not an integer: '" + v +
                              "'");
        }
    };
    auto parse_f64 = [](const char* name, const std::string& v) -> double {
        try {
            std::size_t used = 0;
            double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw ConfigError(std::string("config: ") + name + " is not a number: '" + v +
                              "'");
        }
    };
    const std::map<std::string, std::function<void(const std::string&)>> setters{
        {"SOMNUS_SEED", [&](const std::string& v) { c.seed = parse_u64("SOMNUS_SEED", v); }},
        {"SOMNUS_OUT", [&](const std::string& v) { c.out = v; }},
        {"SOMNUS_STAGE", [&](const std::string& v) { c.stage = v; }},
        {"SOMNUS_COHORT_SUBJECTS",
         [&](const std::string& v) { c.cohort.subjects = parse_u64("SOMNUS_COHORT_SUBJECTS", v); }},
        {"SOMNUS_COHORT_MIN_EPOCHS",
         [&](const std::string& v) { c.cohort.min_epochs = parse_u64("SOMNUS_COHORT_MIN_EPOCHS", v); }},
        {"SOMNUS_COHORT_MAX_EPOCHS",
         [&](const std::string& v) { c.cohort.max_epochs = parse_u64("SOMNUS_COHORT_MAX_EPOCHS", v); }},
        {"SOMNUS_MICRO_PRESET", [&](const std::string& v) { c.micro.preset = v; }},
        {"SOMNUS_MICRO_BATCH",
         [&](const std::string& v) { c.micro.batch = parse_u64("SOMNUS_MICRO_BATCH", v); }},
        {"SOMNUS_MICRO_CROP_EPOCHS",
         [&](const std::string& v) { c.micro.crop_epochs = parse_u64("SOMNUS_MICRO_CROP_EPOCHS", v); }},
        {"SOMNUS_MICRO_CROPS_PER_RECORD",
         [&](const std::string& v) {
             c.micro.crops_per_record = parse_u64("SOMNUS_MICRO_CROPS_PER_RECORD", v);
         }},
        {"SOMNUS_MICRO_TRAIN_EPOCHS",
         [&](const std::string& v) { c.micro.train_epochs = parse_u64("SOMNUS_MICRO_TRAIN_EPOCHS", v); }},
        {"SOMNUS_MICRO_WARMUP",
         [&](const std::string& v) { c.micro.warmup = parse_u64("SOMNUS_MICRO_WARMUP", v); }},
        {"SOMNUS_MICRO_LR",
         [&](const std::string& v) { c.micro.lr = parse_f64("SOMNUS_MICRO_LR", v); }},
        {"SOMNUS_MICRO_WEIGHT_DECAY",
         [&](const std::string& v) { c.micro.weight_decay = parse_f64("SOMNUS_MICRO_WEIGHT_DECAY", v); }},
        {"SOMNUS_MACRO_PRESET", [&](const std::string& v) { c.macro.preset = v; }},
        {"SOMNUS_MACRO_BATCH",
         [&](const std::string& v) { c.macro.batch = parse_u64("SOMNUS_MACRO_BATCH", v); }},
        {"SOMNUS_MACRO_TRAIN_EPOCHS",
         [&](const std::string& v) { c.macro.train_epochs = parse_u64("SOMNUS_MACRO_TRAIN_EPOCHS", v); }},
        {"SOMNUS_MACRO_MAX_EPOCHS",
         [&](const std::string& v) { c.macro.max_epochs = parse_u64("SOMNUS_MACRO_MAX_EPOCHS", v); }},
        {"SOMNUS_MACRO_WARMUP",
         [&](const std::string& v) { c.macro.warmup = parse_u64("SOMNUS_MACRO_WARMUP", v); }},
        {"SOMNUS_MACRO_LR",
         [&](const std::string& v) { c.macro.lr = parse_f64("SOMNUS_MACRO_LR", v); }},
        {"SOMNUS_MACRO_WEIGHT_DECAY",
         [&](const std::string& v) { c.macro.weight_decay = parse_f64("SOMNUS_MACRO_WEIGHT_DECAY", v); }},
        {"SOMNUS_MACRO_UPSILON",
         [&](const std::string& v) { c.macro.upsilon = parse_f64("SOMNUS_MACRO_UPSILON", v); }},
        {"SOMNUS_MACRO_RHO",
         [&](const std::string& v) { c.macro.rho = parse_f64("SOMNUS_MACRO_RHO", v); }},
        {"SOMNUS_PROBE_STEPS",
         [&](const std::string& v) { c.probe.steps = parse_u64("SOMNUS_PROBE_STEPS", v); }},
        {"SOMNUS_PROBE_SDB_BATCH",
         [&](const std::string& v) { c.probe.sdb_batch = parse_u64("SOMNUS_PROBE_SDB_BATCH", v); }},
        {"SOMNUS_PROBE_LR",
         [&](const std::string& v) { c.probe.lr = parse_f64("SOMNUS_PROBE_LR", v); }},
    };
    for (const auto& [name, apply] : setters)
        if (const char* v = getenv_fn(name.c_str())) apply(v);
}

inline MicroConfig micro_config_from_preset(const std::string& preset) {
    if (preset == "desk") return MicroConfig::desk();
    if (preset == "reference") return MicroConfig::reference();
    if (preset == "tiny") return MicroConfig::tiny();
    throw ConfigError("config: unknown micro preset '" + preset + "'");
}

inline MacroConfig macro_config_from_preset(const std::string& preset) {
    if (preset == "desk") return MacroConfig::desk();
    if (preset == "tiny") return MacroConfig::tiny();
    throw ConfigError("config: unknown macro preset '" + preset + "'");
}

// --- splits and paths -----------------------------------------------------------

struct Splits {
    std::vector<std::size_t> pretrain, probe, test;
};

// 50/25/25 by cohort index, stride-interleaved (i % 4: 0,1 -> pretrain,
// 2 -> probe, 3 -> test). The generator cycles demographic strata with the
// subject index, so contiguous blocks would skew sex and age across splits;
// striding keeps every split demographically mixed. 128 subjects -> 64/32/32.
inline Splits make_splits(std::size_t subjects) {
    if (subjects < 4)
        throw ConfigError("make_splits: need at least 4 subjects, got " +
                          std::to_string(subjects));
    Splits s;
    for (std::size_t i = 0; i < subjects; ++i) {
        switch (i % 4) {
            case 2: s.probe.push_back(i); break;
            case 3: s.test.push_back(i); break;
            default: s.pretrain.push_back(i);
        }
    }
    return s;
}

struct RunPaths {
    std::filesystem::path root, cohort, checkpoints, embeddings, exports;

    static RunPaths at(const std::filesystem::path& out) {
        RunPaths p;
        p.root = out;
        p.cohort = out / "cohort";
        p.checkpoints = out / "checkpoints";
        p.embeddings = out / "embeddings";
        p.exports = out / "exports";
        return p;
    }

    std::filesystem::path record_dir(const std::string& id) const {
        return cohort / "subjects" / id;
    }
    std::filesystem::path micro_ckpt(std::size_t epoch = 0) const {
        return checkpoints / (epoch ? "micro_epoch" + std::to_string(epoch) + ".ckpt"
                                    : std::string("micro.ckpt"));
    }
    std::filesystem::path macro_ckpt(std::size_t epoch = 0) const {
        return checkpoints / (epoch ? "macro_epoch" + std::to_string(epoch) + ".ckpt"
                                    : std::string("macro.ckpt"));
    }
};

// --- float32 embedding cache ------------------------------------------------------

namespace detail {
inline constexpr char kEmbedMagic[9] = "SOMNEMB1";
}

inline void save_embedding_cache(const std::filesystem::path& path,
                                 const std::string& config_hash,
                                 const std::vector<std::vector<double>>& rows) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write embedding cache " + path.string());
    f.write(detail::kEmbedMagic, 8);
    char hash[17] = {};
    std::snprintf(hash, sizeof(hash), "%.16s", config_hash.c_str());
    f.write(hash, 16);
    std::uint64_t r = rows.size(), c = rows.empty() ? 0 : rows[0].size();
    f.write(reinterpret_cast<const char*>(&r), 8);
    f.write(reinterpret_cast<const char*>(&c), 8);
    std::vector<float> buf;
    buf.reserve(c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("embedding cache: ragged rows");
        buf.assign(row.begin(), row.end());
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) throw DataError("short write to embedding cache " + path.string());
}

inline std::vector<std::vector<double>> load_embedding_cache(
    const std::filesystem::path& path, const std::string& config_hash) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open embedding cache " + path.string());
    char magic[8], hash[16];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, detail::kEmbedMagic, 8) != 0)
        throw DataError("bad embedding cache magic in " + path.string());
    f.read(hash, 16);
    if (!f || std::string(hash, 16) != config_hash)
        throw DataError("embedding cache " + path.string() +
                        " was built under a different config");
    std::uint64_t r = 0, c = 0;
    f.read(reinterpret_cast<char*>(&r), 8);
    f.read(reinterpret_cast<char*>(&c), 8);
    if (!f || r > (1ull << 32) || c > (1ull << 24))
        throw DataError("bad embedding cache dimensions in " + path.string());
    std::vector<std::vector<double>> rows(r, std::vector<double>(c));
    std::vector<float> buf(c);
    for (auto& row : rows) {
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(c * sizeof(float)));
        if (!f) throw DataError("truncated embedding cache " + path.string());
        row.assign(buf.begin(), buf.end());
    }
    return rows;
}

// Computes rows once and replays them through the float32 cache so the first
// run and every cached rerun see bit-identical values.
inline std::vector<std::vector<double>> cached_embeddings(
    const std::filesystem::path& path, const std::string& config_hash,
    const std::function<std::vector<std::vector<double>>()>& compute) {
    if (!std::filesystem::exists(path)) save_embedding_cache(path, config_hash, compute());
    return load_embedding_cache(path, config_hash);
}

// --- loss CSV ----------------------------------------------------------------------

class LossCsv {
public:
    LossCsv(const std::filesystem::path& path, const std::string& config_hash,
            const std::string& columns, bool append) {
        std::filesystem::create_directories(path.parent_path());
        bool fresh = !append || !std::filesystem::exists(path);
        f_.open(path, fresh ? std::ios::trunc : std::ios::app);
        if (!f_) throw DataError("cannot write loss log " + path.string());
        f_.precision(17);
        if (fresh) f_ << "# config_hash=" << config_hash << "\n" << columns << "\n";
    }

    template <typename... Vals>
    void row(Vals... vals) {
        bool first = true;
        ((f_ << (first ? "" : ",") << vals, first = false), ...);
        f_ << "\n";
        f_.flush();
    }

private:
    std::ofstream f_;
};

// --- record access -----------------------------------------------------------------

inline StandardRecord load_standard_record(const RunPaths& paths, const std::string& id) {
    return standardize(load_record(paths.record_dir(id)));
}

inline std::vector<std::string> split_ids(const CohortManifest& manifest,
                                          const std::vector<std::size_t>& indices) {
    std::vector<std::string> ids;
    ids.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= manifest.rows.size())
            throw DataError("split index " + std::to_string(i) +
                            " outside cohort of " + std::to_string(manifest.rows.size()));
        ids.push_back(manifest.rows[i].record_id);
    }
    return ids;
}

// --- stage: synth --------------------------------------------------------------------

inline CohortManifest cmd_synth(const RunConfig& cfg, bool force = false) {
    RunPaths paths = RunPaths::at(cfg.out);
    if (std::filesystem::exists(paths.cohort) &&
        !std::filesystem::is_empty(paths.cohort)) {
        if (!force)
            throw DataError("cohort directory " + paths.cohort.string() +
                            " already exists; pass --force to overwrite");
        std::filesystem::remove_all(paths.cohort);
    }
    std::filesystem::create_directories(paths.cohort);
    GeneratorConfig gen;
    gen.seed = cfg.seed;
    gen.min_epochs = cfg.cohort.min_epochs;
    gen.max_epochs = cfg.cohort.max_epochs;
    CohortManifest manifest =
        synthesize_cohort(paths.cohort, cfg.cohort.subjects, gen, cohort_scope_hash(cfg));
    std::ofstream cj(paths.root / "config.json");
    nlohmann::json dump = run_config_json(cfg);
    dump["config_hash"] = config_hash(cfg);
    cj << dump.dump(2) << "\n";
    return manifest;
}

inline CohortManifest require_cohort(const RunPaths& paths, const std::string& cohort_hash) {
    auto manifest_path = paths.cohort / "cohort.csv";
    if (!std::filesystem::exists(manifest_path))
        throw DataError("no cohort manifest at " + manifest_path.string() +
                        "; run the synth stage first");
    CohortManifest m = load_manifest(manifest_path);
    if (m.config_hash != cohort_hash)
        throw DataError("cohort at " + manifest_path.string() +
                        " was synthesised under settings " + m.config_hash +
                        ", current settings hash to " + cohort_hash);
    return m;
}

// --- stage: micro pretraining ----------------------------------------------------------

struct MicroTrainResult {
    std::filesystem::path checkpoint;
    std::vector<double> step_losses;  // total loss per step, all passes
    std::size_t steps = 0;
};

inline MicroTrainResult train_micro(const RunConfig& cfg) {
    RunPaths paths = RunPaths::at(cfg.out);
    CohortManifest manifest = require_cohort(paths, cohort_scope_hash(cfg));
    Splits splits = make_splits(cfg.cohort.subjects);
    std::vector<std::string> ids = split_ids(manifest, splits.pretrain);
    const std::string hash = micro_scope_hash(cfg);

    MicroConfig mc = micro_config_from_preset(cfg.micro.preset);
    MicroModel model(mc, cfg.seed);
    AdamWConfig ocfg;
    ocfg.weight_decay = cfg.micro.weight_decay;
    AdamW opt(model.params(), ocfg);

    if (cfg.micro.batch == 0 || cfg.micro.crops_per_record == 0 ||
        cfg.micro.train_epochs == 0)
        throw ConfigError("micro training: batch, crops_per_record and train_epochs "
                          "must be positive");
    const std::size_t crops_per_pass = ids.size() * cfg.micro.crops_per_record;
    if (crops_per_pass % cfg.micro.batch != 0)
        throw ConfigError("micro training: crops per pass (" +
                          std::to_string(crops_per_pass) +
                          ") must divide evenly into batches of " +
                          std::to_string(cfg.micro.batch));
    const std::size_t steps_per_pass = crops_per_pass / cfg.micro.batch;
    const std::size_t total_steps = steps_per_pass * cfg.micro.train_epochs;

    std::size_t start_epoch = 0;
    std::size_t step = 0;
    if (std::filesystem::exists(paths.micro_ckpt())) {
        Checkpoint ck = load_checkpoint(paths.micro_ckpt().string());
        if (ck.meta.config_hash != hash)
            throw DataError("micro checkpoint was written under config " +
                            ck.meta.config_hash + ", current is " + hash);
        restore_checkpoint(ck, model.params(), &opt);
        start_epoch = ck.meta.epoch;
        step = ck.meta.step;
    }

    MicroTrainResult res;
    LossCsv csv(paths.root / "micro_loss.csv", hash,
                "step,lr,recon,contrastive,koleo,total", start_epoch > 0);

    for (std::size_t pass = start_epoch; pass < cfg.micro.train_epochs; ++pass) {
        // record order and per-record crops are derived from (seed, pass), so a
        // resumed run replays the uninterrupted trajectory exactly
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng order_rng(derive_seed(cfg.seed, "micro-order", pass));
        order_rng.shuffle(order);

        std::vector<MicroExample> batch;
        batch.reserve(cfg.micro.batch);
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            StandardRecord rec = load_standard_record(paths, ids[order[oi]]);
            Rng crop_rng(derive_seed(cfg.seed, "micro-crops", pass, order[oi]));
            for (std::size_t k = 0; k < cfg.micro.crops_per_record; ++k) {
                if (rec.epochs < cfg.micro.crop_epochs)
                    throw DataError("record " + rec.id + " shorter than one crop");
                std::size_t start =
                    crop_rng.index(rec.epochs - cfg.micro.crop_epochs + 1);
                batch.push_back(
                    make_training_example(rec, start, cfg.micro.crop_epochs, mc, crop_rng));
                if (batch.size() < cfg.micro.batch) continue;

                MicroOutput out = model.forward(batch);
                MicroLosses losses = micro_losses(out, batch, mc);
                double lr = cosine_lr(step, total_steps, cfg.micro.warmup, cfg.micro.lr);
                model.params().zero_grad();
                losses.total.backward();
                opt.step(lr);
                csv.row(step, lr, losses.recon.item(), losses.contrastive.item(),
                        losses.koleo.item(), losses.total.item());
                res.step_losses.push_back(losses.total.item());
                ++step;
                batch.clear();
            }
        }
        CheckpointMeta meta{hash, "micro", step, pass + 1};
        std::filesystem::create_directories(paths.checkpoints);
        save_checkpoint(paths.micro_ckpt(pass + 1).string(), meta, model.params(), &opt);
        save_checkpoint(paths.micro_ckpt().string(), meta, model.params(), &opt);
    }
    res.checkpoint = paths.micro_ckpt();
    res.steps = step;
    return res;
}

// --- embedding extraction ----------------------------------------------------------------

inline MicroModel load_micro_model(const RunConfig& cfg, const RunPaths& paths) {
    MicroConfig mc = micro_config_from_preset(cfg.micro.preset);
    MicroModel model(mc, cfg.seed);
    if (!std::filesystem::exists(paths.micro_ckpt()))
        throw DataError("no micro checkpoint at " + paths.micro_ckpt().string() +
                        "; run the micro stage first");
    Checkpoint ck = load_checkpoint(paths.micro_ckpt().string());
    if (ck.meta.config_hash != micro_scope_hash(cfg))
        throw DataError("micro checkpoint was written under config " +
                        ck.meta.config_hash + ", current is " + micro_scope_hash(cfg));
    restore_checkpoint(ck, model.params());
    return model;
}

inline std::vector<std::vector<double>> micro_epoch_embeddings_cached(
    const RunPaths& paths, const std::string& hash, const MicroModel& model,
    const std::string& id) {
    return cached_embeddings(paths.embeddings / ("epoch_" + id + ".f32"), hash, [&] {
        return model.epoch_embeddings(load_standard_record(paths, id));
    });
}

inline std::vector<std::vector<double>> micro_patch_embeddings_cached(
    const RunPaths& paths, const std::string& hash, const MicroModel& model,
    const std::string& id) {
    return cached_embeddings(paths.embeddings / ("patch_" + id + ".f32"), hash, [&] {
        return model.patch_embeddings(load_standard_record(paths, id));
    });
}

inline Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw DataError("rows_to_tensor: no rows");
    std::vector<double> flat;
    flat.reserve(rows.size() * rows[0].size());
    for (const auto& r : rows) {
        if (r.size() != rows[0].size()) throw ShapeError("rows_to_tensor: ragged rows");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor::from({static_cast<Index>(rows.size()),
                         static_cast<Index>(rows[0].size())},
                        std::move(flat));
}

// Head-first truncation: keep the trailing `limit` epochs.
inline std::vector<std::vector<double>> truncate_head(
    std::vector<std::vector<double>> rows, std::size_t limit) {
    if (rows.size() > limit)
        rows.erase(rows.begin(), rows.end() - static_cast<std::ptrdiff_t>(limit));
    return rows;
}

// --- demographic statistics over a split ------------------------------------------------

struct DemoStats {
    double age_mean = 0, age_sd = 1, bmi_mean = 0, bmi_sd = 1;
};

inline DemoStats demographic_stats(const CohortManifest& manifest,
                                   const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DataError("demographic_stats: empty split");
    DemoStats s;
    double n = static_cast<double>(indices.size());
    for (std::size_t i : indices) {
        s.age_mean += manifest.rows[i].age;
        s.bmi_mean += manifest.rows[i].bmi;
    }
    s.age_mean /= n;
    s.bmi_mean /= n;
    double va = 0, vb = 0;
    for (std::size_t i : indices) {
        va += (manifest.rows[i].age - s.age_mean) * (manifest.rows[i].age - s.age_mean);
        vb += (manifest.rows[i].bmi - s.bmi_mean) * (manifest.rows[i].bmi - s.bmi_mean);
    }
    s.age_sd = std::sqrt(va / n);
    s.bmi_sd = std::sqrt(vb / n);
    if (s.age_sd <= 0 || s.bmi_sd <= 0)
        throw DataError("demographic_stats: degenerate cohort spread");
    return s;
}

// --- stage: macro pretraining -------------------------------------------------------------

struct MacroTrainResult {
    std::filesystem::path checkpoint;
    std::vector<double> step_losses;
    std::size_t steps = 0;
};

inline MacroTrainResult train_macro(const RunConfig& cfg) {
    RunPaths paths = RunPaths::at(cfg.out);
    CohortManifest manifest = require_cohort(paths, cohort_scope_hash(cfg));
    Splits splits = make_splits(cfg.cohort.subjects);
    const std::string hash = macro_scope_hash(cfg);
    const std::string micro_hash = micro_scope_hash(cfg);

    MicroModel micro = load_micro_model(cfg, paths);
    MacroConfig mac = macro_config_from_preset(cfg.macro.preset);
    mac.in_dim = micro.embedding_dim();
    mac.upsilon = cfg.macro.upsilon;
    mac.rho = cfg.macro.rho;
    MacroModel model(mac, cfg.seed);
    AdamWConfig ocfg;
    ocfg.weight_decay = cfg.macro.weight_decay;
    AdamW opt(model.params(), ocfg);

    if (cfg.macro.batch < 2)
        throw ConfigError("macro training: contrastive batches need >= 2 subjects");
    if (cfg.macro.train_epochs == 0)
        throw ConfigError("macro training: train_epochs must be positive");

    DemoStats stats = demographic_stats(manifest, splits.pretrain);
    std::vector<SubjectKey> keys;
    for (std::size_t i : splits.pretrain)
        keys.push_back({manifest.rows[i].record_id, manifest.rows[i].sex,
                        manifest.rows[i].duration_epochs});
    auto batches = stratified_batches(keys, cfg.macro.batch);
    const std::size_t total_steps = batches.size() * cfg.macro.train_epochs;

    std::size_t start_epoch = 0, step = 0;
    if (std::filesystem::exists(paths.macro_ckpt())) {
        Checkpoint ck = load_checkpoint(paths.macro_ckpt().string());
        if (ck.meta.config_hash != hash)
            throw DataError("macro checkpoint was written under config " +
                            ck.meta.config_hash + ", current is " + hash);
        restore_checkpoint(ck, model.params(), &opt);
        start_epoch = ck.meta.epoch;
        step = ck.meta.step;
    }

    MacroTrainResult res;
    LossCsv csv(paths.root / "macro_loss.csv", hash, "step,lr,dgcl", start_epoch > 0);

    for (std::size_t pass = start_epoch; pass < cfg.macro.train_epochs; ++pass) {
        std::vector<std::size_t> border(batches.size());
        std::iota(border.begin(), border.end(), std::size_t{0});
        Rng order_rng(derive_seed(cfg.seed, "macro-order", pass));
        order_rng.shuffle(border);

        for (std::size_t bi : border) {
            std::vector<Tensor> embeds;
            std::vector<SubjectDemo> demos;
            for (std::size_t local : batches[bi]) {
                const CohortRow& cr = manifest.rows[splits.pretrain[local]];
                auto rows = truncate_head(
                    micro_epoch_embeddings_cached(paths, micro_hash, micro, cr.record_id),
                    cfg.macro.max_epochs);
                auto f = model.forward(rows_to_tensor(rows));
                Tensor se = model.subject_embedding(f);
                embeds.push_back(reshape(se, {Index{1}, se.numel()}));
                Demographics d;
                d.age = cr.age;
                d.sex = cr.sex;
                d.bmi = cr.bmi;
                demos.push_back(standardize_demo(d, stats.age_mean, stats.age_sd,
                                                 stats.bmi_mean, stats.bmi_sd));
            }
            Tensor loss =
                dgcl_loss(concat(embeds, 0), demos, cfg.macro.upsilon, cfg.macro.rho);
            double lr = cosine_lr(step, total_steps, cfg.macro.warmup, cfg.macro.lr);
            model.params().zero_grad();
            loss.backward();
            opt.step(lr);
            csv.row(step, lr, loss.item());
            res.step_losses.push_back(loss.item());
            ++step;
        }
        CheckpointMeta meta{hash, "macro", step, pass + 1};
        std::filesystem::create_directories(paths.checkpoints);
        save_checkpoint(paths.macro_ckpt(pass + 1).string(), meta, model.params(), &opt);
        save_checkpoint(paths.macro_ckpt().string(), meta, model.params(), &opt);
    }
    res.checkpoint = paths.macro_ckpt();
    res.steps = step;
    return res;
}

inline MacroModel load_macro_model(const RunConfig& cfg, const RunPaths& paths,
                                   const MicroModel& micro) {
    MacroConfig mac = macro_config_from_preset(cfg.macro.preset);
    mac.in_dim = micro.embedding_dim();
    mac.upsilon = cfg.macro.upsilon;
    mac.rho = cfg.macro.rho;
    MacroModel model(mac, cfg.seed);
    if (!std::filesystem::exists(paths.macro_ckpt()))
        throw DataError("no macro checkpoint at " + paths.macro_ckpt().string() +
                        "; run the macro stage first");
    Checkpoint ck = load_checkpoint(paths.macro_ckpt().string());
    if (ck.meta.config_hash != macro_scope_hash(cfg))
        throw DataError("macro checkpoint was written under config " +
                        ck.meta.config_hash + ", current is " + macro_scope_hash(cfg));
    restore_checkpoint(ck, model.params());
    return model;
}

// --- stage: probes and evaluation ------------------------------------------------------------

struct ProbeArtifacts {
    ProbeMetrics metrics;
    ProbeResult trained;
    nlohmann::json metrics_with_hash;
    std::filesystem::path metrics_path, confusion_path;
};

namespace detail {

struct SubjectEmbeddings {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
};

// macro forward over cached micro embeddings; returns contextual rows and the
// subject embedding for one record
struct MacroOutputs {
    std::vector<std::vector<double>> contextual;
    std::vector<double> subject;
};

inline MacroOutputs macro_outputs_for(const RunPaths& paths, const std::string& micro_hash,
                                      const MicroModel& micro, const MacroModel& macro,
                                      const std::string& id, std::size_t max_epochs) {
    NoGrad ng;
    auto rows = truncate_head(micro_epoch_embeddings_cached(paths, micro_hash, micro, id),
                              max_epochs);
    auto f = macro.forward(rows_to_tensor(rows));
    MacroOutputs out;
    const auto& v = f.contextual.values();
    const Index l = f.contextual.dim(0), d = f.contextual.dim(1);
    out.contextual.resize(l, std::vector<double>(d));
    for (Index t = 0; t < l; ++t)
        for (Index k = 0; k < d; ++k) out.contextual[t][k] = v[t * d + k];
    Tensor se = macro.subject_embedding(f);
    out.subject = se.values();
    return out;
}

}  // namespace detail

inline void check_split_disjoint(const std::vector<std::string>& a,
                                 const std::vector<std::string>& b) {
    for (const auto& x : a)
        for (const auto& y : b)
            if (x == y)
                throw DataError("split leakage: record " + x +
                                " appears in both probe-train and test");
}

// Assembles train/test ProbeData for one task, trains the head, evaluates on
// the held-out split, and writes the metrics JSON + confusion CSV exports.
inline ProbeArtifacts run_probe_task(const RunConfig& cfg, ProbeTask task) {
    RunPaths paths = RunPaths::at(cfg.out);
    CohortManifest manifest = require_cohort(paths, cohort_scope_hash(cfg));
    Splits splits = make_splits(cfg.cohort.subjects);
    const std::string hash = config_hash(cfg);
    const std::string micro_hash = micro_scope_hash(cfg);

    std::vector<std::string> train_ids = split_ids(manifest, splits.probe);
    std::vector<std::string> test_ids = split_ids(manifest, splits.test);
    check_split_disjoint(train_ids, test_ids);

    MicroModel micro = load_micro_model(cfg, paths);
    const bool needs_macro = task != ProbeTask::sdb3;
    std::optional<MacroModel> macro;
    if (needs_macro) macro.emplace(load_macro_model(cfg, paths, micro));

    std::map<std::string, const CohortRow*> by_id;
    for (const auto& r : manifest.rows) by_id[r.record_id] = &r;

    auto gather = [&](const std::vector<std::string>& ids) {
        ProbeData data;
        std::vector<std::vector<double>> rows;
        for (const auto& id : ids) {
            const CohortRow& cr = *by_id.at(id);
            switch (task) {
                case ProbeTask::stage5: {
                    StandardRecord rec = load_standard_record(paths, id);
                    EpochRange keep = wake_truncate(rec.stages);
                    auto out = detail::macro_outputs_for(paths, micro_hash, micro, *macro,
                                                         id, cfg.macro.max_epochs);
                    std::size_t offset = rec.epochs - out.contextual.size();
                    for (std::size_t e = keep.start; e < keep.end; ++e) {
                        if (e < offset) continue;  // epoch truncated head-first
                        rows.push_back(out.contextual[e - offset]);
                        data.classes.push_back(rec.stages[e]);
                    }
                    break;
                }
                case ProbeTask::sdb3: {
                    StandardRecord rec = load_standard_record(paths, id);
                    EpochRange keep = wake_truncate(rec.stages);
                    auto seconds = second_pool(
                        micro_patch_embeddings_cached(paths, micro_hash, micro, id));
                    for (std::size_t s = keep.start * kEpochSeconds;
                         s < keep.end * kEpochSeconds; ++s) {
                        rows.push_back(seconds[s]);
                        data.classes.push_back(rec.sdb[s]);
                    }
                    break;
                }
                case ProbeTask::survival: {
                    auto out = detail::macro_outputs_for(paths, micro_hash, micro, *macro,
                                                         id, cfg.macro.max_epochs);
                    rows.push_back(out.subject);
                    data.times.push_back(cr.survival_time);
                    data.events.push_back(cr.event_observed ? 1 : 0);
                    break;
                }
                case ProbeTask::regression:
                case ProbeTask::binary: {
                    auto out = detail::macro_outputs_for(paths, micro_hash, micro, *macro,
                                                         id, cfg.macro.max_epochs);
                    rows.push_back(out.subject);
                    if (task == ProbeTask::regression)
                        data.targets.push_back(cr.age);
                    else
                        data.classes.push_back(cr.sex == Sex::M ? 1 : 0);
                    break;
                }
            }
        }
        data.embeddings = rows_to_tensor(rows);
        return data;
    };

    ProbeData train_data = gather(train_ids);
    ProbeData test_data = gather(test_ids);

    ProbeConfig pc;
    pc.steps = cfg.probe.steps;
    pc.lr = cfg.probe.lr;
    pc.seed = cfg.seed;
    if (task == ProbeTask::sdb3) pc.batch = cfg.probe.sdb_batch;
    ProbeArtifacts art;
    art.trained = probe_train(task, train_data, pc);
    art.metrics = evaluate_probe(art.trained.head, test_data);
    art.metrics_with_hash = metrics_json(task, "test", art.metrics);
    art.metrics_with_hash["config_hash"] = hash;

    std::filesystem::create_directories(paths.exports);
    art.metrics_path =
        paths.exports / ("metrics_" + std::string(probe_task_name(task)) + ".json");
    std::ofstream mj(art.metrics_path);
    mj << art.metrics_with_hash.dump(2) << "\n";

    if (!art.metrics.confusion.empty()) {
        art.confusion_path =
            paths.exports / ("confusion_" + std::string(probe_task_name(task)) + ".csv");
        std::ofstream cf(art.confusion_path);
        cf << "# config_hash=" << hash << "\n" << confusion_csv(art.metrics.confusion);
    }
    return art;
}

// Writes one row per probe/test subject: id, split, then the macro subject
// embedding coordinates.
inline std::filesystem::path export_subject_embeddings(const RunConfig& cfg) {
    RunPaths paths = RunPaths::at(cfg.out);
    CohortManifest manifest = require_cohort(paths, cohort_scope_hash(cfg));
    Splits splits = make_splits(cfg.cohort.subjects);
    const std::string micro_hash = micro_scope_hash(cfg);
    MicroModel micro = load_micro_model(cfg, paths);
    MacroModel macro = load_macro_model(cfg, paths, micro);

    std::filesystem::create_directories(paths.exports);
    auto path = paths.exports / "subject_embeddings.csv";
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f.precision(17);
    f << "# config_hash=" << config_hash(cfg) << "\n";
    f << "record_id,split";
    auto out0 = detail::macro_outputs_for(paths, micro_hash, micro, macro,
                                          manifest.rows[splits.probe[0]].record_id,
                                          cfg.macro.max_epochs);
    for (std::size_t k = 0; k < out0.subject.size(); ++k) f << ",e" << k;
    f << "\n";
    auto dump = [&](const std::vector<std::size_t>& idx, const char* split) {
        for (std::size_t i : idx) {
            const std::string& id = manifest.rows[i].record_id;
            auto out = detail::macro_outputs_for(paths, micro_hash, micro, macro, id,
                                                 cfg.macro.max_epochs);
            f << id << "," << split;
            for (double v : out.subject) f << "," << v;
            f << "\n";
        }
    };
    dump(splits.probe, "probe");
    dump(splits.test, "test");
    return path;
}

inline std::vector<ProbeTask> all_probe_tasks() {
    return {ProbeTask::stage5, ProbeTask::sdb3, ProbeTask::survival,
            ProbeTask::regression, ProbeTask::binary};
}

}  // namespace somnus
