#pragma once
// Polysomnography record model: raw multi-rate channels with label tracks,
// the standardized 100 Hz representation the encoders consume, and the
// on-disk directory format (JSON header + one float32 binary per channel +
// CSV label tracks).

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "somnus/common.hpp"
#include "somnus/signal.hpp"

namespace somnus {

static_assert(std::endian::native == std::endian::little,
              "channel binaries are little-endian");

enum class Sex { F = 0, M = 1 };

inline const char* sex_name(Sex s) { return s == Sex::F ? "F" : "M"; }
inline Sex sex_from_name(const std::string& s) {
    if (s == "F") return Sex::F;
    if (s == "M") return Sex::M;
    throw DataError("unknown sex code '" + s + "'");
}

struct Demographics {
    double age = 0.0;
    Sex sex = Sex::F;
    double bmi = 0.0;
};

struct SurvivalLabel {
    double time = 0.0;  // years to event or censoring
    bool observed = false;
};

constexpr int kStageCount = 5;   // W, N1, N2, N3, REM
constexpr int kSdbClassCount = 3;  // normal, hypopnea, apnea
constexpr std::size_t kEpochSeconds = 30;
constexpr double kTargetHz = 100.0;
constexpr std::size_t kEpochSamples = 3000;  // 30 s at 100 Hz
constexpr std::size_t kPatchLen = 50;        // 500 ms at 100 Hz

inline const char* stage_name(int s) {
    static const char* names[] = {"W", "N1", "N2", "N3", "REM"};
    if (s < 0 || s >= kStageCount) throw DataError("stage out of range");
    return names[s];
}

struct RawChannel {
    std::string name;
    std::vector<float> samples;
};

struct RawModality {
    double rate_hz = 0.0;
    std::vector<RawChannel> channels;
};

struct RawRecord {
    std::string id;
    Demographics demo;
    std::map<Modality, RawModality> modalities;
    std::vector<int> stages;  // one per 30-s epoch; empty when unlabeled
    std::vector<int> sdb;     // one class per second; empty when unlabeled
    std::optional<SurvivalLabel> survival;

    double duration_s() const {
        for (const auto& [kind, mod] : modalities)
            if (!mod.channels.empty())
                return static_cast<double>(mod.channels.front().samples.size()) /
                       mod.rate_hz;
        throw DataError("record '" + id + "' has no channels");
    }

    void validate() const {
        if (modalities.empty()) throw DataError("record '" + id + "' has no modalities");
        double dur = duration_s();
        for (const auto& [kind, mod] : modalities) {
            if (mod.rate_hz <= 0)
                throw DataError("record '" + id + "': nonpositive rate for " +
                                modality_name(kind));
            if (mod.channels.empty())
                throw DataError("record '" + id + "': no channels for " +
                                modality_name(kind));
            for (const auto& ch : mod.channels) {
                auto want = static_cast<std::size_t>(std::llround(dur * mod.rate_hz));
                if (ch.samples.size() != want)
                    throw DataError("record '" + id + "': channel " + ch.name +
                                    " length " + std::to_string(ch.samples.size()) +
                                    " inconsistent with duration (want " +
                                    std::to_string(want) + ")");
            }
        }
        if (!stages.empty()) {
            auto want = static_cast<std::size_t>(dur) / kEpochSeconds;
            if (stages.size() != want)
                throw DataError("record '" + id + "': stage track length " +
                                std::to_string(stages.size()) + " != epoch count " +
                                std::to_string(want));
            for (int s : stages)
                if (s < 0 || s >= kStageCount)
                    throw DataError("record '" + id + "': stage value out of range");
        }
        if (!sdb.empty()) {
            auto want = static_cast<std::size_t>(dur);
            if (sdb.size() != want)
                throw DataError("record '" + id + "': sdb track length " +
                                std::to_string(sdb.size()) + " != duration seconds " +
                                std::to_string(want));
            for (int c : sdb)
                if (c < 0 || c >= kSdbClassCount)
                    throw DataError("record '" + id + "': sdb class out of range");
        }
    }
};

// ---- standardized representation -------------------------------------------------

struct StandardModality {
    std::vector<std::vector<double>> channels;  // [channel][T] at 100 Hz
    std::vector<bool> constant;                 // per-channel degenerate flag
};

struct StandardRecord {
    std::string id;
    Demographics demo;
    std::map<Modality, StandardModality> modalities;
    std::size_t epochs = 0;  // T = epochs * 3000
    std::vector<int> stages;
    std::vector<int> sdb;
    std::optional<SurvivalLabel> survival;

    std::size_t samples() const { return epochs * kEpochSamples; }
};

// resample -> filter bank -> tail-trim to whole epochs -> per-channel z-score.
inline StandardRecord standardize(const RawRecord& raw, const FilterBankConfig& cfg = {}) {
    raw.validate();
    for (Modality m : all_modalities())
        if (raw.modalities.find(m) == raw.modalities.end())
            throw DataError("record '" + raw.id + "': missing modality " +
                            std::string(modality_name(m)));

    StandardRecord out;
    out.id = raw.id;
    out.demo = raw.demo;
    out.survival = raw.survival;

    // First pass: resample + filter; establish the common trimmed length.
    std::size_t min_len = SIZE_MAX;
    std::map<Modality, std::vector<std::vector<double>>> filtered;
    for (const auto& [kind, mod] : raw.modalities) {
        auto& chans = filtered[kind];
        for (const auto& ch : mod.channels) {
            std::vector<double> x(ch.samples.begin(), ch.samples.end());
            if (cfg.native_notch && is_high_rate(kind) && mod.rate_hz > 2.0 * cfg.notch_hz)
                x = filtfilt({notch(cfg.notch_hz, mod.rate_hz)}, x);
            x = resample(x, mod.rate_hz, cfg.target_hz);
            auto bank = modality_filters(kind, cfg.target_hz);
            if (!bank.empty()) x = filtfilt(bank, x, modality_padlen(kind, cfg.target_hz));
            min_len = std::min(min_len, x.size());
            chans.push_back(std::move(x));
        }
    }
    out.epochs = min_len / kEpochSamples;
    if (out.epochs == 0)
        throw DataError("record '" + raw.id + "' is shorter than one 30-s epoch");
    std::size_t T = out.epochs * kEpochSamples;

    for (auto& [kind, chans] : filtered) {
        StandardModality sm;
        for (auto& x : chans) {
            x.resize(T);
            double mean = 0.0;
            for (double v : x) mean += v;
            mean /= static_cast<double>(T);
            double var = 0.0;
            for (double v : x) var += (v - mean) * (v - mean);
            var /= static_cast<double>(T);
            double sd = std::sqrt(var);
            bool flat = sd < 1e-8;
            if (flat) {
                Warnings::emit("standardize: constant channel (" +
                               std::string(modality_name(kind)) + ") in record '" +
                               raw.id + "'");
                std::fill(x.begin(), x.end(), 0.0);
            } else {
                for (double& v : x) v = (v - mean) / sd;
            }
            sm.constant.push_back(flat);
            sm.channels.push_back(std::move(x));
        }
        out.modalities[kind] = std::move(sm);
    }

    out.stages = raw.stages;
    if (out.stages.size() > out.epochs) out.stages.resize(out.epochs);
    out.sdb = raw.sdb;
    if (out.sdb.size() > out.epochs * kEpochSeconds) out.sdb.resize(out.epochs * kEpochSeconds);
    return out;
}

inline PatchGrid patchify_channel(const StandardRecord& rec, Modality kind,
                                  std::size_t channel = 0) {
    auto it = rec.modalities.find(kind);
    if (it == rec.modalities.end() || channel >= it->second.channels.size())
        throw DataError("patchify_channel: no such channel");
    return patchify(it->second.channels[channel], kPatchLen);
}

// ---- directory IO -----------------------------------------------------------------

namespace detail {

inline void write_f32(const std::filesystem::path& path, const std::vector<float>& x) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(x.data()),
            static_cast<std::streamsize>(x.size() * sizeof(float)));
    if (!f) throw DataError("short write to " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read " + path.string());
    std::vector<float> x(count);
    f.read(reinterpret_cast<char*>(x.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(f.gcount()) != count * sizeof(float))
        throw DataError("truncated channel binary " + path.string());
    return x;
}

}  // namespace detail

inline void save_record(const std::filesystem::path& dir, const RawRecord& rec) {
    rec.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json header;
    header["record_id"] = rec.id;
    header["demographics"] = {{"age", rec.demo.age},
                              {"sex", sex_name(rec.demo.sex)},
                              {"bmi", rec.demo.bmi}};
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& [kind, mod] : rec.modalities) {
        nlohmann::json chans = nlohmann::json::array();
        for (const auto& ch : mod.channels) {
            std::string file = ch.name + ".f32";
            chans.push_back({{"name", ch.name},
                             {"file", file},
                             {"samples", ch.samples.size()}});
            detail::write_f32(dir / file, ch.samples);
        }
        mods.push_back({{"kind", modality_name(kind)},
                        {"rate_hz", mod.rate_hz},
                        {"channels", chans}});
    }
    header["modalities"] = mods;
    nlohmann::json tracks = nlohmann::json::object();
    if (!rec.stages.empty()) {
        tracks["stages"] = "stages.csv";
        std::ofstream f(dir / "stages.csv");
        f << "epoch_index,stage\n";
        for (std::size_t i = 0; i < rec.stages.size(); ++i)
            f << i << "," << rec.stages[i] << "\n";
    }
    if (!rec.sdb.empty()) {
        tracks["sdb"] = "sdb.csv";
        std::ofstream f(dir / "sdb.csv");
        f << "second_index,sdb_class\n";
        for (std::size_t i = 0; i < rec.sdb.size(); ++i)
            f << i << "," << rec.sdb[i] << "\n";
    }
    if (rec.survival)
        tracks["survival"] = {{"time_years", rec.survival->time},
                              {"observed", rec.survival->observed}};
    header["label_tracks"] = tracks;

    std::ofstream hf(dir / "header.json");
    if (!hf) throw DataError("cannot write header in " + dir.string());
    hf << header.dump(2) << "\n";
}

namespace detail {

inline std::vector<int> read_label_csv(const std::filesystem::path& path,
                                       const std::string& want_header, int max_class) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line)) throw DataError("empty label track " + path.string());
    if (line != want_header)
        throw DataError("label track " + path.string() + " has unexpected header '" +
                        line + "'");
    std::vector<int> vals;
    std::size_t expect_idx = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw DataError("malformed row in " + path.string() + ": '" + line + "'");
        std::size_t idx = std::stoull(line.substr(0, comma));
        int val = std::stoi(line.substr(comma + 1));
        if (idx != expect_idx)
            throw DataError("non-contiguous index in " + path.string());
        if (val < 0 || val > max_class)
            throw DataError("label out of range in " + path.string());
        vals.push_back(val);
        ++expect_idx;
    }
    return vals;
}

}  // namespace detail

inline RawRecord load_record(const std::filesystem::path& dir) {
    std::ifstream hf(dir / "header.json");
    if (!hf) throw DataError("missing header.json in " + dir.string());
    nlohmann::json header;
    try {
        hf >> header;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed header in " + dir.string() + ": " + e.what());
    }
    RawRecord rec;
    try {
        rec.id = header.at("record_id").get<std::string>();
        const auto& demo = header.at("demographics");
        rec.demo.age = demo.at("age").get<double>();
        rec.demo.sex = sex_from_name(demo.at("sex").get<std::string>());
        rec.demo.bmi = demo.at("bmi").get<double>();
        for (const auto& mod : header.at("modalities")) {
            Modality kind = modality_from_name(mod.at("kind").get<std::string>());
            if (rec.modalities.count(kind))
                throw DataError("duplicate modality in header: " +
                                std::string(modality_name(kind)));
            RawModality rm;
            rm.rate_hz = mod.at("rate_hz").get<double>();
            for (const auto& ch : mod.at("channels")) {
                RawChannel rc;
                rc.name = ch.at("name").get<std::string>();
                auto count = ch.at("samples").get<std::size_t>();
                rc.samples = detail::read_f32(dir / ch.at("file").get<std::string>(), count);
                rm.channels.push_back(std::move(rc));
            }
            rec.modalities[kind] = std::move(rm);
        }
        const auto& tracks = header.at("label_tracks");
        if (tracks.contains("stages"))
            rec.stages = detail::read_label_csv(
                dir / tracks.at("stages").get<std::string>(), "epoch_index,stage",
                kStageCount - 1);
        if (tracks.contains("sdb"))
            rec.sdb = detail::read_label_csv(dir / tracks.at("sdb").get<std::string>(),
                                             "second_index,sdb_class", kSdbClassCount - 1);
        if (tracks.contains("survival")) {
            SurvivalLabel s;
            s.time = tracks.at("survival").at("time_years").get<double>();
            s.observed = tracks.at("survival").at("observed").get<bool>();
            rec.survival = s;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid header in " + dir.string() + ": " + e.what());
    }
    rec.validate();
    return rec;
}

// ---- cohort manifest ---------------------------------------------------------------

struct CohortRow {
    std::string record_id;
    double age = 0.0;
    Sex sex = Sex::F;
    double bmi = 0.0;
    std::size_t duration_epochs = 0;
    double survival_time = 0.0;
    bool event_observed = false;
};

struct CohortManifest {
    std::string config_hash;  // 16 hex chars
    std::vector<CohortRow> rows;
};

inline void save_manifest(const std::filesystem::path& path, const CohortManifest& m) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest " + path.string());
    f << "# config_hash=" << m.config_hash << "\n";
    f << "record_id,age,sex,bmi,duration_epochs,survival_time,event\n";
    f.precision(17);
    for (const auto& r : m.rows)
        f << r.record_id << "," << r.age << "," << sex_name(r.sex) << "," << r.bmi << ","
          << r.duration_epochs << "," << r.survival_time << ","
          << (r.event_observed ? 1 : 0) << "\n";
}

inline CohortManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read manifest " + path.string());
    CohortManifest m;
    std::string line;
    if (!std::getline(f, line) || line.rfind("# config_hash=", 0) != 0)
        throw DataError("manifest " + path.string() + " missing config_hash comment");
    m.config_hash = line.substr(std::string("# config_hash=").size());
    if (!std::getline(f, line) ||
        line != "record_id,age,sex,bmi,duration_epochs,survival_time,event")
        throw DataError("manifest " + path.string() + " has unexpected columns");
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        CohortRow r;
        auto next = [&]() {
            if (!std::getline(ss, tok, ',')) throw DataError("short manifest row: " + line);
            return tok;
        };
        r.record_id = next();
        r.age = std::stod(next());
        r.sex = sex_from_name(next());
        r.bmi = std::stod(next());
        r.duration_epochs = std::stoull(next());
        r.survival_time = std::stod(next());
        r.event_observed = std::stoi(next()) != 0;
        m.rows.push_back(std::move(r));
    }
    return m;
}

}  // namespace somnus
