#pragma once
// Checkpoint container: a JSON manifest (tensor names, shapes, offsets and
// run metadata) followed by raw little-endian float64 payload. Round-trips
// are bit-exact, which is what makes resumed training reproduce the
// uninterrupted trajectory.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "somnus/optim.hpp"

namespace somnus {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

struct CheckpointMeta {
    std::string config_hash;
    std::string stage;
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
};

struct Checkpoint {
    CheckpointMeta meta;
    std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
    std::uint64_t opt_steps = 0;
    bool has_opt = false;
};

namespace detail {
inline constexpr char kCheckpointMagic[9] = "SOMNUS01";
}

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const ParamStore& store, const AdamW* opt = nullptr) {
    nlohmann::json manifest;
    manifest["config_hash"] = meta.config_hash;
    manifest["stage"] = meta.stage;
    manifest["step"] = meta.step;
    manifest["epoch"] = meta.epoch;
    manifest["opt_steps"] = opt ? opt->steps_taken() : 0;
    manifest["has_opt"] = opt != nullptr;
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t offset = 0;
    auto describe = [&](const std::string& name, const Shape& shape, std::size_t count) {
        nlohmann::json t;
        t["name"] = name;
        t["shape"] = shape;
        t["offset"] = offset;
        t["count"] = count;
        tensors.push_back(std::move(t));
        offset += count;
    };
    for (const auto& [name, p] : store.all()) describe(name, p.shape(), p.numel());
    if (opt)
        for (const auto& [name, slot] : opt->state()) {
            describe("__opt.m." + name, Shape{slot.m.size()}, slot.m.size());
            describe("__opt.v." + name, Shape{slot.v.size()}, slot.v.size());
        }
    manifest["tensors"] = std::move(tensors);

    std::string mjson = manifest.dump();
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint file " + tmp);
        out.write(detail::kCheckpointMagic, 8);
        std::uint64_t mlen = mjson.size();
        out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
        out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
        auto dump = [&](const std::vector<double>& v) {
            out.write(reinterpret_cast<const char*>(v.data()),
                      static_cast<std::streamsize>(v.size() * sizeof(double)));
        };
        for (const auto& [name, p] : store.all()) dump(p.values());
        if (opt)
            for (const auto& [name, slot] : opt->state()) {
                dump(slot.m);
                dump(slot.v);
            }
        if (!out) throw DataError("short write on checkpoint file " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw DataError("bad checkpoint magic in " + path);
    std::uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!in || mlen > (1ull << 32)) throw DataError("bad checkpoint manifest length in " + path);
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw DataError("truncated checkpoint manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const std::exception& e) {
        throw DataError("unparsable checkpoint manifest in " + path + ": " + e.what());
    }
    Checkpoint ck;
    ck.meta.config_hash = manifest.at("config_hash").get<std::string>();
    ck.meta.stage = manifest.at("stage").get<std::string>();
    ck.meta.step = manifest.at("step").get<std::uint64_t>();
    ck.meta.epoch = manifest.at("epoch").get<std::uint64_t>();
    ck.opt_steps = manifest.value("opt_steps", std::uint64_t{0});
    ck.has_opt = manifest.value("has_opt", false);
    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        Shape shape = t.at("shape").get<Shape>();
        std::size_t count = t.at("count").get<std::size_t>();
        if (shape_numel(shape) != count)
            throw DataError("checkpoint tensor '" + name + "' shape/count mismatch");
        std::vector<double> data(count);
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!in) throw DataError("truncated checkpoint payload at tensor '" + name + "'");
        ck.tensors.emplace(name, std::make_pair(std::move(shape), std::move(data)));
    }
    return ck;
}

// Writes checkpoint values back into an already-constructed model/optimizer.
inline void restore_checkpoint(const Checkpoint& ck, ParamStore& store, AdamW* opt = nullptr) {
    for (auto& [name, p] : store.all()) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end())
            throw DataError("checkpoint is missing parameter '" + name + "'");
        if (it->second.first != p.shape())
            throw DataError("checkpoint parameter '" + name + "' has shape " +
                            shape_str(it->second.first) + ", model expects " +
                            shape_str(p.shape()));
        const_cast<Tensor&>(p).mutable_values() = it->second.second;
    }
    if (opt) {
        if (!ck.has_opt) throw DataError("checkpoint has no optimizer state");
        for (auto& [name, slot] : opt->state()) {
            auto mi = ck.tensors.find("__opt.m." + name);
            auto vi = ck.tensors.find("__opt.v." + name);
            if (mi == ck.tensors.end() || vi == ck.tensors.end())
                throw DataError("checkpoint is missing optimizer state for '" + name + "'");
            slot.m = mi->second.second;
            slot.v = vi->second.second;
        }
        opt->set_steps_taken(ck.opt_steps);
    }
}

}  // namespace somnus
