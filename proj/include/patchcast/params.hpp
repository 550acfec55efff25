#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patchcast/errors.hpp"
#include "patchcast/tensor.hpp"

namespace patchcast::nn {

enum class FreezePolicy { AdapterAndLayerNorms, AdapterOnly, AllTrainable };

inline const char* to_string(FreezePolicy p) {
    switch (p) {
        case FreezePolicy::AdapterAndLayerNorms: return "adapter_and_layer_norms";
        case FreezePolicy::AdapterOnly: return "adapter_only";
        case FreezePolicy::AllTrainable: return "all_trainable";
    }
    return "?";
}

inline FreezePolicy freeze_policy_from(const std::string& s) {
    if (s == "adapter_and_layer_norms") return FreezePolicy::AdapterAndLayerNorms;
    if (s == "adapter_only") return FreezePolicy::AdapterOnly;
    if (s == "all_trainable") return FreezePolicy::AllTrainable;
    throw ConfigError("unknown freeze policy: " + s);
}

// Named weight tensors with per-tensor trainability. Iteration follows
// insertion order, which is also the on-disk order, so save/load round-trips
// are byte-stable.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), trainable});
        return entries_.back().tensor;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    bool trainable(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].trainable;
    }

    void set_trainable(const std::string& name, bool flag) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        entries_[it->second].trainable = flag;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.name);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    std::pair<std::size_t, std::size_t> parameter_count() const {
        std::size_t total = 0, trainable = 0;
        for (const auto& e : entries_) {
            total += e.tensor.numel();
            if (e.trainable) trainable += e.tensor.numel();
        }
        return {total, trainable};
    }

    // Copies every tensor of `other` into this store under `prefix + name`.
    void absorb(const ParamStore& other, const std::string& prefix) {
        for (const auto& e : other.entries_) add(prefix + e.name, e.tensor, e.trainable);
    }

    // --- .ptwf weight file ---------------------------------------------
    // magic "PTWF" | u32 version=1 | u64 metadata length | JSON metadata
    // (ordered {name, shape, dtype:"f64", byte_offset}) | little-endian f64
    // payload. Offsets are relative to the payload start.

    void save(const std::string& path) const {
        nlohmann::json meta = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& e : entries_) {
            meta.push_back({{"name", e.name},
                            {"shape", e.tensor.shape()},
                            {"dtype", "f64"},
                            {"byte_offset", offset}});
            offset += e.tensor.numel() * sizeof(double);
        }
        const std::string meta_str = meta.dump();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path);
        out.write("PTWF", 4);
        const std::uint32_t version = 1;
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        const std::uint64_t meta_len = meta_str.size();
        out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
        out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
        for (const auto& e : entries_)
            out.write(reinterpret_cast<const char*>(e.tensor.data()),
                      static_cast<std::streamsize>(e.tensor.numel() * sizeof(double)));
        if (!out) throw IoError("write failed: " + path);
    }

    static ParamStore load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open: " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "PTWF", 4) != 0)
            throw ParseError(path + ": not a PTWF weight file");
        std::uint32_t version = 0;
        in.read(reinterpret_cast<char*>(&version), sizeof(version));
        if (version != 1) throw ParseError(path + ": unsupported PTWF version");
        std::uint64_t meta_len = 0;
        in.read(reinterpret_cast<char*>(&meta_len), sizeof(meta_len));
        std::string meta_str(meta_len, '\0');
        in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
        if (!in) throw ParseError(path + ": truncated metadata");
        nlohmann::json meta = nlohmann::json::parse(meta_str, nullptr, false);
        if (meta.is_discarded() || !meta.is_array())
            throw ParseError(path + ": malformed PTWF metadata");
        const std::streampos payload_start = in.tellg();
        ParamStore ps;
        for (const auto& item : meta) {
            const std::string name = item.at("name").get<std::string>();
            const auto shape = item.at("shape").get<std::vector<std::size_t>>();
            if (item.at("dtype").get<std::string>() != "f64")
                throw ParseError(path + ": unsupported dtype for " + name);
            const std::uint64_t off = item.at("byte_offset").get<std::uint64_t>();
            Tensor t(shape);
            in.seekg(payload_start + static_cast<std::streamoff>(off));
            in.read(reinterpret_cast<char*>(t.data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(double)));
            if (!in) throw ParseError(path + ": truncated payload at " + name);
            ps.add(name, std::move(t));
        }
        return ps;
    }

private:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable;
    };
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// Known top-level sections of a parameter name. `backbone.*` holds the
// pretrained transformer; everything else is model-specific and always
// trainable under the frozen policies.
inline bool known_section(const std::string& name) {
    for (const char* prefix : {"backbone.", "adapter.", "output.", "mqcnn.", "pretrain."})
        if (name.rfind(prefix, 0) == 0) return true;
    return false;
}

inline bool is_backbone_layer_norm(const std::string& name) {
    return name.rfind("backbone.", 0) == 0 && name.find(".ln") != std::string::npos;
}

// Sets trainable flags per freeze policy. Backbone attention/MLP/embedding
// tensors are frozen under both frozen policies; backbone layer norms stay
// trainable only under AdapterAndLayerNorms.
inline void apply_freeze(ParamStore& ps, FreezePolicy policy) {
    for (const auto& name : ps.names()) {
        if (!known_section(name))
            throw ConfigError("unknown tensor-name pattern: " + name);
        bool trainable = true;
        if (policy != FreezePolicy::AllTrainable && name.rfind("backbone.", 0) == 0)
            trainable = policy == FreezePolicy::AdapterAndLayerNorms &&
                        is_backbone_layer_norm(name);
        ps.set_trainable(name, trainable);
    }
}

}  // namespace patchcast::nn
