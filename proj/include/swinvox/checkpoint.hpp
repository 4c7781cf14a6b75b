#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "swinvox/config.hpp"
#include "swinvox/params.hpp"
#include "swinvox/volume.hpp"  // little-endian helpers

namespace swinvox {

// SWCK container, little-endian:
//   magic "SWCK" | version u32 | config length u32 | config text |
//   tensor count u32 | per tensor: name length u32, name bytes, rank u32,
//   dims u32[rank], f32 payload.
// Optimizer moments ride along as "adam_m."/"adam_v."-prefixed tensors; the
// training step lives in the config text under "step=". SSL head tensors
// ("ssl." prefix) are detachable: fine-tuning drops them on load.

constexpr uint32_t kCkptVersion = 1;

struct LoadedCheckpoint {
    std::string config_text;
    int64_t step = 0;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void put_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.dims.size()));
    for (int64_t d : t.dims) put_u32(os, static_cast<uint32_t>(d));
    for (float v : t.data) put_f32(os, v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore<float>& store,
                            std::string config_text, int64_t step) {
    config_text += "step=" + std::to_string(step) + "\n";
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os.write("SWCK", 4);
    detail::put_u32(os, kCkptVersion);
    detail::put_u32(os, static_cast<uint32_t>(config_text.size()));
    os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    detail::put_u32(os, static_cast<uint32_t>(3 * store.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& e = store.entry(static_cast<int>(i));
        detail::put_tensor(os, e.name, e.value);
        detail::put_tensor(os, "adam_m." + e.name, e.m);
        detail::put_tensor(os, "adam_v." + e.name, e.v);
    }
    if (!os) throw FormatError(path + ": write failed");
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "SWCK", 4) != 0)
        throw FormatError(path + ": bad magic, expected \"SWCK\"");
    const uint32_t version = detail::get_u32(is, path, "version");
    if (version != kCkptVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = detail::get_u32(is, path, "config length");
    LoadedCheckpoint out;
    out.config_text.resize(cfg_len);
    if (!is.read(out.config_text.data(), cfg_len))
        throw FormatError(path + ": truncated config text");
    const uint32_t count = detail::get_u32(is, path, "tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::get_u32(is, path, "tensor name length");
        if (name_len > 4096) throw FormatError(path + ": implausible tensor name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw FormatError(path + ": truncated tensor name");
        const uint32_t rank = detail::get_u32(is, path, "tensor rank");
        if (rank == 0 || rank > 8) throw FormatError(path + ": implausible tensor rank");
        Shape dims(rank);
        int64_t n = 1;
        for (auto& d : dims) {
            d = detail::get_u32(is, path, "tensor dim");
            if (d < 1) throw FormatError(path + ": non-positive tensor dim");
            n *= d;
        }
        Tensor<float> t(dims);
        for (int64_t j = 0; j < n; ++j) t[j] = detail::get_f32(is, path, "tensor payload");
        out.tensors.emplace_back(std::move(name), std::move(t));
    }
    // trailing bytes mean the count field lied
    is.peek();
    if (!is.eof()) throw FormatError(path + ": trailing bytes after declared tensor table");
    auto kv = parse_kv_text(out.config_text);
    if (auto it = kv.find("step"); it != kv.end()) out.step = std::stoll(it->second);
    return out;
}

/// Full resume: every store tensor plus its moments must be present with
/// matching shapes.
inline void restore_store(ParamStore<float>& store, const LoadedCheckpoint& ckpt) {
    for (size_t i = 0; i < store.size(); ++i) {
        auto& e = store.entry(static_cast<int>(i));
        const auto* v = ckpt.find(e.name);
        const auto* m = ckpt.find("adam_m." + e.name);
        const auto* mv = ckpt.find("adam_v." + e.name);
        if (!v || !m || !mv) throw ConfigError("checkpoint missing tensor '" + e.name + "'");
        if (v->dims != e.value.dims)
            throw ConfigError("checkpoint tensor '" + e.name + "' has shape " + shape_str(v->dims) +
                              ", expected " + shape_str(e.value.dims));
        e.value = *v;
        e.m = *m;
        e.v = *mv;
    }
}

/// Encoder-weight transfer for fine-tuning: copies "enc."-prefixed values
/// only; optimizer state starts fresh and head/decoder tensors are ignored.
inline void restore_encoder_weights(ParamStore<float>& store, const LoadedCheckpoint& ckpt) {
    for (size_t i = 0; i < store.size(); ++i) {
        auto& e = store.entry(static_cast<int>(i));
        if (e.name.rfind("enc.", 0) != 0) continue;
        const auto* v = ckpt.find(e.name);
        if (!v) throw ConfigError("checkpoint missing encoder tensor '" + e.name + "'");
        if (v->dims != e.value.dims)
            throw ConfigError("checkpoint tensor '" + e.name + "' has shape " + shape_str(v->dims) +
                              ", expected " + shape_str(e.value.dims));
        e.value = *v;
    }
}

}  // namespace swinvox
