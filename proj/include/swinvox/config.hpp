#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "swinvox/error.hpp"

namespace swinvox {

/// Architecture hyperparameters shared by encoder, decoder and SSL heads.
struct ModelConfig {
    int64_t in_channels = 1;                      // S
    int64_t patch = 2;                            // patch edge length
    int64_t embed_c = 48;                         // C
    std::vector<int64_t> depths = {2, 2, 2, 2};   // blocks per stage (W/SW pairs)
    std::vector<int64_t> heads = {3, 6, 12, 24};  // attention heads per stage
    int64_t window = 4;                           // M
    bool rel_pos_bias = false;                    // learned 3D relative bias (off: plain QK^T/sqrt(d))
    int64_t n_classes = 2;
    int64_t contrast_dim = 512;                   // contrastive embedding width
    double norm_eps = 1e-5;
    static constexpr int64_t mlp_ratio = 4;

    int64_t stages() const { return static_cast<int64_t>(depths.size()); }
    int64_t stage_width(int64_t s) const { return embed_c << s; }          // C * 2^s
    int64_t bottleneck_width() const { return embed_c << stages(); }       // 16C for 4 stages

    void validate() const {
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (patch < 1) throw ConfigError("patch must be >= 1");
        if (embed_c < 1) throw ConfigError("embed_c must be >= 1");
        if (window < 2) throw ConfigError("window must be >= 2");
        if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
        if (contrast_dim < 1) throw ConfigError("contrast_dim must be >= 1");
        if (depths.empty() || depths.size() != heads.size())
            throw ConfigError("depths and heads must be non-empty and equal length");
        for (size_t s = 0; s < depths.size(); ++s) {
            if (depths[s] < 2 || depths[s] % 2 != 0)
                throw ConfigError("depths[" + std::to_string(s) + "] must be even (W-MSA/SW-MSA pairs)");
            if (heads[s] < 1 || stage_width(static_cast<int64_t>(s)) % heads[s] != 0)
                throw ConfigError("heads[" + std::to_string(s) + "] must divide stage width " +
                                  std::to_string(stage_width(static_cast<int64_t>(s))));
        }
    }
};

/// Full run configuration; flags and the key=value config file mirror these
/// fields one to one.
struct RunConfig {
    std::string mode;  // pretrain | finetune | infer | eval | phantom
    ModelConfig model;

    std::string data_dir;      // training volumes
    std::string val_dir;       // held-out labeled volumes
    std::string out_dir = "runs/out";
    std::string init_ckpt;     // encoder init for finetune / model for infer

    int64_t batch = 4;
    int64_t steps = 1000;
    uint64_t seed = 7;
    int64_t crop = 96;         // training sub-volume edge

    double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;  // inpaint / contrast / rot
    double cutout_ratio = 0.3;                           // s
    double temperature = 0.5;                            // t
    bool cutout_noise_fill = false;

    double lr = 4e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    int64_t warmup = 500;

    int64_t eval_every = 100;
    int64_t ckpt_every = 500;

    double overlap = 0.5;      // sliding-window overlap
    int64_t roi = 96;          // sliding-window edge
    double nsd_tol = 1.0;      // mm

    // phantom generation
    int64_t phantom_count = 8;
    int64_t phantom_extent = 32;
    int64_t phantom_shapes = 5;
};

namespace detail {

inline std::vector<int64_t> parse_int_list(const std::string& s) {
    std::vector<int64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoll(item));
    }
    if (out.empty()) throw ConfigError("empty integer list: '" + s + "'");
    return out;
}

inline std::string int_list_str(const std::vector<int64_t>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace detail

/// Applies one key=value setting. Unknown keys are configuration errors.
inline void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    try {
        if (key == "mode") cfg.mode = value;
        else if (key == "in_channels") cfg.model.in_channels = std::stoll(value);
        else if (key == "patch") cfg.model.patch = std::stoll(value);
        else if (key == "embed_c") cfg.model.embed_c = std::stoll(value);
        else if (key == "depths") cfg.model.depths = detail::parse_int_list(value);
        else if (key == "heads") cfg.model.heads = detail::parse_int_list(value);
        else if (key == "window") cfg.model.window = std::stoll(value);
        else if (key == "rel_pos_bias") cfg.model.rel_pos_bias = std::stoll(value) != 0;
        else if (key == "n_classes") cfg.model.n_classes = std::stoll(value);
        else if (key == "contrast_dim") cfg.model.contrast_dim = std::stoll(value);
        else if (key == "norm_eps") cfg.model.norm_eps = std::stod(value);
        else if (key == "data_dir") cfg.data_dir = value;
        else if (key == "val_dir") cfg.val_dir = value;
        else if (key == "out_dir") cfg.out_dir = value;
        else if (key == "init_ckpt") cfg.init_ckpt = value;
        else if (key == "batch") cfg.batch = std::stoll(value);
        else if (key == "steps") cfg.steps = std::stoll(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "crop") cfg.crop = std::stoll(value);
        else if (key == "lambda1") cfg.lambda1 = std::stod(value);
        else if (key == "lambda2") cfg.lambda2 = std::stod(value);
        else if (key == "lambda3") cfg.lambda3 = std::stod(value);
        else if (key == "cutout_ratio") cfg.cutout_ratio = std::stod(value);
        else if (key == "temperature") cfg.temperature = std::stod(value);
        else if (key == "cutout_noise_fill") cfg.cutout_noise_fill = std::stoll(value) != 0;
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
        else if (key == "beta1") cfg.beta1 = std::stod(value);
        else if (key == "beta2") cfg.beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "warmup") cfg.warmup = std::stoll(value);
        else if (key == "eval_every") cfg.eval_every = std::stoll(value);
        else if (key == "ckpt_every") cfg.ckpt_every = std::stoll(value);
        else if (key == "overlap") cfg.overlap = std::stod(value);
        else if (key == "roi") cfg.roi = std::stoll(value);
        else if (key == "nsd_tol") cfg.nsd_tol = std::stod(value);
        else if (key == "phantom_count") cfg.phantom_count = std::stoll(value);
        else if (key == "phantom_extent") cfg.phantom_extent = std::stoll(value);
        else if (key == "phantom_shapes") cfg.phantom_shapes = std::stoll(value);
        else if (key == "step") { /* checkpoint bookkeeping, handled by the loader */ }
        else throw ConfigError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
        throw ConfigError("bad value for " + key + ": '" + value + "'");
    } catch (const std::out_of_range&) {
        throw ConfigError("bad value for " + key + ": '" + value + "'");
    }
}

/// Loads key=value lines ('#' comments, blank lines ignored).
inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        while (!value.empty() && (value.front() == ' ' || value.front() == '\t')) value.erase(0, 1);
        apply_kv(cfg, key, value);
    }
}

/// Serializes the model-relevant and training fields as key=value text
/// (checkpoint payload; also usable as a config file).
inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "mode=" << cfg.mode << "\n";
    os << "in_channels=" << cfg.model.in_channels << "\n";
    os << "patch=" << cfg.model.patch << "\n";
    os << "embed_c=" << cfg.model.embed_c << "\n";
    os << "depths=" << detail::int_list_str(cfg.model.depths) << "\n";
    os << "heads=" << detail::int_list_str(cfg.model.heads) << "\n";
    os << "window=" << cfg.model.window << "\n";
    os << "rel_pos_bias=" << (cfg.model.rel_pos_bias ? 1 : 0) << "\n";
    os << "n_classes=" << cfg.model.n_classes << "\n";
    os << "contrast_dim=" << cfg.model.contrast_dim << "\n";
    os << "norm_eps=" << cfg.model.norm_eps << "\n";
    os << "batch=" << cfg.batch << "\n";
    os << "seed=" << cfg.seed << "\n";
    os << "crop=" << cfg.crop << "\n";
    os << "lr=" << cfg.lr << "\n";
    os << "weight_decay=" << cfg.weight_decay << "\n";
    os << "beta1=" << cfg.beta1 << "\n";
    os << "beta2=" << cfg.beta2 << "\n";
    os << "adam_eps=" << cfg.adam_eps << "\n";
    os << "warmup=" << cfg.warmup << "\n";
    os << "steps=" << cfg.steps << "\n";
    return os.str();
}

/// Model-identity keys that must agree when resuming or transferring encoder
/// weights; the first mismatching field is reported by name.
inline void check_model_compatible(const RunConfig& ours, const std::map<std::string, std::string>& theirs) {
    auto want = [&](const std::string& key, const std::string& val) {
        auto it = theirs.find(key);
        if (it == theirs.end())
            throw ConfigError("checkpoint config missing field: " + key);
        if (it->second != val)
            throw ConfigError("checkpoint config mismatch on field '" + key + "': checkpoint has " +
                              it->second + ", run expects " + val);
    };
    want("in_channels", std::to_string(ours.model.in_channels));
    want("patch", std::to_string(ours.model.patch));
    want("embed_c", std::to_string(ours.model.embed_c));
    want("depths", detail::int_list_str(ours.model.depths));
    want("heads", detail::int_list_str(ours.model.heads));
    want("window", std::to_string(ours.model.window));
    want("rel_pos_bias", std::to_string(ours.model.rel_pos_bias ? 1 : 0));
}

inline std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

}  // namespace swinvox
