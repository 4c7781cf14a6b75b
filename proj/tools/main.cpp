// Command-line front end: pretrain / finetune / infer / eval / phantom.
// Flags mirror the run-config keys; a key=value config file can seed any of
// them and explicit flags win. SWIN3D_SEED overrides the seed last.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "swinvox/swinvox.hpp"

namespace fs = std::filesystem;
using namespace swinvox;

namespace {

struct KvOptions {
    std::string config_file;
    std::vector<std::pair<std::string, std::string>> set_keys;

    void attach(CLI::App* app, const std::vector<std::string>& keys) {
        app->add_option("--config", config_file, "key=value config file");
        for (const auto& key : keys) {
            auto cb = [this, key](const std::string& value) {
                set_keys.emplace_back(key, value);
                return true;
            };
            app->add_option_function<std::string>("--" + key, cb, "run-config key '" + key + "'");
        }
    }

    void apply(RunConfig& cfg) const {
        if (!config_file.empty()) load_config_file(cfg, config_file);
        for (const auto& [k, v] : set_keys) apply_kv(cfg, k, v);
        if (const char* env = std::getenv("SWIN3D_SEED")) apply_kv(cfg, "seed", env);
    }
};

const std::vector<std::string> kModelKeys{
    "in_channels", "patch", "embed_c", "depths", "heads", "window", "rel_pos_bias",
    "n_classes",   "contrast_dim", "norm_eps"};

const std::vector<std::string> kTrainKeys{
    "data_dir", "val_dir",  "out_dir",      "init_ckpt", "batch",      "steps",
    "seed",     "crop",     "lambda1",      "lambda2",   "lambda3",    "cutout_ratio",
    "temperature", "cutout_noise_fill", "lr", "weight_decay", "beta1", "beta2",
    "adam_eps", "warmup",   "eval_every",   "ckpt_every", "overlap",   "roi", "nsd_tol"};

std::vector<std::string> all_train_keys() {
    std::vector<std::string> keys = kModelKeys;
    keys.insert(keys.end(), kTrainKeys.begin(), kTrainKeys.end());
    return keys;
}

int run_infer(const std::string& ckpt_path, const std::string& input, const std::string& probs_out,
              const std::string& labels_out, int64_t roi, double overlap) {
    auto ckpt = load_checkpoint(ckpt_path);
    RunConfig cfg;
    for (const auto& [k, v] : parse_kv_text(ckpt.config_text))
        if (k != "mode" && k != "step") apply_kv(cfg, k, v);
    cfg.model.validate();
    auto kv = parse_kv_text(ckpt.config_text);
    if (kv["mode"] != "finetune")
        throw ConfigError("infer needs a finetune checkpoint (got mode=" + kv["mode"] + ")");
    auto model = build_model<float>(cfg.model, cfg.seed, /*decoder=*/true, /*ssl=*/false);
    restore_store(model.store, ckpt);

    Volume input_vol = read_volume(input);
    if (roi <= 0) roi = cfg.roi;
    auto probs = sliding_window_infer(input_vol, roi, overlap, cfg.model.n_classes,
                                      model_window_fn(model));
    if (!probs_out.empty()) {
        Volume pv;
        pv.voxels = probs;
        pv.spacing = input_vol.spacing;
        write_volume(probs_out, pv);
        std::cout << "wrote " << probs_out << "\n";
    }
    if (!labels_out.empty()) {
        write_labels(labels_out, argmax_channel(probs), input_vol.spacing);
        std::cout << "wrote " << labels_out << "\n";
    }
    return 0;
}

int run_eval(const std::string& pred_path, const std::string& truth_path, const std::string& out,
             double tol, std::string case_id) {
    std::array<float, 3> spacing;
    auto pred = read_labels(pred_path, &spacing);
    auto truth = read_labels(truth_path);
    if (pred.dims != truth.dims)
        throw ShapeError("eval: prediction extents " + shape_str(pred.dims) +
                         " != ground truth " + shape_str(truth.dims));
    if (case_id.empty()) case_id = fs::path(pred_path).stem().string();
    uint16_t max_cls = 0;
    for (auto l : pred.data) max_cls = std::max(max_cls, l);
    for (auto l : truth.data) max_cls = std::max(max_cls, l);

    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out.empty()) {
        file.open(out);
        if (!file) throw ConfigError("cannot open report file " + out);
        os = &file;
    }
    for (uint16_t cls = 1; cls <= max_cls; ++cls) {
        auto mp = class_mask(pred, cls, spacing);
        auto mt = class_mask(truth, cls, spacing);
        write_report_line(*os, case_id, cls, "dice", dice(mt, mp));
        bool pe = true, te = true;
        for (auto b : mp.bits.data)
            if (b) { pe = false; break; }
        for (auto b : mt.bits.data)
            if (b) { te = false; break; }
        const double nanv = std::numeric_limits<double>::quiet_NaN();
        write_report_line(*os, case_id, cls, "hd95", (pe || te) ? nanv : hd95(mt, mp));
        write_report_line(*os, case_id, cls, "nsd", (pe || te) ? nanv : nsd(mt, mp, tol));
    }
    return 0;
}

int run_phantom(const std::string& out_dir, int64_t count, int64_t extent, int64_t shapes,
                int64_t classes, uint64_t seed) {
    fs::create_directories(out_dir);
    for (int64_t i = 0; i < count; ++i) {
        auto lv = gen_phantom(seed + static_cast<uint64_t>(i), {extent, extent, extent}, shapes,
                              classes);
        char name[64];
        std::snprintf(name, sizeof name, "case%03lld", static_cast<long long>(i));
        write_volume(out_dir + "/" + name + "_img.vol", lv.image);
        write_labels(out_dir + "/" + name + "_lbl.vol", lv.labels);
    }
    std::cout << "wrote " << count << " phantom pairs to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3-D shifted-window segmentation: self-supervised pre-training and fine-tuning"};
    app.require_subcommand(1);

    auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training (inpaint/contrast/rotate)");
    KvOptions pre_kv;
    pre_kv.attach(pre, all_train_keys());

    auto* fin = app.add_subcommand("finetune", "supervised segmentation fine-tuning");
    KvOptions fin_kv;
    fin_kv.attach(fin, all_train_keys());

    auto* inf = app.add_subcommand("infer", "sliding-window inference on one volume");
    std::string inf_ckpt, inf_input, inf_probs, inf_labels;
    int64_t inf_roi = 0;
    double inf_overlap = 0.5;
    inf->add_option("--ckpt", inf_ckpt, "finetune checkpoint")->required();
    inf->add_option("--input", inf_input, "input VOL1 image")->required();
    inf->add_option("--probs-out", inf_probs, "class-probability VOL1 output");
    inf->add_option("--labels-out", inf_labels, "argmax label VOL1 output");
    inf->add_option("--roi", inf_roi, "window edge (default: checkpoint crop)");
    inf->add_option("--overlap", inf_overlap, "window overlap in [0,1)");

    auto* ev = app.add_subcommand("eval", "segmentation metrics report (dice/hd95/nsd)");
    std::string ev_pred, ev_truth, ev_out, ev_case;
    double ev_tol = 1.0;
    ev->add_option("--pred", ev_pred, "predicted label VOL1")->required();
    ev->add_option("--truth", ev_truth, "ground-truth label VOL1")->required();
    ev->add_option("--out", ev_out, "report file (default: stdout)");
    ev->add_option("--tol", ev_tol, "surface tolerance in mm");
    ev->add_option("--case", ev_case, "case id for the report");

    auto* ph = app.add_subcommand("phantom", "generate a synthetic labeled dataset");
    std::string ph_out = "phantoms";
    int64_t ph_count = 8, ph_extent = 32, ph_shapes = 5, ph_classes = 3;
    uint64_t ph_seed = 7;
    ph->add_option("--out_dir", ph_out, "output directory");
    ph->add_option("--count", ph_count, "number of volumes");
    ph->add_option("--extent", ph_extent, "cubic edge length (>= 16)");
    ph->add_option("--shapes", ph_shapes, "ellipsoids per volume");
    ph->add_option("--classes", ph_classes, "class count incl. background");
    ph->add_option("--seed", ph_seed, "base seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            RunConfig cfg;
            pre_kv.apply(cfg);
            auto result = pretrain(cfg);
            std::cout << "pretrain done: " << result.last_step << " steps, final loss "
                      << (result.total_losses.empty() ? 0.0 : result.total_losses.back()) << ", "
                      << result.final_ckpt << "\n";
        } else if (fin->parsed()) {
            RunConfig cfg;
            fin_kv.apply(cfg);
            auto result = finetune(cfg);
            std::cout << "finetune done: final loss "
                      << (result.total_losses.empty() ? 0.0 : result.total_losses.back());
            if (!result.val_dice.empty())
                std::cout << ", mean dice " << result.val_dice.back().second;
            std::cout << ", " << result.final_ckpt << "\n";
        } else if (inf->parsed()) {
            return run_infer(inf_ckpt, inf_input, inf_probs, inf_labels, inf_roi, inf_overlap);
        } else if (ev->parsed()) {
            return run_eval(ev_pred, ev_truth, ev_out, ev_tol, ev_case);
        } else if (ph->parsed()) {
            if (const char* env = std::getenv("SWIN3D_SEED")) ph_seed = std::strtoull(env, nullptr, 10);
            return run_phantom(ph_out, ph_count, ph_extent, ph_shapes, ph_classes, ph_seed);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
