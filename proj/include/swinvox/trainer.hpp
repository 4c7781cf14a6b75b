#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "swinvox/checkpoint.hpp"
#include "swinvox/decoder.hpp"
#include "swinvox/infer.hpp"
#include "swinvox/metrics.hpp"
#include "swinvox/optim.hpp"
#include "swinvox/phantom.hpp"
#include "swinvox/ssl.hpp"
#include "swinvox/volume.hpp"

namespace swinvox {

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

template <typename T>
struct SwinUnetrModel {
    ModelConfig cfg;
    ParamStore<T> store;
    EncoderParamIdx enc;
    DecoderParamIdx dec;
    SslParamIdx ssl;
    bool has_decoder = false;
    bool has_ssl = false;
    EncoderWorkspace<T> ws;
};

/// Builds encoder (+ optional decoder / SSL heads) with a seeded
/// initialization; creation order is fixed, so (seed, config) pins every
/// initial weight.
template <typename T>
SwinUnetrModel<T> build_model(const ModelConfig& cfg, uint64_t seed, bool with_decoder,
                              bool with_ssl, int64_t ssl_crop = 0) {
    SwinUnetrModel<T> m;
    m.cfg = cfg;
    Rng rng(seed);
    m.enc = build_encoder_params(m.store, cfg, rng);
    if (with_decoder) {
        m.dec = build_decoder_params(m.store, cfg, rng);
        m.has_decoder = true;
    }
    if (with_ssl) {
        m.ssl = build_ssl_params(m.store, cfg, ssl_crop, rng);
        m.has_ssl = true;
    }
    return m;
}

/// No-grad segmentation forward: [C,h,w,d] voxels -> per-voxel class
/// probabilities.
inline Tensor<float> model_probs(SwinUnetrModel<float>& model, const Tensor<float>& patch) {
    Tape<float> tape(false);
    auto bound = model.store.bind(tape);
    auto feats = encoder_forward(tape.constant(patch), model.cfg, model.enc, bound, model.ws);
    auto logits = decoder_forward(feats, model.cfg, model.dec, bound);
    return segmentation_probs(logits).v();
}

inline WindowModelFn model_window_fn(SwinUnetrModel<float>& model) {
    return [&model](const Tensor<float>& patch) { return model_probs(model, patch); };
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

inline std::vector<std::string> list_files(const std::string& dir, const std::string& suffix) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir);
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.size() >= suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Every *.vol that is not a *_lbl.vol label map counts as an image.
inline std::vector<Volume> load_images(const std::string& dir) {
    std::vector<Volume> out;
    for (const auto& path : list_files(dir, ".vol")) {
        if (path.size() >= 8 && path.compare(path.size() - 8, 8, "_lbl.vol") == 0) continue;
        out.push_back(read_volume(path));
    }
    if (out.empty()) throw ConfigError("no image volumes found in " + dir);
    return out;
}

/// Pairs every <name>_img.vol with its <name>_lbl.vol label map.
inline std::vector<LabeledVolume> load_labeled(const std::string& dir) {
    std::vector<LabeledVolume> out;
    for (const auto& path : list_files(dir, "_img.vol")) {
        std::string lbl = path.substr(0, path.size() - 8) + "_lbl.vol";
        if (!std::filesystem::exists(lbl)) throw ConfigError("missing label map for " + path);
        LabeledVolume lv;
        lv.image = read_volume(path);
        lv.labels = read_labels(lbl);
        if (lv.labels.dims != Shape{lv.image.extent(0), lv.image.extent(1), lv.image.extent(2)})
            throw ConfigError("label extents disagree with image for " + path);
        out.push_back(std::move(lv));
    }
    if (out.empty()) throw ConfigError("no labeled volume pairs found in " + dir);
    return out;
}

/// Reshuffled-epoch sampler: item(p) is a pure function of (seed, p), so a
/// resumed run replays the identical data order.
class EpochShuffler {
public:
    EpochShuffler(uint64_t seed, int64_t n) : base_(seed), n_(n) {}

    int64_t item(int64_t global_pos) {
        const int64_t epoch = global_pos / n_;
        if (epoch != cached_epoch_) {
            order_.resize(static_cast<size_t>(n_));
            for (int64_t i = 0; i < n_; ++i) order_[static_cast<size_t>(i)] = i;
            Rng rng = base_.split(0xE70C5ULL + static_cast<uint64_t>(epoch) * 2654435761ULL);
            rng.shuffle(order_.begin(), order_.end());
            cached_epoch_ = epoch;
        }
        return order_[static_cast<size_t>(global_pos % n_)];
    }

private:
    Rng base_;
    int64_t n_;
    int64_t cached_epoch_ = -1;
    std::vector<int64_t> order_;
};

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Mean Dice over foreground classes and cases; predictions by sliding-window
/// inference followed by a per-voxel argmax.
inline double evaluate_mean_dice(SwinUnetrModel<float>& model,
                                 const std::vector<LabeledVolume>& cases, int64_t roi,
                                 double overlap) {
    if (cases.empty()) throw ConfigError("evaluate_mean_dice: empty case list");
    double acc = 0;
    int64_t count = 0;
    auto fn = model_window_fn(model);
    for (const auto& lv : cases) {
        auto probs = sliding_window_infer(lv.image, roi, overlap, model.cfg.n_classes, fn);
        auto pred = argmax_channel(probs);
        for (int64_t cls = 1; cls < model.cfg.n_classes; ++cls) {
            acc += dice(class_mask(pred, static_cast<uint16_t>(cls), lv.image.spacing),
                        class_mask(lv.labels, static_cast<uint16_t>(cls), lv.image.spacing));
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// pre-training (masked inpainting + contrastive + rotation)
// ---------------------------------------------------------------------------

struct PretrainResult {
    std::vector<double> total_losses;  // one entry per executed step
    std::string final_ckpt;
    int64_t last_step = 0;
};

inline PretrainResult pretrain(RunConfig cfg) {
    cfg.mode = "pretrain";
    cfg.model.validate();
    namespace fs = std::filesystem;
    auto images = load_images(cfg.data_dir);
    fs::create_directories(cfg.out_dir);

    auto model = build_model<float>(cfg.model, cfg.seed, /*decoder=*/false, /*ssl=*/true, cfg.crop);
    int64_t start_step = 0;
    if (!cfg.init_ckpt.empty()) {
        auto ckpt = load_checkpoint(cfg.init_ckpt);
        auto kv = parse_kv_text(ckpt.config_text);
        if (auto it = kv.find("mode"); it == kv.end() || it->second != "pretrain")
            throw ConfigError("init checkpoint is not a pretrain checkpoint");
        check_model_compatible(cfg, kv);
        restore_store(model.store, ckpt);
        start_step = ckpt.step;
    }

    std::ofstream curve(cfg.out_dir + "/pretrain_curve.tsv",
                        start_step > 0 ? std::ios::app : std::ios::trunc);
    if (start_step == 0) curve << "step\tlr\tinpaint\tcontrast\trot\ttotal\n";

    EpochShuffler shuffler(cfg.seed, static_cast<int64_t>(images.size()));
    AugmentOptions aug;
    aug.cutout_ratio = cfg.cutout_ratio;
    aug.noise_fill = cfg.cutout_noise_fill;
    Rng base(cfg.seed);
    PretrainResult result;

    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        Rng step_rng = base.split(static_cast<uint64_t>(step));
        std::vector<Volume> batch;
        for (int64_t i = 0; i < cfg.batch; ++i) {
            const int64_t idx = shuffler.item((step - 1) * cfg.batch + i);
            Rng crop_rng = step_rng.split(stream_key(0, static_cast<uint64_t>(i), 7));
            batch.push_back(sample_subvolume(images[static_cast<size_t>(idx)], cfg.crop, crop_rng));
        }
        auto views = make_views(batch, step_rng, aug);

        Tape<float> tape(true);
        auto bound = model.store.bind(tape);
        std::vector<Value<float>> rot_logits, embeds;
        std::vector<int64_t> rot_labels;
        Value<float> li_acc = tape.constant(Tensor<float>({1}));
        const bool need_inpaint = cfg.lambda1 > 0;
        const bool need_contrast = cfg.lambda2 > 0;
        const bool need_rot = cfg.lambda3 > 0;
        auto run_view = [&](const Volume& x, const Volume& orig, int rot) {
            auto feats = encoder_forward(tape.constant(x.voxels), cfg.model, model.enc, bound, model.ws);
            if (need_inpaint) {
                auto recon = conv3d_transpose(feats.f[5], bound[model.ssl.rec_w],
                                              &bound[model.ssl.rec_b], model.ssl.rec_kernel, 0);
                li_acc = add(li_acc, inpaint_loss(recon, tape.constant(orig.voxels)));
            }
            if (need_contrast || need_rot) {
                auto pooled = global_avg_pool(feats.f[5]);
                if (need_rot) {
                    auto h = gelu(linear(pooled, bound[model.ssl.rot_fc1_w], &bound[model.ssl.rot_fc1_b]));
                    rot_logits.push_back(linear(h, bound[model.ssl.rot_fc2_w], &bound[model.ssl.rot_fc2_b]));
                    rot_labels.push_back(rot);
                }
                if (need_contrast)
                    embeds.push_back(linear(pooled, bound[model.ssl.con_w], &bound[model.ssl.con_b]));
            }
        };
        // view 1 of every sample, then view 2, so embedding row i pairs with
        // row i + N
        for (const auto& vp : views) run_view(vp.x1, vp.orig1, vp.rot1);
        for (const auto& vp : views) run_view(vp.x2, vp.orig2, vp.rot2);

        const float inv_views = 1.0f / static_cast<float>(2 * views.size());
        auto li = need_inpaint ? scale(li_acc, inv_views) : tape.constant(Tensor<float>({1}));
        auto lc = need_contrast ? contrastive_loss(stack_rows(embeds), static_cast<float>(cfg.temperature))
                                : tape.constant(Tensor<float>({1}));
        auto lr_term = need_rot ? rotation_loss(stack_rows(rot_logits), rot_labels)
                                : tape.constant(Tensor<float>({1}));
        auto total = total_loss(li, lc, lr_term, static_cast<float>(cfg.lambda1),
                                static_cast<float>(cfg.lambda2), static_cast<float>(cfg.lambda3));
        if (!std::isfinite(total.v()[0]))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));

        tape.backward(total);
        model.store.collect_grads(tape, bound);
        AdamWConfig ad{lr_schedule(step, cfg.warmup, cfg.steps, cfg.lr), cfg.beta1, cfg.beta2,
                       cfg.adam_eps, cfg.weight_decay};
        adamw_step(model.store, step, ad);

        curve << step << '\t' << std::setprecision(9) << ad.lr << '\t' << li.v()[0] << '\t'
              << lc.v()[0] << '\t' << lr_term.v()[0] << '\t' << total.v()[0] << '\n';
        curve.flush();
        result.total_losses.push_back(static_cast<double>(total.v()[0]));
        result.last_step = step;

        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.steps)
            save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(step) + ".swck",
                            model.store, serialize_config(cfg), step);
    }
    result.final_ckpt = cfg.out_dir + "/checkpoint_final.swck";
    save_checkpoint(result.final_ckpt, model.store, serialize_config(cfg), cfg.steps);
    return result;
}

// ---------------------------------------------------------------------------
// fine-tuning (supervised segmentation)
// ---------------------------------------------------------------------------

struct FinetuneResult {
    std::vector<double> total_losses;
    std::vector<std::pair<int64_t, double>> val_dice;  // (step, mean foreground dice)
    std::string final_ckpt;

    /// First evaluation step reaching the target Dice, or -1.
    int64_t first_step_reaching(double target) const {
        for (const auto& [step, d] : val_dice)
            if (d >= target) return step;
        return -1;
    }
};

/// Supervised loop: equally weighted soft Dice + cross-entropy. With an init
/// checkpoint from pre-training, encoder weights transfer and the projection
/// heads are dropped; a fine-tune checkpoint resumes in full. Stops early
/// when `stop_at_dice` > 0 is reached on evaluation.
inline FinetuneResult finetune(RunConfig cfg, double stop_at_dice = -1.0) {
    cfg.mode = "finetune";
    cfg.model.validate();
    namespace fs = std::filesystem;
    auto data = load_labeled(cfg.data_dir);
    for (const auto& lv : data)
        for (auto l : lv.labels.data)
            if (l >= cfg.model.n_classes)
                throw ConfigError("label " + std::to_string(l) + " out of range for n_classes=" +
                                  std::to_string(cfg.model.n_classes));
    std::vector<LabeledVolume> val;
    if (!cfg.val_dir.empty()) val = load_labeled(cfg.val_dir);
    const std::vector<LabeledVolume>& eval_set = val.empty() ? data : val;
    fs::create_directories(cfg.out_dir);

    auto model = build_model<float>(cfg.model, cfg.seed, /*decoder=*/true, /*ssl=*/false);
    int64_t start_step = 0;
    if (!cfg.init_ckpt.empty()) {
        auto ckpt = load_checkpoint(cfg.init_ckpt);
        auto kv = parse_kv_text(ckpt.config_text);
        check_model_compatible(cfg, kv);
        const auto mode_it = kv.find("mode");
        if (mode_it != kv.end() && mode_it->second == "finetune") {
            restore_store(model.store, ckpt);
            start_step = ckpt.step;
        } else {
            restore_encoder_weights(model.store, ckpt);  // heads discarded, decoder fresh
        }
    }

    std::ofstream curve(cfg.out_dir + "/finetune_curve.tsv",
                        start_step > 0 ? std::ios::app : std::ios::trunc);
    if (start_step == 0) curve << "step\tlr\tdice_loss\tce_loss\ttotal\n";
    std::ofstream val_log(cfg.out_dir + "/finetune_val.tsv",
                          start_step > 0 ? std::ios::app : std::ios::trunc);
    if (start_step == 0) val_log << "step\tmean_dice\n";

    EpochShuffler shuffler(cfg.seed, static_cast<int64_t>(data.size()));
    Rng base(cfg.seed);
    FinetuneResult result;

    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        Rng step_rng = base.split(static_cast<uint64_t>(step));
        Tape<float> tape(true);
        auto bound = model.store.bind(tape);
        Value<float> dice_acc = tape.constant(Tensor<float>({1}));
        Value<float> ce_acc = tape.constant(Tensor<float>({1}));
        for (int64_t i = 0; i < cfg.batch; ++i) {
            const int64_t idx = shuffler.item((step - 1) * cfg.batch + i);
            Rng crop_rng = step_rng.split(stream_key(0, static_cast<uint64_t>(i), 7));
            LabeledVolume crop = sample_subvolume(data[static_cast<size_t>(idx)], cfg.crop, crop_rng);
            auto labels = std::make_shared<std::vector<int64_t>>(crop.labels.size());
            for (int64_t j = 0; j < crop.labels.size(); ++j)
                (*labels)[static_cast<size_t>(j)] = crop.labels[j];
            auto feats =
                encoder_forward(tape.constant(crop.image.voxels), cfg.model, model.enc, bound, model.ws);
            auto logits = decoder_forward(feats, cfg.model, model.dec, bound);
            dice_acc = add(dice_acc, soft_dice_probs(segmentation_probs(logits), labels));
            ce_acc = add(ce_acc, softmax_xent_channel(logits, labels));
        }
        const float inv_b = 1.0f / static_cast<float>(cfg.batch);
        auto ldice = scale(dice_acc, inv_b);
        auto lce = scale(ce_acc, inv_b);
        auto total = add(ldice, lce);
        if (!std::isfinite(total.v()[0]))
            throw NumericError("finetune: non-finite loss at step " + std::to_string(step));

        tape.backward(total);
        model.store.collect_grads(tape, bound);
        AdamWConfig ad{lr_schedule(step, cfg.warmup, cfg.steps, cfg.lr), cfg.beta1, cfg.beta2,
                       cfg.adam_eps, cfg.weight_decay};
        adamw_step(model.store, step, ad);

        curve << step << '\t' << std::setprecision(9) << ad.lr << '\t' << ldice.v()[0] << '\t'
              << lce.v()[0] << '\t' << total.v()[0] << '\n';
        curve.flush();
        result.total_losses.push_back(static_cast<double>(total.v()[0]));

        if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
            const double d = evaluate_mean_dice(model, eval_set, cfg.roi, cfg.overlap);
            val_log << step << '\t' << std::setprecision(9) << d << '\n';
            val_log.flush();
            result.val_dice.emplace_back(step, d);
            if (stop_at_dice > 0 && d >= stop_at_dice) break;
        }
        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.steps)
            save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(step) + ".swck",
                            model.store, serialize_config(cfg), step);
    }
    result.final_ckpt = cfg.out_dir + "/checkpoint_final.swck";
    const int64_t last = result.total_losses.empty()
                             ? start_step
                             : start_step + static_cast<int64_t>(result.total_losses.size());
    save_checkpoint(result.final_ckpt, model.store, serialize_config(cfg), last);
    return result;
}

}  // namespace swinvox
