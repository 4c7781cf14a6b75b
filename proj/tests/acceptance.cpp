// Acceptance gate: one pass/fail line per criterion, exit code = number of
// failed criteria.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include "swinvox/swinvox.hpp"

using namespace swinvox;
namespace fs = std::filesystem;

namespace {

struct Gate {
    int failures = 0;

    void run(int id, const char* name, double budget_sec, const std::function<bool(std::string&)>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        bool ok = false;
        std::string detail;
        try {
            ok = fn(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (budget_sec > 0 && secs > budget_sec) {
            ok = false;
            detail += (detail.empty() ? "" : "; ") + std::string("over the ") +
                      std::to_string(static_cast<int>(budget_sec)) + "s budget";
        }
        std::printf("[%d] %-22s %s (%.1fs)%s%s\n", id, name, ok ? "PASS" : "FAIL", secs,
                    detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
};

Tensor<double> rand_tensor(Shape dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(dims));
    for (auto& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

ModelConfig tiny_config(int64_t n_classes = 2) {
    ModelConfig cfg;
    cfg.embed_c = 6;
    cfg.window = 2;
    cfg.n_classes = n_classes;
    cfg.contrast_dim = 16;
    return cfg;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "swinvox_acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_phantom_set(const fs::path& dir, int64_t count, int64_t extent, int64_t n_classes,
                       uint64_t seed) {
    for (int64_t i = 0; i < count; ++i) {
        auto lv = gen_phantom(seed + static_cast<uint64_t>(i), {extent, extent, extent}, 5, n_classes);
        char name[64];
        std::snprintf(name, sizeof name, "case%03lld", static_cast<long long>(i));
        write_volume((dir / (std::string(name) + "_img.vol")).string(), lv.image);
        write_labels((dir / (std::string(name) + "_lbl.vol")).string(), lv.labels);
    }
}

// --------------------------------------------------------------------------
// criterion 1: shape ladder
// --------------------------------------------------------------------------

bool shape_ladder(std::string& detail) {
    ModelConfig cfg;  // default model: patch 2, C=48, depths 2x4, M=4
    Rng rng(1);
    ParamStore<float> store;
    auto enc = build_encoder_params(store, cfg, rng);
    EncoderWorkspace<float> ws;
    Tape<float> tape(false);
    auto bound = store.bind(tape);
    Tensor<float> x({1, 96, 96, 96});
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    auto feats = encoder_forward(tape.constant(x), cfg, enc, bound, ws);
    const std::vector<Shape> want{{1, 96, 96, 96},   {48, 48, 48, 48}, {96, 24, 24, 24},
                                  {192, 12, 12, 12}, {384, 6, 6, 6},   {768, 3, 3, 3}};
    for (int i = 0; i < 6; ++i)
        if (feats.f[static_cast<size_t>(i)].dims() != want[static_cast<size_t>(i)]) {
            detail = "f" + std::to_string(i) + " is " +
                     shape_str(feats.f[static_cast<size_t>(i)].dims()) + ", expected " +
                     shape_str(want[static_cast<size_t>(i)]);
            return false;
        }
    if (feats.grids[1] != GridDims{48, 48, 48}) {
        detail = "patch embedding did not produce a 48^3 token grid";
        return false;
    }
    return true;
}

// --------------------------------------------------------------------------
// criterion 2: gradient suite
// --------------------------------------------------------------------------

bool gradient_suite(std::string& detail) {
    Rng rng(2);
    GradCheckOptions opt;
    opt.h = 1e-4;
    double worst = 0;
    std::string worst_name;

    using F = std::function<Value<double>(Tape<double>&, std::vector<Value<double>>&)>;
    auto wsum = [](Tape<double>& t, const Value<double>& v) {
        Rng wr(99);
        Tensor<double> w(v.dims());
        for (auto& x : w.data) x = wr.uniform(-1.0, 1.0);
        return sum_all(mul(v, t.constant(std::move(w))));
    };

    std::vector<std::pair<const char*, std::pair<F, std::vector<Tensor<double>>>>> cases;
    cases.push_back({"conv3d",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, conv3d(xs[0], xs[1], &xs[2], 1, 1));
                      },
                      {rand_tensor({2, 4, 3, 4}, rng), rand_tensor({3, 2, 3, 3, 3}, rng),
                       rand_tensor({3}, rng)}}});
    cases.push_back({"conv3d_transpose",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, conv3d_transpose(xs[0], xs[1], &xs[2], 2, 0));
                      },
                      {rand_tensor({2, 3, 2, 3}, rng), rand_tensor({2, 3, 2, 2, 2}, rng),
                       rand_tensor({3}, rng)}}});
    cases.push_back({"linear",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, linear(xs[0], xs[1], &xs[2]));
                      },
                      {rand_tensor({3, 4}, rng), rand_tensor({4, 3}, rng), rand_tensor({3}, rng)}}});
    cases.push_back({"layer_norm",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, layer_norm(xs[0], xs[1], xs[2], 1e-5));
                      },
                      {rand_tensor({3, 5}, rng), rand_tensor({5}, rng), rand_tensor({5}, rng)}}});
    cases.push_back({"instance_norm",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, instance_norm(xs[0], xs[1], xs[2], 1e-5));
                      },
                      {rand_tensor({2, 3, 2, 3}, rng), rand_tensor({2}, rng), rand_tensor({2}, rng)}}});
    cases.push_back({"softmax",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, softmax_lastdim(xs[0]));
                      },
                      {rand_tensor({3, 5}, rng)}}});
    cases.push_back({"gelu",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, gelu(xs[0]));
                      },
                      {rand_tensor({3, 4}, rng)}}});
    cases.push_back({"leaky_relu",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, leaky_relu(xs[0], 0.01));
                      },
                      {rand_tensor({3, 4}, rng)}}});
    cases.push_back({"global_avg_pool",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, global_avg_pool(xs[0]));
                      },
                      {rand_tensor({3, 2, 2, 2}, rng)}}});
    cases.push_back({"l2_normalize",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, l2_normalize_rows(xs[0]));
                      },
                      {rand_tensor({3, 4}, rng, 0.2, 1.0)}}});
    cases.push_back({"matmul",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, matmul(xs[0], xs[1]));
                      },
                      {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng)}}});
    cases.push_back({"bmm",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return wsum(t, bmm_nn(bmm_nt(xs[0], xs[1]), xs[2]));
                      },
                      {rand_tensor({2, 3, 4}, rng), rand_tensor({2, 3, 4}, rng),
                       rand_tensor({2, 3, 2}, rng)}}});
    cases.push_back({"gather/heads",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          auto idx = std::make_shared<std::vector<int64_t>>(
                              std::vector<int64_t>{1, -1, 0, 2, 1, 3});
                          auto g = rows_gather(xs[0], idx, 4, {2, 3, 4});
                          return wsum(t, merge_heads(split_heads(g, 2), 2));
                      },
                      {rand_tensor({4, 4}, rng)}}});
    cases.push_back({"concat/crop/pad",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          auto c = concat_channels(xs[0], xs[1]);
                          return wsum(t, pad_spatial(crop_spatial(c, 2, 2, 2), 3, 3, 3));
                      },
                      {rand_tensor({1, 3, 3, 3}, rng), rand_tensor({2, 3, 3, 3}, rng)}}});
    cases.push_back({"softmax_xent_channel",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          auto lab = std::make_shared<std::vector<int64_t>>(8);
                          for (int i = 0; i < 8; ++i) (*lab)[static_cast<size_t>(i)] = i % 3;
                          return softmax_xent_channel(xs[0], lab);
                      },
                      {rand_tensor({3, 2, 2, 2}, rng)}}});
    cases.push_back({"soft_dice",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          auto lab = std::make_shared<std::vector<int64_t>>(8);
                          for (int i = 0; i < 8; ++i) (*lab)[static_cast<size_t>(i)] = (i / 2) % 3;
                          return soft_dice_probs(softmax(xs[0], 0), lab);
                      },
                      {rand_tensor({3, 2, 2, 2}, rng)}}});
    // the three pre-training losses
    cases.push_back({"loss:inpaint",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return inpaint_loss(xs[0], xs[1]);
                      },
                      {rand_tensor({1, 3, 3, 3}, rng), rand_tensor({1, 3, 3, 3}, rng)}}});
    cases.push_back({"loss:rotation",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return rotation_loss(xs[0], {1, 3, 0});
                      },
                      {rand_tensor({3, 4}, rng)}}});
    cases.push_back({"loss:contrastive",
                     {[&](Tape<double>& t, std::vector<Value<double>>& xs) {
                          return contrastive_loss(xs[0], 0.5);
                      },
                      {rand_tensor({6, 5}, rng, 0.2, 1.0)}}});

    for (auto& [name, fn_inputs] : cases) {
        const double err = grad_check(fn_inputs.first, fn_inputs.second, opt);
        if (err > worst) {
            worst = err;
            worst_name = name;
        }
        if (err >= 1e-3) {
            detail = std::string(name) + " rel err " + std::to_string(err);
            return false;
        }
    }

    // full tiny model: 16^3 input, C=6, depths [2,2,2,2], M=2
    ModelConfig cfg = tiny_config(2);
    Rng mrng(3);
    ParamStore<double> store;
    auto enc = build_encoder_params(store, cfg, mrng);
    auto dec = build_decoder_params(store, cfg, mrng);
    std::vector<Tensor<double>> leaves;
    for (size_t i = 0; i < store.size(); ++i) {
        auto t = store.entry(static_cast<int>(i)).value;
        for (auto& v : t.data) v += mrng.uniform(-0.05, 0.05);  // off the init kinks
        leaves.push_back(std::move(t));
    }
    leaves.push_back(rand_tensor({1, 16, 16, 16}, mrng, 0.0, 1.0));
    GradCheckOptions fopt;
    fopt.h = 1e-5;
    fopt.max_coords_per_input = 2;
    fopt.filter_nonsmooth = true;
    GradCheckStats stats;
    const double err = grad_check(
        [&](Tape<double>& t, std::vector<Value<double>>& xs) {
            EncoderWorkspace<double> ws;
            std::vector<Value<double>> bound(xs.begin(), xs.end() - 1);
            auto feats = encoder_forward(xs.back(), cfg, enc, bound, ws);
            auto logits = decoder_forward(feats, cfg, dec, bound);
            Rng wr(11);
            Tensor<double> w(logits.dims());
            for (auto& x : w.data) x = wr.uniform(-1.0, 1.0);
            return sum_all(mul(logits, t.constant(std::move(w))));
        },
        leaves, fopt, &stats);
    if (err >= 1e-3) {
        detail = "full tiny model rel err " + std::to_string(err);
        return false;
    }
    if (stats.checked <= 4 * stats.skipped_nonsmooth) {
        detail = "smoothness filter discarded too many probes";
        return false;
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "full model %.2e; worst primitive %s %.2e", err,
                  worst_name.c_str(), worst);
    detail = buf;
    return true;
}

// --------------------------------------------------------------------------
// criterion 3: structural invariants
// --------------------------------------------------------------------------

bool structural_invariants(std::string& detail) {
    Rng rng(4);
    for (int64_t m : {2, 3, 4})
        for (int64_t h : {1, 3, 4, 7, 9})
            for (int64_t w : {1, 2, 5, 8})
                for (int64_t d : {1, 4, 6, 9}) {
                    EncoderWorkspace<float> ws;
                    Tape<float> t(false);
                    GridDims g{h, w, d};
                    Tensor<float> data({g.count(), 3});
                    for (auto& x : data.data) x = static_cast<float>(rng.uniform(-1, 1));
                    auto [windows, plan] = window_partition(t.constant(data), g, m, ws);
                    auto back = window_reverse(windows, plan);
                    if (back.v().data != data.data) {
                        detail = "partition/reverse mismatch at grid " + shape_str({h, w, d});
                        return false;
                    }
                }
    {
        Tape<float> t(false);
        GridDims g{5, 6, 7};
        Tensor<float> data({g.count(), 2});
        for (auto& x : data.data) x = static_cast<float>(rng.uniform(-1, 1));
        auto s = cyclic_shift(cyclic_shift(t.constant(data), g, {2, 3, 1}), g, {-2, -3, -1});
        if (s.v().data != data.data) {
            detail = "cyclic shift round trip failed";
            return false;
        }
    }
    {
        Tape<double> t(false);
        Tensor<double> logits({2, 5, 5});
        for (auto& x : logits.data) x = rng.uniform(-3, 3);
        auto mask = std::make_shared<Tensor<double>>(Shape{2, 5, 5});
        (*mask)[0 * 25 + 1 * 5 + 3] = kMaskNeg;
        (*mask)[1 * 25 + 4 * 5 + 0] = kMaskNeg;
        auto attn = softmax_lastdim(
            add_window_mask(t.constant(logits), std::shared_ptr<const Tensor<double>>(mask), 1));
        for (int64_t w = 0; w < 2; ++w)
            for (int64_t i = 0; i < 5; ++i) {
                double s = 0;
                for (int64_t j = 0; j < 5; ++j) s += attn.v()[(w * 5 + i) * 5 + j];
                if (std::abs(s - 1.0) > 1e-6) {
                    detail = "attention row does not sum to 1";
                    return false;
                }
            }
        if (attn.v()[0 * 25 + 1 * 5 + 3] >= 1e-6 || attn.v()[1 * 25 + 4 * 5 + 0] >= 1e-6) {
            detail = "masked pair carries weight";
            return false;
        }
    }
    {
        ParamStore<double> store;
        AttnParamIdx p;
        p.wq = store.add("wq", rand_tensor({4, 4}, rng));
        p.wk = store.add("wk", rand_tensor({4, 4}, rng));
        p.wv = store.add("wv", rand_tensor({4, 4}, rng));
        p.wo = store.add("wo", rand_tensor({4, 4}, rng));
        GridDims g{4, 4, 4};
        EncoderWorkspace<double> ws;
        const auto& plan = ws.plan(g, 4, {2, 2, 2});
        Tensor<double> data = rand_tensor({64, 4}, rng);
        auto run = [&](const Tensor<double>& d) {
            Tape<double> t(false);
            auto bound = store.bind(t);
            auto windows = rows_gather(t.constant(d), plan.gather, 4, {plan.n_win, plan.win_len, 4});
            auto a = window_msa(windows, 2, bound, p, plan.mask);
            return rows_gather(reshape(a, {plan.n_win * plan.win_len, 4}), plan.scatter, 4,
                               Shape{64, 4})
                .v();
        };
        auto base = run(data);
        Tensor<double> moved = data;
        for (int64_t f = 0; f < 4; ++f) moved[token_row(g, 0, 0, 0) * 4 + f] += 0.4;
        auto shifted = run(moved);
        const int64_t other = token_row(g, 2, 2, 2);
        for (int64_t f = 0; f < 4; ++f)
            if (std::abs(shifted[other * 4 + f] - base[other * 4 + f]) > 1e-5) {
                detail = "cross-region influence leaked through the mask";
                return false;
            }
    }
    {
        ParamStore<double> store;
        Rng prng(5);
        auto make_block = [&](const std::string& prefix) {
            BlockParamIdx blk;
            blk.ln1_g = store.add_ones(prefix + "ln1g", {4});
            blk.ln1_b = store.add_zeros(prefix + "ln1b", {4});
            blk.attn.wq = store.add_trunc_normal(prefix + "wq", {4, 4}, 0.2, prng);
            blk.attn.wk = store.add_trunc_normal(prefix + "wk", {4, 4}, 0.2, prng);
            blk.attn.wv = store.add_trunc_normal(prefix + "wv", {4, 4}, 0.2, prng);
            blk.attn.wo = store.add_zeros(prefix + "wo", {4, 4});
            blk.ln2_g = store.add_ones(prefix + "ln2g", {4});
            blk.ln2_b = store.add_zeros(prefix + "ln2b", {4});
            blk.fc1_w = store.add_trunc_normal(prefix + "fc1w", {4, 16}, 0.2, prng);
            blk.fc1_b = store.add_zeros(prefix + "fc1b", {16});
            blk.fc2_w = store.add_zeros(prefix + "fc2w", {16, 4});
            blk.fc2_b = store.add_zeros(prefix + "fc2b", {4});
            return blk;
        };
        auto b0 = make_block("b0."), b1 = make_block("b1.");
        EncoderWorkspace<double> ws;
        Tape<double> t(false);
        auto bound = store.bind(t);
        GridDims g{4, 3, 5};
        Tensor<double> data = rand_tensor({g.count(), 4}, rng);
        auto out = swin_block_pair(t.constant(data), g, 2, 2, bound, b0, b1, ws, 1e-5);
        if (out.v().data != data.data) {
            detail = "residual identity not bitwise";
            return false;
        }
    }
    return true;
}

// --------------------------------------------------------------------------
// criterion 4: loss oracles
// --------------------------------------------------------------------------

double contrastive_brute_force(const Tensor<double>& embeds, double t) {
    const int64_t rows = embeds.dims[0], f = embeds.dims[1];
    std::vector<std::vector<double>> vn(static_cast<size_t>(rows),
                                        std::vector<double>(static_cast<size_t>(f)));
    for (int64_t i = 0; i < rows; ++i) {
        double norm = 0;
        for (int64_t j = 0; j < f; ++j) norm += embeds[i * f + j] * embeds[i * f + j];
        norm = std::sqrt(norm);
        for (int64_t j = 0; j < f; ++j)
            vn[static_cast<size_t>(i)][static_cast<size_t>(j)] = embeds[i * f + j] / norm;
    }
    auto sim = [&](int64_t a, int64_t b) {
        double s = 0;
        for (int64_t j = 0; j < f; ++j)
            s += vn[static_cast<size_t>(a)][static_cast<size_t>(j)] *
                 vn[static_cast<size_t>(b)][static_cast<size_t>(j)];
        return s;
    };
    const int64_t n = rows / 2;
    double loss = 0;
    for (int64_t i = 0; i < rows; ++i) {
        double den = 0;
        for (int64_t k = 0; k < rows; ++k)
            if (k != i) den += std::exp(sim(i, k) / t);
        loss += -std::log(std::exp(sim(i, (i + n) % rows) / t) / den);
    }
    return loss / static_cast<double>(rows);
}

bool loss_oracles(std::string& detail) {
    Tape<double> t;
    Rng rng(6);
    for (int64_t n : {1, 2, 4, 8}) {
        Tensor<double> e = rand_tensor({2 * n, 7}, rng);
        for (auto& x : e.data) x += (x >= 0 ? 0.05 : -0.05);
        const double got = contrastive_loss(t.constant(e), 0.5).v()[0];
        const double want = contrastive_brute_force(e, 0.5);
        if (std::abs(got - want) > 1e-6) {
            detail = "contrastive N=" + std::to_string(n) + ": " + std::to_string(got) + " vs " +
                     std::to_string(want);
            return false;
        }
    }
    const double uniform =
        rotation_loss(t.constant(Tensor<double>({4, 4}, 1.25)), {0, 1, 2, 3}).v()[0];
    if (std::abs(uniform - std::log(4.0)) > 1e-6) {
        detail = "uniform rotation loss " + std::to_string(uniform) + " != ln 4";
        return false;
    }
    const double single = contrastive_loss(t.constant(rand_tensor({2, 5}, rng, 0.1, 1.0)), 0.5).v()[0];
    if (single != 0.0) {
        detail = "N=1 contrastive loss is " + std::to_string(single) + ", expected exactly 0";
        return false;
    }
    return true;
}

// --------------------------------------------------------------------------
// criterion 5: metric oracles
// --------------------------------------------------------------------------

bool metric_oracles(std::string& detail) {
    {
        BinaryMask a, b;
        a.bits = Tensor<uint8_t>({2, 2, 2});
        b.bits = Tensor<uint8_t>({2, 2, 2});
        for (int i : {0, 1, 2, 3}) a.bits[i] = 1;
        for (int i : {2, 3, 4, 5}) b.bits[i] = 1;
        if (dice(a, b) != 0.5) {
            detail = "hand dice case != 0.5";
            return false;
        }
        BinaryMask c, d;
        c.bits = Tensor<uint8_t>({5, 1, 1});
        d.bits = Tensor<uint8_t>({5, 1, 1});
        c.bits[0] = 1;
        d.bits[3] = 1;
        if (hd95(c, d) != 3.0) {
            detail = "hand hd95 case != 3.0";
            return false;
        }
    }
    Rng rng(7);
    int checked = 0;
    while (checked < 100) {
        const int64_t h = rng.uniform_int(2, 8), w = rng.uniform_int(2, 8), d = rng.uniform_int(2, 8);
        std::array<float, 3> spacing{static_cast<float>(rng.uniform(0.5, 2.5)),
                                     static_cast<float>(rng.uniform(0.5, 2.5)),
                                     static_cast<float>(rng.uniform(0.5, 2.5))};
        BinaryMask a, b;
        a.bits = Tensor<uint8_t>({h, w, d});
        b.bits = Tensor<uint8_t>({h, w, d});
        a.spacing = b.spacing = spacing;
        const double da = rng.uniform(0.1, 0.7), db = rng.uniform(0.1, 0.7);
        bool ea = true, eb = true;
        for (int64_t i = 0; i < a.bits.size(); ++i) {
            a.bits[i] = rng.uniform() < da ? 1 : 0;
            b.bits[i] = rng.uniform() < db ? 1 : 0;
            ea = ea && !a.bits[i];
            eb = eb && !b.bits[i];
        }
        int64_t inter = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < a.bits.size(); ++i) {
            na += a.bits[i] != 0;
            nb += b.bits[i] != 0;
            inter += a.bits[i] && b.bits[i];
        }
        const double dice_want = na + nb == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
        if (std::abs(dice(a, b) - dice_want) > 1e-6) {
            detail = "dice disagrees with brute force";
            return false;
        }
        if (ea || eb) continue;
        auto surface = [](const BinaryMask& m) {
            std::vector<std::array<double, 3>> pts;
            const int64_t H = m.extent(0), W = m.extent(1), D = m.extent(2);
            for (int64_t x = 0; x < H; ++x)
                for (int64_t y = 0; y < W; ++y)
                    for (int64_t z = 0; z < D; ++z) {
                        if (!m.bits[(x * W + y) * D + z]) continue;
                        bool bd = x == 0 || y == 0 || z == 0 || x == H - 1 || y == W - 1 || z == D - 1;
                        if (!bd)
                            bd = !m.bits[((x - 1) * W + y) * D + z] ||
                                 !m.bits[((x + 1) * W + y) * D + z] ||
                                 !m.bits[(x * W + y - 1) * D + z] ||
                                 !m.bits[(x * W + y + 1) * D + z] ||
                                 !m.bits[(x * W + y) * D + z - 1] || !m.bits[(x * W + y) * D + z + 1];
                        if (bd)
                            pts.push_back({x * double(m.spacing[0]), y * double(m.spacing[1]),
                                           z * double(m.spacing[2])});
                    }
            return pts;
        };
        auto directed = [](const std::vector<std::array<double, 3>>& from,
                           const std::vector<std::array<double, 3>>& to) {
            std::vector<double> out;
            for (const auto& p : from) {
                double best = std::numeric_limits<double>::infinity();
                for (const auto& q : to) {
                    const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
                    best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
                }
                out.push_back(best);
            }
            return out;
        };
        auto sa = surface(a), sb = surface(b);
        auto d1 = directed(sa, sb), d2 = directed(sb, sa);
        std::vector<double> all = d1;
        all.insert(all.end(), d2.begin(), d2.end());
        std::sort(all.begin(), all.end());
        double want_hd;
        if (all.size() == 1) {
            want_hd = all[0];
        } else {
            const double rank = 0.95 * double(all.size() - 1);
            const size_t lo = static_cast<size_t>(rank);
            const size_t hi = std::min(lo + 1, all.size() - 1);
            want_hd = all[lo] + (rank - double(lo)) * (all[hi] - all[lo]);
        }
        if (std::abs(hd95(a, b) - want_hd) > 1e-6) {
            detail = "hd95 disagrees with brute force by " +
                     std::to_string(std::abs(hd95(a, b) - want_hd));
            return false;
        }
        const double tol = rng.uniform(0.0, 3.0);
        int64_t hits = 0;
        for (double v : d1) hits += v <= tol;
        for (double v : d2) hits += v <= tol;
        const double want_nsd = double(hits) / double(d1.size() + d2.size());
        if (std::abs(nsd(a, b, tol) - want_nsd) > 1e-6) {
            detail = "nsd disagrees with brute force";
            return false;
        }
        ++checked;
    }
    return true;
}

// --------------------------------------------------------------------------
// criterion 6: overfit trainability
// --------------------------------------------------------------------------

bool overfit_trainability(std::string& detail) {
    auto data = fresh_dir("overfit_data");
    write_phantom_set(data, 4, 32, 3, 500);
    RunConfig cfg;
    cfg.model = tiny_config(3);
    cfg.data_dir = data.string();
    cfg.out_dir = fresh_dir("overfit_out").string();
    cfg.batch = 2;
    cfg.steps = 2000;
    cfg.seed = 61;
    cfg.crop = 16;
    cfg.warmup = 100;
    cfg.lr = 1e-3;
    cfg.eval_every = 50;
    cfg.ckpt_every = 0;
    cfg.roi = 16;
    cfg.overlap = 0.5;
    auto result = finetune(cfg, /*stop_at_dice=*/0.9501);
    const auto step = result.first_step_reaching(0.9501);
    if (step < 0) {
        detail = "training dice stayed at " +
                 std::to_string(result.val_dice.empty() ? 0.0 : result.val_dice.back().second);
        return false;
    }
    detail = "dice " + std::to_string(result.val_dice.back().second) + " at step " +
             std::to_string(step);
    return true;
}

// --------------------------------------------------------------------------
// criterion 7: SSL trend
// --------------------------------------------------------------------------

bool ssl_trend(std::string& detail) {
    auto pre_dir = fresh_dir("ssl_pre");
    auto fin_dir = fresh_dir("ssl_fin");
    auto val_dir = fresh_dir("ssl_val");
    write_phantom_set(pre_dir, 16, 32, 3, 9000);
    write_phantom_set(fin_dir, 3, 32, 3, 9100);
    write_phantom_set(val_dir, 1, 32, 3, 9200);

    ModelConfig tiny = tiny_config(3);
    tiny.contrast_dim = 128;
    RunConfig pc;
    pc.model = tiny;
    pc.data_dir = pre_dir.string();
    pc.out_dir = fresh_dir("ssl_pre_out").string();
    pc.batch = 4;
    pc.steps = 500;
    pc.seed = 77;
    pc.crop = 16;
    pc.warmup = 50;
    pc.lr = 4e-4;
    pc.ckpt_every = 0;
    auto pre = pretrain(pc);
    double head = 0;
    for (int i = 0; i < 10; ++i) head += pre.total_losses[static_cast<size_t>(i)];
    head /= 10.0;
    const double final_loss = pre.total_losses.back();
    if (!(final_loss < 0.5 * head)) {
        detail = "loss at 500 is " + std::to_string(final_loss) + ", not below half of " +
                 std::to_string(head);
        return false;
    }

    int wins = 0;
    std::string arms;
    for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        int64_t steps[2] = {0, 0};
        for (int arm = 0; arm < 2; ++arm) {  // 0 = scratch, 1 = pretrained
            RunConfig fc;
            fc.model = tiny;
            fc.data_dir = fin_dir.string();
            fc.val_dir = val_dir.string();
            fc.out_dir =
                fresh_dir("ssl_fin_s" + std::to_string(seed) + (arm ? "_pre" : "_scr")).string();
            fc.batch = 2;
            fc.steps = 500;
            fc.seed = seed;
            fc.crop = 16;
            fc.warmup = 20;
            fc.lr = 1e-3;
            fc.eval_every = 20;
            fc.ckpt_every = 0;
            fc.roi = 16;
            fc.overlap = 0.5;
            if (arm) fc.init_ckpt = pre.final_ckpt;
            auto r = finetune(fc, 0.90);
            steps[arm] = r.first_step_reaching(0.90);
        }
        const bool win = steps[1] >= 0 && (steps[0] < 0 || steps[1] <= steps[0]);
        wins += win;
        arms += " s" + std::to_string(seed) + ":" + std::to_string(steps[1]) + "/" +
                std::to_string(steps[0]);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "loss %.3f -> %.3f;", head, final_loss);
    detail = std::string(buf) + " pre/scratch steps:" + arms + "; wins " + std::to_string(wins) + "/5";
    return wins >= 3;
}

// --------------------------------------------------------------------------
// criterion 8: determinism & persistence
// --------------------------------------------------------------------------

bool determinism_persistence(std::string& detail) {
    auto data = fresh_dir("det_data");
    write_phantom_set(data, 4, 24, 3, 800);
    RunConfig cfg;
    cfg.model = tiny_config(3);
    cfg.data_dir = data.string();
    cfg.batch = 2;
    cfg.steps = 12;
    cfg.seed = 19;
    cfg.crop = 16;
    cfg.warmup = 4;
    cfg.lr = 1e-3;
    cfg.ckpt_every = 6;
    cfg.eval_every = 0;

    auto out1 = fresh_dir("det_out1"), out2 = fresh_dir("det_out2");
    cfg.out_dir = out1.string();
    auto r1 = pretrain(cfg);
    cfg.out_dir = out2.string();
    auto r2 = pretrain(cfg);
    if (r1.total_losses != r2.total_losses) {
        detail = "fixed-seed loss curves differ";
        return false;
    }
    auto slurp = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    };
    if (slurp(out1 / "pretrain_curve.tsv") != slurp(out2 / "pretrain_curve.tsv")) {
        detail = "curve files differ byte-wise";
        return false;
    }

    auto out3 = fresh_dir("det_out3");
    cfg.out_dir = out3.string();
    cfg.init_ckpt = (out1 / "checkpoint_6.swck").string();
    auto tail = pretrain(cfg);
    if (tail.total_losses.size() != 6) {
        detail = "resume produced the wrong number of steps";
        return false;
    }
    for (size_t i = 0; i < 6; ++i)
        if (tail.total_losses[i] != r1.total_losses[6 + i]) {
            detail = "resumed trajectory diverges at step " + std::to_string(7 + i);
            return false;
        }

    Rng rng(9);
    Volume v(2, 5, 4, 6);
    for (auto& x : v.voxels.data) x = static_cast<float>(rng.uniform(-3e38, 3e38));
    v.voxels[0] = -0.0f;
    v.voxels[1] = 1e-42f;
    auto vol_path = (fresh_dir("det_vol") / "x.vol").string();
    write_volume(vol_path, v);
    auto rv = read_volume(vol_path);
    for (int64_t i = 0; i < v.voxels.size(); ++i) {
        uint32_t a, b;
        std::memcpy(&a, &v.voxels[i], 4);
        std::memcpy(&b, &rv.voxels[i], 4);
        if (a != b) {
            detail = "VOL1 round trip not bitwise";
            return false;
        }
    }

    ParamStore<float> store;
    store.add("enc.p", Tensor<float>({3, 3}));
    auto& e = store.at("enc.p");
    for (int64_t i = 0; i < 9; ++i) {
        e.value[i] = static_cast<float>(rng.uniform(-1, 1));
        e.m[i] = static_cast<float>(rng.uniform(-1, 1));
        e.v[i] = static_cast<float>(rng.uniform(0, 1));
    }
    auto ck_path = (fresh_dir("det_ck") / "x.swck").string();
    RunConfig dummy;
    dummy.mode = "pretrain";
    save_checkpoint(ck_path, store, serialize_config(dummy), 3);
    auto loaded = load_checkpoint(ck_path);
    ParamStore<float> fresh;
    fresh.add("enc.p", Tensor<float>({3, 3}));
    restore_store(fresh, loaded);
    if (fresh.at("enc.p").value.data != e.value.data || fresh.at("enc.p").m.data != e.m.data ||
        fresh.at("enc.p").v.data != e.v.data || loaded.step != 3) {
        detail = "SWCK round trip not bitwise";
        return false;
    }
    return true;
}

// --------------------------------------------------------------------------
// criterion 9: cutout contract
// --------------------------------------------------------------------------

bool cutout_contract(std::string& detail) {
    const int64_t target = static_cast<int64_t>(std::ceil(0.3 * 96 * 96 * 96));
    if (target != 265421) {
        detail = "ceil(0.3 * 96^3) != 265421";
        return false;
    }
    Volume v(1, 96, 96, 96);
    Rng fill(10);
    for (auto& x : v.voxels.data) x = static_cast<float>(fill.uniform(0.05, 1.0));
    int64_t min_cov = v.voxel_count();
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        auto [cut, mask] = cutout(v, 0.3, rng);
        int64_t covered = 0;
        for (auto m : mask.data) covered += m;
        min_cov = std::min(min_cov, covered);
        if (covered < target) {
            detail = "seed " + std::to_string(seed) + " covered only " + std::to_string(covered);
            return false;
        }
    }
    detail = "minimum coverage " + std::to_string(min_cov) + " >= " + std::to_string(target);
    return true;
}

}  // namespace

int main() {
    Gate gate;
    gate.run(1, "shape ladder", 60, shape_ladder);
    gate.run(2, "gradient suite", 600, gradient_suite);
    gate.run(3, "structural invariants", 120, structural_invariants);
    gate.run(4, "loss oracles", 0, loss_oracles);
    gate.run(5, "metric oracles", 0, metric_oracles);
    gate.run(6, "overfit trainability", 1800, overfit_trainability);
    gate.run(7, "ssl trend", 0, ssl_trend);
    gate.run(8, "determinism", 0, determinism_persistence);
    gate.run(9, "cutout contract", 0, cutout_contract);
    if (gate.failures == 0) std::printf("all acceptance criteria passed\n");
    return gate.failures;
}
