#pragma once

#include <array>
#include <map>
#include <memory>
#include <vector>

#include "swinvox/config.hpp"
#include "swinvox/ops.hpp"
#include "swinvox/params.hpp"

namespace swinvox {

// Axis convention used throughout: a volume [C,H,W,D] names its spatial axes
// x (extent H), y (extent W), z (extent D). Token rows are ordered
// lexicographically by (z, y, x) with x fastest:
//   row(x, y, z) = (z * W + y) * H + x.

struct GridDims {
    int64_t h = 1, w = 1, d = 1;
    int64_t count() const { return h * w * d; }
    bool operator==(const GridDims&) const = default;
};

inline int64_t token_row(const GridDims& g, int64_t x, int64_t y, int64_t z) {
    return (z * g.w + y) * g.h + x;
}

using Offset3 = std::array<int64_t, 3>;  // (x, y, z) shift amounts

constexpr double kMaskNeg = -1e9;

namespace detail {

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

inline int64_t mod_pos(int64_t a, int64_t m) {
    int64_t r = a % m;
    return r < 0 ? r + m : r;
}

// 3-interval slicing label per axis on post-shift coordinates:
// [0, L-M) -> 0, [L-M, L-s) -> 1, [L-s, L) -> 2 (collapsed when s == 0).
inline int axis_region(int64_t pos, int64_t len, int64_t m, int64_t shift) {
    if (shift == 0) return 0;
    if (pos < len - m) return 0;
    if (pos < len - shift) return 1;
    return 2;
}

}  // namespace detail

/// Geometry of one shifted-window pass: the padded grid, the combined
/// shift+partition gather, its inverse, and the additive attention mask.
/// `pad_record` data (original vs padded extents) lives in `grid`/`padded`.
template <typename T>
struct WindowPlan {
    GridDims grid;     // original token extents
    GridDims padded;   // zero-padded up to window multiples
    int64_t window = 0;
    Offset3 offset{0, 0, 0};
    int64_t n_win = 0;
    int64_t win_len = 0;  // M^3
    std::shared_ptr<std::vector<int64_t>> gather;   // [n_win*win_len] -> token row or -1 (pad)
    std::shared_ptr<std::vector<int64_t>> scatter;  // [grid.count()] -> window slot
    std::shared_ptr<Tensor<T>> mask;                // [n_win, t, t] additive; null when all-zero
};

/// Region-label shift mask alone (no padding component): entries are 0 for
/// same-region token pairs and kMaskNeg across regions.
template <typename T>
Tensor<T> build_shift_mask(const GridDims& grid, int64_t window, const Offset3& offset) {
    for (int64_t o : offset)
        if (o < 0 || o >= window) throw ShapeError("build_shift_mask: offset must lie in [0, window)");
    const GridDims padded{detail::ceil_div(grid.h, window) * window,
                          detail::ceil_div(grid.w, window) * window,
                          detail::ceil_div(grid.d, window) * window};
    const int64_t nwx = padded.h / window, nwy = padded.w / window, nwz = padded.d / window;
    const int64_t t = window * window * window;
    const int64_t n_win = nwx * nwy * nwz;
    Tensor<T> mask({n_win, t, t});
    std::vector<int> region(static_cast<size_t>(t));
    for (int64_t wz = 0; wz < nwz; ++wz)
        for (int64_t wy = 0; wy < nwy; ++wy)
            for (int64_t wx = 0; wx < nwx; ++wx) {
                const int64_t wi = (wz * nwy + wy) * nwx + wx;
                int64_t slot = 0;
                for (int64_t lz = 0; lz < window; ++lz)
                    for (int64_t ly = 0; ly < window; ++ly)
                        for (int64_t lx = 0; lx < window; ++lx, ++slot) {
                            const int rx = detail::axis_region(wx * window + lx, padded.h, window, offset[0]);
                            const int ry = detail::axis_region(wy * window + ly, padded.w, window, offset[1]);
                            const int rz = detail::axis_region(wz * window + lz, padded.d, window, offset[2]);
                            region[static_cast<size_t>(slot)] = (rz * 3 + ry) * 3 + rx;
                        }
                T* m = mask.ptr() + wi * t * t;
                for (int64_t i = 0; i < t; ++i)
                    for (int64_t j = 0; j < t; ++j)
                        if (region[static_cast<size_t>(i)] != region[static_cast<size_t>(j)])
                            m[i * t + j] = static_cast<T>(kMaskNeg);
            }
    return mask;
}

template <typename T>
WindowPlan<T> build_window_plan(const GridDims& grid, int64_t window, const Offset3& offset) {
    if (window < 1) throw ShapeError("window size must be >= 1");
    WindowPlan<T> plan;
    plan.grid = grid;
    plan.window = window;
    plan.offset = offset;
    plan.padded = {detail::ceil_div(grid.h, window) * window,
                   detail::ceil_div(grid.w, window) * window,
                   detail::ceil_div(grid.d, window) * window};
    const int64_t nwx = plan.padded.h / window, nwy = plan.padded.w / window, nwz = plan.padded.d / window;
    plan.n_win = nwx * nwy * nwz;
    plan.win_len = window * window * window;

    const int64_t slots = plan.n_win * plan.win_len;
    auto gather = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(slots), int64_t(-1));
    auto scatter = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(grid.count()), int64_t(-1));
    const bool shifted = offset[0] || offset[1] || offset[2];
    bool any_pad = false;

    for (int64_t wz = 0; wz < nwz; ++wz)
        for (int64_t wy = 0; wy < nwy; ++wy)
            for (int64_t wx = 0; wx < nwx; ++wx) {
                const int64_t wi = (wz * nwy + wy) * nwx + wx;
                int64_t slot = 0;
                for (int64_t lz = 0; lz < window; ++lz)
                    for (int64_t ly = 0; ly < window; ++ly)
                        for (int64_t lx = 0; lx < window; ++lx, ++slot) {
                            // post-shift padded coordinate of this window slot
                            const int64_t px = wx * window + lx;
                            const int64_t py = wy * window + ly;
                            const int64_t pz = wz * window + lz;
                            // pre-shift padded coordinate (cyclic over the padded grid)
                            const int64_t sx = detail::mod_pos(px + offset[0], plan.padded.h);
                            const int64_t sy = detail::mod_pos(py + offset[1], plan.padded.w);
                            const int64_t sz = detail::mod_pos(pz + offset[2], plan.padded.d);
                            if (sx < grid.h && sy < grid.w && sz < grid.d) {
                                const int64_t row = token_row(grid, sx, sy, sz);
                                (*gather)[static_cast<size_t>(wi * plan.win_len + slot)] = row;
                                (*scatter)[static_cast<size_t>(row)] = wi * plan.win_len + slot;
                            } else {
                                any_pad = true;
                            }
                        }
            }
    plan.gather = gather;
    plan.scatter = scatter;

    if (shifted || any_pad) {
        auto mask = std::make_shared<Tensor<T>>(
            shifted ? build_shift_mask<T>(grid, window, offset)
                    : Tensor<T>({plan.n_win, plan.win_len, plan.win_len}));
        if (any_pad) {  // mask key columns of padded slots
            const int64_t t = plan.win_len;
            for (int64_t wi = 0; wi < plan.n_win; ++wi) {
                T* m = mask->ptr() + wi * t * t;
                for (int64_t j = 0; j < t; ++j)
                    if ((*gather)[static_cast<size_t>(wi * t + j)] < 0)
                        for (int64_t i = 0; i < t; ++i) m[i * t + j] = static_cast<T>(kMaskNeg);
            }
        }
        plan.mask = mask;
    }
    return plan;
}

/// Relative-position index table for one window: idx[i*t + j] encodes the
/// 3-D offset between slots i and j in a (2M-1)^3 table.
inline std::shared_ptr<std::vector<int64_t>> build_rel_pos_index(int64_t window) {
    const int64_t t = window * window * window;
    const int64_t span = 2 * window - 1;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(t * t));
    auto coord = [&](int64_t slot) {
        std::array<int64_t, 3> c;
        c[0] = slot % window;                     // x
        c[1] = (slot / window) % window;          // y
        c[2] = slot / (window * window);          // z
        return c;
    };
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j) {
            auto ci = coord(i), cj = coord(j);
            const int64_t dx = ci[0] - cj[0] + window - 1;
            const int64_t dy = ci[1] - cj[1] + window - 1;
            const int64_t dz = ci[2] - cj[2] + window - 1;
            (*idx)[static_cast<size_t>(i * t + j)] = (dz * span + dy) * span + dx;
        }
    return idx;
}

/// Caches window plans and merge gathers across forward passes.
template <typename T>
struct EncoderWorkspace {
    std::map<std::array<int64_t, 7>, WindowPlan<T>> plans;
    std::map<std::array<int64_t, 3>, std::shared_ptr<std::vector<int64_t>>> merge_gathers;
    std::map<int64_t, std::shared_ptr<std::vector<int64_t>>> rel_indices;

    const WindowPlan<T>& plan(const GridDims& g, int64_t window, const Offset3& o) {
        std::array<int64_t, 7> key{g.h, g.w, g.d, window, o[0], o[1], o[2]};
        auto it = plans.find(key);
        if (it == plans.end()) it = plans.emplace(key, build_window_plan<T>(g, window, o)).first;
        return it->second;
    }

    const std::shared_ptr<std::vector<int64_t>>& rel_index(int64_t window) {
        auto it = rel_indices.find(window);
        if (it == rel_indices.end()) it = rel_indices.emplace(window, build_rel_pos_index(window)).first;
        return it->second;
    }
};

// ---------------------------------------------------------------------------
// spec-level window operations
// ---------------------------------------------------------------------------

/// Splits a token grid into non-overlapping M^3 windows (zero-padded up to
/// window multiples). Returns the window tensor and the plan acting as the
/// pad record.
template <typename T>
std::pair<Value<T>, WindowPlan<T>> window_partition(const Value<T>& tokens, const GridDims& grid,
                                                    int64_t window, EncoderWorkspace<T>& ws) {
    const int64_t feat = tokens.dims().back();
    const auto& plan = ws.plan(grid, window, {0, 0, 0});
    auto windows = rows_gather(tokens, plan.gather, feat, {plan.n_win, plan.win_len, feat});
    return {windows, plan};
}

/// Inverse of window_partition; discards padding.
template <typename T>
Value<T> window_reverse(const Value<T>& windows, const WindowPlan<T>& plan) {
    if (windows.dims().size() != 3 || windows.dims()[0] != plan.n_win || windows.dims()[1] != plan.win_len)
        throw ShapeError("window_reverse: windows " + shape_str(windows.dims()) +
                         " inconsistent with pad record");
    const int64_t feat = windows.dims()[2];
    auto flat = reshape(windows, {plan.n_win * plan.win_len, feat});
    return rows_gather(flat, plan.scatter, feat, {plan.grid.count(), feat});
}

/// Toroidal roll of token positions: out[q] = in[(q + offset) mod extents].
template <typename T>
Value<T> cyclic_shift(const Value<T>& tokens, const GridDims& grid, const Offset3& offset) {
    const int64_t feat = tokens.dims().back();
    if (tokens.size() != grid.count() * feat)
        throw ShapeError("cyclic_shift: tokens do not match grid");
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(grid.count()));
    for (int64_t z = 0; z < grid.d; ++z)
        for (int64_t y = 0; y < grid.w; ++y)
            for (int64_t x = 0; x < grid.h; ++x)
                (*idx)[static_cast<size_t>(token_row(grid, x, y, z))] =
                    token_row(grid, detail::mod_pos(x + offset[0], grid.h),
                              detail::mod_pos(y + offset[1], grid.w),
                              detail::mod_pos(z + offset[2], grid.d));
    return rows_gather(tokens, idx, feat, Shape(tokens.dims()));
}

// ---------------------------------------------------------------------------
// attention / blocks
// ---------------------------------------------------------------------------

struct AttnParamIdx {
    int wq = -1, wk = -1, wv = -1, wo = -1;
    int rel_table = -1;  // [(2M-1)^3, heads], only with rel_pos_bias
};

struct BlockParamIdx {
    int ln1_g = -1, ln1_b = -1;
    AttnParamIdx attn;
    int ln2_g = -1, ln2_b = -1;
    int fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
};

struct StageParamIdx {
    std::vector<BlockParamIdx> blocks;
    int merge_ln_g = -1, merge_ln_b = -1, merge_w = -1;
};

struct EncoderParamIdx {
    int embed_w = -1, embed_b = -1;
    std::vector<StageParamIdx> stages;
};

/// Multi-head window attention, Softmax(Q K^T / sqrt(d) + mask) V per window
/// and head, heads concatenated then output-projected.
template <typename T>
Value<T> window_msa(const Value<T>& windows, int64_t heads, const std::vector<Value<T>>& bound,
                    const AttnParamIdx& p, std::shared_ptr<const Tensor<std::type_identity_t<T>>> mask,
                    std::shared_ptr<const std::vector<int64_t>> rel_idx = nullptr) {
    require_rank(windows.v(), 3, "window_msa windows");
    const int64_t n_win = windows.dims()[0], t = windows.dims()[1], feat = windows.dims()[2];
    if (bound[p.wq].dims() != Shape{feat, feat})
        throw ShapeError("window_msa: projection size " + shape_str(bound[p.wq].dims()) +
                         " does not match feat " + std::to_string(feat));
    if (feat % heads != 0) throw ShapeError("window_msa: heads must divide feat");
    const int64_t d = feat / heads;
    auto flat = reshape(windows, {n_win * t, feat});
    auto q = split_heads(reshape(matmul(flat, bound[p.wq]), {n_win, t, feat}), heads);
    auto k = split_heads(reshape(matmul(flat, bound[p.wk]), {n_win, t, feat}), heads);
    auto v = split_heads(reshape(matmul(flat, bound[p.wv]), {n_win, t, feat}), heads);
    auto logits = scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    if (p.rel_table >= 0) {
        if (!rel_idx) throw ShapeError("window_msa: relative bias enabled but no index given");
        logits = add_rel_pos_bias(logits, bound[p.rel_table], rel_idx, heads);
    }
    if (mask) logits = add_window_mask(logits, mask, heads);
    auto attn = softmax_lastdim(logits);
    auto ctx = merge_heads(bmm_nn(attn, v), heads);
    return reshape(matmul(reshape(ctx, {n_win * t, feat}), bound[p.wo]), {n_win, t, feat});
}

/// One W-MSA/SW-MSA block pair:
///   z_hat = MSA(LN(z)) + z ; z = MLP(LN(z_hat)) + z_hat
/// first with the regular partition, then with the half-window shifted
/// partition and its region mask; the shift is undone before returning.
template <typename T>
Value<T> swin_block_pair(Value<T> tokens, const GridDims& grid, int64_t window, int64_t heads,
                         const std::vector<Value<T>>& bound, const BlockParamIdx& b0,
                         const BlockParamIdx& b1, EncoderWorkspace<T>& ws, T eps) {
    const int64_t feat = tokens.dims().back();
    const int64_t shift = window / 2;
    const std::array<std::pair<const BlockParamIdx*, Offset3>, 2> blocks{
        std::pair<const BlockParamIdx*, Offset3>{&b0, {0, 0, 0}},
        std::pair<const BlockParamIdx*, Offset3>{&b1, {shift, shift, shift}}};
    for (const auto& [blk, offset] : blocks) {
        const auto& plan = ws.plan(grid, window, offset);
        auto h = layer_norm(tokens, bound[blk->ln1_g], bound[blk->ln1_b], eps);
        auto windows = rows_gather(h, plan.gather, feat, {plan.n_win, plan.win_len, feat});
        auto rel = blk->attn.rel_table >= 0 ? ws.rel_index(window) : nullptr;
        auto a = window_msa(windows, heads, bound, blk->attn, plan.mask, rel);
        auto back = rows_gather(reshape(a, {plan.n_win * plan.win_len, feat}), plan.scatter, feat,
                                Shape(tokens.dims()));
        tokens = add(tokens, back);
        auto h2 = layer_norm(tokens, bound[blk->ln2_g], bound[blk->ln2_b], eps);
        auto m = linear(h2, bound[blk->fc1_w], &bound[blk->fc1_b]);
        m = gelu(m);
        m = linear(m, bound[blk->fc2_w], &bound[blk->fc2_b]);
        tokens = add(tokens, m);
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// patch embedding / merging
// ---------------------------------------------------------------------------

/// Non-overlapping patch flatten + linear embedding. Input [S,H,W,D] with
/// extents divisible by the patch edge; output tokens [(H/P)(W/P)(D/P), C].
/// Per-token features are ordered channel-major, then local (z,y,x), x
/// fastest.
template <typename T>
Value<T> patch_embed(const Value<T>& vol, int64_t patch, const Value<T>& w, const Value<T>& b,
                     GridDims* out_grid) {
    require_rank(vol.v(), 4, "patch_embed input");
    const int64_t s = vol.dims()[0], h = vol.dims()[1], wd = vol.dims()[2], d = vol.dims()[3];
    if (h % patch || wd % patch || d % patch)
        throw ShapeError("patch_embed: extents " + shape_str(vol.dims()) +
                         " not divisible by patch " + std::to_string(patch));
    const GridDims grid{h / patch, wd / patch, d / patch};
    const int64_t pf = patch * patch * patch * s;
    if (w.dims()[0] != pf)
        throw ShapeError("patch_embed: weight rows " + std::to_string(w.dims()[0]) +
                         " != patch features " + std::to_string(pf));
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(grid.count() * pf));
    int64_t at = 0;
    for (int64_t z = 0; z < grid.d; ++z)
        for (int64_t y = 0; y < grid.w; ++y)
            for (int64_t x = 0; x < grid.h; ++x)
                for (int64_t c = 0; c < s; ++c)
                    for (int64_t lz = 0; lz < patch; ++lz)
                        for (int64_t ly = 0; ly < patch; ++ly)
                            for (int64_t lx = 0; lx < patch; ++lx)
                                (*idx)[static_cast<size_t>(at++)] =
                                    ((c * h + (x * patch + lx)) * wd + (y * patch + ly)) * d +
                                    (z * patch + lz);
    auto flat = rows_gather(reshape(vol, {vol.size(), 1}), idx, 1, {grid.count(), pf});
    if (out_grid) *out_grid = grid;
    return linear(flat, w, &b);
}

/// Groups each 2x2x2 token neighborhood (zero-padding odd extents),
/// layer-normalizes the concatenated 8F features and projects to 2F without
/// bias. Neighbor order is (dz, dy, dx) lexicographic, dx fastest, optionally
/// overridden for order-equivalence checks.
template <typename T>
Value<T> patch_merge(const Value<T>& tokens, const GridDims& grid, const std::vector<Value<T>>& bound,
                     int ln_g, int ln_b, int w_down, GridDims* out_grid, T eps,
                     const std::array<int, 8>& neighbor_order = {0, 1, 2, 3, 4, 5, 6, 7}) {
    const int64_t feat = tokens.dims().back();
    const GridDims half{detail::ceil_div(grid.h, 2), detail::ceil_div(grid.w, 2),
                        detail::ceil_div(grid.d, 2)};
    if (bound[w_down].dims() != Shape{8 * feat, 2 * feat})
        throw ShapeError("patch_merge: projection must be [8F, 2F], got " +
                         shape_str(bound[w_down].dims()));
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(half.count() * 8));
    int64_t at = 0;
    for (int64_t z = 0; z < half.d; ++z)
        for (int64_t y = 0; y < half.w; ++y)
            for (int64_t x = 0; x < half.h; ++x)
                for (int n = 0; n < 8; ++n) {
                    const int nn = neighbor_order[static_cast<size_t>(n)];
                    const int64_t dx = nn & 1, dy = (nn >> 1) & 1, dz = (nn >> 2) & 1;
                    const int64_t sx = 2 * x + dx, sy = 2 * y + dy, sz = 2 * z + dz;
                    (*idx)[static_cast<size_t>(at++)] =
                        (sx < grid.h && sy < grid.w && sz < grid.d) ? token_row(grid, sx, sy, sz) : -1;
                }
    auto grouped = rows_gather(tokens, idx, feat, {half.count(), 8 * feat});
    auto normed = layer_norm(grouped, bound[ln_g], bound[ln_b], eps);
    if (out_grid) *out_grid = half;
    return matmul(normed, bound[w_down]);
}

/// Token matrix [N,F] -> dense feature map [F, h, w, d].
template <typename T>
Value<T> tokens_to_dense(const Value<T>& tokens, const GridDims& grid) {
    const int64_t feat = tokens.dims().back();
    if (tokens.size() != grid.count() * feat)
        throw ShapeError("tokens_to_dense: tokens do not match grid");
    auto out = detail::alloc<T>({feat, grid.h, grid.w, grid.d});
    const T* src = tokens.v().ptr();
    for (int64_t z = 0; z < grid.d; ++z)
        for (int64_t y = 0; y < grid.w; ++y)
            for (int64_t x = 0; x < grid.h; ++x) {
                const int64_t row = token_row(grid, x, y, z);
                for (int64_t f = 0; f < feat; ++f)
                    (*out)[((f * grid.h + x) * grid.w + y) * grid.d + z] = src[row * feat + f];
            }
    int xn = tokens.node;
    GridDims g = grid;
    return tokens.tape->emit(out, xn >= 0, [xn, g, feat](Tape<T>& t, const std::vector<T>& gr) {
        auto& gx = t.grad_buf(xn);
        for (int64_t z = 0; z < g.d; ++z)
            for (int64_t y = 0; y < g.w; ++y)
                for (int64_t x = 0; x < g.h; ++x) {
                    const int64_t row = token_row(g, x, y, z);
                    for (int64_t f = 0; f < feat; ++f)
                        gx[static_cast<size_t>(row * feat + f)] +=
                            gr[static_cast<size_t>(((f * g.h + x) * g.w + y) * g.d + z)];
                }
    });
}

// ---------------------------------------------------------------------------
// parameter construction / encoder forward
// ---------------------------------------------------------------------------

template <typename T>
EncoderParamIdx build_encoder_params(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParamIdx enc;
    const int64_t pf = cfg.patch * cfg.patch * cfg.patch * cfg.in_channels;
    enc.embed_w = store.add_trunc_normal("enc.embed.w", {pf, cfg.embed_c}, 0.02, rng);
    enc.embed_b = store.add_zeros("enc.embed.b", {cfg.embed_c});
    const int64_t span = 2 * cfg.window - 1;
    for (int64_t s = 0; s < cfg.stages(); ++s) {
        StageParamIdx stage;
        const int64_t f = cfg.stage_width(s);
        const std::string sp = "enc.s" + std::to_string(s) + ".";
        for (int64_t b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
            BlockParamIdx blk;
            const std::string bp = sp + "b" + std::to_string(b) + ".";
            blk.ln1_g = store.add_ones(bp + "ln1.g", {f});
            blk.ln1_b = store.add_zeros(bp + "ln1.b", {f});
            blk.attn.wq = store.add_trunc_normal(bp + "attn.wq", {f, f}, 0.02, rng);
            blk.attn.wk = store.add_trunc_normal(bp + "attn.wk", {f, f}, 0.02, rng);
            blk.attn.wv = store.add_trunc_normal(bp + "attn.wv", {f, f}, 0.02, rng);
            blk.attn.wo = store.add_trunc_normal(bp + "attn.wo", {f, f}, 0.02, rng);
            if (cfg.rel_pos_bias)
                blk.attn.rel_table = store.add_zeros(bp + "attn.rel",
                                                     {span * span * span, cfg.heads[static_cast<size_t>(s)]});
            blk.ln2_g = store.add_ones(bp + "ln2.g", {f});
            blk.ln2_b = store.add_zeros(bp + "ln2.b", {f});
            blk.fc1_w = store.add_trunc_normal(bp + "mlp.fc1.w", {f, ModelConfig::mlp_ratio * f}, 0.02, rng);
            blk.fc1_b = store.add_zeros(bp + "mlp.fc1.b", {ModelConfig::mlp_ratio * f});
            blk.fc2_w = store.add_trunc_normal(bp + "mlp.fc2.w", {ModelConfig::mlp_ratio * f, f}, 0.02, rng);
            blk.fc2_b = store.add_zeros(bp + "mlp.fc2.b", {f});
            stage.blocks.push_back(blk);
        }
        stage.merge_ln_g = store.add_ones(sp + "merge.ln.g", {8 * f});
        stage.merge_ln_b = store.add_zeros(sp + "merge.ln.b", {8 * f});
        stage.merge_w = store.add_trunc_normal(sp + "merge.w", {8 * f, 2 * f}, 0.02, rng);
        enc.stages.push_back(std::move(stage));
    }
    return enc;
}

/// Encoder output: six dense feature maps at scales H / 2^i, channel widths
/// [S, C, 2C, 4C, 8C, 16C]. f0 is the raw input; f5 the post-merge
/// bottleneck. Token grids of f1..f5 are reported alongside.
template <typename T>
struct EncoderFeatures {
    std::vector<Value<T>> f;       // size 6
    std::vector<GridDims> grids;   // grids of f1..f5 (index 0 unused)
};

template <typename T>
EncoderFeatures<T> encoder_forward(const Value<T>& x, const ModelConfig& cfg,
                                   const EncoderParamIdx& enc, const std::vector<Value<T>>& bound,
                                   EncoderWorkspace<T>& ws) {
    require_rank(x.v(), 4, "encoder input");
    if (x.dims()[0] != cfg.in_channels)
        throw ShapeError("encoder: expected " + std::to_string(cfg.in_channels) + " channels, got " +
                         shape_str(x.dims()));
    EncoderFeatures<T> out;
    out.f.resize(6);
    out.grids.resize(6);
    out.f[0] = x;

    GridDims grid;
    auto tokens = patch_embed(x, cfg.patch, bound[enc.embed_w], bound[enc.embed_b], &grid);
    const T eps = static_cast<T>(cfg.norm_eps);
    for (int64_t s = 0; s < cfg.stages(); ++s) {
        const auto& stage = enc.stages[static_cast<size_t>(s)];
        for (size_t b = 0; b + 1 < stage.blocks.size(); b += 2)
            tokens = swin_block_pair(tokens, grid, cfg.window, cfg.heads[static_cast<size_t>(s)],
                                     bound, stage.blocks[b], stage.blocks[b + 1], ws, eps);
        out.f[static_cast<size_t>(s + 1)] = tokens_to_dense(tokens, grid);
        out.grids[static_cast<size_t>(s + 1)] = grid;
        tokens = patch_merge(tokens, grid, bound, stage.merge_ln_g, stage.merge_ln_b, stage.merge_w,
                             &grid, eps);
    }
    out.f[5] = tokens_to_dense(tokens, grid);
    out.grids[5] = grid;
    return out;
}

}  // namespace swinvox
