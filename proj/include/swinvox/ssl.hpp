#pragma once

#include "swinvox/swin.hpp"
#include "swinvox/volume.hpp"

namespace swinvox {

// ---------------------------------------------------------------------------
// augmentations
// ---------------------------------------------------------------------------

/// In-plane rotation by k*90 degrees about the z-axis (k mod 4). With axes
/// x<->H, y<->W, one quarter turn maps (x, y) -> (y, W-1-x); a marked voxel
/// at (x=0, y=0) lands at (x=0, y=W-1).
inline Volume rotate_z90(const Volume& v, int k) {
    const int64_t H = v.extent(0), W = v.extent(1), D = v.extent(2);
    if (H != W)
        throw ShapeError("rotate_z90: in-plane extents must be square, got H=" + std::to_string(H) +
                         " W=" + std::to_string(W));
    k = ((k % 4) + 4) % 4;
    if (k == 0) return v;
    Volume out(v.channels(), H, W, D);
    out.spacing = v.spacing;
    for (int64_t c = 0; c < v.channels(); ++c)
        for (int64_t x = 0; x < H; ++x)
            for (int64_t y = 0; y < W; ++y) {
                int64_t nx = x, ny = y;
                switch (k) {
                    case 1: nx = y; ny = W - 1 - x; break;
                    case 2: nx = W - 1 - x; ny = W - 1 - y; break;
                    case 3: nx = W - 1 - y; ny = x; break;
                }
                for (int64_t z = 0; z < D; ++z) out.voxels.at(c, nx, ny, z) = v.voxels.at(c, x, y, z);
            }
    return out;
}

/// Random inner cutout: axis-aligned cuboids (each side uniform in
/// [10%, 25%] of its axis extent) are filled until the covered-voxel count
/// reaches ceil(s * H * W * D). Returns the masked volume and the boolean
/// coverage mask. Fill is 0 (normalized air) or per-voxel uniform noise.
inline std::pair<Volume, Tensor<uint8_t>> cutout(const Volume& v, double s, Rng& rng,
                                                 bool noise_fill = false) {
    if (!(s > 0.0 && s < 1.0)) throw NumericError("cutout: ratio must lie in (0, 1)");
    const int64_t H = v.extent(0), W = v.extent(1), D = v.extent(2);
    const int64_t total = H * W * D;
    const int64_t target = static_cast<int64_t>(std::ceil(s * static_cast<double>(total)));
    Volume out = v;
    Tensor<uint8_t> mask({H, W, D});
    auto side = [&](int64_t ext) {
        const int64_t lo = std::max<int64_t>(1, static_cast<int64_t>(std::llround(0.10 * double(ext))));
        const int64_t hi = std::max<int64_t>(lo, static_cast<int64_t>(std::llround(0.25 * double(ext))));
        return rng.uniform_int(lo, hi);
    };
    int64_t covered = 0;
    for (int guard = 0; covered < target; ++guard) {
        if (guard > 100000) throw NumericError("cutout: failed to reach coverage target");
        const int64_t lx = side(H), ly = side(W), lz = side(D);
        const int64_t x0 = rng.uniform_int(0, H - lx);
        const int64_t y0 = rng.uniform_int(0, W - ly);
        const int64_t z0 = rng.uniform_int(0, D - lz);
        for (int64_t x = x0; x < x0 + lx; ++x)
            for (int64_t y = y0; y < y0 + ly; ++y)
                for (int64_t z = z0; z < z0 + lz; ++z) {
                    const float fill = noise_fill ? static_cast<float>(rng.uniform()) : 0.0f;
                    for (int64_t c = 0; c < v.channels(); ++c) out.voxels.at(c, x, y, z) = fill;
                    uint8_t& m = mask[(x * W + y) * D + z];
                    if (!m) {
                        m = 1;
                        ++covered;
                    }
                }
    }
    return {std::move(out), std::move(mask)};
}

/// Two augmented views of one sub-volume with rotation labels, cutout masks
/// and the post-rotation / pre-cutout reconstruction targets.
struct ViewPair {
    Volume x1, x2;
    int rot1 = 0, rot2 = 0;
    Tensor<uint8_t> mask1, mask2;
    Volume orig1, orig2;
};

struct AugmentOptions {
    double cutout_ratio = 0.3;  // s
    bool rotate = true;
    bool cutout_enabled = true;
    bool noise_fill = false;
};

/// Per sample: draw (rotation, cutout) twice, rotate first, record the
/// reconstruction target, then cut out. Each (sample, view) uses its own
/// stream split from `parent`, so results do not depend on evaluation order.
inline std::vector<ViewPair> make_views(const std::vector<Volume>& batch, const Rng& parent,
                                        const AugmentOptions& opt = {}) {
    if (batch.empty()) throw ShapeError("make_views: empty batch");
    std::vector<ViewPair> out;
    out.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        ViewPair vp;
        for (int view = 0; view < 2; ++view) {
            Rng rng = parent.split(stream_key(0, i, static_cast<uint64_t>(view)));
            const int k = opt.rotate ? static_cast<int>(rng.uniform_int(0, 3)) : 0;
            Volume rotated = rotate_z90(batch[i], k);
            Volume target = rotated;
            Volume augmented;
            Tensor<uint8_t> mask({batch[i].extent(0), batch[i].extent(1), batch[i].extent(2)});
            if (opt.cutout_enabled) {
                auto [cut, m] = cutout(rotated, opt.cutout_ratio, rng, opt.noise_fill);
                augmented = std::move(cut);
                mask = std::move(m);
            } else {
                augmented = rotated;
            }
            if (view == 0) {
                vp.x1 = std::move(augmented);
                vp.rot1 = k;
                vp.mask1 = std::move(mask);
                vp.orig1 = std::move(target);
            } else {
                vp.x2 = std::move(augmented);
                vp.rot2 = k;
                vp.mask2 = std::move(mask);
                vp.orig2 = std::move(target);
            }
        }
        out.push_back(std::move(vp));
    }
    return out;
}

// ---------------------------------------------------------------------------
// projection heads
// ---------------------------------------------------------------------------

struct SslParamIdx {
    int rec_w = -1, rec_b = -1;          // transposed conv to input resolution
    int rot_fc1_w = -1, rot_fc1_b = -1;  // MLP -> 4 rotation logits
    int rot_fc2_w = -1, rot_fc2_b = -1;
    int con_w = -1, con_b = -1;          // linear -> contrastive embedding
    int64_t rec_kernel = 0;
};

/// Bottleneck token extent for a cubic crop of the given edge (the halving
/// chain with ceil padding at odd grids).
inline int64_t bottleneck_extent(const ModelConfig& cfg, int64_t crop) {
    if (crop % cfg.patch != 0) throw ConfigError("crop must be divisible by patch");
    int64_t g = crop / cfg.patch;
    for (int64_t s = 0; s < cfg.stages(); ++s) g = (g + 1) / 2;
    return g;
}

template <typename T>
SslParamIdx build_ssl_params(ParamStore<T>& store, const ModelConfig& cfg, int64_t crop, Rng& rng) {
    SslParamIdx ssl;
    const int64_t bw = cfg.bottleneck_width();
    const int64_t g = bottleneck_extent(cfg, crop);
    if (crop % g != 0) throw ConfigError("crop not reachable by an integer reconstruction kernel");
    ssl.rec_kernel = crop / g;
    const int64_t k = ssl.rec_kernel;
    const double rec_std = std::sqrt(2.0 / static_cast<double>(bw));
    ssl.rec_w = store.add_trunc_normal("ssl.rec.w", {bw, cfg.in_channels, k, k, k}, rec_std, rng);
    ssl.rec_b = store.add_zeros("ssl.rec.b", {cfg.in_channels});
    ssl.rot_fc1_w = store.add_trunc_normal("ssl.rot.fc1.w", {bw, bw}, 0.02, rng);
    ssl.rot_fc1_b = store.add_zeros("ssl.rot.fc1.b", {bw});
    ssl.rot_fc2_w = store.add_trunc_normal("ssl.rot.fc2.w", {bw, 4}, 0.02, rng);
    ssl.rot_fc2_b = store.add_zeros("ssl.rot.fc2.b", {4});
    ssl.con_w = store.add_trunc_normal("ssl.con.w", {bw, cfg.contrast_dim}, 0.02, rng);
    ssl.con_b = store.add_zeros("ssl.con.b", {cfg.contrast_dim});
    return ssl;
}

template <typename T>
struct SslOutputs {
    Value<T> recon;       // [S, H, W, D]
    Value<T> rot_logits;  // [4]
    Value<T> embed;       // [contrast_dim]
};

/// Heads on the bottleneck: single transposed conv (kernel = stride) back to
/// input resolution for reconstruction; rotation MLP and contrastive linear
/// on the globally average-pooled bottleneck.
template <typename T>
SslOutputs<T> ssl_forward(const EncoderFeatures<T>& feats, const SslParamIdx& ssl,
                          const std::vector<Value<T>>& bound) {
    SslOutputs<T> out;
    out.recon = conv3d_transpose(feats.f[5], bound[ssl.rec_w], &bound[ssl.rec_b], ssl.rec_kernel, 0);
    auto pooled = global_avg_pool(feats.f[5]);
    auto h = gelu(linear(pooled, bound[ssl.rot_fc1_w], &bound[ssl.rot_fc1_b]));
    out.rot_logits = linear(h, bound[ssl.rot_fc2_w], &bound[ssl.rot_fc2_b]);
    out.embed = linear(pooled, bound[ssl.con_w], &bound[ssl.con_b]);
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean absolute reconstruction error over all voxels.
template <typename T>
Value<T> inpaint_loss(const Value<T>& recon, const Value<T>& orig) {
    return mean_abs_diff(recon, orig);
}

/// Mean cross-entropy of rotation logits [B,4] against labels in {0..3}.
template <typename T>
Value<T> rotation_loss(const Value<T>& logits, const std::vector<int64_t>& labels) {
    return cross_entropy_rows(logits, std::make_shared<std::vector<int64_t>>(labels));
}

/// Paired-view InfoNCE over 2N embeddings. Row i's positive is its
/// augmentation partner (i + N mod 2N); the denominator runs over all
/// k != i. Similarity is the dot product of L2-normalized rows scaled by 1/t.
template <typename T>
Value<T> contrastive_loss(const Value<T>& embeds, T temperature) {
    require_rank(embeds.v(), 2, "contrastive embeddings");
    const int64_t rows = embeds.dims()[0];
    if (rows < 2 || rows % 2 != 0)
        throw ShapeError("contrastive_loss: need an even number (>= 2) of embeddings, got " +
                         std::to_string(rows));
    if (!(temperature > T(0))) throw NumericError("contrastive_loss: temperature must be > 0");
    const int64_t n = rows / 2;
    auto vn = l2_normalize_rows(embeds);
    auto sim = scale(matmul_nt(vn, vn), T(1) / temperature);
    Tensor<T> diag({rows, rows});
    for (int64_t i = 0; i < rows; ++i) diag[i * rows + i] = static_cast<T>(kMaskNeg);
    auto masked = add(sim, embeds.tape->constant(std::move(diag)));
    auto partners = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) (*partners)[static_cast<size_t>(i)] = (i + n) % rows;
    return cross_entropy_rows(masked, partners);
}

/// lambda1 * L_inpaint + lambda2 * L_contrast + lambda3 * L_rot.
template <typename T>
Value<T> total_loss(const Value<T>& li, const Value<T>& lc, const Value<T>& lr, T lambda1, T lambda2,
                    T lambda3) {
    if (lambda1 < T(0) || lambda2 < T(0) || lambda3 < T(0))
        throw NumericError("total_loss: weights must be >= 0");
    return add(add(scale(li, lambda1), scale(lc, lambda2)), scale(lr, lambda3));
}

}  // namespace swinvox
