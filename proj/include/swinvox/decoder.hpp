#pragma once

#include "swinvox/swin.hpp"

namespace swinvox {

constexpr double kDecoderSlope = 0.01;  // leaky rectifier slope

struct ResBlockParamIdx {
    int c1_w = -1, c1_b = -1, n1_g = -1, n1_b = -1;
    int c2_w = -1, c2_b = -1, n2_g = -1, n2_b = -1;
    int skip_w = -1, skip_b = -1;  // 1x1x1 projection when widths differ
};

struct UpBlockParamIdx {
    int up_w = -1, up_b = -1;  // transposed conv, kernel = stride = 2
    ResBlockParamIdx res;
};

struct DecoderParamIdx {
    std::vector<ResBlockParamIdx> enc;  // per-scale skip processing, scales 0..4
    ResBlockParamIdx bottleneck;
    std::vector<UpBlockParamIdx> ups;   // ups[i] lifts scale i+1 -> i
    int head_w = -1, head_b = -1;       // final 1x1x1 conv
};

namespace detail {

// He-style fan-in init for convolution kernels, truncated at 2 sigma
template <typename T>
int add_conv(ParamStore<T>& store, const std::string& name, Shape dims, Rng& rng) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < dims.size(); ++i) fan_in *= dims[i];
    return store.add_trunc_normal(name, dims, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

}  // namespace detail

template <typename T>
ResBlockParamIdx build_res_block(ParamStore<T>& store, const std::string& prefix, int64_t c_in,
                                 int64_t c_out, Rng& rng) {
    ResBlockParamIdx r;
    r.c1_w = detail::add_conv(store, prefix + "c1.w", {c_out, c_in, 3, 3, 3}, rng);
    r.c1_b = store.add_zeros(prefix + "c1.b", {c_out});
    r.n1_g = store.add_ones(prefix + "n1.g", {c_out});
    r.n1_b = store.add_zeros(prefix + "n1.b", {c_out});
    r.c2_w = detail::add_conv(store, prefix + "c2.w", {c_out, c_out, 3, 3, 3}, rng);
    r.c2_b = store.add_zeros(prefix + "c2.b", {c_out});
    r.n2_g = store.add_ones(prefix + "n2.g", {c_out});
    r.n2_b = store.add_zeros(prefix + "n2.b", {c_out});
    if (c_in != c_out) {
        r.skip_w = detail::add_conv(store, prefix + "skip.w", {c_out, c_in, 1, 1, 1}, rng);
        r.skip_b = store.add_zeros(prefix + "skip.b", {c_out});
    }
    return r;
}

/// Two post-normalized 3x3x3 convolutions with instance norm:
///   y = act(IN(conv(act(IN(conv(x)))))) + skip(x)
/// where skip is the identity for matching widths, else a 1x1x1 conv.
template <typename T>
Value<T> residual_block(const Value<T>& x, const ResBlockParamIdx& r,
                        const std::vector<Value<T>>& bound, T eps) {
    auto y = conv3d(x, bound[r.c1_w], &bound[r.c1_b], 1, 1);
    y = instance_norm(y, bound[r.n1_g], bound[r.n1_b], eps);
    y = leaky_relu(y, static_cast<T>(kDecoderSlope));
    y = conv3d(y, bound[r.c2_w], &bound[r.c2_b], 1, 1);
    y = instance_norm(y, bound[r.n2_g], bound[r.n2_b], eps);
    y = leaky_relu(y, static_cast<T>(kDecoderSlope));
    auto skip = r.skip_w >= 0 ? conv3d(x, bound[r.skip_w], &bound[r.skip_b], 1, 0) : x;
    return add(y, skip);
}

/// Doubles the spatial extents with a kernel-2 stride-2 transposed conv,
/// concatenates the skip features and applies a residual block. When the
/// encoder ceil-padded an odd grid, the upsampled map is cropped back down to
/// the skip extents.
template <typename T>
Value<T> upsample_concat(const Value<T>& x, const Value<T>& skip, const UpBlockParamIdx& u,
                         const std::vector<Value<T>>& bound, T eps) {
    auto up = conv3d_transpose(x, bound[u.up_w], &bound[u.up_b], 2, 0);
    const auto& ud = up.dims();
    const auto& sd = skip.dims();
    if (ud[1] < sd[1] || ud[2] < sd[2] || ud[3] < sd[3])
        throw ShapeError("upsample_concat: skip extents " + shape_str(sd) +
                         " exceed upsampled extents " + shape_str(ud));
    if (ud[1] > sd[1] || ud[2] > sd[2] || ud[3] > sd[3]) up = crop_spatial(up, sd[1], sd[2], sd[3]);
    auto cat = concat_channels(up, skip);
    return residual_block(cat, u.res, bound, eps);
}

template <typename T>
DecoderParamIdx build_decoder_params(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    DecoderParamIdx dec;
    const int64_t c = cfg.embed_c;
    // widths at scales 0..5: [C, C, 2C, 4C, 8C, 16C]
    const std::vector<int64_t> width{c, c, 2 * c, 4 * c, 8 * c, 16 * c};
    const std::vector<int64_t> in_width{cfg.in_channels, c, 2 * c, 4 * c, 8 * c};
    for (int i = 0; i < 5; ++i)
        dec.enc.push_back(build_res_block(store, "dec.enc" + std::to_string(i) + ".",
                                          in_width[static_cast<size_t>(i)],
                                          width[static_cast<size_t>(i)], rng));
    dec.bottleneck = build_res_block(store, "dec.bottleneck.", width[5], width[5], rng);
    for (int i = 0; i < 5; ++i) {
        UpBlockParamIdx u;
        const std::string prefix = "dec.up" + std::to_string(i) + ".";
        // transposed conv halves the channel width to match the skip
        u.up_w = detail::add_conv(store, prefix + "up.w",
                                  {width[static_cast<size_t>(i + 1)], width[static_cast<size_t>(i)], 2, 2, 2},
                                  rng);
        u.up_b = store.add_zeros(prefix + "up.b", {width[static_cast<size_t>(i)]});
        u.res = build_res_block(store, prefix + "res.", 2 * width[static_cast<size_t>(i)],
                                width[static_cast<size_t>(i)], rng);
        dec.ups.push_back(u);
    }
    dec.head_w = detail::add_conv(store, "dec.head.w", {cfg.n_classes, c, 1, 1, 1}, rng);
    dec.head_b = store.add_zeros("dec.head.b", {cfg.n_classes});
    return dec;
}

/// U-shaped ascent: the bottleneck climbs through five upsample/concat levels
/// against the residual-processed encoder features; a final 1x1x1 conv emits
/// per-voxel class logits at input resolution.
template <typename T>
Value<T> decoder_forward(const EncoderFeatures<T>& feats, const ModelConfig& cfg,
                         const DecoderParamIdx& dec, const std::vector<Value<T>>& bound) {
    const T eps = static_cast<T>(cfg.norm_eps);
    std::vector<Value<T>> skips;
    for (int i = 0; i < 5; ++i)
        skips.push_back(residual_block(feats.f[static_cast<size_t>(i)], dec.enc[static_cast<size_t>(i)],
                                       bound, eps));
    auto x = residual_block(feats.f[5], dec.bottleneck, bound, eps);
    for (int i = 4; i >= 0; --i)
        x = upsample_concat(x, skips[static_cast<size_t>(i)], dec.ups[static_cast<size_t>(i)], bound, eps);
    return conv3d(x, bound[dec.head_w], &bound[dec.head_b], 1, 0);
}

/// Channel-axis softmax over logits: per-voxel class probabilities.
template <typename T>
Value<T> segmentation_probs(const Value<T>& logits) {
    return softmax(logits, 0);
}

}  // namespace swinvox
