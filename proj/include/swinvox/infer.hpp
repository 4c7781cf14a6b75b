#pragma once

#include <functional>

#include "swinvox/volume.hpp"

namespace swinvox {

/// Per-window model callback: [C, roi, roi, roi] voxels -> [n_classes, roi, roi, roi]
/// class probabilities.
using WindowModelFn = std::function<Tensor<float>(const Tensor<float>&)>;

/// Tiles the volume with roi-sized windows at stride roi*(1-overlap), border
/// windows shifted inward, accumulates the per-window probabilities with
/// uniform weights and divides by the coverage count. Volumes smaller than
/// the window are zero-padded around the centre and cropped on output.
inline Tensor<float> sliding_window_infer(const Volume& v, int64_t roi, double overlap,
                                          int64_t n_classes, const WindowModelFn& model) {
    if (roi < 1) throw ShapeError("sliding_window_infer: roi must be >= 1");
    if (!(overlap >= 0.0 && overlap < 1.0))
        throw ConfigError("sliding_window_infer: overlap must lie in [0, 1)");
    const int64_t C = v.channels(), H = v.extent(0), W = v.extent(1), D = v.extent(2);

    if (roi > H || roi > W || roi > D) {
        // single centred window over the zero-padded volume
        Volume padded(C, std::max(roi, H), std::max(roi, W), std::max(roi, D));
        padded.spacing = v.spacing;
        const int64_t ox = (padded.extent(0) - H) / 2, oy = (padded.extent(1) - W) / 2,
                      oz = (padded.extent(2) - D) / 2;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t x = 0; x < H; ++x)
                for (int64_t y = 0; y < W; ++y)
                    for (int64_t z = 0; z < D; ++z)
                        padded.voxels.at(c, ox + x, oy + y, oz + z) = v.voxels.at(c, x, y, z);
        Tensor<float> full = sliding_window_infer(padded, roi, overlap, n_classes, model);
        Tensor<float> out({n_classes, H, W, D});
        for (int64_t c = 0; c < n_classes; ++c)
            for (int64_t x = 0; x < H; ++x)
                for (int64_t y = 0; y < W; ++y)
                    for (int64_t z = 0; z < D; ++z)
                        out.at(c, x, y, z) = full.at(c, ox + x, oy + y, oz + z);
        return out;
    }

    auto positions = [&](int64_t extent) {
        std::vector<int64_t> pos;
        const int64_t stride =
            std::max<int64_t>(1, static_cast<int64_t>(std::llround(static_cast<double>(roi) * (1.0 - overlap))));
        for (int64_t p = 0;; p += stride) {
            if (p + roi >= extent) {
                pos.push_back(extent - roi);  // border window shifted inward
                break;
            }
            pos.push_back(p);
        }
        return pos;
    };
    const auto px = positions(H), py = positions(W), pz = positions(D);

    Tensor<float> acc({n_classes, H, W, D});
    Tensor<float> coverage({1, H, W, D});
    Tensor<float> patch({C, roi, roi, roi});
    for (int64_t x0 : px)
        for (int64_t y0 : py)
            for (int64_t z0 : pz) {
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t x = 0; x < roi; ++x)
                        for (int64_t y = 0; y < roi; ++y)
                            for (int64_t z = 0; z < roi; ++z)
                                patch.at(c, x, y, z) = v.voxels.at(c, x0 + x, y0 + y, z0 + z);
                Tensor<float> probs = model(patch);
                require_shape(probs, {n_classes, roi, roi, roi}, "sliding window model output");
                for (int64_t c = 0; c < n_classes; ++c)
                    for (int64_t x = 0; x < roi; ++x)
                        for (int64_t y = 0; y < roi; ++y)
                            for (int64_t z = 0; z < roi; ++z)
                                acc.at(c, x0 + x, y0 + y, z0 + z) += probs.at(c, x, y, z);
                for (int64_t x = 0; x < roi; ++x)
                    for (int64_t y = 0; y < roi; ++y)
                        for (int64_t z = 0; z < roi; ++z) coverage.at(0, x0 + x, y0 + y, z0 + z) += 1.0f;
            }
    for (int64_t i = 0; i < coverage.size(); ++i)
        if (coverage[i] < 1.0f) throw NumericError("sliding_window_infer: uncovered voxel");
    for (int64_t c = 0; c < n_classes; ++c)
        for (int64_t i = 0; i < H * W * D; ++i) acc[c * H * W * D + i] /= coverage[i];
    return acc;
}

/// Per-voxel argmax of a [C,H,W,D] probability (or logit) field.
inline Tensor<uint16_t> argmax_channel(const Tensor<float>& probs) {
    require_rank(probs, 4, "argmax_channel");
    const int64_t c = probs.dims[0], n = probs.size() / c;
    Tensor<uint16_t> out({probs.dims[1], probs.dims[2], probs.dims[3]});
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        for (int64_t ch = 1; ch < c; ++ch)
            if (probs[ch * n + i] > probs[best * n + i]) best = ch;
        out[i] = static_cast<uint16_t>(best);
    }
    return out;
}

}  // namespace swinvox
