#pragma once

#include "swinvox/volume.hpp"

namespace swinvox {

/// Synthetic labeled volume: noisy background (0.1 + N(0, 0.02), clipped to
/// [0,1]) plus axis-aligned ellipsoids with class intensity bands
/// 0.2 + 0.15*c jittered per shape so neighbouring bands overlap slightly.
/// Later shapes overwrite earlier ones in both image and labels. Semi-axis
/// ranges differ per axis, making the phantoms orientation-asymmetric (the
/// in-plane rotation class of a rotated crop is identifiable).
/// Fully determined by (seed, extents, n_shapes, n_classes).
inline LabeledVolume gen_phantom(uint64_t seed, std::array<int64_t, 3> extents, int64_t n_shapes,
                                 int64_t n_classes) {
    if (n_shapes < 1) throw ConfigError("gen_phantom: n_shapes must be >= 1");
    if (n_classes < 2) throw ConfigError("gen_phantom: n_classes must be >= 2");
    for (int64_t e : extents)
        if (e < 16) throw ConfigError("gen_phantom: extents must be >= 16 per axis");
    Rng rng(seed);
    const int64_t H = extents[0], W = extents[1], D = extents[2];

    LabeledVolume out;
    out.image = Volume(1, H, W, D);
    out.labels = Tensor<uint16_t>({H, W, D});

    // one noise draw per voxel, reused by whichever shape lands on it
    std::vector<float> noise(static_cast<size_t>(H * W * D));
    for (auto& n : noise) n = static_cast<float>(0.02 * rng.normal());

    auto clip01 = [](float v) { return std::min(1.0f, std::max(0.0f, v)); };
    for (int64_t x = 0; x < H; ++x)
        for (int64_t y = 0; y < W; ++y)
            for (int64_t z = 0; z < D; ++z)
                out.image.voxels.at(0, x, y, z) =
                    clip01(0.1f + noise[static_cast<size_t>((x * W + y) * D + z)]);

    for (int64_t i = 0; i < n_shapes; ++i) {
        const int64_t cls = 1 + (i % (n_classes - 1));
        const double cx = rng.uniform(0.2, 0.8) * static_cast<double>(H);
        const double cy = rng.uniform(0.2, 0.8) * static_cast<double>(W);
        const double cz = rng.uniform(0.2, 0.8) * static_cast<double>(D);
        // anisotropic semi-axes: slim along x, wide along y, medium along z
        const double rx = rng.uniform(0.08, 0.16) * static_cast<double>(H);
        const double ry = rng.uniform(0.18, 0.30) * static_cast<double>(W);
        const double rz = rng.uniform(0.12, 0.22) * static_cast<double>(D);
        const float intensity =
            static_cast<float>(0.2 + 0.15 * static_cast<double>(cls) + rng.uniform(-0.08, 0.08));
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(cx - rx) - 1);
        const int64_t x1 = std::min<int64_t>(H - 1, static_cast<int64_t>(cx + rx) + 1);
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(cy - ry) - 1);
        const int64_t y1 = std::min<int64_t>(W - 1, static_cast<int64_t>(cy + ry) + 1);
        const int64_t z0 = std::max<int64_t>(0, static_cast<int64_t>(cz - rz) - 1);
        const int64_t z1 = std::min<int64_t>(D - 1, static_cast<int64_t>(cz + rz) + 1);
        for (int64_t x = x0; x <= x1; ++x)
            for (int64_t y = y0; y <= y1; ++y)
                for (int64_t z = z0; z <= z1; ++z) {
                    const double dx = (static_cast<double>(x) - cx) / rx;
                    const double dy = (static_cast<double>(y) - cy) / ry;
                    const double dz = (static_cast<double>(z) - cz) / rz;
                    if (dx * dx + dy * dy + dz * dz <= 1.0) {
                        out.image.voxels.at(0, x, y, z) =
                            clip01(intensity + noise[static_cast<size_t>((x * W + y) * D + z)]);
                        out.labels[(x * W + y) * D + z] = static_cast<uint16_t>(cls);
                    }
                }
    }
    return out;
}

}  // namespace swinvox
