#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <string>
#include <vector>

#include "swinvox/tensor.hpp"

namespace swinvox {

/// Binary foreground mask over a voxel grid with physical spacing (mm).
struct BinaryMask {
    Tensor<uint8_t> bits;              // [H,W,D], nonzero = foreground
    std::array<float, 3> spacing{1.f, 1.f, 1.f};

    int64_t extent(int axis) const { return bits.dims[static_cast<size_t>(axis)]; }
};

inline void require_same_extents(const BinaryMask& a, const BinaryMask& b, const char* what) {
    if (a.bits.dims != b.bits.dims)
        throw ShapeError(std::string(what) + ": extents " + shape_str(a.bits.dims) + " vs " +
                         shape_str(b.bits.dims));
}

/// Overlap coefficient 2|Y ∩ Y^| / (|Y| + |Y^|). Both-empty pairs score 1,
/// one-empty pairs 0.
inline double dice(const BinaryMask& y, const BinaryMask& yhat) {
    require_same_extents(y, yhat, "dice");
    int64_t inter = 0, a = 0, b = 0;
    for (int64_t i = 0; i < y.bits.size(); ++i) {
        const bool p = y.bits[i] != 0, q = yhat.bits[i] != 0;
        a += p;
        b += q;
        inter += p && q;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

/// Foreground voxels with at least one six-connected background (or
/// out-of-bounds) neighbour, as integer grid coordinates.
inline std::vector<std::array<int64_t, 3>> surface_voxels(const BinaryMask& m) {
    const int64_t H = m.extent(0), W = m.extent(1), D = m.extent(2);
    auto fg = [&](int64_t x, int64_t y, int64_t z) {
        if (x < 0 || y < 0 || z < 0 || x >= H || y >= W || z >= D) return false;
        return m.bits[(x * W + y) * D + z] != 0;
    };
    std::vector<std::array<int64_t, 3>> out;
    for (int64_t x = 0; x < H; ++x)
        for (int64_t y = 0; y < W; ++y)
            for (int64_t z = 0; z < D; ++z) {
                if (!fg(x, y, z)) continue;
                if (!fg(x - 1, y, z) || !fg(x + 1, y, z) || !fg(x, y - 1, z) || !fg(x, y + 1, z) ||
                    !fg(x, y, z - 1) || !fg(x, y, z + 1))
                    out.push_back({x, y, z});
            }
    if (out.empty()) throw DegenerateInputError("surface_voxels: empty mask has no surface");
    return out;
}

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared-distance transform (lower envelope of parabolas) with physical
// sample positions x_i = i * step. Sources with f == inf carry no parabola.
inline void edt_1d(const double* f, double* out, int64_t n, double step) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    std::vector<double> z(static_cast<size_t>(n) + 1);
    int64_t k = -1;
    for (int64_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double qs = static_cast<double>(q) * step;
        double s = 0;
        while (k >= 0) {
            const double vs = static_cast<double>(v[static_cast<size_t>(k)]) * step;
            s = ((f[q] + qs * qs) - (f[v[static_cast<size_t>(k)]] + vs * vs)) / (2 * qs - 2 * vs);
            if (s <= z[static_cast<size_t>(k)])
                --k;
            else
                break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
        } else {
            ++k;
            v[static_cast<size_t>(k)] = q;
            z[static_cast<size_t>(k)] = s;
        }
        z[static_cast<size_t>(k) + 1] = kInf;
    }
    if (k < 0) {  // no finite source in this line
        for (int64_t q = 0; q < n; ++q) out[q] = kInf;
        return;
    }
    int64_t j = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double qs = static_cast<double>(q) * step;
        while (z[static_cast<size_t>(j) + 1] < qs) ++j;
        const double vs = static_cast<double>(v[static_cast<size_t>(j)]) * step;
        out[q] = (qs - vs) * (qs - vs) + f[v[static_cast<size_t>(j)]];
    }
}

// Exact anisotropic squared EDT seeded at the surface voxels of `m`.
inline std::vector<double> surface_sq_edt(const BinaryMask& m,
                                          const std::vector<std::array<int64_t, 3>>& surface) {
    const int64_t H = m.extent(0), W = m.extent(1), D = m.extent(2);
    std::vector<double> dist(static_cast<size_t>(H * W * D), kInf);
    for (const auto& p : surface) dist[static_cast<size_t>((p[0] * W + p[1]) * D + p[2])] = 0.0;
    std::vector<double> buf_in(static_cast<size_t>(std::max({H, W, D})));
    std::vector<double> buf_out(buf_in.size());
    // pass along x (stride W*D)
    for (int64_t y = 0; y < W; ++y)
        for (int64_t z = 0; z < D; ++z) {
            for (int64_t x = 0; x < H; ++x) buf_in[static_cast<size_t>(x)] = dist[static_cast<size_t>((x * W + y) * D + z)];
            edt_1d(buf_in.data(), buf_out.data(), H, m.spacing[0]);
            for (int64_t x = 0; x < H; ++x) dist[static_cast<size_t>((x * W + y) * D + z)] = buf_out[static_cast<size_t>(x)];
        }
    // pass along y (stride D)
    for (int64_t x = 0; x < H; ++x)
        for (int64_t z = 0; z < D; ++z) {
            for (int64_t y = 0; y < W; ++y) buf_in[static_cast<size_t>(y)] = dist[static_cast<size_t>((x * W + y) * D + z)];
            edt_1d(buf_in.data(), buf_out.data(), W, m.spacing[1]);
            for (int64_t y = 0; y < W; ++y) dist[static_cast<size_t>((x * W + y) * D + z)] = buf_out[static_cast<size_t>(y)];
        }
    // pass along z (stride 1)
    for (int64_t x = 0; x < H; ++x)
        for (int64_t y = 0; y < W; ++y) {
            for (int64_t z = 0; z < D; ++z) buf_in[static_cast<size_t>(z)] = dist[static_cast<size_t>((x * W + y) * D + z)];
            edt_1d(buf_in.data(), buf_out.data(), D, m.spacing[2]);
            for (int64_t z = 0; z < D; ++z) dist[static_cast<size_t>((x * W + y) * D + z)] = buf_out[static_cast<size_t>(z)];
        }
    return dist;
}

// Directed surface distances: for each surface voxel of `from`, the Euclidean
// distance (mm) to the nearest surface voxel of `to`.
inline std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to) {
    auto sf = surface_voxels(from);
    auto st = surface_voxels(to);
    auto edt = surface_sq_edt(to, st);
    const int64_t W = from.extent(1), D = from.extent(2);
    std::vector<double> out;
    out.reserve(sf.size());
    for (const auto& p : sf)
        out.push_back(std::sqrt(edt[static_cast<size_t>((p[0] * W + p[1]) * D + p[2])]));
    return out;
}

inline double percentile_linear(std::vector<double> values, double q) {
    std::sort(values.begin(), values.end());
    const int64_t n = static_cast<int64_t>(values.size());
    if (n == 1) return values[0];
    const double rank = q * static_cast<double>(n - 1);
    const int64_t lo = static_cast<int64_t>(rank);
    const int64_t hi = std::min(lo + 1, n - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[static_cast<size_t>(lo)] +
           frac * (values[static_cast<size_t>(hi)] - values[static_cast<size_t>(lo)]);
}

}  // namespace detail

/// 95th percentile (linear interpolation) of the concatenated bidirectional
/// nearest-surface distance multisets, in mm.
inline double hd95(const BinaryMask& y, const BinaryMask& yhat) {
    require_same_extents(y, yhat, "hd95");
    auto d1 = detail::directed_surface_distances(y, yhat);
    auto d2 = detail::directed_surface_distances(yhat, y);
    d1.insert(d1.end(), d2.begin(), d2.end());
    return detail::percentile_linear(std::move(d1), 0.95);
}

/// Normalized surface distance: the fraction of surface points of either
/// mask lying within `tol` mm of the other mask's surface.
inline double nsd(const BinaryMask& y, const BinaryMask& yhat, double tol) {
    require_same_extents(y, yhat, "nsd");
    if (tol < 0) throw NumericError("nsd: tolerance must be >= 0");
    auto d1 = detail::directed_surface_distances(y, yhat);
    auto d2 = detail::directed_surface_distances(yhat, y);
    int64_t hits = 0;
    for (double d : d1) hits += d <= tol;
    for (double d : d2) hits += d <= tol;
    return static_cast<double>(hits) / static_cast<double>(d1.size() + d2.size());
}

/// One metrics report line: case, class, metric, value (tab-separated,
/// 6 decimals; non-finite values print as nan).
inline void write_report_line(std::ostream& os, const std::string& case_id, int64_t cls,
                              const std::string& metric, double value) {
    os << case_id << '\t' << cls << '\t' << metric << '\t';
    if (std::isfinite(value))
        os << std::fixed << std::setprecision(6) << value;
    else
        os << "nan";
    os << '\n';
    os.unsetf(std::ios_base::fixed);
}

/// Extracts the binary mask of one class from an integer label map.
inline BinaryMask class_mask(const Tensor<uint16_t>& labels, uint16_t cls,
                             std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
    BinaryMask m;
    m.bits = Tensor<uint8_t>(labels.dims);
    m.spacing = spacing;
    for (int64_t i = 0; i < labels.size(); ++i) m.bits[i] = labels[i] == cls ? 1 : 0;
    return m;
}

}  // namespace swinvox
