#pragma once

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "swinvox/rng.hpp"
#include "swinvox/tensor.hpp"

namespace swinvox {

/// Dense multi-channel volume with voxel spacing in mm. Memory layout is
/// [C,H,W,D] row-major; spatial axes are named x (H), y (W), z (D).
struct Volume {
    Tensor<float> voxels;                      // [C,H,W,D]
    std::array<float, 3> spacing{1.f, 1.f, 1.f};  // mm per voxel along (H,W,D)

    Volume() = default;
    Volume(int64_t c, int64_t h, int64_t w, int64_t d) : voxels({c, h, w, d}) {}

    int64_t channels() const { return voxels.dims[0]; }
    int64_t extent(int axis) const { return voxels.dims[static_cast<size_t>(axis) + 1]; }
    int64_t voxel_count() const { return voxels.size(); }
};

/// Integer class map over the same grid as its image.
struct LabeledVolume {
    Volume image;
    Tensor<uint16_t> labels;  // [H,W,D]
};

// ---------------------------------------------------------------------------
// VOL1 container
//
// Little-endian layout:
//   magic "VOL1" | version u32 | channels u32 | H u32 | W u32 | D u32 |
//   spacing 3xf32 | dtype u8 (0 = f32 image, 1 = u16 labels) |
//   reserved 3x0 | payload, channel-major then z,y,x with x fastest.
// ---------------------------------------------------------------------------

constexpr uint32_t kVol1Version = 1;

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is, const std::string& path, const char* what) {
    unsigned char b[4];
    const auto offset = is.tellg();
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(path + ": truncated while reading " + what + " at byte offset " +
                          std::to_string(static_cast<long long>(offset)));
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is, const std::string& path, const char* what) {
    uint32_t bits = get_u32(is, path, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

struct Vol1Header {
    uint32_t channels = 0, h = 0, w = 0, d = 0;
    std::array<float, 3> spacing{1.f, 1.f, 1.f};
    uint8_t dtype = 0;
};

inline void write_vol1_header(std::ostream& os, const Vol1Header& hd) {
    os.write("VOL1", 4);
    put_u32(os, kVol1Version);
    put_u32(os, hd.channels);
    put_u32(os, hd.h);
    put_u32(os, hd.w);
    put_u32(os, hd.d);
    for (float s : hd.spacing) put_f32(os, s);
    const unsigned char tail[4] = {hd.dtype, 0, 0, 0};
    os.write(reinterpret_cast<const char*>(tail), 4);
}

inline Vol1Header read_vol1_header(std::istream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4))
        throw FormatError(path + ": truncated while reading magic at byte offset 0");
    if (std::memcmp(magic, "VOL1", 4) != 0)
        throw FormatError(path + ": bad magic '" + std::string(magic, 4) +
                          "' at byte offset 0, expected \"VOL1\"");
    const uint32_t version = get_u32(is, path, "version");
    if (version != kVol1Version)
        throw FormatError(path + ": unsupported version " + std::to_string(version) +
                          " at byte offset 4, expected " + std::to_string(kVol1Version));
    Vol1Header hd;
    hd.channels = get_u32(is, path, "channels");
    hd.h = get_u32(is, path, "H");
    hd.w = get_u32(is, path, "W");
    hd.d = get_u32(is, path, "D");
    if (hd.channels == 0 || hd.h == 0 || hd.w == 0 || hd.d == 0)
        throw FormatError(path + ": non-positive extents [" + std::to_string(hd.channels) + "," +
                          std::to_string(hd.h) + "," + std::to_string(hd.w) + "," +
                          std::to_string(hd.d) + "] at byte offset 8");
    for (auto& s : hd.spacing) s = get_f32(is, path, "spacing");
    unsigned char tail[4];
    if (!is.read(reinterpret_cast<char*>(tail), 4))
        throw FormatError(path + ": truncated while reading dtype at byte offset 32");
    hd.dtype = tail[0];
    if (hd.dtype > 1)
        throw FormatError(path + ": unknown dtype code " + std::to_string(int(hd.dtype)) +
                          " at byte offset 32");
    return hd;
}

}  // namespace detail

inline void write_volume(const std::string& path, const Volume& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(path + ": cannot open for writing");
    detail::Vol1Header hd;
    hd.channels = static_cast<uint32_t>(v.channels());
    hd.h = static_cast<uint32_t>(v.extent(0));
    hd.w = static_cast<uint32_t>(v.extent(1));
    hd.d = static_cast<uint32_t>(v.extent(2));
    hd.spacing = v.spacing;
    hd.dtype = 0;
    detail::write_vol1_header(os, hd);
    // payload order: c, then z, y, x with x fastest
    const int64_t h = hd.h, w = hd.w, d = hd.d;
    std::vector<unsigned char> row(static_cast<size_t>(h) * 4);
    for (int64_t c = 0; c < v.channels(); ++c)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < w; ++y) {
                for (int64_t x = 0; x < h; ++x) {
                    uint32_t bits;
                    const float val = v.voxels.at(c, x, y, z);
                    std::memcpy(&bits, &val, 4);
                    row[static_cast<size_t>(x) * 4 + 0] = static_cast<unsigned char>(bits);
                    row[static_cast<size_t>(x) * 4 + 1] = static_cast<unsigned char>(bits >> 8);
                    row[static_cast<size_t>(x) * 4 + 2] = static_cast<unsigned char>(bits >> 16);
                    row[static_cast<size_t>(x) * 4 + 3] = static_cast<unsigned char>(bits >> 24);
                }
                os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
            }
    if (!os) throw FormatError(path + ": write failed");
}

inline Volume read_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open");
    auto hd = detail::read_vol1_header(is, path);
    if (hd.dtype != 0)
        throw FormatError(path + ": expected image dtype 0, found " + std::to_string(int(hd.dtype)));
    Volume v(hd.channels, hd.h, hd.w, hd.d);
    v.spacing = hd.spacing;
    const int64_t h = hd.h, w = hd.w, d = hd.d;
    std::vector<unsigned char> row(static_cast<size_t>(h) * 4);
    for (int64_t c = 0; c < v.channels(); ++c)
        for (int64_t z = 0; z < d; ++z)
            for (int64_t y = 0; y < w; ++y) {
                const auto offset = is.tellg();
                if (!is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size())))
                    throw FormatError(path + ": truncated payload at byte offset " +
                                      std::to_string(static_cast<long long>(offset)));
                for (int64_t x = 0; x < h; ++x) {
                    uint32_t bits = static_cast<uint32_t>(row[static_cast<size_t>(x) * 4]) |
                                    (static_cast<uint32_t>(row[static_cast<size_t>(x) * 4 + 1]) << 8) |
                                    (static_cast<uint32_t>(row[static_cast<size_t>(x) * 4 + 2]) << 16) |
                                    (static_cast<uint32_t>(row[static_cast<size_t>(x) * 4 + 3]) << 24);
                    float val;
                    std::memcpy(&val, &bits, 4);
                    v.voxels.at(c, x, y, z) = val;
                }
            }
    return v;
}

inline void write_labels(const std::string& path, const Tensor<uint16_t>& labels,
                         std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
    require_rank(labels, 3, "label map");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(path + ": cannot open for writing");
    detail::Vol1Header hd;
    hd.channels = 1;
    hd.h = static_cast<uint32_t>(labels.dims[0]);
    hd.w = static_cast<uint32_t>(labels.dims[1]);
    hd.d = static_cast<uint32_t>(labels.dims[2]);
    hd.spacing = spacing;
    hd.dtype = 1;
    detail::write_vol1_header(os, hd);
    const int64_t h = hd.h, w = hd.w, d = hd.d;
    for (int64_t z = 0; z < d; ++z)
        for (int64_t y = 0; y < w; ++y)
            for (int64_t x = 0; x < h; ++x) {
                const uint16_t val = labels[(x * w + y) * d + z];
                const unsigned char b[2] = {static_cast<unsigned char>(val),
                                            static_cast<unsigned char>(val >> 8)};
                os.write(reinterpret_cast<const char*>(b), 2);
            }
    if (!os) throw FormatError(path + ": write failed");
}

inline Tensor<uint16_t> read_labels(const std::string& path, std::array<float, 3>* spacing = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open");
    auto hd = detail::read_vol1_header(is, path);
    if (hd.dtype != 1)
        throw FormatError(path + ": expected label dtype 1, found " + std::to_string(int(hd.dtype)));
    if (hd.channels != 1)
        throw FormatError(path + ": label maps must have one channel");
    Tensor<uint16_t> labels({hd.h, hd.w, hd.d});
    const int64_t h = hd.h, w = hd.w, d = hd.d;
    for (int64_t z = 0; z < d; ++z)
        for (int64_t y = 0; y < w; ++y)
            for (int64_t x = 0; x < h; ++x) {
                unsigned char b[2];
                const auto offset = is.tellg();
                if (!is.read(reinterpret_cast<char*>(b), 2))
                    throw FormatError(path + ": truncated payload at byte offset " +
                                      std::to_string(static_cast<long long>(offset)));
                labels[(x * w + y) * d + z] =
                    static_cast<uint16_t>(b[0] | (static_cast<uint16_t>(b[1]) << 8));
            }
    if (spacing) *spacing = hd.spacing;
    return labels;
}

// ---------------------------------------------------------------------------
// preprocessing / sampling
// ---------------------------------------------------------------------------

/// Clamps intensities to [lo, hi] and maps them affinely to [0, 1].
/// Not idempotent: a second application recompresses [0,1] data to
/// [(0-lo)/(hi-lo), (1-lo)/(hi-lo)].
inline Volume preprocess_ct(const Volume& v, float lo = -1000.f, float hi = 1000.f) {
    if (!(lo < hi)) throw NumericError("preprocess_ct: lo must be < hi");
    Volume out = v;
    const float inv = 1.0f / (hi - lo);
    for (auto& x : out.voxels.data) x = (std::min(std::max(x, lo), hi) - lo) * inv;
    return out;
}

namespace detail {

inline Volume crop_volume(const Volume& v, int64_t x0, int64_t y0, int64_t z0, int64_t size) {
    Volume out(v.channels(), size, size, size);
    out.spacing = v.spacing;
    for (int64_t c = 0; c < v.channels(); ++c)
        for (int64_t x = 0; x < size; ++x)
            for (int64_t y = 0; y < size; ++y)
                for (int64_t z = 0; z < size; ++z)
                    out.voxels.at(c, x, y, z) = v.voxels.at(c, x0 + x, y0 + y, z0 + z);
    return out;
}

}  // namespace detail

/// Uniformly random cubic crop, rejecting full-air candidates
/// (max voxel == 0 after normalization). Fails after 100 rejections.
inline Volume sample_subvolume(const Volume& v, int64_t size, Rng& rng) {
    for (int axis = 0; axis < 3; ++axis)
        if (size > v.extent(axis))
            throw ShapeError("sample_subvolume: size " + std::to_string(size) +
                             " exceeds extent " + std::to_string(v.extent(axis)));
    for (int attempt = 0; attempt < 100; ++attempt) {
        const int64_t x0 = rng.uniform_int(0, v.extent(0) - size);
        const int64_t y0 = rng.uniform_int(0, v.extent(1) - size);
        const int64_t z0 = rng.uniform_int(0, v.extent(2) - size);
        Volume crop = detail::crop_volume(v, x0, y0, z0, size);
        float mx = crop.voxels[0];
        for (float x : crop.voxels.data) mx = std::max(mx, x);
        if (mx > 0.0f) return crop;
    }
    throw DegenerateInputError("sample_subvolume: 100 consecutive full-air crops");
}

/// Joint image+label crop with the same air-rejection rule.
inline LabeledVolume sample_subvolume(const LabeledVolume& lv, int64_t size, Rng& rng) {
    const Volume& v = lv.image;
    for (int axis = 0; axis < 3; ++axis)
        if (size > v.extent(axis))
            throw ShapeError("sample_subvolume: size exceeds extent");
    for (int attempt = 0; attempt < 100; ++attempt) {
        const int64_t x0 = rng.uniform_int(0, v.extent(0) - size);
        const int64_t y0 = rng.uniform_int(0, v.extent(1) - size);
        const int64_t z0 = rng.uniform_int(0, v.extent(2) - size);
        Volume crop = detail::crop_volume(v, x0, y0, z0, size);
        float mx = crop.voxels[0];
        for (float x : crop.voxels.data) mx = std::max(mx, x);
        if (mx <= 0.0f) continue;
        LabeledVolume out;
        out.image = std::move(crop);
        out.labels = Tensor<uint16_t>({size, size, size});
        for (int64_t x = 0; x < size; ++x)
            for (int64_t y = 0; y < size; ++y)
                for (int64_t z = 0; z < size; ++z)
                    out.labels[(x * size + y) * size + z] =
                        lv.labels[((x0 + x) * v.extent(1) + (y0 + y)) * v.extent(2) + (z0 + z)];
        return out;
    }
    throw DegenerateInputError("sample_subvolume: 100 consecutive full-air crops");
}

}  // namespace swinvox
