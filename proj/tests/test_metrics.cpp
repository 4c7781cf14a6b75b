#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "swinvox/metrics.hpp"
#include "swinvox/rng.hpp"

using namespace swinvox;

namespace {

BinaryMask make_mask(Shape dims, std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
    BinaryMask m;
    m.bits = Tensor<uint8_t>(std::move(dims));
    m.spacing = spacing;
    return m;
}

BinaryMask random_mask(int64_t h, int64_t w, int64_t d, Rng& rng, double density,
                       std::array<float, 3> spacing) {
    BinaryMask m = make_mask({h, w, d}, spacing);
    for (int64_t i = 0; i < m.bits.size(); ++i) m.bits[i] = rng.uniform() < density ? 1 : 0;
    return m;
}

bool empty_mask(const BinaryMask& m) {
    for (auto b : m.bits.data)
        if (b) return false;
    return true;
}

// O(n^2) nearest-neighbour oracle: brute-force surface extraction and
// pairwise physical distances, straight from the definitions.
struct BruteForce {
    static std::vector<std::array<double, 3>> surface(const BinaryMask& m) {
        const int64_t H = m.extent(0), W = m.extent(1), D = m.extent(2);
        std::vector<std::array<double, 3>> pts;
        for (int64_t x = 0; x < H; ++x)
            for (int64_t y = 0; y < W; ++y)
                for (int64_t z = 0; z < D; ++z) {
                    if (!m.bits[(x * W + y) * D + z]) continue;
                    bool boundary = false;
                    const int64_t nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                              {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
                    for (auto& n : nb) {
                        if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= H || n[1] >= W || n[2] >= D ||
                            !m.bits[(n[0] * W + n[1]) * D + n[2]]) {
                            boundary = true;
                            break;
                        }
                    }
                    if (boundary)
                        pts.push_back({x * double(m.spacing[0]), y * double(m.spacing[1]),
                                       z * double(m.spacing[2])});
                }
        return pts;
    }

    static std::vector<double> directed(const std::vector<std::array<double, 3>>& from,
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
    }

    static double percentile(std::vector<double> v, double q) {
        std::sort(v.begin(), v.end());
        if (v.size() == 1) return v[0];
        const double rank = q * double(v.size() - 1);
        const size_t lo = static_cast<size_t>(rank);
        const size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (rank - double(lo)) * (v[hi] - v[lo]);
    }

    static double hd95(const BinaryMask& a, const BinaryMask& b) {
        auto sa = surface(a), sb = surface(b);
        auto d1 = directed(sa, sb), d2 = directed(sb, sa);
        d1.insert(d1.end(), d2.begin(), d2.end());
        return percentile(std::move(d1), 0.95);
    }

    static double nsd(const BinaryMask& a, const BinaryMask& b, double tol) {
        auto sa = surface(a), sb = surface(b);
        auto d1 = directed(sa, sb), d2 = directed(sb, sa);
        int64_t hits = 0;
        for (double d : d1) hits += d <= tol;
        for (double d : d2) hits += d <= tol;
        return double(hits) / double(d1.size() + d2.size());
    }

    static double dice(const BinaryMask& a, const BinaryMask& b) {
        int64_t inter = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < a.bits.size(); ++i) {
            na += a.bits[i] != 0;
            nb += b.bits[i] != 0;
            inter += a.bits[i] && b.bits[i];
        }
        return na + nb == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
    }
};

}  // namespace

TEST_CASE("dice hand cases") {
    SECTION("identical nonempty masks score 1") {
        auto a = make_mask({3, 3, 3});
        a.bits[4] = a.bits[13] = 1;
        REQUIRE(dice(a, a) == 1.0);
    }
    SECTION("disjoint nonempty masks score 0") {
        auto a = make_mask({3, 3, 3}), b = make_mask({3, 3, 3});
        a.bits[0] = 1;
        b.bits[26] = 1;
        REQUIRE(dice(a, b) == 0.0);
    }
    SECTION("|Y|=4, |Y^|=4, overlap 2 scores 0.5") {
        auto a = make_mask({2, 2, 2}), b = make_mask({2, 2, 2});
        for (int i : {0, 1, 2, 3}) a.bits[i] = 1;
        for (int i : {2, 3, 4, 5}) b.bits[i] = 1;
        REQUIRE(dice(a, b) == Catch::Approx(0.5).margin(1e-12));
    }
    SECTION("both-empty convention is 1, one-empty is 0") {
        auto a = make_mask({2, 2, 2}), b = make_mask({2, 2, 2});
        REQUIRE(dice(a, b) == 1.0);
        b.bits[0] = 1;
        REQUIRE(dice(a, b) == 0.0);
    }
    SECTION("symmetric, exactly") {
        Rng rng(1);
        auto a = random_mask(4, 4, 4, rng, 0.4, {1, 1, 1});
        auto b = random_mask(4, 4, 4, rng, 0.4, {1, 1, 1});
        REQUIRE(dice(a, b) == dice(b, a));
    }
    SECTION("extent mismatch throws") {
        auto a = make_mask({2, 2, 2}), b = make_mask({2, 2, 3});
        REQUIRE_THROWS_AS(dice(a, b), ShapeError);
    }
}

TEST_CASE("surface_voxels") {
    SECTION("single voxel is its own surface") {
        auto m = make_mask({3, 3, 3});
        m.bits[(1 * 3 + 1) * 3 + 1] = 1;
        auto s = surface_voxels(m);
        REQUIRE(s.size() == 1);
        REQUIRE(s[0] == std::array<int64_t, 3>{1, 1, 1});
    }
    SECTION("solid 3^3 cube: 26 shell voxels, centre interior") {
        auto m = make_mask({5, 5, 5});
        for (int64_t x = 1; x <= 3; ++x)
            for (int64_t y = 1; y <= 3; ++y)
                for (int64_t z = 1; z <= 3; ++z) m.bits[(x * 5 + y) * 5 + z] = 1;
        REQUIRE(surface_voxels(m).size() == 26);
    }
    SECTION("full-volume mask keeps only the boundary shell") {
        auto m = make_mask({4, 4, 4});
        std::fill(m.bits.data.begin(), m.bits.data.end(), 1);
        REQUIRE(surface_voxels(m).size() == 64 - 8);  // all but the 2^3 interior
    }
    SECTION("empty mask is a degenerate input") {
        auto m = make_mask({3, 3, 3});
        REQUIRE_THROWS_AS(surface_voxels(m), DegenerateInputError);
    }
}

TEST_CASE("hd95 hand cases") {
    SECTION("identical masks score 0") {
        auto m = make_mask({4, 4, 4});
        m.bits[0] = m.bits[21] = m.bits[38] = 1;
        REQUIRE(hd95(m, m) == 0.0);
    }
    SECTION("single voxels 3 apart at unit spacing score 3.0") {
        auto a = make_mask({5, 1, 1}), b = make_mask({5, 1, 1});
        a.bits[0] = 1;
        b.bits[3] = 1;
        REQUIRE(hd95(a, b) == Catch::Approx(3.0).margin(1e-12));
    }
    SECTION("doubling the spacing doubles the distance") {
        auto a = make_mask({5, 3, 3}), b = make_mask({5, 3, 3});
        a.bits[(0 * 3 + 1) * 3 + 1] = 1;
        b.bits[(3 * 3 + 1) * 3 + 1] = 1;
        const double base = hd95(a, b);
        a.spacing = b.spacing = {2.f, 2.f, 2.f};
        REQUIRE(hd95(a, b) == Catch::Approx(2.0 * base).margin(1e-9));
    }
    SECTION("symmetric under the concatenated-percentile definition") {
        Rng rng(2);
        auto a = random_mask(5, 5, 5, rng, 0.3, {1, 1, 1});
        auto b = random_mask(5, 5, 5, rng, 0.3, {1, 1, 1});
        if (!empty_mask(a) && !empty_mask(b)) REQUIRE(hd95(a, b) == hd95(b, a));
    }
    SECTION("empty mask is an error") {
        auto a = make_mask({3, 3, 3}), b = make_mask({3, 3, 3});
        a.bits[0] = 1;
        REQUIRE_THROWS_AS(hd95(a, b), DegenerateInputError);
    }
}

TEST_CASE("nsd hand cases") {
    SECTION("identical masks score 1 at any tolerance") {
        auto m = make_mask({4, 4, 4});
        m.bits[21] = m.bits[22] = 1;
        REQUIRE(nsd(m, m, 0.0) == 1.0);
        REQUIRE(nsd(m, m, 5.0) == 1.0);
    }
    SECTION("zero tolerance on disjoint surfaces scores 0") {
        auto a = make_mask({4, 1, 1}), b = make_mask({4, 1, 1});
        a.bits[0] = 1;
        b.bits[2] = 1;
        REQUIRE(nsd(a, b, 0.0) == 0.0);
    }
    SECTION("two parallel 4-voxel lines 1 mm apart, tol 1 -> 1.0") {
        auto a = make_mask({1, 4, 2}), b = make_mask({1, 4, 2});
        for (int64_t y = 0; y < 4; ++y) {
            a.bits[y * 2 + 0] = 1;  // line at z=0
            b.bits[y * 2 + 1] = 1;  // line at z=1
        }
        REQUIRE(nsd(a, b, 1.0) == 1.0);
    }
    SECTION("monotone non-decreasing in the tolerance") {
        Rng rng(3);
        auto a = random_mask(6, 6, 6, rng, 0.25, {1, 1.5f, 2});
        auto b = random_mask(6, 6, 6, rng, 0.25, {1, 1.5f, 2});
        double prev = 0.0;
        for (double tol : {0.0, 0.5, 1.0, 2.0, 4.0, 10.0}) {
            double v = nsd(a, b, tol);
            REQUIRE(v >= prev);
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
            prev = v;
        }
    }
}

TEST_CASE("metrics match the O(n^2) brute-force oracle on random masks") {
    Rng rng(4);
    int checked = 0;
    while (checked < 100) {
        const int64_t h = rng.uniform_int(2, 8), w = rng.uniform_int(2, 8), d = rng.uniform_int(2, 8);
        std::array<float, 3> spacing{static_cast<float>(rng.uniform(0.5, 2.5)),
                                     static_cast<float>(rng.uniform(0.5, 2.5)),
                                     static_cast<float>(rng.uniform(0.5, 2.5))};
        auto a = random_mask(h, w, d, rng, rng.uniform(0.1, 0.7), spacing);
        auto b = random_mask(h, w, d, rng, rng.uniform(0.1, 0.7), spacing);
        REQUIRE(dice(a, b) == Catch::Approx(BruteForce::dice(a, b)).margin(1e-6));
        if (empty_mask(a) || empty_mask(b)) continue;
        REQUIRE(hd95(a, b) == Catch::Approx(BruteForce::hd95(a, b)).margin(1e-6));
        const double tol = rng.uniform(0.0, 3.0);
        REQUIRE(nsd(a, b, tol) == Catch::Approx(BruteForce::nsd(a, b, tol)).margin(1e-6));
        ++checked;
    }
}

TEST_CASE("report line format") {
    std::ostringstream os;
    write_report_line(os, "case07", 2, "dice", 0.9174325);
    write_report_line(os, "case07", 2, "hd95", std::numeric_limits<double>::quiet_NaN());
    REQUIRE(os.str() == "case07\t2\tdice\t0.917432\ncase07\t2\thd95\tnan\n");
}

TEST_CASE("class_mask extraction") {
    Tensor<uint16_t> labels({2, 2, 2});
    labels[0] = 1;
    labels[5] = 2;
    labels[7] = 1;
    auto m1 = class_mask(labels, 1);
    REQUIRE(m1.bits[0] == 1);
    REQUIRE(m1.bits[5] == 0);
    REQUIRE(m1.bits[7] == 1);
    auto m2 = class_mask(labels, 2);
    REQUIRE(m2.bits[5] == 1);
}
