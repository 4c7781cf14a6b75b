#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "swinvox/ops.hpp"
#include "swinvox/rng.hpp"

namespace swinvox {

/// Central-difference gradient verification, always evaluated in 64-bit.
///
/// `f` receives a tape plus one leaf Value per input tensor and must return a
/// scalar Value built on that tape. Returns the maximum over checked
/// coordinates of |analytic - central| / max(1, |central|).
///
/// `max_coords_per_input` bounds the probed coordinates per input tensor
/// (all coordinates when <= 0); sampling is seeded and reproducible.
struct GradCheckOptions {
    double h = 1e-4;
    int max_coords_per_input = 0;
    uint64_t seed = 0x5eed;
    // With piecewise-linear pieces in f (leaky rectifier, L1), a probe window
    // [x-h, x+h] can straddle a kink where the central difference itself is
    // invalid. When set, probes whose forward and backward one-sided
    // differences disagree beyond `smooth_tol` (relative) are discarded: a
    // kink anywhere inside the window shows up as a slope gap between the two
    // sides. The analytic value is still verified against a valid difference
    // everywhere else; a consistently wrong backward pass leaves the
    // one-sided differences in agreement and is never filtered.
    bool filter_nonsmooth = false;
    double smooth_tol = 1e-3;
};

struct GradCheckStats {
    int64_t checked = 0;
    int64_t skipped_nonsmooth = 0;
};

inline double grad_check(
    const std::function<Value<double>(Tape<double>&, std::vector<Value<double>>&)>& f,
    std::vector<Tensor<double>> inputs, GradCheckOptions opt = {}, GradCheckStats* stats = nullptr) {
    if (!(opt.h >= 1e-5 && opt.h <= 1e-3))
        throw NumericError("grad_check: h must lie in [1e-5, 1e-3]");

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape(false);
        std::vector<Value<double>> vals;
        vals.reserve(xs.size());
        for (const auto& x : xs) vals.push_back(tape.leaf(x, false));
        Value<double> y = f(tape, vals);
        if (y.size() != 1) throw ShapeError("grad_check: f must return a scalar");
        return y.v()[0];
    };

    // one backward pass for the analytic gradients
    Tape<double> tape(true);
    std::vector<Value<double>> vals;
    vals.reserve(inputs.size());
    for (const auto& x : inputs) vals.push_back(tape.leaf(x, true));
    Value<double> y = f(tape, vals);
    if (y.size() != 1) throw ShapeError("grad_check: f must return a scalar");
    if (!std::isfinite(y.v()[0])) throw NumericError("grad_check: non-finite forward value");
    tape.backward(y);
    std::vector<Tensor<double>> analytic;
    analytic.reserve(vals.size());
    for (auto& v : vals) analytic.push_back(tape.grad(v));

    Rng rng(opt.seed);
    const double f0 = opt.filter_nonsmooth ? eval(inputs) : 0.0;
    double max_rel = 0.0;
    for (size_t t = 0; t < inputs.size(); ++t) {
        const int64_t n = inputs[t].size();
        std::vector<int64_t> coords;
        if (opt.max_coords_per_input > 0 && n > opt.max_coords_per_input) {
            for (int i = 0; i < opt.max_coords_per_input; ++i)
                coords.push_back(rng.uniform_int(0, n - 1));
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }
        for (int64_t c : coords) {
            const double orig = inputs[t][c];
            inputs[t][c] = orig + opt.h;
            const double fp = eval(inputs);
            inputs[t][c] = orig - opt.h;
            const double fm = eval(inputs);
            inputs[t][c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite perturbed value");
            const double central = (fp - fm) / (2.0 * opt.h);
            if (opt.filter_nonsmooth) {
                const double fwd = (fp - f0) / opt.h;
                const double bwd = (f0 - fm) / opt.h;
                if (std::abs(fwd - bwd) > opt.smooth_tol * std::max(1.0, std::abs(central))) {
                    if (stats) ++stats->skipped_nonsmooth;
                    continue;
                }
            }
            if (stats) ++stats->checked;
            const double rel = std::abs(analytic[t][c] - central) / std::max(1.0, std::abs(central));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace swinvox
