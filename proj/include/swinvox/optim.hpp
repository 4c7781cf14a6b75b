#pragma once

#include <cmath>

#include "swinvox/params.hpp"

namespace swinvox {

/// Linear warmup to `base` over `warmup` steps, then cosine decay to zero at
/// `total`.
inline double lr_schedule(int64_t step, int64_t warmup, int64_t total, double base) {
    if (step < 0 || step > total || warmup > total)
        throw ConfigError("lr_schedule: need 0 <= step <= total and warmup <= total");
    if (warmup > 0 && step < warmup)
        return base * static_cast<double>(step) / static_cast<double>(warmup);
    if (total == warmup) return base;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct AdamWConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/// One AdamW update: decoupled weight decay applied directly to the
/// parameters, bias-corrected moment estimates from the gradients.
/// `step` is 1-based and drives the bias correction.
template <typename T>
void adamw_step(ParamStore<T>& store, int64_t step, const AdamWConfig& c) {
    if (step < 1) throw ConfigError("adamw_step: step must be >= 1");
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (size_t e = 0; e < store.size(); ++e) {
        auto& entry = store.entry(static_cast<int>(e));
        for (int64_t i = 0; i < entry.value.size(); ++i) {
            const double g = static_cast<double>(entry.grad[i]);
            if (!std::isfinite(g))
                throw NumericError("adamw_step: non-finite gradient in parameter '" + entry.name +
                                   "' at element " + std::to_string(i));
            double p = static_cast<double>(entry.value[i]);
            p *= 1.0 - c.lr * c.weight_decay;
            const double m = c.beta1 * static_cast<double>(entry.m[i]) + (1.0 - c.beta1) * g;
            const double v = c.beta2 * static_cast<double>(entry.v[i]) + (1.0 - c.beta2) * g * g;
            entry.m[i] = static_cast<T>(m);
            entry.v[i] = static_cast<T>(v);
            p -= c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
            entry.value[i] = static_cast<T>(p);
        }
    }
}

}  // namespace swinvox
