#pragma once

#include <vector>

#include "swinvox/rng.hpp"
#include "swinvox/tensor.hpp"

namespace testutil {

template <typename T>
swinvox::Tensor<T> random_tensor(swinvox::Shape dims, swinvox::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
    swinvox::Tensor<T> t(std::move(dims));
    for (auto& x : t.data) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
double max_abs_diff(const swinvox::Tensor<T>& a, const swinvox::Tensor<T>& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace testutil
