#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "swinvox/error.hpp"

namespace swinvox {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& dims) {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
}

inline std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor; the last dimension varies fastest.
template <typename T>
struct Tensor {
    Shape dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape d, T fill = T(0)) : dims(std::move(d)) {
        for (int64_t e : dims)
            if (e < 1) throw ShapeError("tensor extent must be >= 1, got " + shape_str(dims));
        data.assign(static_cast<size_t>(numel(dims)), fill);
    }
    Tensor(Shape d, std::vector<T> values) : dims(std::move(d)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != numel(dims))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match dims " + shape_str(dims));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(dims.size()); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4-D accessor for [C,H,W,D] volumes.
    T& at(int64_t c, int64_t h, int64_t w, int64_t d) {
        return data[static_cast<size_t>(((c * dims[1] + h) * dims[2] + w) * dims[3] + d)];
    }
    const T& at(int64_t c, int64_t h, int64_t w, int64_t d) const {
        return data[static_cast<size_t>(((c * dims[1] + h) * dims[2] + w) * dims[3] + d)];
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool same_shape(const Tensor& other) const { return dims == other.dims; }
};

template <typename T>
inline void require_shape(const Tensor<T>& t, const Shape& dims, const char* what) {
    if (t.dims != dims)
        throw ShapeError(std::string(what) + ": expected " + shape_str(dims) + ", got " +
                         shape_str(t.dims));
}

template <typename T>
inline void require_rank(const Tensor<T>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.dims));
}

}  // namespace swinvox
