#pragma once
#include <type_traits>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "swinvox/tape.hpp"

namespace swinvox {
namespace detail {

template <typename T>
inline std::shared_ptr<Tensor<T>> alloc(Shape dims) {
    return std::make_shared<Tensor<T>>(std::move(dims));
}

// y += c * x over n elements
template <typename T>
inline void axpy(int64_t n, T c, const T* x, T* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += c * x[i];
}

// C[N,M] += A[N,K] * B[K,M]
template <typename T>
inline void mm_nn(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * m;
        for (int64_t kk = 0; kk < k; ++kk) axpy(m, arow[kk], b + kk * m, crow);
    }
}

// C[N,M] += A[N,K] * B[M,K]^T
template <typename T>
inline void mm_nt(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * m;
        for (int64_t j = 0; j < m; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C[K,M] += A[N,K]^T * B[N,M]
template <typename T>
inline void mm_tn(const T* a, const T* b, T* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * m;
        for (int64_t kk = 0; kk < k; ++kk) axpy(m, arow[kk], brow, c + kk * m);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    if (a.dims() != b.dims())
        throw ShapeError("add: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    auto out = detail::alloc<T>(a.dims());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out)[i] = a.v()[i] + b.v()[i];
    int an = a.node, bn = b.node;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, n](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) detail::axpy(n, T(1), g.data(), t.grad_buf(an).data());
        if (bn >= 0) detail::axpy(n, T(1), g.data(), t.grad_buf(bn).data());
    });
}

template <typename T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
    if (a.dims() != b.dims())
        throw ShapeError("sub: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    auto out = detail::alloc<T>(a.dims());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out)[i] = a.v()[i] - b.v()[i];
    int an = a.node, bn = b.node;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, n](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) detail::axpy(n, T(1), g.data(), t.grad_buf(an).data());
        if (bn >= 0) detail::axpy(n, T(-1), g.data(), t.grad_buf(bn).data());
    });
}

template <typename T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
    if (a.dims() != b.dims())
        throw ShapeError("mul: shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    auto out = detail::alloc<T>(a.dims());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out)[i] = a.v()[i] * b.v()[i];
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, n, av, bv](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) {
            auto& ga = t.grad_buf(an);
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*bv)[i];
        }
        if (bn >= 0) {
            auto& gb = t.grad_buf(bn);
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * (*av)[i];
        }
    });
}

template <typename T>
Value<T> scale(const Value<T>& a, T c) {
    auto out = detail::alloc<T>(a.dims());
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out)[i] = c * a.v()[i];
    int an = a.node;
    return a.tape->emit(out, an >= 0, [an, c, n](Tape<T>& t, const std::vector<T>& g) {
        detail::axpy(n, c, g.data(), t.grad_buf(an).data());
    });
}

/// x[..., F] + b[F], bias broadcast over leading dims.
template <typename T>
Value<T> add_rowbias(const Value<T>& x, const Value<T>& b) {
    require_rank(b.v(), 1, "add_rowbias bias");
    const int64_t f = b.size();
    if (x.dims().empty() || x.dims().back() != f)
        throw ShapeError("add_rowbias: trailing dim of " + shape_str(x.dims()) + " != " + std::to_string(f));
    auto out = detail::alloc<T>(x.dims());
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) (*out)[i] = x.v()[i] + b.v()[i % f];
    int xn = x.node, bn = b.node;
    return x.tape->emit(out, xn >= 0 || bn >= 0, [xn, bn, n, f](Tape<T>& t, const std::vector<T>& g) {
        if (xn >= 0) detail::axpy(n, T(1), g.data(), t.grad_buf(xn).data());
        if (bn >= 0) {
            auto& gb = t.grad_buf(bn);
            for (int64_t i = 0; i < n; ++i) gb[i % f] += g[i];
        }
    });
}

// ---------------------------------------------------------------------------
// data movement
// ---------------------------------------------------------------------------

template <typename T>
Value<T> reshape(const Value<T>& x, Shape dims) {
    if (numel(dims) != x.size())
        throw ShapeError("reshape: cannot view " + shape_str(x.dims()) + " as " + shape_str(dims));
    auto out = std::make_shared<Tensor<T>>(std::move(dims), x.v().data);
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn](Tape<T>& t, const std::vector<T>& g) {
        detail::axpy(static_cast<int64_t>(g.size()), T(1), g.data(), t.grad_buf(xn).data());
    });
}

/// Row gather with zero-fill: out[i] = idx[i] >= 0 ? x[idx[i]] : 0.
/// x is treated as a [N, F] row matrix. Backward scatter-adds.
template <typename T>
Value<T> rows_gather(const Value<T>& x, std::shared_ptr<const std::vector<int64_t>> idx,
                     int64_t feat, Shape out_dims) {
    if (x.size() % feat != 0) throw ShapeError("rows_gather: size not divisible by feat");
    const int64_t rows_in = x.size() / feat;
    const int64_t rows_out = static_cast<int64_t>(idx->size());
    if (numel(out_dims) != rows_out * feat)
        throw ShapeError("rows_gather: out dims " + shape_str(out_dims) + " != rows*feat");
    auto out = detail::alloc<T>(std::move(out_dims));
    const T* src = x.v().ptr();
    T* dst = out->ptr();
    for (int64_t i = 0; i < rows_out; ++i) {
        const int64_t j = (*idx)[static_cast<size_t>(i)];
        if (j < 0) continue;  // stays zero
        if (j >= rows_in) throw ShapeError("rows_gather: index out of range");
        std::copy(src + j * feat, src + (j + 1) * feat, dst + i * feat);
    }
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn, idx, feat, rows_out](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t i = 0; i < rows_out; ++i) {
            const int64_t j = (*idx)[static_cast<size_t>(i)];
            if (j >= 0) detail::axpy(feat, T(1), g.data() + i * feat, gx.data() + j * feat);
        }
    });
}

/// [B, L, F] -> [B*heads, L, F/heads]; head h takes the h-th feature chunk.
template <typename T>
Value<T> split_heads(const Value<T>& x, int64_t heads) {
    require_rank(x.v(), 3, "split_heads");
    const int64_t b = x.dims()[0], l = x.dims()[1], f = x.dims()[2];
    if (f % heads != 0) throw ShapeError("split_heads: feat not divisible by heads");
    const int64_t d = f / heads;
    auto out = detail::alloc<T>({b * heads, l, d});
    const T* src = x.v().ptr();
    T* dst = out->ptr();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t e = 0; e < heads; ++e)
            for (int64_t li = 0; li < l; ++li)
                std::copy(src + (bi * l + li) * f + e * d, src + (bi * l + li) * f + (e + 1) * d,
                          dst + ((bi * heads + e) * l + li) * d);
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn, b, l, f, heads, d](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t e = 0; e < heads; ++e)
                for (int64_t li = 0; li < l; ++li)
                    detail::axpy(d, T(1), g.data() + ((bi * heads + e) * l + li) * d,
                                 gx.data() + (bi * l + li) * f + e * d);
    });
}

/// [B*heads, L, d] -> [B, L, heads*d]; inverse of split_heads.
template <typename T>
Value<T> merge_heads(const Value<T>& x, int64_t heads) {
    require_rank(x.v(), 3, "merge_heads");
    if (x.dims()[0] % heads != 0) throw ShapeError("merge_heads: batch not divisible by heads");
    const int64_t b = x.dims()[0] / heads, l = x.dims()[1], d = x.dims()[2];
    const int64_t f = heads * d;
    auto out = detail::alloc<T>({b, l, f});
    const T* src = x.v().ptr();
    T* dst = out->ptr();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t e = 0; e < heads; ++e)
            for (int64_t li = 0; li < l; ++li)
                std::copy(src + ((bi * heads + e) * l + li) * d, src + ((bi * heads + e) * l + li) * d + d,
                          dst + (bi * l + li) * f + e * d);
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn, b, l, heads, d, f](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t e = 0; e < heads; ++e)
                for (int64_t li = 0; li < l; ++li)
                    detail::axpy(d, T(1), g.data() + (bi * l + li) * f + e * d,
                                 gx.data() + ((bi * heads + e) * l + li) * d);
    });
}

/// logits[b*heads + e, i, j] += mask[b, i, j]; the mask is a fixed additive
/// bias (not a learnable input), shared across heads.
template <typename T>
Value<T> add_window_mask(const Value<T>& logits, std::shared_ptr<const Tensor<std::type_identity_t<T>>> mask, int64_t heads) {
    require_rank(logits.v(), 3, "add_window_mask");
    const int64_t bh = logits.dims()[0], l = logits.dims()[1];
    if (logits.dims()[2] != l || bh % heads != 0 || mask->dims != Shape{bh / heads, l, l})
        throw ShapeError("add_window_mask: mask " + shape_str(mask->dims) + " incompatible with logits " +
                         shape_str(logits.dims()));
    auto out = detail::alloc<T>(logits.dims());
    const int64_t win_sz = l * l;
    for (int64_t i = 0; i < bh; ++i) {
        const T* lrow = logits.v().ptr() + i * win_sz;
        const T* mrow = mask->ptr() + (i / heads) * win_sz;
        T* orow = out->ptr() + i * win_sz;
        for (int64_t j = 0; j < win_sz; ++j) orow[j] = lrow[j] + mrow[j];
    }
    int xn = logits.node;
    int64_t n = logits.size();
    return logits.tape->emit(out, xn >= 0, [xn, n](Tape<T>& t, const std::vector<T>& g) {
        detail::axpy(n, T(1), g.data(), t.grad_buf(xn).data());
    });
}

/// logits[b*heads + e, i, j] += table[rel_idx[i*L + j], e].
template <typename T>
Value<T> add_rel_pos_bias(const Value<T>& logits, const Value<T>& table,
                          std::shared_ptr<const std::vector<int64_t>> rel_idx, int64_t heads) {
    require_rank(logits.v(), 3, "add_rel_pos_bias");
    require_rank(table.v(), 2, "rel pos table");
    const int64_t bh = logits.dims()[0], l = logits.dims()[1];
    if (table.dims()[1] != heads || static_cast<int64_t>(rel_idx->size()) != l * l)
        throw ShapeError("add_rel_pos_bias: bad table/index shapes");
    auto out = detail::alloc<T>(logits.dims());
    const int64_t win_sz = l * l;
    for (int64_t i = 0; i < bh; ++i) {
        const int64_t e = i % heads;
        const T* lrow = logits.v().ptr() + i * win_sz;
        T* orow = out->ptr() + i * win_sz;
        for (int64_t j = 0; j < win_sz; ++j)
            orow[j] = lrow[j] + table.v()[(*rel_idx)[static_cast<size_t>(j)] * heads + e];
    }
    int xn = logits.node, tn = table.node;
    return logits.tape->emit(out, xn >= 0 || tn >= 0,
                             [xn, tn, rel_idx, bh, heads, win_sz](Tape<T>& t, const std::vector<T>& g) {
        if (xn >= 0) detail::axpy(bh * win_sz, T(1), g.data(), t.grad_buf(xn).data());
        if (tn >= 0) {
            auto& gt = t.grad_buf(tn);
            for (int64_t i = 0; i < bh; ++i) {
                const int64_t e = i % heads;
                for (int64_t j = 0; j < win_sz; ++j)
                    gt[static_cast<size_t>((*rel_idx)[static_cast<size_t>(j)] * heads + e)] += g[i * win_sz + j];
            }
        }
    });
}

template <typename T>
Value<T> concat_channels(const Value<T>& a, const Value<T>& b) {
    require_rank(a.v(), 4, "concat_channels a");
    require_rank(b.v(), 4, "concat_channels b");
    if (a.dims()[1] != b.dims()[1] || a.dims()[2] != b.dims()[2] || a.dims()[3] != b.dims()[3])
        throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.dims()) + " vs " +
                         shape_str(b.dims()));
    const int64_t ca = a.dims()[0], cb = b.dims()[0];
    auto out = detail::alloc<T>({ca + cb, a.dims()[1], a.dims()[2], a.dims()[3]});
    std::copy(a.v().data.begin(), a.v().data.end(), out->data.begin());
    std::copy(b.v().data.begin(), b.v().data.end(), out->data.begin() + a.size());
    int an = a.node, bn = b.node;
    int64_t na = a.size(), nb = b.size();
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, na, nb](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) detail::axpy(na, T(1), g.data(), t.grad_buf(an).data());
        if (bn >= 0) detail::axpy(nb, T(1), g.data() + na, t.grad_buf(bn).data());
    });
}

/// Keeps the leading [h', w', d'] corner of each channel.
template <typename T>
Value<T> crop_spatial(const Value<T>& x, int64_t h, int64_t w, int64_t d) {
    require_rank(x.v(), 4, "crop_spatial");
    const auto& xd = x.dims();
    if (h > xd[1] || w > xd[2] || d > xd[3])
        throw ShapeError("crop_spatial: target exceeds source " + shape_str(xd));
    auto out = detail::alloc<T>({xd[0], h, w, d});
    for (int64_t c = 0; c < xd[0]; ++c)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                std::copy(&x.v().at(c, i, j, 0), &x.v().at(c, i, j, 0) + d, &out->at(c, i, j, 0));
    int xn = x.node;
    Shape src = xd;
    return x.tape->emit(out, xn >= 0, [xn, src, h, w, d](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t c = 0; c < src[0]; ++c)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    const T* grow = g.data() + ((c * h + i) * w + j) * d;
                    T* xrow = gx.data() + ((c * src[1] + i) * src[2] + j) * src[3];
                    detail::axpy(d, T(1), grow, xrow);
                }
    });
}

/// Zero-pads each channel at the high end up to [h, w, d].
template <typename T>
Value<T> pad_spatial(const Value<T>& x, int64_t h, int64_t w, int64_t d) {
    require_rank(x.v(), 4, "pad_spatial");
    const auto& xd = x.dims();
    if (h < xd[1] || w < xd[2] || d < xd[3])
        throw ShapeError("pad_spatial: target smaller than source " + shape_str(xd));
    auto out = detail::alloc<T>({xd[0], h, w, d});
    for (int64_t c = 0; c < xd[0]; ++c)
        for (int64_t i = 0; i < xd[1]; ++i)
            for (int64_t j = 0; j < xd[2]; ++j)
                std::copy(&x.v().at(c, i, j, 0), &x.v().at(c, i, j, 0) + xd[3],
                          out->ptr() + ((c * h + i) * w + j) * d);
    int xn = x.node;
    Shape src = xd;
    return x.tape->emit(out, xn >= 0, [xn, src, h, w, d](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t c = 0; c < src[0]; ++c)
            for (int64_t i = 0; i < src[1]; ++i)
                for (int64_t j = 0; j < src[2]; ++j)
                    detail::axpy(src[3], T(1), g.data() + ((c * h + i) * w + j) * d,
                                 gx.data() + ((c * src[1] + i) * src[2] + j) * src[3]);
    });
}

/// Stacks K same-shaped tensors into [K, numel(each)].
template <typename T>
Value<T> stack_rows(const std::vector<Value<T>>& xs) {
    if (xs.empty()) throw ShapeError("stack_rows: empty input");
    const int64_t f = xs[0].size();
    auto out = detail::alloc<T>({static_cast<int64_t>(xs.size()), f});
    std::vector<int> nodes(xs.size());
    bool any = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].size() != f) throw ShapeError("stack_rows: ragged inputs");
        std::copy(xs[i].v().data.begin(), xs[i].v().data.end(), out->data.begin() + i * f);
        nodes[i] = xs[i].node;
        any = any || xs[i].tracked();
    }
    return xs[0].tape->emit(out, any, [nodes, f](Tape<T>& t, const std::vector<T>& g) {
        for (size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i] >= 0)
                detail::axpy(f, T(1), g.data() + static_cast<int64_t>(i) * f, t.grad_buf(nodes[i]).data());
    });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
Value<T> matmul(const Value<T>& a, const Value<T>& b) {
    require_rank(a.v(), 2, "matmul a");
    require_rank(b.v(), 2, "matmul b");
    const int64_t n = a.dims()[0], k = a.dims()[1], m = b.dims()[1];
    if (b.dims()[0] != k)
        throw ShapeError("matmul: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    auto out = detail::alloc<T>({n, m});
    detail::mm_nn(a.v().ptr(), b.v().ptr(), out->ptr(), n, k, m);
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, av, bv, n, k, m](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) detail::mm_nt(g.data(), bv->ptr(), t.grad_buf(an).data(), n, m, k);
        if (bn >= 0) detail::mm_tn(av->ptr(), g.data(), t.grad_buf(bn).data(), n, k, m);
    });
}

/// A[N,K] * B[M,K]^T -> [N,M]
template <typename T>
Value<T> matmul_nt(const Value<T>& a, const Value<T>& b) {
    require_rank(a.v(), 2, "matmul_nt a");
    require_rank(b.v(), 2, "matmul_nt b");
    const int64_t n = a.dims()[0], k = a.dims()[1], m = b.dims()[0];
    if (b.dims()[1] != k)
        throw ShapeError("matmul_nt: inner dims " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    auto out = detail::alloc<T>({n, m});
    detail::mm_nt(a.v().ptr(), b.v().ptr(), out->ptr(), n, k, m);
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, av, bv, n, k, m](Tape<T>& t, const std::vector<T>& g) {
        if (an >= 0) detail::mm_nn(g.data(), bv->ptr(), t.grad_buf(an).data(), n, m, k);
        if (bn >= 0) detail::mm_tn(g.data(), av->ptr(), t.grad_buf(bn).data(), n, m, k);
    });
}

/// Batched A[B,N,K] * B[B,K,M] -> [B,N,M]
template <typename T>
Value<T> bmm_nn(const Value<T>& a, const Value<T>& b) {
    require_rank(a.v(), 3, "bmm_nn a");
    require_rank(b.v(), 3, "bmm_nn b");
    const int64_t bs = a.dims()[0], n = a.dims()[1], k = a.dims()[2], m = b.dims()[2];
    if (b.dims()[0] != bs || b.dims()[1] != k)
        throw ShapeError("bmm_nn: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    auto out = detail::alloc<T>({bs, n, m});
    for (int64_t i = 0; i < bs; ++i)
        detail::mm_nn(a.v().ptr() + i * n * k, b.v().ptr() + i * k * m, out->ptr() + i * n * m, n, k, m);
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0,
                        [an, bn, av, bv, bs, n, k, m](Tape<T>& t, const std::vector<T>& g) {
        for (int64_t i = 0; i < bs; ++i) {
            if (an >= 0)
                detail::mm_nt(g.data() + i * n * m, bv->ptr() + i * k * m,
                              t.grad_buf(an).data() + i * n * k, n, m, k);
            if (bn >= 0)
                detail::mm_tn(av->ptr() + i * n * k, g.data() + i * n * m,
                              t.grad_buf(bn).data() + i * k * m, n, k, m);
        }
    });
}

/// Batched A[B,N,K] * B[B,M,K]^T -> [B,N,M]
template <typename T>
Value<T> bmm_nt(const Value<T>& a, const Value<T>& b) {
    require_rank(a.v(), 3, "bmm_nt a");
    require_rank(b.v(), 3, "bmm_nt b");
    const int64_t bs = a.dims()[0], n = a.dims()[1], k = a.dims()[2], m = b.dims()[1];
    if (b.dims()[0] != bs || b.dims()[2] != k)
        throw ShapeError("bmm_nt: " + shape_str(a.dims()) + " x " + shape_str(b.dims()));
    auto out = detail::alloc<T>({bs, n, m});
    for (int64_t i = 0; i < bs; ++i)
        detail::mm_nt(a.v().ptr() + i * n * k, b.v().ptr() + i * m * k, out->ptr() + i * n * m, n, k, m);
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0,
                        [an, bn, av, bv, bs, n, k, m](Tape<T>& t, const std::vector<T>& g) {
        for (int64_t i = 0; i < bs; ++i) {
            if (an >= 0)
                detail::mm_nn(g.data() + i * n * m, bv->ptr() + i * m * k,
                              t.grad_buf(an).data() + i * n * k, n, m, k);
            if (bn >= 0)
                detail::mm_tn(g.data() + i * n * m, av->ptr() + i * n * k,
                              t.grad_buf(bn).data() + i * m * k, n, m, k);
        }
    });
}

/// x[..., F_in] * W[F_in, F_out] + b, broadcast over leading dims.
template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& w, const std::type_identity_t<Value<T>>* b = nullptr) {
    require_rank(w.v(), 2, "linear weight");
    const int64_t fin = w.dims()[0], fout = w.dims()[1];
    if (x.dims().empty() || x.dims().back() != fin)
        throw ShapeError("linear: trailing dim of " + shape_str(x.dims()) + " != weight rows " +
                         std::to_string(fin));
    Shape out_dims = x.dims();
    out_dims.back() = fout;
    const int64_t rows = x.size() / fin;
    Value<T> x2 = reshape(x, {rows, fin});
    Value<T> y = matmul(x2, w);
    if (b) y = add_rowbias(y, *b);
    return reshape(y, std::move(out_dims));
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Value<T> gelu(const Value<T>& x) {
    auto out = detail::alloc<T>(x.dims());
    const int64_t n = x.size();
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (int64_t i = 0; i < n; ++i) {
        const T v = x.v()[i];
        (*out)[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    int xn = x.node;
    auto xv = x.data;
    return x.tape->emit(out, xn >= 0, [xn, xv, n](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        for (int64_t i = 0; i < n; ++i) {
            const T v = (*xv)[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Value<T> leaky_relu(const Value<T>& x, T slope) {
    auto out = detail::alloc<T>(x.dims());
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x.v()[i];
        (*out)[i] = v >= T(0) ? v : slope * v;
    }
    int xn = x.node;
    auto xv = x.data;
    return x.tape->emit(out, xn >= 0, [xn, xv, slope, n](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * ((*xv)[i] >= T(0) ? T(1) : slope);
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace detail {

// shared core: normalizes `groups` slices of `span` contiguous-strided
// elements; returns (xhat, inv_sigma). Strided access covers both layer norm
// (stride 1 over trailing F) and instance norm (stride 1 over spatial V).
template <typename T>
struct NormSaved {
    std::shared_ptr<std::vector<T>> xhat;
    std::shared_ptr<std::vector<T>> inv_sigma;
};

}  // namespace detail

/// Normalizes the trailing F features of every position to zero mean / unit
/// variance (population variance, eps-regularized), then applies gamma/beta.
template <typename T>
Value<T> layer_norm(const Value<T>& x, const Value<T>& gamma, const Value<T>& beta, T eps = T(1e-5)) {
    require_rank(gamma.v(), 1, "layer_norm gamma");
    require_rank(beta.v(), 1, "layer_norm beta");
    const int64_t f = gamma.size();
    if (beta.size() != f || x.dims().empty() || x.dims().back() != f)
        throw ShapeError("layer_norm: feature dims disagree for x " + shape_str(x.dims()));
    if (!(eps > T(0))) throw NumericError("layer_norm: eps must be > 0");
    const int64_t rows = x.size() / f;
    auto out = detail::alloc<T>(x.dims());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto isig = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.v().ptr() + r * f;
        T mean = T(0);
        for (int64_t i = 0; i < f; ++i) mean += xr[i];
        mean /= T(f);
        T var = T(0);
        for (int64_t i = 0; i < f; ++i) {
            const T c = xr[i] - mean;
            var += c * c;
        }
        var /= T(f);
        const T inv = T(1) / std::sqrt(var + eps);
        (*isig)[static_cast<size_t>(r)] = inv;
        T* hr = xhat->data() + r * f;
        T* yr = out->ptr() + r * f;
        for (int64_t i = 0; i < f; ++i) {
            hr[i] = (xr[i] - mean) * inv;
            yr[i] = hr[i] * gamma.v()[i] + beta.v()[i];
        }
    }
    int xn = x.node, gn = gamma.node, bn = beta.node;
    auto gv = gamma.data;
    return x.tape->emit(out, xn >= 0 || gn >= 0 || bn >= 0,
                        [xn, gn, bn, gv, xhat, isig, rows, f](Tape<T>& t, const std::vector<T>& g) {
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * f;
            const T* hr = xhat->data() + r * f;
            if (xn >= 0) {
                T m1 = T(0), m2 = T(0);
                for (int64_t i = 0; i < f; ++i) {
                    const T dh = gr[i] * (*gv)[i];
                    m1 += dh;
                    m2 += dh * hr[i];
                }
                m1 /= T(f);
                m2 /= T(f);
                const T inv = (*isig)[static_cast<size_t>(r)];
                T* gx = t.grad_buf(xn).data() + r * f;
                for (int64_t i = 0; i < f; ++i)
                    gx[i] += inv * (gr[i] * (*gv)[i] - m1 - hr[i] * m2);
            }
            if (gn >= 0) {
                T* gg = t.grad_buf(gn).data();
                for (int64_t i = 0; i < f; ++i) gg[i] += gr[i] * hr[i];
            }
            if (bn >= 0) {
                T* gb = t.grad_buf(bn).data();
                for (int64_t i = 0; i < f; ++i) gb[i] += gr[i];
            }
        }
    });
}

/// Per-channel normalization over all spatial positions of a [C,H,W,D]
/// feature map, with per-channel affine.
template <typename T>
Value<T> instance_norm(const Value<T>& x, const Value<T>& gamma, const Value<T>& beta, T eps = T(1e-5)) {
    require_rank(x.v(), 4, "instance_norm");
    const int64_t c = x.dims()[0];
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("instance_norm: affine size != channels");
    if (!(eps > T(0))) throw NumericError("instance_norm: eps must be > 0");
    const int64_t v = x.size() / c;
    auto out = detail::alloc<T>(x.dims());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
    auto isig = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch) {
        const T* xr = x.v().ptr() + ch * v;
        T mean = T(0);
        for (int64_t i = 0; i < v; ++i) mean += xr[i];
        mean /= T(v);
        T var = T(0);
        for (int64_t i = 0; i < v; ++i) {
            const T d = xr[i] - mean;
            var += d * d;
        }
        var /= T(v);
        const T inv = T(1) / std::sqrt(var + eps);
        (*isig)[static_cast<size_t>(ch)] = inv;
        T* hr = xhat->data() + ch * v;
        T* yr = out->ptr() + ch * v;
        const T ga = gamma.v()[ch], be = beta.v()[ch];
        for (int64_t i = 0; i < v; ++i) {
            hr[i] = (xr[i] - mean) * inv;
            yr[i] = hr[i] * ga + be;
        }
    }
    int xn = x.node, gn = gamma.node, bn = beta.node;
    auto gv = gamma.data;
    return x.tape->emit(out, xn >= 0 || gn >= 0 || bn >= 0,
                        [xn, gn, bn, gv, xhat, isig, c, v](Tape<T>& t, const std::vector<T>& g) {
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* gr = g.data() + ch * v;
            const T* hr = xhat->data() + ch * v;
            const T ga = (*gv)[ch];
            if (xn >= 0) {
                T m1 = T(0), m2 = T(0);
                for (int64_t i = 0; i < v; ++i) {
                    const T dh = gr[i] * ga;
                    m1 += dh;
                    m2 += dh * hr[i];
                }
                m1 /= T(v);
                m2 /= T(v);
                const T inv = (*isig)[static_cast<size_t>(ch)];
                T* gx = t.grad_buf(xn).data() + ch * v;
                for (int64_t i = 0; i < v; ++i) gx[i] += inv * (gr[i] * ga - m1 - hr[i] * m2);
            }
            if (gn >= 0) {
                T acc = T(0);
                for (int64_t i = 0; i < v; ++i) acc += gr[i] * hr[i];
                t.grad_buf(gn)[static_cast<size_t>(ch)] += acc;
            }
            if (bn >= 0) {
                T acc = T(0);
                for (int64_t i = 0; i < v; ++i) acc += gr[i];
                t.grad_buf(bn)[static_cast<size_t>(ch)] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Overflow-safe softmax along `axis` (max-subtraction, so constant logit
/// shifts give bitwise-identical output).
template <typename T>
Value<T> softmax(const Value<T>& x, int axis) {
    const int rank = x.v().rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError("softmax: bad axis");
    const auto& dims = x.dims();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= dims[i];
    for (int i = axis + 1; i < rank; ++i) inner *= dims[i];
    const int64_t n = dims[axis];
    auto out = detail::alloc<T>(dims);
    const T* src = x.v().ptr();
    T* dst = out->ptr();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = src[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[base + i * inner]);
            T sum = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T e = std::exp(src[base + i * inner] - mx);
                dst[base + i * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t i = 0; i < n; ++i) dst[base + i * inner] *= inv;
        }
    int xn = x.node;
    auto yv = out;
    return x.tape->emit(out, xn >= 0, [xn, yv, outer, n, inner](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        const T* y = yv->ptr();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * n * inner + in;
                T dot = T(0);
                for (int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                for (int64_t i = 0; i < n; ++i)
                    gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
            }
    });
}

template <typename T>
Value<T> softmax_lastdim(const Value<T>& x) {
    return softmax(x, x.v().rank() - 1);
}

// ---------------------------------------------------------------------------
// 3-D convolution
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// y[Co,H',W',D'] += conv(x[Ci,H,W,D], w[Co,Ci,k,k,k])
template <typename T>
void conv_fwd_kernel(const T* x, const T* w, T* y, int64_t ci, int64_t co, int64_t k,
                     int64_t h, int64_t wd, int64_t d, int64_t oh, int64_t ow, int64_t od,
                     int64_t stride, int64_t pad) {
    for (int64_t c = 0; c < co; ++c)
        for (int64_t cc = 0; cc < ci; ++cc)
            for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw)
                    for (int64_t kd = 0; kd < k; ++kd) {
                        const T wv = w[(((c * ci + cc) * k + kh) * k + kw) * k + kd];
                        if (wv == T(0)) continue;
                        for (int64_t i = 0; i < oh; ++i) {
                            const int64_t ih = i * stride + kh - pad;
                            if (ih < 0 || ih >= h) continue;
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t iw = j * stride + kw - pad;
                                if (iw < 0 || iw >= wd) continue;
                                T* yrow = y + ((c * oh + i) * ow + j) * od;
                                const T* xrow = x + ((cc * h + ih) * wd + iw) * d;
                                // valid od range for this tap
                                int64_t lo = 0, hi = od - 1;
                                while (lo <= hi && lo * stride + kd - pad < 0) ++lo;
                                while (hi >= lo && hi * stride + kd - pad >= d) --hi;
                                if (stride == 1) {
                                    const T* xs = xrow + (lo + kd - pad);
                                    for (int64_t l = lo; l <= hi; ++l) yrow[l] += wv * xs[l - lo];
                                } else {
                                    for (int64_t l = lo; l <= hi; ++l)
                                        yrow[l] += wv * xrow[l * stride + kd - pad];
                                }
                            }
                        }
                    }
}

// dx[Ci,H,W,D] += conv^T(dy[Co,H',W',D'], w[Co,Ci,k,k,k]); exact adjoint of
// conv_fwd_kernel with identical geometry.
template <typename T>
void conv_bwd_x_kernel(const T* dy, const T* w, T* dx, int64_t ci, int64_t co, int64_t k,
                       int64_t h, int64_t wd, int64_t d, int64_t oh, int64_t ow, int64_t od,
                       int64_t stride, int64_t pad) {
    for (int64_t c = 0; c < co; ++c)
        for (int64_t cc = 0; cc < ci; ++cc)
            for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw)
                    for (int64_t kd = 0; kd < k; ++kd) {
                        const T wv = w[(((c * ci + cc) * k + kh) * k + kw) * k + kd];
                        if (wv == T(0)) continue;
                        for (int64_t i = 0; i < oh; ++i) {
                            const int64_t ih = i * stride + kh - pad;
                            if (ih < 0 || ih >= h) continue;
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t iw = j * stride + kw - pad;
                                if (iw < 0 || iw >= wd) continue;
                                const T* yrow = dy + ((c * oh + i) * ow + j) * od;
                                T* xrow = dx + ((cc * h + ih) * wd + iw) * d;
                                int64_t lo = 0, hi = od - 1;
                                while (lo <= hi && lo * stride + kd - pad < 0) ++lo;
                                while (hi >= lo && hi * stride + kd - pad >= d) --hi;
                                if (stride == 1) {
                                    T* xs = xrow + (lo + kd - pad);
                                    for (int64_t l = lo; l <= hi; ++l) xs[l - lo] += wv * yrow[l];
                                } else {
                                    for (int64_t l = lo; l <= hi; ++l)
                                        xrow[l * stride + kd - pad] += wv * yrow[l];
                                }
                            }
                        }
                    }
}

// dw[Co,Ci,k,k,k] += correlate(x, dy)
template <typename T>
void conv_bwd_w_kernel(const T* x, const T* dy, T* dw, int64_t ci, int64_t co, int64_t k,
                       int64_t h, int64_t wd, int64_t d, int64_t oh, int64_t ow, int64_t od,
                       int64_t stride, int64_t pad) {
    for (int64_t c = 0; c < co; ++c)
        for (int64_t cc = 0; cc < ci; ++cc)
            for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw)
                    for (int64_t kd = 0; kd < k; ++kd) {
                        T acc = T(0);
                        for (int64_t i = 0; i < oh; ++i) {
                            const int64_t ih = i * stride + kh - pad;
                            if (ih < 0 || ih >= h) continue;
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t iw = j * stride + kw - pad;
                                if (iw < 0 || iw >= wd) continue;
                                const T* yrow = dy + ((c * oh + i) * ow + j) * od;
                                const T* xrow = x + ((cc * h + ih) * wd + iw) * d;
                                int64_t lo = 0, hi = od - 1;
                                while (lo <= hi && lo * stride + kd - pad < 0) ++lo;
                                while (hi >= lo && hi * stride + kd - pad >= d) --hi;
                                if (stride == 1) {
                                    const T* xs = xrow + (lo + kd - pad);
                                    for (int64_t l = lo; l <= hi; ++l) acc += yrow[l] * xs[l - lo];
                                } else {
                                    for (int64_t l = lo; l <= hi; ++l)
                                        acc += yrow[l] * xrow[l * stride + kd - pad];
                                }
                            }
                        }
                        dw[(((c * ci + cc) * k + kh) * k + kw) * k + kd] += acc;
                    }
}

}  // namespace detail

/// Direct 3-D convolution, zero padding. x [Ci,H,W,D], w [Co,Ci,k,k,k].
template <typename T>
Value<T> conv3d(const Value<T>& x, const Value<T>& w, const std::type_identity_t<Value<T>>* b,
                int64_t stride = 1, int64_t pad = 0) {
    require_rank(x.v(), 4, "conv3d input");
    require_rank(w.v(), 5, "conv3d weight");
    const int64_t ci = x.dims()[0], h = x.dims()[1], wd = x.dims()[2], d = x.dims()[3];
    const int64_t co = w.dims()[0], k = w.dims()[2];
    if (w.dims()[1] != ci)
        throw ShapeError("conv3d: input has " + std::to_string(ci) + " channels but weight expects " +
                         std::to_string(w.dims()[1]));
    if (w.dims()[3] != k || w.dims()[4] != k) throw ShapeError("conv3d: kernel must be cubic");
    if (k % 2 == 0 && k != stride) throw ShapeError("conv3d: kernel must be odd or equal to stride");
    if (h + 2 * pad < k || wd + 2 * pad < k || d + 2 * pad < k)
        throw ShapeError("conv3d: kernel larger than padded input");
    if (b && b->size() != co) throw ShapeError("conv3d: bias size != out channels");
    const int64_t oh = detail::conv_out_extent(h, k, stride, pad);
    const int64_t ow = detail::conv_out_extent(wd, k, stride, pad);
    const int64_t od = detail::conv_out_extent(d, k, stride, pad);
    auto out = detail::alloc<T>({co, oh, ow, od});
    detail::conv_fwd_kernel(x.v().ptr(), w.v().ptr(), out->ptr(), ci, co, k, h, wd, d, oh, ow, od,
                            stride, pad);
    if (b) {
        for (int64_t c = 0; c < co; ++c) {
            const T bv = b->v()[c];
            T* yc = out->ptr() + c * oh * ow * od;
            for (int64_t i = 0; i < oh * ow * od; ++i) yc[i] += bv;
        }
    }
    int xn = x.node, wn = w.node, bn = b ? b->node : -1;
    auto xv = x.data, wv = w.data;
    return x.tape->emit(out, xn >= 0 || wn >= 0 || bn >= 0,
                        [=](Tape<T>& t, const std::vector<T>& g) {
        if (xn >= 0)
            detail::conv_bwd_x_kernel(g.data(), wv->ptr(), t.grad_buf(xn).data(), ci, co, k, h, wd,
                                      d, oh, ow, od, stride, pad);
        if (wn >= 0)
            detail::conv_bwd_w_kernel(xv->ptr(), g.data(), t.grad_buf(wn).data(), ci, co, k, h, wd,
                                      d, oh, ow, od, stride, pad);
        if (bn >= 0) {
            auto& gb = t.grad_buf(bn);
            for (int64_t c = 0; c < co; ++c) {
                T acc = T(0);
                const T* gc = g.data() + c * oh * ow * od;
                for (int64_t i = 0; i < oh * ow * od; ++i) acc += gc[i];
                gb[static_cast<size_t>(c)] += acc;
            }
        }
    });
}

/// Transposed 3-D convolution; exact adjoint of conv3d with the same
/// geometry. x [A,...], w [A,B,k,k,k] -> [B, (H-1)*stride + k - 2*pad, ...].
template <typename T>
Value<T> conv3d_transpose(const Value<T>& x, const Value<T>& w, const std::type_identity_t<Value<T>>* b,
                          int64_t stride = 1, int64_t pad = 0) {
    require_rank(x.v(), 4, "conv3d_transpose input");
    require_rank(w.v(), 5, "conv3d_transpose weight");
    const int64_t a = x.dims()[0], ih = x.dims()[1], iw = x.dims()[2], id = x.dims()[3];
    const int64_t bch = w.dims()[1], k = w.dims()[2];
    if (w.dims()[0] != a)
        throw ShapeError("conv3d_transpose: input has " + std::to_string(a) +
                         " channels but weight expects " + std::to_string(w.dims()[0]));
    if (w.dims()[3] != k || w.dims()[4] != k) throw ShapeError("conv3d_transpose: kernel must be cubic");
    if (stride < 1) throw ShapeError("conv3d_transpose: stride must be >= 1");
    if (b && b->size() != bch) throw ShapeError("conv3d_transpose: bias size != out channels");
    const int64_t oh = (ih - 1) * stride + k - 2 * pad;
    const int64_t ow = (iw - 1) * stride + k - 2 * pad;
    const int64_t od = (id - 1) * stride + k - 2 * pad;
    if (oh < 1 || ow < 1 || od < 1) throw ShapeError("conv3d_transpose: empty output");
    auto out = detail::alloc<T>({bch, oh, ow, od});
    detail::conv_bwd_x_kernel(x.v().ptr(), w.v().ptr(), out->ptr(), bch, a, k, oh, ow, od, ih, iw,
                              id, stride, pad);
    if (b) {
        for (int64_t c = 0; c < bch; ++c) {
            const T bv = b->v()[c];
            T* yc = out->ptr() + c * oh * ow * od;
            for (int64_t i = 0; i < oh * ow * od; ++i) yc[i] += bv;
        }
    }
    int xn = x.node, wn = w.node, bn = b ? b->node : -1;
    auto xv = x.data, wv = w.data;
    return x.tape->emit(out, xn >= 0 || wn >= 0 || bn >= 0,
                        [=](Tape<T>& t, const std::vector<T>& g) {
        if (xn >= 0)
            detail::conv_fwd_kernel(g.data(), wv->ptr(), t.grad_buf(xn).data(), bch, a, k, oh, ow,
                                    od, ih, iw, id, stride, pad);
        if (wn >= 0)
            detail::conv_bwd_w_kernel(g.data(), xv->ptr(), t.grad_buf(wn).data(), bch, a, k, oh, ow,
                                      od, ih, iw, id, stride, pad);
        if (bn >= 0) {
            auto& gb = t.grad_buf(bn);
            for (int64_t c = 0; c < bch; ++c) {
                T acc = T(0);
                const T* gc = g.data() + c * oh * ow * od;
                for (int64_t i = 0; i < oh * ow * od; ++i) acc += gc[i];
                gb[static_cast<size_t>(c)] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// pooling / normalizing / reductions
// ---------------------------------------------------------------------------

template <typename T>
Value<T> global_avg_pool(const Value<T>& x) {
    require_rank(x.v(), 4, "global_avg_pool");
    const int64_t c = x.dims()[0], v = x.size() / x.dims()[0];
    auto out = detail::alloc<T>(Shape{c});
    for (int64_t ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* xr = x.v().ptr() + ch * v;
        for (int64_t i = 0; i < v; ++i) acc += xr[i];
        (*out)[ch] = acc / T(v);
    }
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn, c, v](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t ch = 0; ch < c; ++ch) {
            const T gv = g[static_cast<size_t>(ch)] / T(v);
            T* gr = gx.data() + ch * v;
            for (int64_t i = 0; i < v; ++i) gr[i] += gv;
        }
    });
}

/// Normalizes each row of x ([F] or [N,F]) to unit L2 norm. A zero row is a
/// degenerate input.
template <typename T>
Value<T> l2_normalize_rows(const Value<T>& x) {
    const int64_t f = x.dims().back();
    const int64_t rows = x.size() / f;
    auto out = detail::alloc<T>(x.dims());
    auto inv_norms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.v().ptr() + r * f;
        T sq = T(0);
        for (int64_t i = 0; i < f; ++i) sq += xr[i] * xr[i];
        if (sq == T(0)) throw DegenerateInputError("l2_normalize: zero vector at row " + std::to_string(r));
        const T inv = T(1) / std::sqrt(sq);
        (*inv_norms)[static_cast<size_t>(r)] = inv;
        T* yr = out->ptr() + r * f;
        for (int64_t i = 0; i < f; ++i) yr[i] = xr[i] * inv;
    }
    int xn = x.node;
    auto yv = out;
    return x.tape->emit(out, xn >= 0, [xn, yv, inv_norms, rows, f](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        const T* y = yv->ptr();
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * f;
            const T* yr = y + r * f;
            T dot = T(0);
            for (int64_t i = 0; i < f; ++i) dot += gr[i] * yr[i];
            const T inv = (*inv_norms)[static_cast<size_t>(r)];
            T* gxr = gx.data() + r * f;
            for (int64_t i = 0; i < f; ++i) gxr[i] += inv * (gr[i] - yr[i] * dot);
        }
    });
}

template <typename T>
Value<T> sum_all(const Value<T>& x) {
    auto out = detail::alloc<T>(Shape{1});
    T acc = T(0);
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) acc += x.v()[i];
    (*out)[0] = acc;
    int xn = x.node;
    return x.tape->emit(out, xn >= 0, [xn, n](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
    });
}

template <typename T>
Value<T> mean_all(const Value<T>& x) {
    return scale(sum_all(x), T(1) / T(x.size()));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean absolute error. The subgradient of |u| at u == 0 is taken as 0.
template <typename T>
Value<T> mean_abs_diff(const Value<T>& a, const Value<T>& b) {
    if (a.dims() != b.dims())
        throw ShapeError("mean_abs_diff: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    auto out = detail::alloc<T>(Shape{1});
    const int64_t n = a.size();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) acc += std::abs(a.v()[i] - b.v()[i]);
    (*out)[0] = acc / T(n);
    int an = a.node, bn = b.node;
    auto av = a.data, bv = b.data;
    return a.tape->emit(out, an >= 0 || bn >= 0, [an, bn, av, bv, n](Tape<T>& t, const std::vector<T>& g) {
        const T s = g[0] / T(n);
        for (int64_t i = 0; i < n; ++i) {
            const T d = (*av)[i] - (*bv)[i];
            const T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
            if (an >= 0) t.grad_buf(an)[static_cast<size_t>(i)] += sg;
            if (bn >= 0) t.grad_buf(bn)[static_cast<size_t>(i)] -= sg;
        }
    });
}

/// Mean cross-entropy of softmaxed logit rows against integer labels.
template <typename T>
Value<T> cross_entropy_rows(const Value<T>& logits, std::shared_ptr<const std::vector<int64_t>> labels) {
    require_rank(logits.v(), 2, "cross_entropy_rows");
    const int64_t rows = logits.dims()[0], n = logits.dims()[1];
    if (static_cast<int64_t>(labels->size()) != rows)
        throw ShapeError("cross_entropy_rows: label count != rows");
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(logits.size()));
    auto out = detail::alloc<T>(Shape{1});
    T loss = T(0);
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t lab = (*labels)[static_cast<size_t>(r)];
        if (lab < 0 || lab >= n)
            throw ShapeError("cross_entropy_rows: label " + std::to_string(lab) + " out of range");
        const T* xr = logits.v().ptr() + r * n;
        T mx = xr[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        T sum = T(0);
        T* pr = probs->data() + r * n;
        for (int64_t i = 0; i < n; ++i) {
            pr[i] = std::exp(xr[i] - mx);
            sum += pr[i];
        }
        const T inv = T(1) / sum;
        for (int64_t i = 0; i < n; ++i) pr[i] *= inv;
        loss += std::log(sum) + mx - xr[lab];
    }
    (*out)[0] = loss / T(rows);
    int xn = logits.node;
    return logits.tape->emit(out, xn >= 0, [xn, probs, labels, rows, n](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        const T s = g[0] / T(rows);
        for (int64_t r = 0; r < rows; ++r) {
            const T* pr = probs->data() + r * n;
            T* gr = gx.data() + r * n;
            const int64_t lab = (*labels)[static_cast<size_t>(r)];
            for (int64_t i = 0; i < n; ++i) gr[i] += s * (pr[i] - (i == lab ? T(1) : T(0)));
        }
    });
}

/// Voxel-wise cross-entropy of channel-softmaxed logits [C,H,W,D] against an
/// integer label map (flattened, H*W*D entries), mean over voxels.
template <typename T>
Value<T> softmax_xent_channel(const Value<T>& logits, std::shared_ptr<const std::vector<int64_t>> labels) {
    require_rank(logits.v(), 4, "softmax_xent_channel");
    const int64_t c = logits.dims()[0];
    const int64_t v = logits.size() / c;
    if (static_cast<int64_t>(labels->size()) != v)
        throw ShapeError("softmax_xent_channel: label count != voxels");
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(logits.size()));
    auto out = detail::alloc<T>(Shape{1});
    const T* x = logits.v().ptr();
    T loss = T(0);
    for (int64_t i = 0; i < v; ++i) {
        const int64_t lab = (*labels)[static_cast<size_t>(i)];
        if (lab < 0 || lab >= c)
            throw ShapeError("softmax_xent_channel: label " + std::to_string(lab) + " out of range");
        T mx = x[i];
        for (int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, x[ch * v + i]);
        T sum = T(0);
        for (int64_t ch = 0; ch < c; ++ch) {
            const T e = std::exp(x[ch * v + i] - mx);
            (*probs)[static_cast<size_t>(ch * v + i)] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t ch = 0; ch < c; ++ch) (*probs)[static_cast<size_t>(ch * v + i)] *= inv;
        loss += std::log(sum) + mx - x[lab * v + i];
    }
    (*out)[0] = loss / T(v);
    int xn = logits.node;
    return logits.tape->emit(out, xn >= 0, [xn, probs, labels, c, v](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        const T s = g[0] / T(v);
        for (int64_t i = 0; i < v; ++i) {
            const int64_t lab = (*labels)[static_cast<size_t>(i)];
            for (int64_t ch = 0; ch < c; ++ch)
                gx[static_cast<size_t>(ch * v + i)] +=
                    s * ((*probs)[static_cast<size_t>(ch * v + i)] - (ch == lab ? T(1) : T(0)));
        }
    });
}

/// 1 - mean per-class soft Dice of channel probabilities [C,H,W,D] against an
/// integer label map; all classes (background included) enter the mean.
template <typename T>
Value<T> soft_dice_probs(const Value<T>& probs, std::shared_ptr<const std::vector<int64_t>> labels,
                         T smooth = T(1e-5)) {
    require_rank(probs.v(), 4, "soft_dice_probs");
    const int64_t c = probs.dims()[0];
    const int64_t v = probs.size() / c;
    if (static_cast<int64_t>(labels->size()) != v)
        throw ShapeError("soft_dice_probs: label count != voxels");
    auto nums = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    auto dens = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
    const T* p = probs.v().ptr();
    T dice_sum = T(0);
    for (int64_t ch = 0; ch < c; ++ch) {
        T inter = T(0), psum = T(0), gsum = T(0);
        for (int64_t i = 0; i < v; ++i) {
            const T pv = p[ch * v + i];
            psum += pv;
            if ((*labels)[static_cast<size_t>(i)] == ch) {
                inter += pv;
                gsum += T(1);
            }
        }
        (*nums)[static_cast<size_t>(ch)] = T(2) * inter + smooth;
        (*dens)[static_cast<size_t>(ch)] = psum + gsum + smooth;
        dice_sum += (*nums)[static_cast<size_t>(ch)] / (*dens)[static_cast<size_t>(ch)];
    }
    auto out = detail::alloc<T>(Shape{1});
    (*out)[0] = T(1) - dice_sum / T(c);
    int xn = probs.node;
    return probs.tape->emit(out, xn >= 0, [xn, nums, dens, labels, c, v](Tape<T>& t, const std::vector<T>& g) {
        auto& gx = t.grad_buf(xn);
        const T s = -g[0] / T(c);
        for (int64_t ch = 0; ch < c; ++ch) {
            const T num = (*nums)[static_cast<size_t>(ch)];
            const T den = (*dens)[static_cast<size_t>(ch)];
            const T inv_den = T(1) / den;
            const T base = -num * inv_den * inv_den;  // d(dice)/d(psum)
            for (int64_t i = 0; i < v; ++i) {
                const bool hit = (*labels)[static_cast<size_t>(i)] == ch;
                gx[static_cast<size_t>(ch * v + i)] += s * (base + (hit ? T(2) * inv_den : T(0)));
            }
        }
    });
}

}  // namespace swinvox
