#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "swinvox/tensor.hpp"

namespace swinvox {

template <typename T>
class Tape;

/// Handle to a tensor flowing through a computation. Carries the value and,
/// when the owning tape records gradients, the index of its tape node.
template <typename T>
struct Value {
    std::shared_ptr<Tensor<T>> data;
    Tape<T>* tape = nullptr;
    int node = -1;

    const Tensor<T>& v() const { return *data; }
    const Shape& dims() const { return data->dims; }
    int64_t size() const { return data->size(); }
    bool tracked() const { return node >= 0; }
};

/// Reverse-mode tape. Forward ops append nodes whose closures scatter the
/// node's output gradient into its parents' gradient buffers. With
/// `grad_enabled == false` no nodes are recorded and intermediate buffers are
/// released by ordinary scoping.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape<T>&, const std::vector<T>&)>;

    struct Node {
        int64_t n = 0;          // element count, for grad allocation
        std::vector<T> grad;    // empty until first accumulation
        BackFn backward;        // null for leaves
    };

    bool grad_enabled = true;

    explicit Tape(bool enable_grad = true) : grad_enabled(enable_grad) {}

    Value<T> leaf(Tensor<T> t, bool requires_grad = true) {
        auto p = std::make_shared<Tensor<T>>(std::move(t));
        return leaf_shared(std::move(p), requires_grad);
    }

    Value<T> leaf_shared(std::shared_ptr<Tensor<T>> p, bool requires_grad = true) {
        Value<T> v;
        v.data = std::move(p);
        v.tape = this;
        if (grad_enabled && requires_grad) {
            nodes_.push_back(Node{v.data->size(), {}, nullptr});
            v.node = static_cast<int>(nodes_.size()) - 1;
        }
        return v;
    }

    Value<T> constant(Tensor<T> t) { return leaf(std::move(t), false); }

    /// Records an op node. `backward` may be empty when none of the parents
    /// is tracked; in that case no node is appended at all.
    Value<T> emit(std::shared_ptr<Tensor<T>> out, bool any_tracked_parent, BackFn backward) {
        Value<T> v;
        v.data = std::move(out);
        v.tape = this;
        if (grad_enabled && any_tracked_parent) {
            nodes_.push_back(Node{v.data->size(), {}, std::move(backward)});
            v.node = static_cast<int>(nodes_.size()) - 1;
        }
        return v;
    }

    /// Gradient buffer of a node, zero-initialized on first use.
    std::vector<T>& grad_buf(int node) {
        Node& nd = nodes_[static_cast<size_t>(node)];
        if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(nd.n), T(0));
        return nd.grad;
    }

    bool has_grad(int node) const { return !nodes_[static_cast<size_t>(node)].grad.empty(); }

    /// Seeds the (scalar) root with gradient 1 and replays the tape in
    /// reverse creation order.
    void backward(const Value<T>& root) {
        if (!grad_enabled) throw NumericError("backward on a gradient-disabled tape");
        if (root.size() != 1) throw ShapeError("backward root must be scalar, got " + shape_str(root.dims()));
        if (!root.tracked()) throw NumericError("backward root does not depend on any tracked leaf");
        grad_buf(root.node)[0] = T(1);
        for (int i = root.node; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (nd.grad.empty() || !nd.backward) continue;
            nd.backward(*this, nd.grad);
        }
    }

    /// Gradient of a leaf/op output after backward(); zeros if untouched.
    Tensor<T> grad(const Value<T>& v) {
        Tensor<T> g(v.dims());
        if (v.tracked() && has_grad(v.node)) {
            const auto& buf = nodes_[static_cast<size_t>(v.node)].grad;
            std::copy(buf.begin(), buf.end(), g.data.begin());
        }
        return g;
    }

    size_t num_nodes() const { return nodes_.size(); }

    void reset() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

}  // namespace swinvox
