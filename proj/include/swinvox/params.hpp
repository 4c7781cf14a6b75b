#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "swinvox/rng.hpp"
#include "swinvox/tape.hpp"

namespace swinvox {

/// Named, shaped parameter tensors with gradient slots and AdamW moment
/// accumulators. Creation order is fixed and defines both the seeded
/// initialization sequence and the checkpoint tensor order.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T> m, v;  // AdamW moments
    };

    int add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Entry e;
        e.name = name;
        e.grad = Tensor<T>(init.dims);
        e.m = Tensor<T>(init.dims);
        e.v = Tensor<T>(init.dims);
        e.value = std::move(init);
        entries_.push_back(std::move(e));
        index_[name] = static_cast<int>(entries_.size()) - 1;
        return static_cast<int>(entries_.size()) - 1;
    }

    int add_trunc_normal(const std::string& name, Shape dims, double stddev, Rng& rng) {
        Tensor<T> t(dims);
        for (auto& x : t.data) x = static_cast<T>(rng.trunc_normal(stddev));
        return add(name, std::move(t));
    }

    int add_zeros(const std::string& name, Shape dims) { return add(name, Tensor<T>(dims)); }

    int add_ones(const std::string& name, Shape dims) { return add(name, Tensor<T>(dims, T(1))); }

    size_t size() const { return entries_.size(); }
    Entry& entry(int i) { return entries_[static_cast<size_t>(i)]; }
    const Entry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }
    Entry& at(const std::string& name) {
        int i = find(name);
        if (i < 0) throw ConfigError("unknown parameter: " + name);
        return entries_[static_cast<size_t>(i)];
    }

    /// Creates one tape leaf per parameter; index-aligned with the store.
    std::vector<Value<T>> bind(Tape<T>& tape) {
        std::vector<Value<T>> bound;
        bound.reserve(entries_.size());
        for (auto& e : entries_) bound.push_back(tape.leaf(e.value, true));
        return bound;
    }

    /// Copies gradients accumulated on the tape back into the grad slots.
    void collect_grads(Tape<T>& tape, const std::vector<Value<T>>& bound) {
        for (size_t i = 0; i < entries_.size(); ++i) entries_[i].grad = tape.grad(bound[i]);
    }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& e : entries_) {
            out.add(e.name, e.value.template cast<U>());
            out.at(e.name).m = e.m.template cast<U>();
            out.at(e.name).v = e.v.template cast<U>();
        }
        return out;
    }

    int64_t num_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace swinvox
