#pragma once

#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "lssf/autodiff.hpp"
#include "lssf/ops.hpp"
#include "lssf/tensor.hpp"

namespace lssf {

// Flat name -> tensor registry for all model state. Learnable tensors take
// part in count_params and optimization; non-learnable entries hold BN
// running statistics.
template <typename T>
class ParamStore {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> value, bool learnable = true) {
        if (map_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
        order_.push_back(name);
        auto& e = map_[name];
        e.value = std::move(value);
        e.learnable = learnable;
        return e.value;
    }

    bool has(const std::string& name) const { return map_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::out_of_range("param store: unknown name " + name);
        return it->second.value;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::out_of_range("param store: unknown name " + name);
        return it->second.value;
    }

    bool learnable(const std::string& name) const { return map_.at(name).learnable; }

    const std::vector<std::string>& names() const { return order_; }

    int64_t count_learnable() const {
        int64_t n = 0;
        for (const auto& name : order_) {
            const auto& e = map_.at(name);
            if (e.learnable) n += e.value.size();
        }
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& name : order_) {
            const auto& e = map_.at(name);
            out.add(name, e.value.template cast<U>(), e.learnable);
        }
        return out;
    }

  private:
    struct Entry {
        Tensor<T> value;
        bool learnable = true;
    };
    std::vector<std::string> order_;
    std::unordered_map<std::string, Entry> map_;
};

// Per-forward-pass context: the tape, the parameter registry, run mode, and
// the RNG used for dropout. bindings maps learnable param names to their
// tape leaves so the optimizer can collect gradients after backward().
template <typename T>
struct Ctx {
    Tape<T>& tape;
    ParamStore<T>& params;
    Mode mode = Mode::Infer;
    std::mt19937_64* rng = nullptr;
    std::map<std::string, Var> bindings;

    // Leaf for a stored parameter; reused within one forward pass.
    Var p(const std::string& name) {
        auto it = bindings.find(name);
        if (it != bindings.end()) return it->second;
        bool rg = params.learnable(name);
        Var v = tape.leaf(params.at(name), rg);
        bindings.emplace(name, v);
        return v;
    }
};

}  // namespace lssf
