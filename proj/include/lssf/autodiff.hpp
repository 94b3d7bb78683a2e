#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lssf/tensor.hpp"

namespace lssf {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in topological order during the
// forward pass; backward() replays them once in reverse. Repeated backward
// calls without zero_grad() accumulate gradients.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&)>;

    bool check_finite = true;

    Var leaf(Tensor<T> value, bool requires_grad) {
        return push(std::move(value), requires_grad, {});
    }

    Var push(Tensor<T> value, bool requires_grad, BackwardFn bw) {
        if (check_finite && !value.all_finite())
            throw std::runtime_error("tape: non-finite value in forward pass");
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor<T>& val(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).value; }
    Tensor<T>& val_mut(Var v) { return nodes_.at(static_cast<size_t>(v.id)).value; }

    bool requires_grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).requires_grad; }

    // Grad tensor, allocated as zeros on first touch.
    Tensor<T>& grad(Var v) {
        Node& n = nodes_.at(static_cast<size_t>(v.id));
        if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor<T>(n.value.shape);
        return n.grad;
    }

    bool has_grad(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).grad.size() != 0; }

    void backward(Var loss) {
        if (!loss.valid() || !val(loss).is_scalar())
            throw std::invalid_argument("backward: loss must be a scalar");
        if (nodes_.empty()) throw std::runtime_error("backward: empty tape");
        // Leaf grads accumulate across calls; interior grads are per-call.
        for (auto& n : nodes_)
            if (n.backward && n.grad.size() != 0) std::fill(n.grad.data.begin(), n.grad.data.end(), T(0));
        grad(loss)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
            n.backward(*this);
            if (check_finite && !n.grad.all_finite())
                throw std::runtime_error("tape: non-finite gradient in backward pass");
        }
    }

    void zero_grad() {
        for (auto& n : nodes_) n.grad = Tensor<T>();
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

}  // namespace lssf
