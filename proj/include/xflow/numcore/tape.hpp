#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xflow/numcore/array.hpp"
#include "xflow/numcore/params.hpp"

namespace xflow {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

/// Tag for an inference tape: parameters are read but never receive gradients.
struct FrozenTag {};
inline constexpr FrozenTag frozen{};

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a valid
/// topological order for the backward sweep. Parameter leaves reference the
/// store's arrays directly; their gradients are pushed back into the store when
/// `backward` finishes. A tape is single-use: record, call `backward` once, drop.
template <class T>
class Tape {
public:
    using Array = BasicDenseArray<T>;
    using Backward = std::function<void(Tape&, const Array& grad_out)>;

    Tape() = default;
    explicit Tape(BasicParamStore<T>& params) : params_(&params), view_(&params) {}
    Tape(const BasicParamStore<T>& params, FrozenTag) : view_(&params) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Array value) { return push_leaf(std::move(value), false); }

    /// Leaf whose gradient is kept on the tape (read it back with `grad`).
    Var variable(Array value) { return push_leaf(std::move(value), true); }

    /// Leaf bound to a named parameter of the attached store. Repeated calls with
    /// the same name return the same node.
    Var param(std::string_view name) {
        if (view_ == nullptr) {
            throw std::logic_error("Tape::param: no parameter store attached");
        }
        const std::string key(name);
        if (auto it = param_nodes_.find(key); it != param_nodes_.end()) {
            return Var{it->second};
        }
        Node node;
        node.external = &view_->value(key);
        node.requires_grad = params_ != nullptr;
        node.param = key;
        node.op = "param:" + key;
        nodes_.push_back(std::move(node));
        const std::size_t id = nodes_.size() - 1;
        param_nodes_.emplace(key, id);
        return Var{id};
    }

    /// Appends the result of an operation. The backward closure runs only if one of
    /// the inputs requires a gradient. Non-finite results raise NumericError.
    Var record(std::string_view op, Array value, std::initializer_list<Var> inputs, Backward backward) {
        return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
    }

    Var record(std::string_view op, Array value, std::span<const Var> inputs, Backward backward) {
        require_finite(op, value);
        bool needs = false;
        for (Var in : inputs) {
            check(in);
            needs = needs || nodes_[in.id].requires_grad;
        }
        Node node;
        node.owned = std::move(value);
        node.requires_grad = needs;
        node.op = std::string(op);
        if (needs) {
            node.backward = std::move(backward);
        }
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    [[nodiscard]] const Array& value(Var v) const {
        check(v);
        return nodes_[v.id].get();
    }

    [[nodiscard]] const Shape& shape(Var v) const { return value(v).shape(); }

    [[nodiscard]] bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.id].requires_grad;
    }

    /// Mutable gradient buffer for `v`, allocated as zeros on first use.
    Array& grad(Var v) {
        check(v);
        Node& n = nodes_[v.id];
        if (n.grad.shape() != n.get().shape()) {
            n.grad = Array(n.get().shape());
        }
        return n.grad;
    }

    [[nodiscard]] bool has_grad(Var v) const {
        check(v);
        return nodes_[v.id].grad.shape() == nodes_[v.id].get().shape() && !nodes_[v.id].get().empty();
    }

    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a single-element loss. Parameter leaves recorded on this
    /// tape receive their (possibly zero) gradient in the attached store.
    void backward(Var loss) {
        if (nodes_.empty() || loss.id >= nodes_.size()) {
            throw std::logic_error("Tape::backward: no recorded forward pass for the requested loss");
        }
        if (swept_) {
            throw std::logic_error("Tape::backward: tape already consumed");
        }
        if (nodes_[loss.id].get().size() != 1) {
            throw ShapeError("Tape::backward: loss must hold exactly one element, got shape " +
                             shape_string(nodes_[loss.id].get().shape()));
        }
        swept_ = true;
        grad(loss).fill(T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward || n.grad.empty()) {
                continue;
            }
            n.backward(*this, n.grad);
            require_finite("backward of " + n.op, n.grad);
        }
        if (params_ != nullptr) {
            for (const auto& [name, id] : param_nodes_) {
                params_->accumulate_grad(name, grad(Var{id}));
            }
        }
    }

private:
    struct Node {
        Array owned;
        const Array* external = nullptr;
        Array grad;
        bool requires_grad = false;
        std::string param;
        std::string op;
        Backward backward;

        const Array& get() const { return external != nullptr ? *external : owned; }
    };

    Var push_leaf(Array value, bool requires_grad) {
        require_finite("tape leaf", value);
        Node node;
        node.owned = std::move(value);
        node.requires_grad = requires_grad;
        node.op = requires_grad ? "variable" : "constant";
        nodes_.push_back(std::move(node));
        return Var{nodes_.size() - 1};
    }

    void check(Var v) const {
        if (v.id >= nodes_.size()) {
            throw std::out_of_range("Tape: variable does not belong to this tape");
        }
    }

    BasicParamStore<T>* params_ = nullptr;
    const BasicParamStore<T>* view_ = nullptr;
    std::deque<Node> nodes_;  // stable references across appends
    std::unordered_map<std::string, std::size_t> param_nodes_;
    bool swept_ = false;
};

}  // namespace xflow
