#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xflow/numcore/array.hpp"

namespace xflow {

struct OptimizerConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.05;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) {
            throw std::invalid_argument("OptimizerConfig: learning_rate must be positive");
        }
        if (!(0.0 < beta1 && beta1 < beta2 && beta2 < 1.0)) {
            throw std::invalid_argument("OptimizerConfig: require 0 < beta1 < beta2 < 1");
        }
        if (weight_decay < 0.0 || !(epsilon > 0.0)) {
            throw std::invalid_argument("OptimizerConfig: weight_decay >= 0 and epsilon > 0 required");
        }
    }
};

/// Named parameters with gradient accumulators and AdamW moments of identical shape.
/// Insertion order is preserved; it fixes serialization and update order.
template <class T>
class BasicParamStore {
public:
    using Array = BasicDenseArray<T>;

    struct Entry {
        std::string name;
        Array value;
        Array grad;
        Array m;
        Array v;
        bool has_grad = false;
    };

    Array& add(std::string name, Array value) {
        if (index_.contains(name)) {
            throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
        }
        const Shape shape = value.shape();
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{std::move(name), std::move(value), Array(shape), Array(shape), Array(shape), false});
        return entries_.back().value;
    }

    [[nodiscard]] bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

    [[nodiscard]] Entry& entry(std::string_view name) { return entries_[lookup(name)]; }
    [[nodiscard]] const Entry& entry(std::string_view name) const { return entries_[lookup(name)]; }

    [[nodiscard]] Array& value(std::string_view name) { return entry(name).value; }
    [[nodiscard]] const Array& value(std::string_view name) const { return entry(name).value; }
    [[nodiscard]] const Array& grad(std::string_view name) const { return entry(name).grad; }

    /// Adds `g` into the gradient accumulator of `name` and marks it populated.
    void accumulate_grad(std::string_view name, const Array& g) {
        Entry& e = entry(name);
        require_shape("ParamStore::accumulate_grad(" + e.name + ")", g.shape(), e.value.shape());
        auto dst = e.grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += src[i];
        }
        e.has_grad = true;
    }

    void zero_grad() {
        for (Entry& e : entries_) {
            e.grad.fill(T{0});
            e.has_grad = false;
        }
    }

    [[nodiscard]] std::vector<Entry>& entries() noexcept { return entries_; }
    [[nodiscard]] const std::vector<Entry>& entries() const noexcept { return entries_; }
    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

    [[nodiscard]] std::uint64_t step() const noexcept { return step_; }
    void set_step(std::uint64_t s) noexcept { step_ = s; }
    void advance_step() noexcept { ++step_; }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Entry& e : entries_) {
            n += e.value.size();
        }
        return n;
    }

    /// Copies values (not gradients or moments) into a store of another scalar type.
    template <class U>
    [[nodiscard]] BasicParamStore<U> cast() const {
        BasicParamStore<U> out;
        for (const Entry& e : entries_) {
            out.add(e.name, e.value.template cast<U>());
        }
        out.set_step(step_);
        return out;
    }

private:
    std::size_t lookup(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) {
            throw std::out_of_range("ParamStore: unknown parameter '" + std::string(name) + "'");
        }
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::uint64_t step_ = 0;
};

using ParamStore = BasicParamStore<float>;

/// Decoupled-weight-decay Adam with bias correction. Every parameter must carry a
/// populated gradient; gradients are zeroed afterwards and the step counter advances.
template <class T>
void adamw_step(BasicParamStore<T>& params, const OptimizerConfig& config) {
    config.validate();
    std::string missing;
    for (const auto& e : params.entries()) {
        if (!e.has_grad) {
            missing += (missing.empty() ? "" : ", ") + e.name;
        }
    }
    if (!missing.empty()) {
        throw std::logic_error("adamw_step: missing gradient for parameters: " + missing);
    }

    params.advance_step();
    const double t = static_cast<double>(params.step());
    const T lr = static_cast<T>(config.learning_rate);
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    const T eps = static_cast<T>(config.epsilon);
    const T decay = static_cast<T>(1.0 - config.learning_rate * config.weight_decay);
    const T correction1 = static_cast<T>(1.0 - std::pow(config.beta1, t));
    const T correction2 = static_cast<T>(1.0 - std::pow(config.beta2, t));

    for (auto& e : params.entries()) {
        auto w = e.value.data();
        auto g = e.grad.data();
        auto m = e.m.data();
        auto v = e.v.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (T{1} - b1) * g[i];
            v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
            const T m_hat = m[i] / correction1;
            const T v_hat = v[i] / correction2;
            w[i] *= decay;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
        require_finite("adamw_step(" + e.name + ")", e.value);
    }
    params.zero_grad();
}

}  // namespace xflow
