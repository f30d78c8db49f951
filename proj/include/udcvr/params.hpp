#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "udcvr/autograd.hpp"

namespace udcvr {

/// Learnable tensors addressed by dotted path (e.g. "spatial.latb0.W_Q"), in creation order.
class ParamStore {
public:
    Var add(const std::string& path, Tensor init) {
        if (vars_.count(path)) throw ContractError("duplicate parameter path '" + path + "'");
        Var v(std::move(init), true);
        vars_.emplace(path, v);
        order_.push_back(path);
        return v;
    }

    const Var& get(const std::string& path) const {
        auto it = vars_.find(path);
        if (it == vars_.end()) throw ContractError("unknown parameter path '" + path + "'");
        return it->second;
    }
    Var& get(const std::string& path) {
        auto it = vars_.find(path);
        if (it == vars_.end()) throw ContractError("unknown parameter path '" + path + "'");
        return it->second;
    }

    bool contains(const std::string& path) const { return vars_.count(path) != 0; }
    const std::vector<std::string>& paths() const { return order_; }
    std::size_t size() const { return order_.size(); }

    std::size_t element_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : vars_) n += v.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, v] : vars_) v.zero_grad();
    }

    /// Overwrites a value in place; modules holding the Var see the change.
    void assign(const std::string& path, const Tensor& value) {
        Var& v = get(path);
        if (v.shape() != value.shape())
            throw DataError("parameter '" + path + "' expects shape " + to_string(v.shape()) + ", got " +
                            to_string(value.shape()));
        v.mutable_value() = value;
    }

private:
    std::map<std::string, Var> vars_;
    std::vector<std::string> order_;
};

namespace init {

template <class Rng>
Tensor normal(Shape shape, Rng& rng, double stddev) {
    return Tensor::randn(std::move(shape), rng, stddev);
}

/// Fan-in scaled normal, N(0, 1/fan_in).
template <class Rng>
Tensor fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(double(fan_in)));
}

}  // namespace init

}  // namespace udcvr
