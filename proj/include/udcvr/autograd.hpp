#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "udcvr/tensor.hpp"

namespace udcvr {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    void accumulate(const Tensor& g) {
        if (g.shape() != value.shape())
            throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match value shape " +
                             to_string(value.shape()));
        if (grad.size() == 0) {
            grad = g;
            return;
        }
        auto dst = grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
};

}  // namespace detail

/// Handle to a tensor that may participate in differentiation. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>(detail::Node{std::move(value), {}, requires_grad})) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    std::size_t size() const { return node_->value.size(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_->grad.size() != 0; }
    const Tensor& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor(); }

    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Records differentiable operations in execution order and replays them backwards.
class Tape {
public:
    using BackwardFn = std::function<void(const Tensor& grad_out)>;

    struct Entry {
        std::string op;
        std::shared_ptr<detail::Node> output;
        BackwardFn backward;
    };

    void record(std::string op, const Var& output, BackwardFn fn) {
        entries_.push_back({std::move(op), output.node(), std::move(fn)});
    }

    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    /// Indices of entries whose backward rule ran, in the order they ran.
    const std::vector<std::size_t>& last_backward_order() const noexcept { return order_; }

    void clear() {
        entries_.clear();
        order_.clear();
    }

    void backward(const Var& loss);

private:
    std::vector<Entry> entries_;
    std::vector<std::size_t> order_;
};

namespace detail {

inline Tape*& active_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}

// Name of an op whose backward rule is deliberately corrupted (gradcheck mutation testing).
inline std::string& corrupted_op_slot() {
    static std::string name;
    return name;
}

}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target for the current thread while in scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
    ~TapeScope() { detail::active_tape_slot() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording on the current thread (inference).
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

namespace testing {

/// Scales the incoming gradient of every `op` backward rule by 1.5 while in scope.
class CorruptBackward {
public:
    explicit CorruptBackward(std::string op) : previous_(detail::corrupted_op_slot()) {
        detail::corrupted_op_slot() = std::move(op);
    }
    ~CorruptBackward() { detail::corrupted_op_slot() = previous_; }
    CorruptBackward(const CorruptBackward&) = delete;
    CorruptBackward& operator=(const CorruptBackward&) = delete;

private:
    std::string previous_;
};

}  // namespace testing

inline void Tape::backward(const Var& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    const auto it = std::find_if(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.output == loss.node(); });
    if (it == entries_.end()) throw ContractError("loss was not produced on this tape");

    order_.clear();
    loss.node()->accumulate(Tensor::ones(loss.shape()));
    const std::string& corrupted = detail::corrupted_op_slot();
    const auto last = static_cast<std::size_t>(it - entries_.begin());
    for (std::size_t i = last + 1; i-- > 0;) {
        Entry& e = entries_[i];
        if (e.output->grad.size() == 0) continue;
        order_.push_back(i);
        if (!corrupted.empty() && e.op == corrupted) {
            Tensor g = e.output->grad;
            for (auto& v : g.vec()) v *= 1.5;
            e.backward(g);
        } else {
            e.backward(e.output->grad);
        }
    }
}

/// Convenience wrapper matching the free-function form.
inline void backward(Tape& tape, const Var& loss) { tape.backward(loss); }

}  // namespace udcvr
