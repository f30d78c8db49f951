#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "udcvr/autograd.hpp"

namespace udcvr {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor for the relative error, so gradients that are zero up to
    // round-off do not divide by zero.
    double floor = 1e-4;
    // Upper bound on probed entries per input; entries are taken with a fixed stride.
    std::size_t max_entries_per_input = static_cast<std::size_t>(-1);
};

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t entries_checked = 0;
    bool passed = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward gradients of `loss_fn(inputs)` against central finite differences
/// for every input. `loss_fn` must return a scalar built from the inputs.
inline GradCheckResult check_gradients(std::string name, std::vector<Var> inputs,
                                       const std::function<Var(const std::vector<Var>&)>& loss_fn,
                                       GradCheckOptions opt = {}) {
    GradCheckResult result{std::move(name)};
    for (auto& v : inputs) {
        v.set_requires_grad(true);
        v.zero_grad();
    }
    {
        Tape tape;
        TapeScope scope(tape);
        Var loss = loss_fn(inputs);
        tape.backward(loss);
    }
    auto evaluate = [&] {
        NoGradScope no_grad;
        return loss_fn(inputs).value().item();
    };
    for (auto& v : inputs) {
        const Tensor analytic = v.has_grad() ? v.grad() : Tensor::zeros(v.shape());
        const std::size_t n = v.size();
        const std::size_t stride = std::max<std::size_t>(1, n / std::min(n, opt.max_entries_per_input));
        for (std::size_t i = 0; i < n; i += stride) {
            double& x = v.mutable_value()[i];
            const double saved = x;
            x = saved + opt.step;
            const double up = evaluate();
            x = saved - opt.step;
            const double down = evaluate();
            x = saved;
            const double numeric = (up - down) / (2.0 * opt.step);
            result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric, opt.floor));
            ++result.entries_checked;
        }
    }
    result.passed = result.max_rel_error < opt.tolerance;
    return result;
}

}  // namespace udcvr
