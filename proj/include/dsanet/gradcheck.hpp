#pragma once

#include <functional>

#include "dsanet/tape.hpp"
#include "dsanet/tensor.hpp"

namespace dsanet {

// fn maps (tape, input) to a scalar tensor. Central differences against the
// analytic gradient; the returned figure is
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// Meant for float64 inputs at non-degenerate points (nudge away from pooling
// ties before calling).
template <typename T>
double grad_check(const std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>& fn, Tensor<T> input,
                  double eps = 1e-5) {
    input.set_requires_grad(true);
    input.zero_grad();
    {
        Tape<T> tape;
        Tensor<T> loss = fn(tape, input);
        tape.backward(loss);
    }
    std::vector<T> analytic = input.grad();

    Tape<T> eval(false);
    double worst = 0.0;
    const std::int64_t n = input.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const T saved = input[i];
        input[i] = saved + static_cast<T>(eps);
        const double fp = static_cast<double>(fn(eval, input)[0]);
        input[i] = saved - static_cast<T>(eps);
        const double fm = static_cast<double>(fn(eval, input)[0]);
        input[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

// Same figure, but for a subset of elements of one tensor while the scalar is
// produced by an arbitrary closure (used for whole-model parameter checks,
// where exhaustive differencing is out of reach).
template <typename T>
double grad_check_elements(const std::function<double()>& eval_scalar, Tensor<T>& leaf,
                           const std::vector<T>& analytic,
                           const std::vector<std::int64_t>& indices, double eps = 1e-5) {
    double worst = 0.0;
    for (std::int64_t i : indices) {
        const T saved = leaf[i];
        leaf[i] = saved + static_cast<T>(eps);
        const double fp = eval_scalar();
        leaf[i] = saved - static_cast<T>(eps);
        const double fm = eval_scalar();
        leaf[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dsanet
