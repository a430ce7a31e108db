#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "mtprompt/tape.hpp"
#include "mtprompt/tensor.hpp"

// Central finite-difference verification of tape gradients. Run in 64-bit:
// the difference quotient loses roughly half the mantissa, which float
// cannot spare.
//
// Excluded input class: functions with a hard max/abs kink evaluated exactly
// at a tie point (e.g. an L1 term with pred == gt, or two equal logits under
// a max). The two-sided quotient straddles the kink there and disagrees with
// either one-sided derivative. Random real-valued inputs avoid ties with
// probability one; tests must not place them deliberately.

namespace mtp {

template <typename T>
T relative_error(T analytic, T numeric) {
    const T denom = std::max({std::abs(analytic), std::abs(numeric), T(1e-8)});
    return std::abs(analytic - numeric) / denom;
}

// f: Tensor<T>(Tape<T>&, const Tensor<T>&) returning a scalar tensor.
// Returns max over coordinates of the relative error between the tape
// gradient and (f(x+eps e_i) - f(x-eps e_i)) / (2 eps).
template <typename T, typename F>
T grad_check(F&& f, Tensor<T> x, T eps = T(1e-5)) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tape<T> tape;
    Tensor<T> loss = f(tape, x);
    if (loss.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw std::runtime_error("grad_check: non-finite function value");
    tape.backward(loss);
    std::vector<T> analytic(x.grad().begin(), x.grad().end());

    auto eval = [&](void) -> T {
        Tape<T> t;
        t.set_recording(false);
        T v = f(t, x).item();
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error("grad_check: non-finite function value");
        return v;
    };

    T max_err = T(0);
    auto d = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const T keep = d[static_cast<size_t>(i)];
        d[static_cast<size_t>(i)] = keep + eps;
        const T fp = eval();
        d[static_cast<size_t>(i)] = keep - eps;
        const T fm = eval();
        d[static_cast<size_t>(i)] = keep;
        const T numeric = (fp - fm) / (T(2) * eps);
        max_err = std::max(max_err, relative_error(analytic[static_cast<size_t>(i)], numeric));
    }
    return max_err;
}

// Coordinate-sampled variant for whole models: `build_loss` reads `params`
// in place, so perturbing a parameter coordinate re-evaluates the full path.
// coords: (param index, flat offset) pairs.
template <typename T, typename LossFn>
T grad_check_params(LossFn&& build_loss, std::vector<Tensor<T>>& params,
                    const std::vector<std::pair<size_t, int64_t>>& coords, T eps = T(1e-5)) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tape<T> tape;
    Tensor<T> loss = build_loss(tape);
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw std::runtime_error("grad_check_params: non-finite loss");
    tape.backward(loss);

    auto eval = [&](void) -> T {
        Tape<T> t;
        t.set_recording(false);
        T v = build_loss(t).item();
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error("grad_check_params: non-finite loss");
        return v;
    };

    T max_err = T(0);
    for (const auto& [pi, off] : coords) {
        Tensor<T>& p = params[pi];
        const T analytic = p.grad()[static_cast<size_t>(off)];
        auto d = p.data();
        const T keep = d[static_cast<size_t>(off)];
        d[static_cast<size_t>(off)] = keep + eps;
        const T fp = eval();
        d[static_cast<size_t>(off)] = keep - eps;
        const T fm = eval();
        d[static_cast<size_t>(off)] = keep;
        const T numeric = (fp - fm) / (T(2) * eps);
        max_err = std::max(max_err, relative_error(analytic, numeric));
    }
    return max_err;
}

} // namespace mtp
