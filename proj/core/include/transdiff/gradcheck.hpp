// Central-difference gradient verification. The finite-difference side is the
// independent oracle; the analytic side comes from the tape.
#pragma once

#include "transdiff/autograd.hpp"

#include <functional>

namespace transdiff {

// builds a scalar loss from a differentiable input var on the given graph
template <class T>
using LossGraphFn = std::function<ag::Var<T>(ag::Graph<T>&, ag::Var<T>)>;

namespace detail {

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// max over coordinates of |analytic - central difference| /
// max(|analytic|, |central difference|, 1e-8)
template <class T>
double grad_check(const LossGraphFn<T>& loss_fn, const Tensor<T>& point, T step) {
    if (!(step > T(0))) fail("grad_check: step must be positive");

    auto eval = [&](const Tensor<T>& x) -> double {
        ag::Graph<T> g(false);
        ag::Var<T> loss = loss_fn(g, g.constant(x));
        if (loss.val().numel() != 1) fail("grad_check: loss must be scalar");
        const double v = static_cast<double>(loss.val()[0]);
        if (!std::isfinite(v)) fail("non-finite objective");
        return v;
    };

    // analytic gradient
    Tensor<T> grad(point.shape());
    {
        ag::Graph<T> g(true);
        ag::Var<T> x = g.leaf(point, &grad);
        ag::Var<T> loss = loss_fn(g, x);
        if (loss.val().numel() != 1) fail("grad_check: loss must be scalar");
        if (!std::isfinite(static_cast<double>(loss.val()[0]))) fail("non-finite objective");
        g.backward(loss);
    }

    double worst = 0;
    Tensor<T> probe = point;
    for (std::int64_t i = 0; i < point.numel(); ++i) {
        const T saved = probe[i];
        probe[i] = saved + step;
        const double up = eval(probe);
        probe[i] = saved - step;
        const double down = eval(probe);
        probe[i] = saved;
        const double numeric = (up - down) / (2.0 * static_cast<double>(step));
        worst = std::max(worst, detail::rel_error(static_cast<double>(grad[i]), numeric));
    }
    return worst;
}

// Same check with the central-difference oracle evaluated in a wider scalar
// type U. Plain double finite differences bottom out near 2e-4 relative error
// on coordinates whose gradient sits just above the formula's 1e-8 floor
// (roundoff ~ eps*f/2h against truncation ~ h^2 f'''/6); widening the oracle
// removes the roundoff side while the gradient under test stays in T.
// `mirror` must hold the same parameter set as `store`, exactly widened.
template <class T, class U>
double grad_check_params_wide_oracle(ParamStore<T>& store,
                                     const std::function<ag::Var<T>(ag::Graph<T>&)>& loss_t,
                                     ParamStore<U>& mirror,
                                     const std::function<ag::Var<U>(ag::Graph<U>&)>& loss_u,
                                     U step) {
    if (!(step > U(0))) fail("grad_check: step must be positive");
    if (mirror.size() != store.size()) fail("grad_check: parameter stores differ");

    auto eval = [&]() -> U {
        ag::Graph<U> g(false);
        ag::Var<U> loss = loss_u(g);
        const U v = loss.val()[0];
        if (!std::isfinite(static_cast<double>(v))) fail("non-finite objective");
        return v;
    };

    store.zero_grad();
    {
        ag::Graph<T> g(true);
        ag::Var<T> loss = loss_t(g);
        if (!std::isfinite(static_cast<double>(loss.val()[0]))) fail("non-finite objective");
        g.backward(loss);
    }

    double worst = 0;
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
        Parameter<T>& p = store.at(static_cast<int>(pi));
        Parameter<U>& q = mirror.at(static_cast<int>(pi));
        if (p.value.numel() != q.value.numel()) fail("grad_check: mirror shape mismatch");
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const U saved = q.value[i];
            q.value[i] = saved + step;
            const U up = eval();
            q.value[i] = saved - step;
            const U down = eval();
            q.value[i] = saved;
            const double numeric = static_cast<double>((up - down) / (U(2) * step));
            worst = std::max(worst, detail::rel_error(static_cast<double>(p.grad[i]), numeric));
        }
    }
    return worst;
}

// same check against every coordinate of every parameter in the store
template <class T>
double grad_check_params(ParamStore<T>& store,
                         const std::function<ag::Var<T>(ag::Graph<T>&)>& loss_builder, T step) {
    if (!(step > T(0))) fail("grad_check: step must be positive");

    auto eval = [&]() -> double {
        ag::Graph<T> g(false);
        ag::Var<T> loss = loss_builder(g);
        const double v = static_cast<double>(loss.val()[0]);
        if (!std::isfinite(v)) fail("non-finite objective");
        return v;
    };

    store.zero_grad();
    {
        ag::Graph<T> g(true);
        ag::Var<T> loss = loss_builder(g);
        if (!std::isfinite(static_cast<double>(loss.val()[0]))) fail("non-finite objective");
        g.backward(loss);
    }

    double worst = 0;
    for (auto& p : store) {
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const T saved = p.value[i];
            p.value[i] = saved + step;
            const double up = eval();
            p.value[i] = saved - step;
            const double down = eval();
            p.value[i] = saved;
            const double numeric = (up - down) / (2.0 * static_cast<double>(step));
            worst = std::max(worst, detail::rel_error(static_cast<double>(p.grad[i]), numeric));
        }
    }
    return worst;
}

}  // namespace transdiff
