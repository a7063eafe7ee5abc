// Rectified-flow core: straight-line interpolation x_t = (1-t) x + t eps,
// the constant velocity regression target eps - x, the flow-matching loss,
// and the velocity-to-score conversion used by the SDE sampler drift.
#pragma once

#include "transdiff/autograd.hpp"

namespace transdiff::flow {

template <class T>
void check_t_range(T t) {
    if (!(t >= T(0) && t <= T(1))) fail("t must lie in [0, 1]");
}

// x_t = (1 - t) x + t eps, elementwise; endpoints are exact
template <class T>
Tensor<T> interpolate(const Tensor<T>& x, const Tensor<T>& eps, T t) {
    check_same_shape(x, eps, "interpolate");
    check_t_range(t);
    if (t == T(0)) return x;
    if (t == T(1)) return eps;
    Tensor<T> out(x.shape());
    const T a = T(1) - t;
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = a * x[i] + t * eps[i];
    return out;
}

// regression target of the rectified path: eps - x
template <class T>
Tensor<T> velocity_target(const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(x, eps, "velocity_target");
    return sub(eps, x);
}

// mean over elements of ((eps - x) - v_pred)^2
template <class T>
T flow_loss(const Tensor<T>& v_pred, const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(v_pred, x, "flow_loss");
    check_same_shape(v_pred, eps, "flow_loss");
    double acc = 0;
    for (std::int64_t i = 0; i < v_pred.numel(); ++i) {
        const double e = (static_cast<double>(eps[i]) - static_cast<double>(x[i])) -
                         static_cast<double>(v_pred[i]);
        acc += e * e;
    }
    return static_cast<T>(acc / static_cast<double>(v_pred.numel()));
}

// differentiable flow loss against a constant (x, eps) pair
template <class T>
ag::Var<T> flow_loss(ag::Var<T> v_pred, const Tensor<T>& x, const Tensor<T>& eps) {
    check_same_shape(x, eps, "flow_loss");
    return ag::mean_sq_diff(v_pred, velocity_target(x, eps));
}

// Conditional-Gaussian score implied by the rectified path. Recovering the
// noise as eps_hat = x_t + (1-t) v gives score = -eps_hat / t; the
// denominator is clamped at t_floor to avoid the t -> 0 singularity.
template <class T>
Tensor<T> velocity_to_score(const Tensor<T>& v, const Tensor<T>& x_t, T t, T t_floor) {
    check_same_shape(v, x_t, "velocity_to_score");
    check_t_range(t);
    if (!(t_floor > T(0))) fail("velocity_to_score: t_floor must be positive");
    const T denom = std::max(t, t_floor);
    const T a = T(1) - t;
    Tensor<T> out(v.shape());
    for (std::int64_t i = 0; i < v.numel(); ++i) out[i] = -(x_t[i] + a * v[i]) / denom;
    return out;
}

}  // namespace transdiff::flow
