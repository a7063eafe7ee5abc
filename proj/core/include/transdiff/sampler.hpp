// Generation-time integrators: deterministic Euler ODE stepping of the flow,
// the s1/s2-scaled Euler-Maruyama SDE step, classifier-free guidance, and the
// full noise-to-latent sampling loop over the reverse-time grid t: 1 -> 0.
#pragma once

#include "transdiff/flow.hpp"
#include "transdiff/rng.hpp"

#include <functional>
#include <optional>

namespace transdiff::sampler {

enum class SigmaForm {
    PaperLiteral,  // diffusion amplitude sqrt(sigma(t))
    Standard,      // diffusion amplitude sigma(t)
};

enum class Mode { Ode, Sde };

struct SamplerConfig {
    int steps = 50;
    double s1 = 1.0;
    double s2 = 1.0;
    double sigma_base = 0.0;  // sigma(t) = sigma_base * t
    SigmaForm sigma_form = SigmaForm::PaperLiteral;
    double t_floor = 1e-3;
    double cfg_scale = 1.0;
    Mode mode = Mode::Ode;

    void validate() const {
        if (steps < 1) fail("SamplerConfig: steps must be >= 1");
        if (sigma_base < 0) fail("SamplerConfig: sigma_base must be >= 0");
        if (!(t_floor > 0)) fail("SamplerConfig: t_floor must be > 0");
        if (cfg_scale < 0) fail("SamplerConfig: cfg_scale must be >= 0");
    }

    double sigma(double t) const { return sigma_base * t; }
    double noise_amplitude(double t) const {
        const double s = sigma(t);
        return sigma_form == SigmaForm::PaperLiteral ? std::sqrt(s) : s;
    }
};

// x + v * dt
template <class T>
Tensor<T> ode_step(const Tensor<T>& x, const Tensor<T>& v, T dt) {
    check_same_shape(x, v, "ode_step");
    if (dt == T(0)) fail("ode_step: dt must be nonzero");
    return axpy(x, v, dt);
}

// x_next = x + s1 * d_cur * dt + s2 * amp(t) * sqrt(|dt|) * z with
// d_cur = v - 1/2 sigma(t)^2 * score and z ~ N(0, I). Zero-valued terms are
// skipped outright so disabling them reproduces the ODE path bitwise.
template <class T>
Tensor<T> em_sde_step(const Tensor<T>& x, T t, T dt, const Tensor<T>& v,
                      const SamplerConfig& cfg, SeededRng& rng) {
    check_same_shape(x, v, "em_sde_step");
    flow::check_t_range(t);
    if (!(dt < T(0))) fail("em_sde_step: dt must be negative (reverse time)");

    const T sigma_t = static_cast<T>(cfg.sigma(static_cast<double>(t)));
    Tensor<T> out = x;

    if (cfg.s1 != 0.0) {
        if (sigma_t == T(0)) {
            // drift reduces to the plain velocity
            const T c = (cfg.s1 == 1.0) ? dt : static_cast<T>(cfg.s1) * dt;
            out = axpy(out, v, c);
        } else {
            Tensor<T> score =
                flow::velocity_to_score(v, x, t, static_cast<T>(cfg.t_floor));
            const T half_sq = sigma_t * sigma_t / T(2);
            Tensor<T> drift(v.shape());
            for (std::int64_t i = 0; i < v.numel(); ++i) drift[i] = v[i] - half_sq * score[i];
            out = axpy(out, drift, static_cast<T>(cfg.s1) * dt);
        }
    }

    const T amp = static_cast<T>(cfg.noise_amplitude(static_cast<double>(t)));
    if (cfg.s2 != 0.0 && amp != T(0)) {
        const T c = static_cast<T>(cfg.s2) * amp * std::sqrt(std::abs(dt));
        for (std::int64_t i = 0; i < out.numel(); ++i)
            out[i] += c * static_cast<T>(rng.normal());
    }
    return out;
}

// v_uncond + w * (v_cond - v_uncond); w = 1 and w = 0 return the inputs
// unchanged so guidance at those weights is exact
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, T w) {
    check_same_shape(v_cond, v_uncond, "cfg_combine");
    if (w == T(1)) return v_cond;
    if (w == T(0)) return v_uncond;
    Tensor<T> out(v_cond.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = v_uncond[i] + w * (v_cond[i] - v_uncond[i]);
    return out;
}

template <class T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>& x, T t)>;

// Integrates from x = N(0,I) at t = 1 down to t = 0 on a uniform grid with
// dt = -1/steps. When an unconditional velocity function is supplied and
// cfg_scale != 1, classifier-free guidance combines the two velocities.
template <class T>
Tensor<T> sample_latent(const VelocityFn<T>& velocity,
                        const std::optional<VelocityFn<T>>& uncond_velocity,
                        const SamplerConfig& cfg, const Shape& shape, SeededRng& rng) {
    cfg.validate();
    Tensor<T> x = rng_normal<T>(rng, shape);
    const bool guided = uncond_velocity.has_value() && cfg.cfg_scale != 1.0;
    const T dt = T(-1) / static_cast<T>(cfg.steps);
    for (int i = 0; i < cfg.steps; ++i) {
        const T t = T(1) - static_cast<T>(i) / static_cast<T>(cfg.steps);
        Tensor<T> v = velocity(x, t);
        if (guided) {
            Tensor<T> vu = (*uncond_velocity)(x, t);
            v = cfg_combine(v, vu, static_cast<T>(cfg.cfg_scale));
        }
        x = cfg.mode == Mode::Ode ? ode_step(x, v, dt) : em_sde_step(x, t, dt, v, cfg, rng);
    }
    ensure_finite(x, "sample_latent");
    return x;
}

}  // namespace transdiff::sampler
