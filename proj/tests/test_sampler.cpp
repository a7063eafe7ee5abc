#include "transdiff/sampler.hpp"

#include <doctest.h>

#include <vector>

using namespace transdiff;
using sampler::Mode;
using sampler::SamplerConfig;
using sampler::SigmaForm;

namespace {

// Closed-form marginal velocity for a 1-D Gaussian target N(mu, s^2) under
// the rectified path, via joint-Gaussian conditioning:
//   v*(x_t, t) = E[eps | x_t] - E[x | x_t]
struct GaussianOracle {
    double mu = 3.0;
    double sigma = 0.5;

    double velocity(double x_t, double t) const {
        const double a = 1.0 - t;
        const double var_t = a * a * sigma * sigma + t * t;
        const double m_t = a * mu;
        const double coef = (t - a * sigma * sigma) / var_t;
        return coef * (x_t - m_t) - mu;
    }

    sampler::VelocityFn<double> fn() const {
        return [*this](const Tensor<double>& x, double t) {
            Tensor<double> v(x.shape());
            for (std::int64_t i = 0; i < x.numel(); ++i) v[i] = velocity(x[i], t);
            return v;
        };
    }
};

struct Moments {
    double mean = 0, stddev = 0;
};

Moments sample_moments(const SamplerConfig& cfg, int n_samples) {
    GaussianOracle oracle;
    double s = 0, s2 = 0;
    for (int i = 0; i < n_samples; ++i) {
        SeededRng rng(500, static_cast<std::uint64_t>(i));
        Tensor<double> x = sampler::sample_latent<double>(oracle.fn(), std::nullopt, cfg, {1}, rng);
        s += x[0];
        s2 += x[0] * x[0];
    }
    const double mean = s / n_samples;
    return {mean, std::sqrt(std::max(0.0, s2 / n_samples - mean * mean))};
}

}  // namespace

TEST_CASE("ode_step arithmetic") {
    Tensor<double> x({1}, {1.0});
    Tensor<double> zero({1}, {0.0});
    CHECK(bitwise_equal(sampler::ode_step(x, zero, -0.1), x));

    Tensor<double> v({1}, {2.0});
    CHECK(sampler::ode_step(x, v, -0.1)[0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK_THROWS(sampler::ode_step(x, v, 0.0));
}

TEST_CASE("ode integration matches the exponential closed form") {
    // dx/dt = -x integrated from t=1 (x=1) down to t=0; exact x(0) = e
    Tensor<double> x({1}, {1.0});
    const int steps = 1000;
    const double dt = -1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        Tensor<double> v({1}, {-x[0]});
        x = sampler::ode_step(x, v, dt);
    }
    const double exact = std::exp(1.0);
    CHECK(std::abs(x[0] - exact) / exact <= 1e-2);
}

TEST_CASE("em_sde_step degenerate cases") {
    SeededRng data_rng(7, 0);
    Tensor<double> x = rng_normal<double>(data_rng, {4, 3});
    Tensor<double> v = rng_normal<double>(data_rng, {4, 3});

    SUBCASE("s2=0 and sigma=0 reduce to the ODE step bitwise") {
        SamplerConfig cfg;
        cfg.s1 = 1.0;
        cfg.s2 = 0.0;
        cfg.sigma_base = 0.0;
        SeededRng rng(1, 1);
        Tensor<double> em = sampler::em_sde_step(x, 0.5, -0.01, v, cfg, rng);
        CHECK(bitwise_equal(em, sampler::ode_step(x, v, -0.01)));
        CHECK(rng.counter() == 0);  // no noise drawn
    }

    SUBCASE("s1=0 and s2=0 leave x unchanged") {
        SamplerConfig cfg;
        cfg.s1 = 0.0;
        cfg.s2 = 0.0;
        cfg.sigma_base = 1.0;
        SeededRng rng(1, 2);
        CHECK(bitwise_equal(sampler::em_sde_step(x, 0.5, -0.01, v, cfg, rng), x));
    }

    SUBCASE("dt must be negative") {
        SamplerConfig cfg;
        SeededRng rng(1, 3);
        CHECK_THROWS(sampler::em_sde_step(x, 0.5, 0.01, v, cfg, rng));
    }
}

TEST_CASE("em_sde_step noise variance matches s2^2 amp(t)^2 |dt|") {
    const double t = 0.6, dt = -0.02;
    const int draws = 100000;
    Tensor<double> x({1}, {0.3});
    Tensor<double> v({1}, {0.0});

    for (SigmaForm form : {SigmaForm::PaperLiteral, SigmaForm::Standard}) {
        SamplerConfig cfg;
        cfg.s1 = 0.0;  // isolate the diffusion term
        cfg.s2 = 1.3;
        cfg.sigma_base = 0.8;
        cfg.sigma_form = form;

        double s = 0, s2 = 0;
        for (int i = 0; i < draws; ++i) {
            SeededRng rng(900, static_cast<std::uint64_t>(i));
            Tensor<double> xn = sampler::em_sde_step(x, t, dt, v, cfg, rng);
            const double delta = xn[0] - x[0];
            s += delta;
            s2 += delta * delta;
        }
        const double mean = s / draws;
        const double var = s2 / draws - mean * mean;
        const double amp = cfg.noise_amplitude(t);
        const double expect = cfg.s2 * cfg.s2 * amp * amp * std::abs(dt);
        CHECK(std::abs(var - expect) / expect <= 0.03);
    }
}

TEST_CASE("cfg_combine") {
    SeededRng rng(8, 0);
    Tensor<double> vc = rng_normal<double>(rng, {3, 3});
    Tensor<double> vu = rng_normal<double>(rng, {3, 3});
    CHECK(bitwise_equal(sampler::cfg_combine(vc, vu, 1.0), vc));
    CHECK(bitwise_equal(sampler::cfg_combine(vc, vu, 0.0), vu));

    Tensor<double> zero({1}, {0.0});
    Tensor<double> one({1}, {1.0});
    CHECK(sampler::cfg_combine(one, zero, 2.0)[0] == 2.0);
}

TEST_CASE("sample_latent determinism and grid") {
    GaussianOracle oracle;
    SamplerConfig cfg;
    cfg.steps = 17;

    SUBCASE("same seed and config twice is bitwise identical") {
        SeededRng r1(42, 0), r2(42, 0);
        auto a = sampler::sample_latent<double>(oracle.fn(), std::nullopt, cfg, {4}, r1);
        auto b = sampler::sample_latent<double>(oracle.fn(), std::nullopt, cfg, {4}, r2);
        CHECK(bitwise_equal(a, b));
    }

    SUBCASE("sde with s2=0 equals the ode trajectory bitwise") {
        SamplerConfig sde = cfg;
        sde.mode = Mode::Sde;
        sde.s2 = 0.0;
        sde.sigma_base = 0.0;
        SeededRng r1(43, 0), r2(43, 0);
        auto a = sampler::sample_latent<double>(oracle.fn(), std::nullopt, cfg, {4}, r1);
        auto b = sampler::sample_latent<double>(oracle.fn(), std::nullopt, sde, {4}, r2);
        CHECK(bitwise_equal(a, b));
    }

    SUBCASE("velocity is queried on the uniform grid covering [1, 1/steps]") {
        std::vector<double> ts;
        sampler::VelocityFn<double> probe = [&](const Tensor<double>& x, double t) {
            ts.push_back(t);
            return Tensor<double>(x.shape());
        };
        SeededRng rng(44, 0);
        sampler::sample_latent<double>(probe, std::nullopt, cfg, {1}, rng);
        REQUIRE(ts.size() == 17);
        CHECK(ts.front() == 1.0);
        for (std::size_t i = 0; i < ts.size(); ++i)
            CHECK(std::abs(ts[i] - (1.0 - static_cast<double>(i) / 17.0)) <= 1e-12);
        // final time after the last step is exactly 0
        CHECK(std::abs(ts.back() - 1.0 / 17.0) <= 1e-12);
    }

    SUBCASE("one-step inference is a single Euler jump from the initial noise") {
        SamplerConfig one = cfg;
        one.steps = 1;
        SeededRng r1(45, 0);
        auto out = sampler::sample_latent<double>(oracle.fn(), std::nullopt, one, {3}, r1);
        SeededRng r2(45, 0);
        Tensor<double> eps = rng_normal<double>(r2, {3});
        Tensor<double> expect = sampler::ode_step(eps, oracle.fn()(eps, 1.0), -1.0);
        CHECK(bitwise_equal(out, expect));
    }

    SUBCASE("cfg_scale=1 gives a trajectory identical to unguided sampling") {
        SamplerConfig guided = cfg;
        guided.cfg_scale = 1.0;
        int uncond_calls = 0;
        sampler::VelocityFn<double> uncond = [&](const Tensor<double>& x, double) {
            ++uncond_calls;
            return Tensor<double>(x.shape());
        };
        SeededRng r1(46, 0), r2(46, 0);
        auto a = sampler::sample_latent<double>(oracle.fn(), uncond, guided, {4}, r1);
        auto b = sampler::sample_latent<double>(oracle.fn(), std::nullopt, guided, {4}, r2);
        CHECK(bitwise_equal(a, b));
        CHECK(uncond_calls == 0);
    }
}

TEST_CASE("closed-form Gaussian oracle: ODE sampling recovers N(3, 0.25)") {
    SamplerConfig cfg;
    cfg.steps = 100;
    const Moments m100 = sample_moments(cfg, 10000);
    CHECK(std::abs(m100.mean - 3.0) <= 0.05);
    CHECK(std::abs(m100.stddev - 0.5) <= 0.05);

    // moment error decreases monotonically over steps 1 -> 10 -> 100
    auto err = [](const Moments& m) {
        return std::abs(m.mean - 3.0) + std::abs(m.stddev - 0.5);
    };
    cfg.steps = 1;
    const double e1 = err(sample_moments(cfg, 10000));
    cfg.steps = 10;
    const double e10 = err(sample_moments(cfg, 10000));
    const double e100 = err(m100);
    CHECK(e1 > e10);
    CHECK(e10 > e100);
}
