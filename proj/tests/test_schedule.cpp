#include <doctest.h>

#include <cmath>

#include "crossgen/rng.hpp"
#include "crossgen/schedule.hpp"

using namespace crossgen;

namespace {
const NoiseSchedule& default_sched() {
    static NoiseSchedule s = build_schedule(1000, 1e-4, 0.02);
    return s;
}
}  // namespace

TEST_CASE("schedule tables and bounds") {
    const auto& s = default_sched();
    CHECK(s.T == 1000);
    // cumulative product recomputed by plain loop (independent oracle)
    double prod = 1.0;
    for (int t = 1; t <= s.T; ++t) {
        prod *= 1.0 - s.beta(t);
        CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-12));
    }
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
    CHECK(s.alpha_bar(1000) < 0.05);
    for (int t = 1; t <= s.T; ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));  // strict monotone decrease
        if (t > 1) CHECK(s.beta(t) > s.beta(t - 1));
    }
}

TEST_CASE("schedule edge cases and validation") {
    auto one = build_schedule(1, 0.1, 0.1);
    CHECK(one.alpha_bar(1) == doctest::Approx(0.9));
    CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.0, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 0.03, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("forward_diffuse formula cases") {
    const auto& s = default_sched();
    Rng rng(3);
    Tensor z0 = Tensor::randn({4, 4}, rng);
    Tensor eps = Tensor::randn({4, 4}, rng);

    // t = 0 is the identity for any eps
    CHECK(max_abs_diff(forward_diffuse(z0, 0, eps, s), z0) == 0.0);

    // eps = 0, t = 1, scalar: sqrt(abar_1)
    Tensor one = Tensor::full({1}, 1.0);
    Tensor zero = Tensor::zeros({1});
    Tensor zt = forward_diffuse(one, 1, zero, s);
    CHECK(zt[0] == doctest::Approx(std::sqrt(0.9999)).epsilon(1e-12));

    // z0 = 0: pure noise scaling
    Tensor z = forward_diffuse(zero, 500, one, s);
    CHECK(z[0] == doctest::Approx(std::sqrt(1.0 - s.alpha_bar(500))).epsilon(1e-12));

    Tensor bad = Tensor::zeros({2});
    CHECK_THROWS_AS(forward_diffuse(one, 1, bad, s), std::invalid_argument);
}

TEST_CASE("forward/predict_z0 round trip across t sweep") {
    const auto& s = default_sched();
    Rng rng(5);
    Tensor z0 = Tensor::randn({16, 8, 8}, rng);
    for (int t : {1, 250, 500, 1000}) {
        Tensor eps = Tensor::randn(z0.shape(), rng);
        Tensor zt = forward_diffuse(z0, t, eps, s);
        Tensor rec = predict_z0(zt, eps, t, s);
        CHECK(max_abs_diff(rec, z0) <= 1e-4);  // single-precision contract
    }
    CHECK_THROWS_AS(predict_z0(z0, z0, 0, s), std::invalid_argument);

    // eps_hat = 0 reduces to zt / sqrt(abar)
    Tensor zt = Tensor::full({2}, 0.5);
    Tensor rec = predict_z0(zt, Tensor::zeros({2}), 100, s);
    CHECK(rec[0] == doctest::Approx(0.5 / std::sqrt(s.alpha_bar(100))).epsilon(1e-12));
}

TEST_CASE("posterior mean formula") {
    const auto& s = default_sched();
    // t=1 scalar arithmetic check
    Tensor zt = Tensor::full({1}, 1.0);
    Tensor eh = Tensor::full({1}, 1.0);
    double expected = (1.0 - 1e-4 / std::sqrt(1.0 - 0.9999)) / std::sqrt(0.9999);
    CHECK(posterior_mean(zt, eh, 1, s)[0] == doctest::Approx(expected).epsilon(1e-9));

    // beta -> 0 limit: alpha ~ 1 so mu ~ zt
    auto tiny = build_schedule(5, 1e-12, 1e-12);
    Tensor mu = posterior_mean(zt, eh, 3, tiny);
    CHECK(mu[0] == doctest::Approx(1.0).epsilon(1e-5));

    CHECK_THROWS_AS(posterior_mean(zt, eh, 0, s), std::invalid_argument);

    // linearity identity: mu(z, a e1 + b e2) = a mu(z,e1) + b mu(z,e2) - (a+b-1) z / sqrt(alpha_t)
    Rng rng(7);
    Tensor z = Tensor::randn({6}, rng), e1 = Tensor::randn({6}, rng), e2 = Tensor::randn({6}, rng);
    double a = 0.7, b = -1.3;
    int t = 321;
    Tensor mix(e1.shape());
    for (int i = 0; i < 6; ++i) mix[i] = a * e1[i] + b * e2[i];
    Tensor lhs = posterior_mean(z, mix, t, s);
    Tensor m1 = posterior_mean(z, e1, t, s), m2 = posterior_mean(z, e2, t, s);
    for (int i = 0; i < 6; ++i) {
        double rhs = a * m1[i] + b * m2[i] - (a + b - 1.0) * z[i] / std::sqrt(s.alpha(t));
        CHECK(lhs[i] == doctest::Approx(rhs).epsilon(1e-9));
    }
}

TEST_CASE("ddim step determinism and closed-form round trip") {
    const auto& s = default_sched();
    Rng rng(11);
    Tensor z0 = Tensor::randn({16, 4, 4}, rng);
    Tensor eps = Tensor::randn(z0.shape(), rng);

    // t_prev = 0 returns the z0 prediction exactly
    Tensor zt = forward_diffuse(z0, 400, eps, s);
    Tensor stepped = ddim_step(zt, eps, 400, 0, s);
    CHECK(max_abs_diff(stepped, predict_z0(zt, eps, 400, s)) == 0.0);

    // perfect eps_hat: stepping T -> 0 in one hop recovers z0
    Tensor zT = forward_diffuse(z0, 1000, eps, s);
    Tensor rec = ddim_step(zT, eps, 1000, 0, s);
    CHECK(max_abs_diff(rec, z0) <= 1e-5);

    // eta = 0 is bit-deterministic
    Tensor s1 = ddim_step(zT, eps, 1000, 500, s);
    Tensor s2 = ddim_step(zT, eps, 1000, 500, s);
    CHECK(max_abs_diff(s1, s2) == 0.0);

    CHECK_THROWS_AS(ddim_step(zT, eps, 500, 500, s), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(zT, eps, 500, 900, s), std::invalid_argument);
    // eta > 0 without an rng is rejected
    CHECK_THROWS_AS(ddim_step(zT, eps, 500, 100, s, 0.5, nullptr), std::invalid_argument);
}

TEST_CASE("ddim timestep subsequence bookkeeping") {
    auto ts = ddim_timesteps(1000, 50);
    CHECK(ts.size() == 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 20);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    // stepping pairs end at t = 0: 50 denoiser calls total
    int calls = 0;
    for (size_t i = 0; i < ts.size(); ++i) {
        ++calls;
        int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        CHECK(t_prev < ts[i]);
    }
    CHECK(calls == 50);

    auto all = ddim_timesteps(10, 10);
    CHECK(all.front() == 10);
    CHECK(all.back() == 1);
}

TEST_CASE("forward diffuse preserves unit variance empirically") {
    const auto& s = default_sched();
    Rng rng(13);
    const int n = 10000;
    for (int t : {1, 300, 700, 1000}) {
        double m2 = 0;
        for (int i = 0; i < n; ++i) {
            Tensor z0 = Tensor::randn({1}, rng);
            Tensor e = Tensor::randn({1}, rng);
            double zt = forward_diffuse(z0, t, e, s)[0];
            m2 += zt * zt;
        }
        m2 /= n;
        CHECK(std::fabs(m2 - 1.0) < 0.05);
    }
}
