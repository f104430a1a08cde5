#include "crossgen/schedule.hpp"

#include <cmath>

namespace crossgen {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    require(T >= 1, "build_schedule: T must be >= 1");
    require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(size_t(T));
    s.alphas.resize(size_t(T));
    s.alpha_bars.resize(size_t(T) + 1);
    s.alpha_bars[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
        double beta = beta_start + (beta_end - beta_start) * frac;
        s.betas[size_t(t - 1)] = beta;
        s.alphas[size_t(t - 1)] = 1.0 - beta;
        s.alpha_bars[size_t(t)] = s.alpha_bars[size_t(t - 1)] * (1.0 - beta);
    }
    return s;
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require(t >= 0 && t <= sched.T, "forward_diffuse: t out of range");
    require(z0.same_shape(eps), "forward_diffuse: z0/eps shape mismatch");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(z0.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

Tensor predict_z0(const Tensor& zt, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    require(t >= 1 && t <= sched.T, "predict_z0: t out of range");
    require(zt.same_shape(eps_hat), "predict_z0: shape mismatch");
    const double ab = sched.alpha_bar(t);
    const double inv = 1.0 / std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(zt.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = (zt[i] - b * eps_hat[i]) * inv;
    return out;
}

Tensor posterior_mean(const Tensor& zt, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    require(t >= 1 && t <= sched.T, "posterior_mean: t out of range");
    require(zt.same_shape(eps_hat), "posterior_mean: shape mismatch");
    const double a = sched.alpha(t);
    const double coef = (1.0 - a) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double inv = 1.0 / std::sqrt(a);
    Tensor out(zt.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = inv * (zt[i] - coef * eps_hat[i]);
    return out;
}

Tensor ddim_step(const Tensor& zt, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched, double eta, Rng* rng) {
    require(t_prev >= 0 && t_prev < t && t <= sched.T, "ddim_step: need 0 <= t_prev < t <= T");
    Tensor z0 = predict_z0(zt, eps_hat, t, sched);
    const double ab_prev = sched.alpha_bar(t_prev);
    const double ab_t = sched.alpha_bar(t);
    double sigma = 0.0;
    if (eta > 0.0) {
        require(rng != nullptr, "ddim_step: eta > 0 requires an rng");
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) *
                std::sqrt(1.0 - ab_t / ab_prev);
    }
    const double a = std::sqrt(ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    Tensor out(zt.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = a * z0[i] + dir * eps_hat[i];
        if (sigma > 0.0) out[i] += sigma * rng->normal();
    }
    return out;
}

std::vector<int> ddim_timesteps(int T, int steps) {
    require(steps >= 1 && steps <= T, "ddim_timesteps: steps must be in [1, T]");
    std::vector<int> ts;
    ts.reserve(size_t(steps));
    for (int i = 0; i < steps; ++i) {
        int t = int(std::llround(double(T) - double(i) * double(T) / double(steps)));
        t = std::max(1, std::min(T, t));
        if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
        require(t >= 1, "ddim_timesteps: cannot fit steps into [1, T]");
        ts.push_back(t);
    }
    return ts;
}

}  // namespace crossgen
