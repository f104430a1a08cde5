#pragma once

#include <vector>

#include "crossgen/rng.hpp"
#include "crossgen/tensor.hpp"

namespace crossgen {

// Diffusion clock: per-step variances and their cumulative products.
// Index convention: t runs 1..T for steps, alpha_bar(0) == 1.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // size T, betas[t-1] = beta_t
    std::vector<double> alphas;      // alpha_t = 1 - beta_t
    std::vector<double> alpha_bars;  // size T+1, alpha_bars[t] = prod_{i<=t} alpha_i

    double beta(int t) const { return betas[size_t(t - 1)]; }
    double alpha(int t) const { return alphas[size_t(t - 1)]; }
    double alpha_bar(int t) const { return alpha_bars[size_t(t)]; }
};

// Linear beta ramp over T steps.
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t in [0, T].
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// zhat0 = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), t in [1, T].
Tensor predict_z0(const Tensor& zt, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

// mu = (z_t - (1 - alpha_t)/sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t).
Tensor posterior_mean(const Tensor& zt, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

// One DDIM update from t to t_prev (t_prev < t). eta=0 is deterministic; for
// eta>0 the stochastic term draws from `rng` (required then).
Tensor ddim_step(const Tensor& zt, const Tensor& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched, double eta = 0.0, Rng* rng = nullptr);

// Descending timestep subsequence for few-step sampling: uniform stride over
// [1, T] including T, `steps` entries; the implicit final target is t=0.
std::vector<int> ddim_timesteps(int T, int steps);

}  // namespace crossgen
