// Forward noising process, reverse samplers (stochastic and deterministic),
// and the signal-destruction diagnostic. Everything runs in the normalized
// parameter space; samplers normalize on entry and denormalize on exit.
//
// The denoiser is signal-predicting: given the noised future parameters x_j,
// the conditioning parameters, both metric scalars, and the step index j, it
// returns its estimate of the clean x_0.
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ckptdiff/checkpoints.hpp"
#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

struct DiffusionSchedule {
  long J = 0;
  std::vector<double> beta_v, alpha_v, alpha_bar_v;  // index j-1 holds step j

  double beta(long j) const { return beta_v[(size_t)(j - 1)]; }
  double alpha(long j) const { return alpha_v[(size_t)(j - 1)]; }
  // alpha_bar(0) = 1 by convention (no noise before the first step)
  double alpha_bar(long j) const { return j == 0 ? 1.0 : alpha_bar_v[(size_t)(j - 1)]; }
};

// Betas linearly interpolated from beta_start to beta_end inclusive.
DiffusionSchedule make_linear_schedule(long J, double beta_start = 1e-4, double beta_end = 0.02);

// theta_tilde = sqrt(alpha_bar_j) * theta_star + sqrt(1 - alpha_bar_j) * z
std::vector<float> q_sample(const std::vector<float>& theta_star, long j,
                            const std::vector<float>& z, const DiffusionSchedule& sched);

// Batched denoiser: x_j and theta_norm are [B, D]; l_cur/l_prompt have one
// scalar per row; returns the x_0 prediction, [B, D].
using BatchDenoiseFn =
    std::function<Tensor(const Tensor& x_j, const Tensor& theta_norm,
                         const std::vector<float>& l_cur, const std::vector<float>& l_prompt,
                         long j)>;

// Mean squared error between the clean normalized target and the denoiser's
// prediction from its noised version; the training objective.
double diffusion_loss(const BatchDenoiseFn& model, const std::vector<float>& theta_norm,
                      const std::vector<float>& theta_star_norm, float l_cur, float l_star,
                      long j, const std::vector<float>& z, const DiffusionSchedule& sched);

// Ancestral sampler. Starts from Gaussian noise, iterates j = J..1 with
// posterior mean
//   mu_j = sqrt(abar_{j-1}) beta_j / (1 - abar_j) * x0_hat
//        + sqrt(alpha_j) (1 - abar_{j-1}) / (1 - abar_j) * x_j
// and fixed noise variance beta_tilde_j = (1 - abar_{j-1}) / (1 - abar_j) *
// beta_j; the final step keeps the model's x_0 prediction exactly. Rows of
// theta_raw are independent samples (separate noise streams), so results per
// row do not depend on how callers batch.
Tensor ddpm_sample_batch(const BatchDenoiseFn& model, const Tensor& theta_raw,
                         const std::vector<float>& l_cur, const std::vector<float>& l_prompt,
                         const DiffusionSchedule& sched, const NormStats& norm, uint64_t seed);

// Non-Markovian sampler with explicit starting noise. eta = 0 is a
// deterministic function of (noise_init, theta, scalars); eta = 1 matches the
// ancestral sampler's distribution. `seed` feeds the per-step noise and is
// unused at eta = 0.
Tensor ddim_sample_batch(const BatchDenoiseFn& model, const Tensor& theta_raw,
                         const std::vector<float>& l_cur, const std::vector<float>& l_prompt,
                         const DiffusionSchedule& sched, double eta, const Tensor& noise_init,
                         const NormStats& norm, uint64_t seed);

// Single-sample wrappers.
std::vector<float> ddpm_sample(const BatchDenoiseFn& model, const std::vector<float>& theta_raw,
                               float l_cur, float l_prompt, const DiffusionSchedule& sched,
                               const NormStats& norm, uint64_t seed);
std::vector<float> ddim_sample(const BatchDenoiseFn& model, const std::vector<float>& theta_raw,
                               float l_cur, float l_prompt, const DiffusionSchedule& sched,
                               double eta, const std::vector<float>& noise_init,
                               const NormStats& norm, uint64_t seed = 0);

// Mean over dimensions of KL(N(sqrt(abar_J) mu_d, abar_J sigma_d^2 + 1 -
// abar_J) || N(0, 1)) for the normalized parameter marginals of `split`, in
// bits. Near zero when the forward process destroys essentially all signal.
double signal_destruction_kl(const DiffusionSchedule& sched, const std::vector<const Run*>& split,
                             const NormStats& norm);

}  // namespace ckptdiff
