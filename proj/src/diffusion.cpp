#include "ckptdiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include "ckptdiff/rng.hpp"

namespace ckptdiff {

DiffusionSchedule make_linear_schedule(long J, double beta_start, double beta_end) {
  if (J < 1) throw std::runtime_error("schedule needs at least one step");
  if (!(beta_start > 0) || !(beta_end < 1) || !(beta_start < beta_end))
    throw std::runtime_error("schedule betas must satisfy 0 < beta_start < beta_end < 1");
  DiffusionSchedule s;
  s.J = J;
  s.beta_v.resize((size_t)J);
  s.alpha_v.resize((size_t)J);
  s.alpha_bar_v.resize((size_t)J);
  double abar = 1.0;
  for (long j = 1; j <= J; ++j) {
    double b = J == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * (double)(j - 1) / (double)(J - 1);
    s.beta_v[(size_t)(j - 1)] = b;
    s.alpha_v[(size_t)(j - 1)] = 1.0 - b;
    abar *= 1.0 - b;
    s.alpha_bar_v[(size_t)(j - 1)] = abar;
  }
  return s;
}

static void check_j(const DiffusionSchedule& sched, long j) {
  if (j < 1 || j > sched.J) throw std::runtime_error("diffusion step out of range");
}

std::vector<float> q_sample(const std::vector<float>& theta_star, long j,
                            const std::vector<float>& z, const DiffusionSchedule& sched) {
  check_j(sched, j);
  if (z.size() != theta_star.size()) throw std::runtime_error("noise length mismatch");
  double ab = sched.alpha_bar(j);
  double cs = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
  std::vector<float> out(theta_star.size());
  for (size_t d = 0; d < out.size(); ++d)
    out[d] = (float)(cs * (double)theta_star[d] + cn * (double)z[d]);
  return out;
}

double diffusion_loss(const BatchDenoiseFn& model, const std::vector<float>& theta_norm,
                      const std::vector<float>& theta_star_norm, float l_cur, float l_star,
                      long j, const std::vector<float>& z, const DiffusionSchedule& sched) {
  if (theta_norm.size() != theta_star_norm.size()) throw std::runtime_error("tuple shape mismatch");
  long D = (long)theta_norm.size();
  std::vector<float> noised = q_sample(theta_star_norm, j, z, sched);
  Tensor xj(1, D), th(1, D);
  std::copy(noised.begin(), noised.end(), xj.data.begin());
  std::copy(theta_norm.begin(), theta_norm.end(), th.data.begin());
  Tensor pred = model(xj, th, {l_cur}, {l_star}, j);
  if (pred.nrow != 1 || pred.ncol != D) throw std::runtime_error("denoiser output shape mismatch");
  double acc = 0;
  for (long d = 0; d < D; ++d) {
    double diff = (double)theta_star_norm[(size_t)d] - (double)pred[d];
    acc += diff * diff;
  }
  return acc / (double)D;
}

namespace {

void ensure_finite(const Tensor& x, const char* where) {
  if (!x.all_finite()) throw std::runtime_error(std::string("non-finite state in ") + where);
}

Tensor normalize_rows(const Tensor& theta_raw, const NormStats& norm) {
  Tensor t = theta_raw;
  for (auto& v : t.data) v = (float)((double)v * norm.scale_factor);
  return t;
}

// out = theta_raw + (x0 - theta_hat) / s: algebraically x0 / s, but written
// as an update on the raw parameters so a sampler whose x0 equals its input
// conditioning exactly returns theta_raw bit-for-bit.
Tensor residual_denormalize(const Tensor& theta_raw, const Tensor& theta_hat, const Tensor& x0,
                            const NormStats& norm) {
  Tensor out = theta_raw;
  for (long i = 0; i < out.size(); ++i)
    out[i] =
        (float)((double)theta_raw[i] + ((double)x0[i] - (double)theta_hat[i]) / norm.scale_factor);
  return out;
}

}  // namespace

Tensor ddpm_sample_batch(const BatchDenoiseFn& model, const Tensor& theta_raw,
                         const std::vector<float>& l_cur, const std::vector<float>& l_prompt,
                         const DiffusionSchedule& sched, const NormStats& norm, uint64_t seed) {
  long B = theta_raw.nrow, D = theta_raw.ncol;
  if ((long)l_cur.size() != B || (long)l_prompt.size() != B)
    throw std::runtime_error("one metric scalar per sample row required");
  Tensor theta_hat = normalize_rows(theta_raw, norm);

  std::vector<Rng> streams;
  streams.reserve((size_t)B);
  Rng root(seed);
  for (long b = 0; b < B; ++b) streams.push_back(root.child("sample", (uint64_t)b));

  Tensor x(B, D);
  for (long b = 0; b < B; ++b)
    for (long d = 0; d < D; ++d) x(b, d) = (float)streams[(size_t)b].normal();

  for (long j = sched.J; j >= 1; --j) {
    Tensor x0 = model(x, theta_hat, l_cur, l_prompt, j);
    if (x0.nrow != B || x0.ncol != D) throw std::runtime_error("denoiser output shape mismatch");
    ensure_finite(x0, "denoiser output");
    if (j == 1) {
      x = std::move(x0);  // posterior mean collapses to x0_hat (alpha_bar_0 = 1)
      break;
    }
    double ab = sched.alpha_bar(j), ab_prev = sched.alpha_bar(j - 1);
    double c0 = std::sqrt(ab_prev) * sched.beta(j) / (1.0 - ab);
    double cx = std::sqrt(sched.alpha(j)) * (1.0 - ab_prev) / (1.0 - ab);
    double var = (1.0 - ab_prev) / (1.0 - ab) * sched.beta(j);
    double sd = std::sqrt(std::max(var, 0.0));
    for (long b = 0; b < B; ++b) {
      Rng& rng = streams[(size_t)b];
      for (long d = 0; d < D; ++d) {
        double mu = c0 * (double)x0(b, d) + cx * (double)x(b, d);
        x(b, d) = (float)(mu + sd * rng.normal());
      }
    }
    ensure_finite(x, "reverse step");
  }
  return residual_denormalize(theta_raw, theta_hat, x, norm);
}

Tensor ddim_sample_batch(const BatchDenoiseFn& model, const Tensor& theta_raw,
                         const std::vector<float>& l_cur, const std::vector<float>& l_prompt,
                         const DiffusionSchedule& sched, double eta, const Tensor& noise_init,
                         const NormStats& norm, uint64_t seed) {
  long B = theta_raw.nrow, D = theta_raw.ncol;
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::runtime_error("eta must lie in [0, 1]");
  if ((long)l_cur.size() != B || (long)l_prompt.size() != B)
    throw std::runtime_error("one metric scalar per sample row required");
  if (noise_init.nrow != B || noise_init.ncol != D)
    throw std::runtime_error("noise_init must match the sample shape");
  Tensor theta_hat = normalize_rows(theta_raw, norm);

  std::vector<Rng> streams;
  if (eta > 0.0) {
    Rng root(seed);
    for (long b = 0; b < B; ++b) streams.push_back(root.child("sample", (uint64_t)b));
  }

  Tensor x = noise_init;
  for (long j = sched.J; j >= 1; --j) {
    Tensor x0 = model(x, theta_hat, l_cur, l_prompt, j);
    if (x0.nrow != B || x0.ncol != D) throw std::runtime_error("denoiser output shape mismatch");
    ensure_finite(x0, "denoiser output");
    if (j == 1) {
      x = std::move(x0);  // sigma_1 = 0 and alpha_bar_0 = 1 leave exactly x0_hat
      break;
    }
    double ab = sched.alpha_bar(j), ab_prev = sched.alpha_bar(j - 1);
    double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab) * sched.beta(j));
    double ce = std::sqrt(std::max(1.0 - ab_prev - sigma * sigma, 0.0));
    double inv_sq = 1.0 / std::sqrt(1.0 - ab);
    double sq_ab = std::sqrt(ab), sq_prev = std::sqrt(ab_prev);
    for (long b = 0; b < B; ++b) {
      for (long d = 0; d < D; ++d) {
        double eps = ((double)x(b, d) - sq_ab * (double)x0(b, d)) * inv_sq;
        double nx = sq_prev * (double)x0(b, d) + ce * eps;
        if (eta > 0.0) nx += sigma * streams[(size_t)b].normal();
        x(b, d) = (float)nx;
      }
    }
    ensure_finite(x, "reverse step");
  }
  return residual_denormalize(theta_raw, theta_hat, x, norm);
}

namespace {

std::vector<float> one_row(const Tensor& t) {
  return std::vector<float>(t.data.begin(), t.data.end());
}

Tensor row_tensor(const std::vector<float>& v) {
  Tensor t(1, (long)v.size());
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

}  // namespace

std::vector<float> ddpm_sample(const BatchDenoiseFn& model, const std::vector<float>& theta_raw,
                               float l_cur, float l_prompt, const DiffusionSchedule& sched,
                               const NormStats& norm, uint64_t seed) {
  return one_row(ddpm_sample_batch(model, row_tensor(theta_raw), {l_cur}, {l_prompt}, sched, norm,
                                   seed));
}

std::vector<float> ddim_sample(const BatchDenoiseFn& model, const std::vector<float>& theta_raw,
                               float l_cur, float l_prompt, const DiffusionSchedule& sched,
                               double eta, const std::vector<float>& noise_init,
                               const NormStats& norm, uint64_t seed) {
  if (noise_init.size() != theta_raw.size())
    throw std::runtime_error("noise_init must match the parameter length");
  return one_row(ddim_sample_batch(model, row_tensor(theta_raw), {l_cur}, {l_prompt}, sched, eta,
                                   row_tensor(noise_init), norm, seed));
}

double signal_destruction_kl(const DiffusionSchedule& sched, const std::vector<const Run*>& split,
                             const NormStats& norm) {
  long D = -1;
  long n = 0;
  for (const Run* r : split)
    for (const auto& c : r->ckpts) {
      if (D < 0) D = (long)c.theta.size();
      if ((long)c.theta.size() != D) throw std::runtime_error("mixed parameter lengths");
      ++n;
    }
  if (n == 0 || D <= 0) throw std::runtime_error("empty split");

  std::vector<double> sum((size_t)D, 0.0), sumsq((size_t)D, 0.0);
  for (const Run* r : split)
    for (const auto& c : r->ckpts)
      for (long d = 0; d < D; ++d) {
        double v = (double)c.theta[(size_t)d] * norm.scale_factor;
        sum[(size_t)d] += v;
        sumsq[(size_t)d] += v * v;
      }

  double ab = sched.alpha_bar(sched.J);
  double total = 0;
  for (long d = 0; d < D; ++d) {
    double mu = sum[(size_t)d] / (double)n;
    double var = std::max(sumsq[(size_t)d] / (double)n - mu * mu, 0.0);
    double m = std::sqrt(ab) * mu;
    double v = ab * var + 1.0 - ab;
    total += 0.5 * (m * m + v - 1.0 - std::log(v));
  }
  return total / (double)D / std::log(2.0);
}

}  // namespace ckptdiff
