#pragma once
// Optimizers over lists of parameter tensors, plus the shared LR schedule,
// global-norm gradient clipping, and an exponential moving average of weights.
#include <cassert>
#include <cmath>
#include <vector>

#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

// Linear ramp 0 -> base_lr over [0, warmup_steps], then half-period cosine
// decay base_lr -> 0 at total_steps.
inline double lr_at(long step, long total_steps, long warmup_steps, double base_lr) {
  assert(warmup_steps <= total_steps);
  if (step < warmup_steps) return base_lr * (double)step / (double)warmup_steps;
  if (total_steps <= warmup_steps) return base_lr;
  double prog = (double)(step - warmup_steps) / (double)(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * prog));
}

// Scales grads so their global L2 norm is at most max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
template <class S>
double clip_global_norm(std::vector<TensorT<S>>& grads, double max_norm) {
  double sq = 0;
  for (auto& g : grads)
    for (S v : g.data) sq += (double)v * (double)v;
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    S s = (S)(max_norm / norm);
    for (auto& g : grads)
      for (S& v : g.data) v *= s;
  }
  return norm;
}

// SGD with momentum and coupled weight decay:
//   v <- mu * v + (g + wd * p);  p <- p - lr * v
template <class S>
struct SgdMomentumT {
  double momentum = 0.9, weight_decay = 0.0;
  std::vector<TensorT<S>> vel;

  void step(std::vector<TensorT<S>>& params, const std::vector<TensorT<S>>& grads, double lr) {
    if (vel.empty())
      for (auto& p : params) vel.emplace_back(p.nrow, p.ncol);
    for (size_t k = 0; k < params.size(); ++k) {
      auto &p = params[k], &v = vel[k];
      const auto& g = grads[k];
      assert(p.same_shape(g));
      for (long i = 0; i < p.size(); ++i) {
        S gg = g[i] + (S)weight_decay * p[i];
        v[i] = (S)momentum * v[i] + gg;
        p[i] -= (S)lr * v[i];
      }
    }
  }
};
using SgdMomentum = SgdMomentumT<float>;

// AdamW with decoupled weight decay. t increments before bias correction, so
// the first step uses t = 1.
template <class S>
struct AdamWT {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
  long t = 0;
  std::vector<TensorT<S>> m, v;

  void step(std::vector<TensorT<S>>& params, const std::vector<TensorT<S>>& grads, double lr) {
    if (m.empty())
      for (auto& p : params) {
        m.emplace_back(p.nrow, p.ncol);
        v.emplace_back(p.nrow, p.ncol);
      }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, (double)t);
    double bc2 = 1.0 - std::pow(beta2, (double)t);
    for (size_t k = 0; k < params.size(); ++k) {
      auto &p = params[k], &mk = m[k], &vk = v[k];
      const auto& g = grads[k];
      assert(p.same_shape(g));
      for (long i = 0; i < p.size(); ++i) {
        double gi = g[i];
        double mi = beta1 * mk[i] + (1.0 - beta1) * gi;
        double vi = beta2 * vk[i] + (1.0 - beta2) * gi * gi;
        mk[i] = (S)mi;
        vk[i] = (S)vi;
        double mhat = mi / bc1, vhat = vi / bc2;
        double upd = lr * weight_decay * p[i] + lr * mhat / (std::sqrt(vhat) + eps);
        p[i] -= (S)upd;
      }
    }
  }
};
using AdamW = AdamWT<float>;

// Shadow copy of weights: ema <- decay*ema + (1-decay)*raw after each step.
template <class S>
struct EmaT {
  double decay = 0.9999;
  std::vector<TensorT<S>> shadow;

  void init(const std::vector<TensorT<S>>& params) { shadow = params; }
  void update(const std::vector<TensorT<S>>& params) {
    assert(shadow.size() == params.size());
    S d = (S)decay, od = (S)(1.0 - decay);
    for (size_t k = 0; k < params.size(); ++k)
      for (long i = 0; i < params[k].size(); ++i)
        shadow[k][i] = d * shadow[k][i] + od * params[k][i];
  }
};
using Ema = EmaT<float>;

}  // namespace ckptdiff
