#pragma once
// Central finite-difference oracle for the autodiff engine, run in double.
// build(graph, leaves) reconstructs the forward pass and returns a scalar
// root; the harness compares analytic leaf gradients against (f(x+h)-f(x-h))/2h
// for every leaf element.
#include <doctest.h>

#include <functional>
#include <vector>

#include "ckptdiff/graph.hpp"
#include "ckptdiff/rng.hpp"

namespace fdtest {

using GraphD = ckptdiff::GraphT<double>;
using TenD = ckptdiff::TensorT<double>;
using BuildFn = std::function<int(GraphD&, const std::vector<int>&)>;

struct FdStats {
  long cases = 0;
  double worst_rel = 0;
};

inline FdStats& fd_stats() {
  static FdStats s;
  return s;
}

inline double eval_scalar(const BuildFn& build, const std::vector<TenD>& inputs) {
  GraphD g;
  std::vector<int> lv;
  for (const auto& t : inputs) lv.push_back(g.leaf(t));
  int root = build(g, lv);
  return g.value(root)[0];
}

// Checks every element of every leaf; counts one "case" per leaf tensor.
inline void fd_check(const BuildFn& build, std::vector<TenD> inputs, double tol = 1e-4,
                     double h = 1e-5) {
  GraphD g;
  std::vector<int> lv;
  for (const auto& t : inputs) lv.push_back(g.leaf(t));
  int root = build(g, lv);
  REQUIRE(g.value(root).size() == 1);
  g.backward(root);
  std::vector<TenD> analytic;
  for (int v : lv) {
    REQUIRE(g.has_grad(v));
    analytic.push_back(g.grad(v));
  }
  for (size_t k = 0; k < inputs.size(); ++k) {
    for (long e = 0; e < inputs[k].size(); ++e) {
      double keep = inputs[k][e];
      inputs[k][e] = keep + h;
      double fp = eval_scalar(build, inputs);
      inputs[k][e] = keep - h;
      double fm = eval_scalar(build, inputs);
      inputs[k][e] = keep;
      double num = (fp - fm) / (2 * h);
      double ana = analytic[k][e];
      double scale = std::max(std::abs(num), std::abs(ana));
      if (scale < 1e-6) {
        CHECK(std::abs(num - ana) < 1e-7);
      } else {
        double rel = std::abs(num - ana) / scale;
        if (rel > fd_stats().worst_rel) fd_stats().worst_rel = rel;
        CHECK(rel < tol);
      }
    }
    fd_stats().cases++;
  }
}

inline TenD randn(ckptdiff::Rng& rng, long r, long c, double scale = 1.0) {
  TenD t(r, c);
  for (long i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace fdtest
