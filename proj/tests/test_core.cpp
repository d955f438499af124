#include <doctest.h>

#include <set>

#include "ckptdiff/graph.hpp"
#include "ckptdiff/optim.hpp"
#include "ckptdiff/parallel.hpp"
#include "ckptdiff/rng.hpp"
#include "fd_check.hpp"

using namespace ckptdiff;
using fdtest::fd_check;
using fdtest::randn;
using GraphD = GraphT<double>;
using TenD = TensorT<double>;

TEST_SUITE_BEGIN("core");

TEST_CASE("hand-differentiated basics") {
  GraphD g;
  int x = g.leaf(TenD::row({1, 2}));
  int r = g.sum(g.mul(x, x));
  CHECK(g.value(r)[0] == 5.0);
  g.backward(r);
  CHECK(g.grad(x)[0] == 2.0);
  CHECK(g.grad(x)[1] == 4.0);

  GraphD g2;
  int y = g2.leaf(TenD::row({-1, 2}));
  int r2 = g2.sum(g2.relu(y));
  g2.backward(r2);
  CHECK(g2.grad(y)[0] == 0.0);
  CHECK(g2.grad(y)[1] == 1.0);
}

TEST_CASE("finite differences: every primitive") {
  Rng rng(7);
  for (int rep = 0; rep < 8; ++rep) {
    Rng r = rng.child("rep", (uint64_t)rep);
    long m = 2 + (long)r.below(3), k = 2 + (long)r.below(4), n = 2 + (long)r.below(3);
    // Projections are materialized up front: the build lambda runs many times
    // during differencing and must be a pure function of the leaf values.
    TenD P = randn(r, m, n);
    auto proj = [&](GraphD& g, int v) { return g.sum(g.mul(v, g.input(P))); };

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.matmul(lv[0], lv[1]));
    }, {randn(r, m, k), randn(r, k, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.linear(lv[0], lv[1], lv[2]));
    }, {randn(r, m, k), randn(r, n, k), randn(r, 1, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.add(lv[0], lv[1]));
    }, {randn(r, m, n), randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.mul(lv[0], lv[1]));
    }, {randn(r, m, n), randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.scale(lv[0], 0.7));
    }, {randn(r, m, n)});

    // bias add (period 1)
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.add_rowwise(lv[0], lv[1]));
    }, {randn(r, m, n), randn(r, 1, n)});
    // positional-table add (period m over 3*m rows)
    TenD P3 = randn(r, 3 * m, n);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.add_rowwise(lv[0], lv[1]), g.input(P3)));
    }, {randn(r, 3 * m, n), randn(r, m, n)});

    for (auto act : {0, 1, 2}) {
      fd_check([&](GraphD& g, const std::vector<int>& lv) {
        int h = act == 0 ? g.relu(lv[0]) : act == 1 ? g.selu(lv[0]) : g.gelu(lv[0]);
        return proj(g, h);
      }, {randn(r, m, n)});
    }

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.softmax(lv[0]));
    }, {randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.layernorm(lv[0], lv[1], lv[2]));
    }, {randn(r, m, n), randn(r, 1, n), randn(r, 1, n)});

    // attention: qkv [B*T, 3H]
    long B = 2, T = 3, H = 8, heads = (rep % 2) ? 2 : 4;
    TenD PA = randn(r, B * T, H);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.attention(lv[0], T, heads), g.input(PA)));
    }, {randn(r, B * T, 3 * H)});

    TenD PS = randn(r, m * 3, n);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.stack_rows({lv[0], lv[1], lv[2]}), g.input(PS)));
    }, {randn(r, m, n), randn(r, m, n), randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return proj(g, g.gather_row(lv[0], 3, 1));
    }, {randn(r, 3 * m, n)});

    TenD PC = randn(r, m, n + k);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.concat_cols({lv[0], lv[1]}), g.input(PC)));
    }, {randn(r, m, n), randn(r, m, k)});

    TenD P2 = randn(r, m, 2);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.slice_cols(lv[0], 1, 2), g.input(P2)));
    }, {randn(r, m, n + 1)});

    TenD PR = randn(r, 1, m * n);
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.sum(g.mul(g.reshape(lv[0], 1, m * n), g.input(PR)));
    }, {randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) { return g.sum(lv[0]); },
             {randn(r, m, n)});

    fd_check([&](GraphD& g, const std::vector<int>& lv) { return g.mse(lv[0], lv[1]); },
             {randn(r, m, n), randn(r, m, n)});

    std::vector<int> labels;
    std::vector<double> weights;
    for (long i = 0; i < m; ++i) {
      labels.push_back((int)r.below((uint64_t)n));
      weights.push_back(r.uniform(0.1, 1.0));
    }
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.cross_entropy(lv[0], labels);
    }, {randn(r, m, n)});
    fd_check([&](GraphD& g, const std::vector<int>& lv) {
      return g.cross_entropy(lv[0], labels, weights);
    }, {randn(r, m, n)});
  }
  MESSAGE("fd cases: ", fdtest::fd_stats().cases,
          " worst rel err: ", fdtest::fd_stats().worst_rel);
  CHECK(fdtest::fd_stats().cases >= 100);
}

TEST_CASE("deep composite graph matches finite differences") {
  // A residual MLP block touching matmul/linear/layernorm/gelu/add paths.
  Rng r(21);
  long B = 3, d = 6;
  TenD P = randn(r, B, d);
  fd_check([&](GraphD& g, const std::vector<int>& lv) {
    int h = g.layernorm(lv[0], lv[1], lv[2]);
    h = g.linear(h, lv[3], lv[4]);
    h = g.gelu(h);
    h = g.matmul(h, lv[5]);
    h = g.add(h, lv[0]);
    return g.sum(g.mul(h, g.input(P)));
  }, {randn(r, B, d), randn(r, 1, d), randn(r, 1, d), randn(r, 2 * d, d),
      randn(r, 1, 2 * d), randn(r, 2 * d, d)});
}

TEST_CASE("sgd momentum pinned recursions") {
  SgdMomentumT<double> opt;
  opt.momentum = 0.9;
  opt.weight_decay = 0.0;
  std::vector<TenD> p{TenD::row({1.0})}, g{TenD::row({1.0})};
  opt.step(p, g, 0.1);
  CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-12));
  opt.step(p, g, 0.1);
  CHECK(p[0][0] == doctest::Approx(0.71).epsilon(1e-12));

  SgdMomentumT<double> wd;
  wd.weight_decay = 5e-4;
  std::vector<TenD> p2{TenD::row({1.0})}, g2{TenD::row({0.0})};
  wd.step(p2, g2, 0.1);
  CHECK(p2[0][0] == doctest::Approx(1.0 * (1.0 - 0.1 * 5e-4)).epsilon(1e-15));

  // mu = 0, wd = 0 is plain gradient descent, exactly.
  SgdMomentumT<double> plain;
  plain.momentum = 0.0;
  std::vector<TenD> p3{TenD::row({0.37})}, g3{TenD::row({2.5})};
  plain.step(p3, g3, 0.03);
  CHECK(p3[0][0] == 0.37 - 0.03 * 2.5);
}

TEST_CASE("adamw pinned steps") {
  AdamWT<double> opt;
  opt.beta2 = 0.999;
  std::vector<TenD> p{TenD::row({1.0})}, g{TenD::row({1.0})};
  opt.step(p, g, 0.1);
  // bias-corrected m-hat = v-hat = 1 at t = 1
  CHECK(p[0][0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-7));

  // decoupled decay alone: g = 0, wd = 0.1, lr = 0.1 -> theta *= 0.99
  AdamWT<double> dec;
  dec.weight_decay = 0.1;
  std::vector<TenD> p2{TenD::row({0.5})}, g2{TenD::row({0.0})};
  dec.step(p2, g2, 0.1);
  CHECK(p2[0][0] == 0.5 - 0.1 * 0.1 * 0.5);

  // wd = 0 equals the hand-computed bias-corrected Adam update, exactly.
  AdamWT<double> a;
  std::vector<TenD> p3{TenD::row({0.2})}, g3{TenD::row({-0.7})};
  double gi = -0.7;
  double m = 0.1 * gi, v = 0.001 * gi * gi;
  double want = 0.2 - 0.1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  a.step(p3, g3, 0.1);
  CHECK(p3[0][0] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("ema recursion") {
  EmaT<double> ema;
  ema.decay = 0.9999;
  std::vector<TenD> w{TenD::row({1.0})};
  std::vector<TenD> zero{TenD::row({0.0})};
  ema.init(zero);
  ema.update(w);
  CHECK(ema.shadow[0][0] == doctest::Approx(1e-4).epsilon(1e-10));
  // constant raw w for k steps from ema = 0 -> w * (1 - decay^k)
  for (int k = 2; k <= 1000; ++k) ema.update(w);
  double want = 1.0 * (1.0 - std::pow(0.9999, 1000.0));
  CHECK(std::abs(ema.shadow[0][0] - want) < 1e-12);

  EmaT<double> e0;
  e0.decay = 0.0;
  e0.init(zero);
  e0.update(w);
  CHECK(e0.shadow[0][0] == 1.0);
}

TEST_CASE("lr schedule boundaries") {
  double base = 0.3;
  long total = 1000, warm = 100;
  CHECK(lr_at(0, total, warm, base) == 0.0);
  CHECK(lr_at(warm, total, warm, base) == doctest::Approx(base).epsilon(1e-15));
  CHECK(lr_at(total, total, warm, base) == doctest::Approx(0.0).scale(base).epsilon(1e-15));
  long mid = warm + (total - warm) / 2;
  CHECK(lr_at(mid, total, warm, base) == doctest::Approx(base / 2).epsilon(1e-12));
  // piecewise-continuous at the boundary: one-step jump vanishes as 1/warm
  CHECK(std::abs(lr_at(warm, total, warm, base) - lr_at(warm - 1, total, warm, base)) <=
        base / warm + 1e-12);
}

TEST_CASE("gradient clipping") {
  std::vector<Tensor> g{Tensor::row({3, 4})};  // norm 5
  double n = clip_global_norm(g, 10.0);
  CHECK(n == doctest::Approx(5.0));
  CHECK(g[0][0] == 3.0f);
  CHECK(g[0][1] == 4.0f);
  n = clip_global_norm(g, 2.5);  // norm = 2 * max -> halve
  CHECK(n == doctest::Approx(5.0));
  CHECK(g[0][0] == doctest::Approx(1.5f));
  CHECK(g[0][1] == doctest::Approx(2.0f));
  std::vector<Tensor> z{Tensor(1, 4)};
  clip_global_norm(z, 1.0);
  for (long i = 0; i < 4; ++i) CHECK(z[0][i] == 0.0f);
}

TEST_CASE("rng streams and distributions") {
  Rng a(123), b(123);
  CHECK(a.next_u64() == b.next_u64());
  Rng c1 = a.child("x", 1), c2 = a.child("x", 2), c1b = b.child("x", 1);
  CHECK(c1.next_u64() == c1b.next_u64());
  CHECK(c1.next_u64() != c2.next_u64());

  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    CHECK(r.below(7) < 7);
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  // normal moments, 1e5 draws: mean within 3*sigma/sqrt(n), var similar
  double s = 0, s2 = 0;
  int N = 100000;
  for (int i = 0; i < N; ++i) {
    double x = r.normal();
    s += x;
    s2 += x * x;
  }
  double mean = s / N, var = s2 / N - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt((double)N));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / N));

  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  r.shuffle(v);
  std::set<int> sv(v.begin(), v.end());
  CHECK(sv.size() == 8);

  auto picks = r.sample_without_replacement(50, 10);
  CHECK(picks.size() == 10);
  for (size_t i = 1; i < picks.size(); ++i) CHECK(picks[i] > picks[i - 1]);
  CHECK(picks.back() < 50);
}

TEST_CASE("results independent of worker count") {
  auto run = [](int jobs) {
    set_jobs(jobs);
    Rng r(99);
    Graph g;
    TensorT<float> A(33, 17), B(17, 29), P(33, 29);
    for (long i = 0; i < A.size(); ++i) A[i] = (float)r.normal();
    for (long i = 0; i < B.size(); ++i) B[i] = (float)r.normal();
    for (long i = 0; i < P.size(); ++i) P[i] = (float)r.normal();
    int a = g.leaf(A), b = g.leaf(B);
    int h = g.gelu(g.matmul(a, b));
    int root = g.sum(g.mul(h, g.input(P)));
    g.backward(root);
    std::vector<float> out;
    out.push_back(g.value(root)[0]);
    for (float x : g.grad(a).data) out.push_back(x);
    for (float x : g.grad(b).data) out.push_back(x);
    set_jobs(1);
    return out;
  };
  auto r1 = run(1), r3 = run(3), r7 = run(7);
  CHECK(r1 == r3);
  CHECK(r1 == r7);
}

TEST_SUITE_END();
