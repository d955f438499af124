#pragma once
// Reverse-mode autodiff on a flat tape. Each op appends a node holding its
// value; backward() walks the tape in reverse. Design rules that keep results
// bit-identical across worker counts:
//   * parallel loops split only over output elements, never reduction axes,
//   * every reduction runs in a fixed ascending order,
//   * matmuls go through a single-threaded BLAS (fixed blocking, so the
//     accumulation order is a function of the shapes alone).
#include <cassert>
#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#include "ckptdiff/blas.hpp"
#include "ckptdiff/parallel.hpp"
#include "ckptdiff/tensor.hpp"

namespace ckptdiff {

enum class Op {
  Leaf,       // trainable parameter
  Input,      // constant input
  Matmul,     // [m,k] x [k,n]
  Linear,     // x [m,k], w [n,k], b [1,n] -> x w^T + b
  Add,        // elementwise, same shape
  Mul,        // elementwise, same shape
  Scale,      // alpha * x
  AddRowwise, // x [m,n] + b [p,n], row i gets b[i % p]
  Relu,
  Selu,
  Gelu,       // tanh approximation
  Softmax,    // row-wise
  LayerNorm,  // row-wise, affine
  Attention,  // fused non-causal multi-head self-attention from packed qkv
  StackRows,  // T tensors [B,n] -> [B*T,n], row b*T+t from input t
  GatherRow,  // inverse of one StackRows slot: [B*T,n] -> [B,n]
  ConcatCols, // k tensors [m,n_i] -> [m, sum n_i]
  SliceCols,  // columns [lo, lo+len)
  Reshape,    // same data, new shape
  Sum,        // sum of all elements -> [1,1]
  Mse,        // mean squared error over all elements -> [1,1]
  CrossEntropy// softmax cross-entropy; per-row weights optional -> [1,1]
};

template <class S>
class GraphT {
 public:
  using Var = int;

  struct Node {
    Op op;
    TensorT<S> val, grad, aux;
    int a = -1, b = -1, c = -1;
    std::vector<int> srcs;    // variadic inputs (StackRows, ConcatCols)
    std::vector<int> labels;  // CrossEntropy targets
    long p0 = 0, p1 = 0;
    S s0 = S(0);
    bool req = false;
  };

  void clear() { nodes_.clear(); }
  long num_nodes() const { return (long)nodes_.size(); }

  TensorT<S>& value(Var v) { return nodes_[v].val; }
  const TensorT<S>& value(Var v) const { return nodes_[v].val; }
  // Gradient of the last backward() root w.r.t. v; empty if v was not reached.
  const TensorT<S>& grad(Var v) const { return nodes_[v].grad; }
  bool has_grad(Var v) const { return nodes_[v].grad.size() > 0; }

  Var leaf(TensorT<S> v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    n.req = true;
    return push(std::move(n));
  }
  Var input(TensorT<S> v) {
    Node n;
    n.op = Op::Input;
    n.val = std::move(v);
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) {
    const auto &A = val(a), &B = val(b);
    assert(A.ncol == B.nrow);
    Node n = binary(Op::Matmul, a, b, A.nrow, B.ncol);
    gemm(false, false, A, B, S(0), n.val);
    return push(std::move(n));
  }

  // x [m,k] with torch-layout weight w [n,k] and bias b [1,n].
  Var linear(Var x, Var w, Var b) {
    const auto &X = val(x), &W = val(w), &Bv = val(b);
    assert(X.ncol == W.ncol && Bv.nrow == 1 && Bv.ncol == W.nrow);
    Node n = binary(Op::Linear, x, w, X.nrow, W.nrow);
    n.c = b;
    n.req = n.req || nodes_[b].req;
    gemm(false, true, X, W, S(0), n.val);
    parallel_for(0, n.val.nrow, [&](long i) {
      S* row = n.val.ptr(i);
      for (long j = 0; j < n.val.ncol; ++j) row[j] += Bv[j];
    });
    return push(std::move(n));
  }

  Var add(Var a, Var b) {
    const auto &A = val(a), &B = val(b);
    assert(A.same_shape(B));
    Node n = binary(Op::Add, a, b, A.nrow, A.ncol);
    parallel_for(0, A.size(), [&](long i) { n.val[i] = A[i] + B[i]; });
    return push(std::move(n));
  }

  Var mul(Var a, Var b) {
    const auto &A = val(a), &B = val(b);
    assert(A.same_shape(B));
    Node n = binary(Op::Mul, a, b, A.nrow, A.ncol);
    parallel_for(0, A.size(), [&](long i) { n.val[i] = A[i] * B[i]; });
    return push(std::move(n));
  }

  Var scale(Var a, S alpha) {
    const auto& A = val(a);
    Node n = unary(Op::Scale, a, A.nrow, A.ncol);
    n.s0 = alpha;
    parallel_for(0, A.size(), [&](long i) { n.val[i] = alpha * A[i]; });
    return push(std::move(n));
  }

  // Row-periodic add: bias when p=1, positional table when p=T.
  Var add_rowwise(Var x, Var b) {
    const auto &X = val(x), &B = val(b);
    assert(X.ncol == B.ncol && X.nrow % B.nrow == 0);
    Node n = binary(Op::AddRowwise, x, b, X.nrow, X.ncol);
    n.p0 = B.nrow;
    parallel_for(0, X.nrow, [&](long i) {
      const S* brow = B.ptr(i % B.nrow);
      const S* xrow = X.ptr(i);
      S* orow = n.val.ptr(i);
      for (long j = 0; j < X.ncol; ++j) orow[j] = xrow[j] + brow[j];
    });
    return push(std::move(n));
  }

  Var relu(Var a) {
    const auto& A = val(a);
    Node n = unary(Op::Relu, a, A.nrow, A.ncol);
    parallel_for(0, A.size(), [&](long i) { n.val[i] = A[i] > S(0) ? A[i] : S(0); });
    return push(std::move(n));
  }

  Var selu(Var a) {
    const auto& A = val(a);
    Node n = unary(Op::Selu, a, A.nrow, A.ncol);
    parallel_for(0, A.size(), [&](long i) {
      S x = A[i];
      n.val[i] = x > S(0) ? S(kSeluL) * x : S(kSeluL) * S(kSeluA) * (std::exp(x) - S(1));
    });
    return push(std::move(n));
  }

  Var gelu(Var a) {
    const auto& A = val(a);
    Node n = unary(Op::Gelu, a, A.nrow, A.ncol);
    parallel_for(0, A.size(), [&](long i) { n.val[i] = gelu_fwd(A[i]); });
    return push(std::move(n));
  }

  Var softmax(Var a) {
    const auto& A = val(a);
    Node n = unary(Op::Softmax, a, A.nrow, A.ncol);
    long d = A.ncol;
    parallel_for(0, A.nrow, [&](long i) {
      const S* xr = A.ptr(i);
      S* yr = n.val.ptr(i);
      S mx = xr[0];
      for (long j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      S tot = 0;
      for (long j = 0; j < d; ++j) {
        yr[j] = std::exp(xr[j] - mx);
        tot += yr[j];
      }
      S inv = S(1) / tot;
      for (long j = 0; j < d; ++j) yr[j] *= inv;
    });
    return push(std::move(n));
  }

  Var layernorm(Var x, Var g, Var b) {
    const auto &X = val(x), &G = val(g), &Bv = val(b);
    assert(G.nrow == 1 && G.ncol == X.ncol && Bv.nrow == 1 && Bv.ncol == X.ncol);
    Node n = binary(Op::LayerNorm, x, g, X.nrow, X.ncol);
    n.c = b;
    n.req = n.req || nodes_[b].req;
    n.aux = TensorT<S>(X.nrow, X.ncol + 1);  // x-hat rows plus 1/std column
    long m = X.nrow, d = X.ncol;
    parallel_for(0, m, [&](long i) {
      const S* xr = X.ptr(i);
      S* hr = n.aux.ptr(i);
      S* yr = n.val.ptr(i);
      S mu = 0;
      for (long j = 0; j < d; ++j) mu += xr[j];
      mu /= (S)d;
      S var = 0;
      for (long j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= (S)d;
      S inv = S(1) / std::sqrt(var + S(kLnEps));
      hr[d] = inv;
      for (long j = 0; j < d; ++j) {
        hr[j] = (xr[j] - mu) * inv;
        yr[j] = hr[j] * G[j] + Bv[j];
      }
    });
    return push(std::move(n));
  }

  // Packed qkv [B*T, 3H] -> [B*T, H]; softmax(q k^T / sqrt(H/heads)) v.
  Var attention(Var qkv, long T, long nheads) {
    const auto& Q = val(qkv);
    assert(Q.ncol % 3 == 0 && Q.nrow % T == 0);
    long H = Q.ncol / 3, B = Q.nrow / T, dh = H / nheads;
    assert(H % nheads == 0);
    Node n = unary(Op::Attention, qkv, Q.nrow, H);
    n.p0 = T;
    n.p1 = nheads;
    n.aux = TensorT<S>(B * nheads * T, T);  // attention probabilities
    S sc = S(1) / std::sqrt((S)dh);
    parallel_for(0, B * nheads, [&](long bh) {
      long b = bh / nheads, h = bh % nheads;
      for (long t = 0; t < T; ++t) {
        const S* q = Q.ptr(b * T + t) + h * dh;
        S* prow = n.aux.ptr(bh * T + t);
        S mx = -std::numeric_limits<S>::infinity();
        for (long u = 0; u < T; ++u) {
          const S* k = Q.ptr(b * T + u) + H + h * dh;
          S dot = 0;
          for (long j = 0; j < dh; ++j) dot += q[j] * k[j];
          prow[u] = dot * sc;
          mx = std::max(mx, prow[u]);
        }
        S tot = 0;
        for (long u = 0; u < T; ++u) {
          prow[u] = std::exp(prow[u] - mx);
          tot += prow[u];
        }
        S inv = S(1) / tot;
        S* o = n.val.ptr(b * T + t) + h * dh;
        for (long j = 0; j < dh; ++j) o[j] = 0;
        for (long u = 0; u < T; ++u) {
          prow[u] *= inv;
          const S* v = Q.ptr(b * T + u) + 2 * H + h * dh;
          for (long j = 0; j < dh; ++j) o[j] += prow[u] * v[j];
        }
      }
    });
    return push(std::move(n));
  }

  // T tensors [B,n] -> [B*T,n]; row b*T+t comes from input t.
  Var stack_rows(const std::vector<Var>& xs) {
    long T = (long)xs.size(), B = val(xs[0]).nrow, d = val(xs[0]).ncol;
    Node n;
    n.op = Op::StackRows;
    n.srcs = xs;
    n.val = TensorT<S>(B * T, d);
    for (Var v : xs) {
      assert(val(v).nrow == B && val(v).ncol == d);
      n.req = n.req || nodes_[v].req;
    }
    parallel_for(0, B * T, [&](long r) {
      const auto& src = val(xs[r % T]);
      const S* s = src.ptr(r / T);
      S* o = n.val.ptr(r);
      for (long j = 0; j < d; ++j) o[j] = s[j];
    });
    return push(std::move(n));
  }

  // Rows b*T+t for fixed t: [B*T,n] -> [B,n].
  Var gather_row(Var x, long T, long t) {
    const auto& X = val(x);
    assert(X.nrow % T == 0 && t >= 0 && t < T);
    long B = X.nrow / T;
    Node n = unary(Op::GatherRow, x, B, X.ncol);
    n.p0 = T;
    n.p1 = t;
    parallel_for(0, B, [&](long b) {
      const S* s = X.ptr(b * T + t);
      S* o = n.val.ptr(b);
      for (long j = 0; j < X.ncol; ++j) o[j] = s[j];
    });
    return push(std::move(n));
  }

  Var concat_cols(const std::vector<Var>& xs) {
    long m = val(xs[0]).nrow, total = 0;
    for (Var v : xs) {
      assert(val(v).nrow == m);
      total += val(v).ncol;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.srcs = xs;
    n.val = TensorT<S>(m, total);
    for (Var v : xs) n.req = n.req || nodes_[v].req;
    parallel_for(0, m, [&](long i) {
      S* o = n.val.ptr(i);
      long off = 0;
      for (Var v : xs) {
        const auto& src = val(v);
        const S* s = src.ptr(i);
        for (long j = 0; j < src.ncol; ++j) o[off + j] = s[j];
        off += src.ncol;
      }
    });
    return push(std::move(n));
  }

  Var slice_cols(Var x, long lo, long len) {
    const auto& X = val(x);
    assert(lo >= 0 && lo + len <= X.ncol);
    Node n = unary(Op::SliceCols, x, X.nrow, len);
    n.p0 = lo;
    parallel_for(0, X.nrow, [&](long i) {
      const S* s = X.ptr(i) + lo;
      S* o = n.val.ptr(i);
      for (long j = 0; j < len; ++j) o[j] = s[j];
    });
    return push(std::move(n));
  }

  Var reshape(Var x, long r, long c) {
    const auto& X = val(x);
    assert(r * c == X.size());
    Node n = unary(Op::Reshape, x, r, c);
    n.val.data = X.data;
    return push(std::move(n));
  }

  Var sum(Var a) {
    const auto& A = val(a);
    Node n = unary(Op::Sum, a, 1, 1);
    double acc = 0;  // fixed-order serial accumulation
    for (long i = 0; i < A.size(); ++i) acc += (double)A[i];
    n.val[0] = (S)acc;
    return push(std::move(n));
  }

  // Mean of (a-b)^2 over every element -> [1,1].
  Var mse(Var a, Var b) {
    const auto &A = val(a), &B = val(b);
    assert(A.same_shape(B));
    Node n = binary(Op::Mse, a, b, 1, 1);
    double acc = 0;  // fixed-order serial accumulation
    for (long i = 0; i < A.size(); ++i) {
      double d = (double)A[i] - (double)B[i];
      acc += d * d;
    }
    n.val[0] = (S)(acc / (double)A.size());
    return push(std::move(n));
  }

  // Softmax cross-entropy of logits [m,n] against labels; result [1,1].
  // With weights (length m): sum_i w_i * nll_i. Without: mean over rows.
  Var cross_entropy(Var logits, std::vector<int> labels, std::vector<S> weights = {}) {
    const auto& X = val(logits);
    long m = X.nrow, d = X.ncol;
    assert((long)labels.size() == m);
    assert(weights.empty() || (long)weights.size() == m);
    Node n = unary(Op::CrossEntropy, logits, 1, 1);
    n.labels = std::move(labels);
    n.aux = TensorT<S>(m, d + 1);  // softmax probs plus weight column
    for (long i = 0; i < m; ++i)
      n.aux(i, d) = weights.empty() ? S(1) / (S)m : weights[(size_t)i];
  parallel_for(0, m, [&](long i) {
      const S* xr = X.ptr(i);
      S* pr = n.aux.ptr(i);
      S mx = xr[0];
      for (long j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      S tot = 0;
      for (long j = 0; j < d; ++j) {
        pr[j] = std::exp(xr[j] - mx);
        tot += pr[j];
      }
      for (long j = 0; j < d; ++j) pr[j] /= tot;
    });
    double acc = 0;
    for (long i = 0; i < m; ++i)
      acc += (double)n.aux(i, d) * -std::log((double)n.aux(i, n.labels[(size_t)i]));
    n.val[0] = (S)acc;
    return push(std::move(n));
  }

  // Reverse pass from a scalar root. Gradients accumulate into node.grad.
  void backward(Var root) {
    assert(val(root).size() == 1);
    for (auto& n : nodes_) n.grad = TensorT<S>();
    nodes_[root].grad = TensorT<S>(1, 1);
    nodes_[root].grad[0] = S(1);
    for (int i = (int)nodes_.size() - 1; i >= 0; --i) {
      Node& n = nodes_[(size_t)i];
      if (!n.req || n.grad.size() == 0) continue;
      step_back(n);
    }
  }

 private:
  std::vector<Node> nodes_;
  static constexpr double kLnEps = 1e-5;
  static constexpr double kSeluL = 1.0507009873554805;
  static constexpr double kSeluA = 1.6732632423543772;

  const TensorT<S>& val(Var v) const { return nodes_[v].val; }

  Var push(Node&& n) {
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }
  Node unary(Op op, Var a, long r, long c) {
    Node n;
    n.op = op;
    n.a = a;
    n.req = nodes_[a].req;
    n.val = TensorT<S>(r, c);
    return n;
  }
  Node binary(Op op, Var a, Var b, long r, long c) {
    Node n = unary(op, a, r, c);
    n.b = b;
    n.req = n.req || nodes_[b].req;
    return n;
  }

  TensorT<S>& gbuf(Var v) {
    Node& n = nodes_[v];
    if (n.grad.size() == 0) n.grad = TensorT<S>(n.val.nrow, n.val.ncol);
    return n.grad;
  }
  bool wants(Var v) const { return v >= 0 && nodes_[v].req; }

  // C = op(A) op(B) + beta * C; C must be pre-sized.
  static void gemm(bool ta, bool tb, const TensorT<S>& A, const TensorT<S>& B, S beta,
                   TensorT<S>& C) {
    long m = ta ? A.ncol : A.nrow, k = ta ? A.nrow : A.ncol, n = tb ? B.nrow : B.ncol;
    assert((tb ? B.ncol : B.nrow) == k && C.nrow == m && C.ncol == n);
    if constexpr (std::is_same_v<S, float>)
      gemm_f32(ta, tb, m, n, k, 1.0f, A.ptr(), A.ncol, B.ptr(), B.ncol, beta, C.ptr(), C.ncol);
    else
      gemm_f64(ta, tb, m, n, k, 1.0, A.ptr(), A.ncol, B.ptr(), B.ncol, beta, C.ptr(), C.ncol);
  }

  static S gelu_fwd(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    S u = c * (x + S(0.044715) * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
  }
  static S gelu_bwd(S x) {
    const S c = S(0.7978845608028654);
    S u = c * (x + S(0.044715) * x * x * x);
    S t = std::tanh(u);
    S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
  }

  void step_back(Node& n) {
    const TensorT<S>& gy = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::Input:
        break;
      case Op::Matmul: {
        const auto &A = val(n.a), &B = val(n.b);
        if (wants(n.a)) gemm(false, true, gy, B, S(1), gbuf(n.a));
        if (wants(n.b)) gemm(true, false, A, gy, S(1), gbuf(n.b));
        break;
      }
      case Op::Linear: {
        const auto &X = val(n.a), &W = val(n.b);
        if (wants(n.a)) gemm(false, false, gy, W, S(1), gbuf(n.a));
        if (wants(n.b)) gemm(true, false, gy, X, S(1), gbuf(n.b));
        if (wants(n.c)) {
          auto& gb = gbuf(n.c);
          parallel_for(0, gy.ncol, [&](long j) {
            S acc = 0;
            for (long i = 0; i < gy.nrow; ++i) acc += gy(i, j);
            gb[j] += acc;
          });
        }
        break;
      }
      case Op::Add: {
        for (Var v : {n.a, n.b})
          if (wants(v)) {
            auto& g = gbuf(v);
            parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i]; });
          }
        break;
      }
      case Op::Mul: {
        const auto &A = val(n.a), &B = val(n.b);
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i] * B[i]; });
        }
        if (wants(n.b)) {
          auto& g = gbuf(n.b);
          parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i] * A[i]; });
        }
        break;
      }
      case Op::Scale: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          S s = n.s0;
          parallel_for(0, gy.size(), [&](long i) { g[i] += s * gy[i]; });
        }
        break;
      }
      case Op::AddRowwise: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i]; });
        }
        if (wants(n.b)) {
          auto& g = gbuf(n.b);
          long p = n.p0, d = gy.ncol, m = gy.nrow;
          parallel_for(0, p, [&](long r) {
            S* grow = g.ptr(r);
            for (long i = r; i < m; i += p) {
              const S* gr = gy.ptr(i);
              for (long j = 0; j < d; ++j) grow[j] += gr[j];
            }
          });
        }
        break;
      }
      case Op::Relu: {
        if (wants(n.a)) {
          const auto& X = val(n.a);
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) {
            if (X[i] > S(0)) g[i] += gy[i];
          });
        }
        break;
      }
      case Op::Selu: {
        if (wants(n.a)) {
          const auto& X = val(n.a);
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) {
            S d = X[i] > S(0) ? S(kSeluL) : S(kSeluL) * S(kSeluA) * std::exp(X[i]);
            g[i] += gy[i] * d;
          });
        }
        break;
      }
      case Op::Gelu: {
        if (wants(n.a)) {
          const auto& X = val(n.a);
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i] * gelu_bwd(X[i]); });
        }
        break;
      }
      case Op::Softmax: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          long d = gy.ncol;
          parallel_for(0, gy.nrow, [&](long i) {
            const S* p = n.val.ptr(i);
            const S* gr = gy.ptr(i);
            S inner = 0;
            for (long j = 0; j < d; ++j) inner += gr[j] * p[j];
            S* gx = g.ptr(i);
            for (long j = 0; j < d; ++j) gx[j] += p[j] * (gr[j] - inner);
          });
        }
        break;
      }
      case Op::LayerNorm: {
        const auto& G = val(n.b);
        long m = gy.nrow, d = gy.ncol;
        if (wants(n.a)) {
          auto& gx = gbuf(n.a);
          parallel_for(0, m, [&](long i) {
            const S* hr = n.aux.ptr(i);
            const S* gr = gy.ptr(i);
            S inv = hr[d];
            S s1 = 0, s2 = 0;
            for (long j = 0; j < d; ++j) {
              S gg = gr[j] * G[j];
              s1 += gg;
              s2 += gg * hr[j];
            }
            s1 /= (S)d;
            s2 /= (S)d;
            S* gxr = gx.ptr(i);
            for (long j = 0; j < d; ++j)
              gxr[j] += inv * (gr[j] * G[j] - s1 - hr[j] * s2);
          });
        }
        if (wants(n.b)) {
          auto& gg = gbuf(n.b);
          parallel_for(0, d, [&](long j) {
            S acc = 0;
            for (long i = 0; i < m; ++i) acc += gy(i, j) * n.aux(i, j);
            gg[j] += acc;
          });
        }
        if (wants(n.c)) {
          auto& gb = gbuf(n.c);
          parallel_for(0, d, [&](long j) {
            S acc = 0;
            for (long i = 0; i < m; ++i) acc += gy(i, j);
            gb[j] += acc;
          });
        }
        break;
      }
      case Op::Attention: {
        if (!wants(n.a)) break;
        const auto& Q = val(n.a);
        auto& gq = gbuf(n.a);
        long H = Q.ncol / 3, T = n.p0, nheads = n.p1;
        long B = Q.nrow / T, dh = H / nheads;
        S sc = S(1) / std::sqrt((S)dh);
        parallel_for(0, B * nheads, [&](long bh) {
          long b = bh / nheads, h = bh % nheads;
          std::vector<S> dp((size_t)T), ds((size_t)T);
          for (long t = 0; t < T; ++t) {
            const S* go = gy.ptr(b * T + t) + h * dh;
            const S* prow = n.aux.ptr(bh * T + t);
            // dv and d(probs)
            for (long u = 0; u < T; ++u) {
              const S* v = Q.ptr(b * T + u) + 2 * H + h * dh;
              S* gv = gq.ptr(b * T + u) + 2 * H + h * dh;
              S dot = 0;
              for (long j = 0; j < dh; ++j) {
                gv[j] += prow[u] * go[j];
                dot += go[j] * v[j];
              }
              dp[(size_t)u] = dot;
            }
            // softmax backward
            S inner = 0;
            for (long u = 0; u < T; ++u) inner += dp[(size_t)u] * prow[u];
            for (long u = 0; u < T; ++u) ds[(size_t)u] = prow[u] * (dp[(size_t)u] - inner) * sc;
            // dq and dk
            const S* q = Q.ptr(b * T + t) + h * dh;
            S* gqr = gq.ptr(b * T + t) + h * dh;
            for (long u = 0; u < T; ++u) {
              const S* k = Q.ptr(b * T + u) + H + h * dh;
              S* gk = gq.ptr(b * T + u) + H + h * dh;
              S d = ds[(size_t)u];
              for (long j = 0; j < dh; ++j) {
                gqr[j] += d * k[j];
                gk[j] += d * q[j];
              }
            }
          }
        });
        break;
      }
      case Op::StackRows: {
        long T = (long)n.srcs.size(), d = gy.ncol;
        for (long t = 0; t < T; ++t) {
          Var v = n.srcs[(size_t)t];
          if (!wants(v)) continue;
          auto& g = gbuf(v);
          parallel_for(0, g.nrow, [&](long b) {
            const S* s = gy.ptr(b * T + t);
            S* o = g.ptr(b);
            for (long j = 0; j < d; ++j) o[j] += s[j];
          });
        }
        break;
      }
      case Op::GatherRow: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          long T = n.p0, t = n.p1, d = gy.ncol;
          parallel_for(0, gy.nrow, [&](long b) {
            const S* s = gy.ptr(b);
            S* o = g.ptr(b * T + t);
            for (long j = 0; j < d; ++j) o[j] += s[j];
          });
        }
        break;
      }
      case Op::ConcatCols: {
        long off = 0;
        for (Var v : n.srcs) {
          long w = val(v).ncol;
          if (wants(v)) {
            auto& g = gbuf(v);
            long o0 = off;
            parallel_for(0, g.nrow, [&](long i) {
              const S* s = gy.ptr(i) + o0;
              S* o = g.ptr(i);
              for (long j = 0; j < w; ++j) o[j] += s[j];
            });
          }
          off += w;
        }
        break;
      }
      case Op::SliceCols: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          long lo = n.p0, len = gy.ncol;
          parallel_for(0, gy.nrow, [&](long i) {
            const S* s = gy.ptr(i);
            S* o = g.ptr(i) + lo;
            for (long j = 0; j < len; ++j) o[j] += s[j];
          });
        }
        break;
      }
      case Op::Reshape: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          parallel_for(0, gy.size(), [&](long i) { g[i] += gy[i]; });
        }
        break;
      }
      case Op::Sum: {
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          S gy0 = gy[0];
          parallel_for(0, g.size(), [&](long i) { g[i] += gy0; });
        }
        break;
      }
      case Op::Mse: {
        const auto &A = val(n.a), &B = val(n.b);
        S w = gy[0] * S(2) / (S)A.size();
        if (wants(n.a)) {
          auto& g = gbuf(n.a);
          parallel_for(0, A.size(), [&](long i) { g[i] += w * (A[i] - B[i]); });
        }
        if (wants(n.b)) {
          auto& g = gbuf(n.b);
          parallel_for(0, A.size(), [&](long i) { g[i] -= w * (A[i] - B[i]); });
        }
        break;
      }
      case Op::CrossEntropy: {
        if (!wants(n.a)) break;
        auto& g = gbuf(n.a);
        long m = g.nrow, d = g.ncol;
        S gy0 = gy[0];
        parallel_for(0, m, [&](long i) {
          const S* pr = n.aux.ptr(i);
          S w = pr[d] * gy0;
          S* gr = g.ptr(i);
          int lbl = n.labels[(size_t)i];
          for (long j = 0; j < d; ++j) gr[j] += w * (pr[j] - ((long)lbl == j ? S(1) : S(0)));
        });
        break;
      }
    }
  }
};

using Graph = GraphT<float>;

}  // namespace ckptdiff
