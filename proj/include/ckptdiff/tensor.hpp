#pragma once
// Dense row-major tensors. Rank 1 or 2 is all the library needs; a rank-1
// tensor behaves as a single row where a matrix is expected.
#include <cassert>
#include <cmath>
#include <cstdint>
#include <vector>

namespace ckptdiff {

template <class S>
struct TensorT {
  long nrow = 0, ncol = 0;
  std::vector<S> data;

  TensorT() = default;
  TensorT(long r, long c) : nrow(r), ncol(c), data((size_t)(r * c), S(0)) {}
  TensorT(long r, long c, std::vector<S> d) : nrow(r), ncol(c), data(std::move(d)) {
    assert((long)data.size() == r * c);
  }
  static TensorT row(std::vector<S> d) {
    long c = (long)d.size();
    return TensorT(1, c, std::move(d));
  }

  long size() const { return nrow * ncol; }
  S& operator()(long i, long j) { return data[(size_t)(i * ncol + j)]; }
  S operator()(long i, long j) const { return data[(size_t)(i * ncol + j)]; }
  S& operator[](long i) { return data[(size_t)i]; }
  S operator[](long i) const { return data[(size_t)i]; }
  S* ptr(long i = 0) { return data.data() + (size_t)(i * ncol); }
  const S* ptr(long i = 0) const { return data.data() + (size_t)(i * ncol); }

  bool same_shape(const TensorT& o) const { return nrow == o.nrow && ncol == o.ncol; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

  template <class T>
  TensorT<T> cast() const {
    TensorT<T> out(nrow, ncol);
    for (long i = 0; i < size(); ++i) out[i] = (T)data[(size_t)i];
    return out;
  }
};

using Tensor = TensorT<float>;

}  // namespace ckptdiff
