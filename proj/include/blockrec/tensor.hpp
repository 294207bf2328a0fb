#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "blockrec/errors.hpp"

namespace blockrec {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major multi-dimensional array.
template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), Real(0)) {
    for (i64 d : shape) contract(d > 0, "tensor extents must be positive, got " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
    contract(shape_numel(shape) == static_cast<i64>(data.size()),
             "value count does not match shape " + shape_str(shape));
  }

  i64 numel() const { return static_cast<i64>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  i64 dim(int axis) const { return shape[static_cast<size_t>(axis >= 0 ? axis : rank() + axis)]; }

  Real& at(std::initializer_list<i64> idx) { return data[offset_of(idx)]; }
  Real at(std::initializer_list<i64> idx) const { return data[offset_of(idx)]; }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (Real v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    return out;
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, Real v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
  }
  static Tensor scalar(Real v) { return Tensor({1}, {v}); }

 private:
  size_t offset_of(std::initializer_list<i64> idx) const {
    contract(static_cast<int>(idx.size()) == rank(), "index rank mismatch");
    size_t off = 0;
    auto it = idx.begin();
    for (int a = 0; a < rank(); ++a, ++it) {
      contract(*it >= 0 && *it < shape[static_cast<size_t>(a)], "index out of bounds");
      off = off * static_cast<size_t>(shape[static_cast<size_t>(a)]) + static_cast<size_t>(*it);
    }
    return off;
  }
};

// ---- deterministic random init -------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return mean + stddev * norm_(gen_);
  }

  // Standard normal restricted to [-2, 2], rescaled so the empirical standard
  // deviation equals stddev (the usual variance-scaling correction).
  double truncated_normal(double stddev) {
    static constexpr double kTruncStd = 0.87962566103423978;
    double u;
    do {
      u = norm_(gen_);
    } while (u < -2.0 || u > 2.0);
    return stddev * u / kTruncStd;
  }

  double uniform() { return uni_(gen_); }
  std::uint64_t next_u64() { return gen_(); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> norm_{0.0, 1.0};
  std::uniform_real_distribution<double> uni_{0.0, 1.0};
};

template <typename Real>
Tensor<Real> random_normal(Shape s, double stddev, Rng& rng) {
  Tensor<Real> t(std::move(s));
  for (Real& v : t.data) v = static_cast<Real>(rng.normal(0.0, stddev));
  return t;
}

template <typename Real>
Tensor<Real> random_truncated_normal(Shape s, double stddev, Rng& rng) {
  Tensor<Real> t(std::move(s));
  for (Real& v : t.data) v = static_cast<Real>(rng.truncated_normal(stddev));
  return t;
}

// ---- GEMM kernels (Eigen-backed, deterministic) ---------------------------

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMapMat = Eigen::Map<const RowMat<Real>>;

}  // namespace detail

// c (+)= a[m,k] * b[k,n]
template <typename Real>
void gemm(const Real* a, const Real* b, Real* c, i64 m, i64 k, i64 n, bool accumulate) {
  detail::CMapMat<Real> A(a, m, k);
  detail::CMapMat<Real> B(b, k, n);
  detail::MapMat<Real> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// c (+)= a[m,k] * b[n,k]^T
template <typename Real>
void gemm_nt(const Real* a, const Real* b, Real* c, i64 m, i64 k, i64 n, bool accumulate) {
  detail::CMapMat<Real> A(a, m, k);
  detail::CMapMat<Real> B(b, n, k);
  detail::MapMat<Real> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// c (+)= a[k,m]^T * b[k,n]
template <typename Real>
void gemm_tn(const Real* a, const Real* b, Real* c, i64 m, i64 k, i64 n, bool accumulate) {
  detail::CMapMat<Real> A(a, k, m);
  detail::CMapMat<Real> B(b, k, n);
  detail::MapMat<Real> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace blockrec
