/*
 * Copyright 2026 The gasmil Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense row-major matrices, activations, the AdamW update and a central
// difference gradient checker. Everything trains in double precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gasmil/errors.hpp"

namespace gasmil {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw DimensionError("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix row_vector(std::span<const double> values) {
    Matrix m(1, values.size());
    std::copy(values.begin(), values.end(), m.data_.begin());
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& o) {
    if (!same_shape(o)) throw DimensionError("cannot add " + o.shape() + " into " + shape());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix transpose(const Matrix& x) {
  Matrix t(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) t(j, i) = x(i, j);
  return t;
}

/// Rows [begin, end) of x.
inline Matrix slice_rows(const Matrix& x, std::size_t begin, std::size_t end) {
  Matrix out(end - begin, x.cols());
  std::copy(x.data().begin() + begin * x.cols(), x.data().begin() + end * x.cols(), out.data().begin());
  return out;
}

/// Columns [begin, end) of x.
inline Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t end) {
  Matrix out(x.rows(), end - begin);
  for (std::size_t i = 0; i < x.rows(); ++i)
    std::copy(x.row(i).begin() + begin, x.row(i).begin() + end, out.row(i).begin());
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: " + a.shape() + " times " + b.shape());
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("matmul_tn: " + a.shape() + "^T times " + b.shape());
  Matrix out(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* brow = b.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      double* o = out.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

/// a·bᵀ. Transposing b first keeps the inner loop a contiguous row update.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_nt: " + a.shape() + " times " + b.shape() + "^T");
  return matmul(a, transpose(b));
}

/// out = x·w + b, with b a 1×q row broadcast over the n rows.
inline Matrix linear_affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.rows())
    throw DimensionError("linear_affine: input " + x.shape() + " does not match weight " + w.shape());
  if (b.rows() != 1 || b.cols() != w.cols())
    throw DimensionError("linear_affine: bias " + b.shape() + " does not match weight " + w.shape());
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) std::copy(b.data().begin(), b.data().end(), out.row(i).begin());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xik = x(i, k);
      if (xik == 0.0) continue;
      const double* wrow = w.row(k).data();
      for (std::size_t j = 0; j < w.cols(); ++j) o[j] += xik * wrow[j];
    }
  }
  return out;
}

/// Reverse pass of linear_affine. Accumulates into dw/db; returns dx when
/// requested (otherwise an empty matrix).
inline Matrix linear_affine_backward(const Matrix& x, const Matrix& w, const Matrix& dout, Matrix& dw, Matrix& db,
                                     bool want_dx = true) {
  dw += matmul_tn(x, dout);
  for (std::size_t i = 0; i < dout.rows(); ++i)
    for (std::size_t j = 0; j < dout.cols(); ++j) db(0, j) += dout(i, j);
  return want_dx ? matmul_nt(dout, w) : Matrix{};
}

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) noexcept {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Matrix sigmoid_map(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  std::transform(x.data().begin(), x.data().end(), out.data().begin(), sigmoid);
  return out;
}

/// Given y = sigmoid(x) and dL/dy, returns dL/dx.
inline Matrix sigmoid_backward(const Matrix& y, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) dx.data()[i] = dy.data()[i] * y.data()[i] * (1.0 - y.data()[i]);
  return dx;
}

inline Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) sum += (o[j] = std::exp(in[j] - mx));
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Given p = row_softmax(x) and dL/dp, returns dL/dx.
inline Matrix row_softmax_backward(const Matrix& p, const Matrix& dp) {
  Matrix dx(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += p(i, j) * dp(i, j);
    for (std::size_t j = 0; j < p.cols(); ++j) dx(i, j) = p(i, j) * (dp(i, j) - dot);
  }
  return dx;
}

/// Deterministic generator: xoshiro256** seeded through splitmix64. Gaussian
/// draws use the Box-Muller transform on two 53-bit uniforms, so a seed gives
/// the same sequence on any IEEE-754 platform with a faithful libm.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw ParameterError("RngStream::below: bound must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % bound;
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Independent child stream; advances this stream by one draw.
  RngStream split() noexcept { return RngStream(next_u64()); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Inverted-dropout multipliers: each entry is 0 with probability p and
/// 1/(1-p) otherwise. In inference mode every entry is 1.
inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, bool training, RngStream& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  Matrix mask(rows, cols, 1.0);
  if (!training || p == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - p);
  for (double& v : mask.data()) v = rng.uniform() < p ? 0.0 : keep_scale;
  return mask;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("hadamard: " + a.shape() + " vs " + b.shape());
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

inline Matrix dropout_apply(const Matrix& x, double p, bool training, RngStream& rng) {
  return hadamard(x, dropout_mask(x.rows(), x.cols(), p, training, rng));
}

/// A trainable tensor together with its gradient and AdamW moments.
struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix m1;
  Matrix m2;
  std::uint64_t step_count = 0;

  Parameter() = default;
  explicit Parameter(Matrix v)
      : value(std::move(v)), grad(value.rows(), value.cols()), m1(value.rows(), value.cols()),
        m2(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update:
///   value <- value - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * value
/// where the decay term uses the pre-update value.
inline void adamw_step(Parameter& param, const AdamWOptions& opt, const std::string& name = "parameter") {
  if (!param.grad.same_shape(param.value))
    throw DimensionError("adamw_step: gradient " + param.grad.shape() + " does not match " + name + " " +
                         param.value.shape());
  if (!param.grad.all_finite()) throw NumericError("adamw_step: non-finite gradient in " + name);
  if (opt.lr < 0.0 || opt.weight_decay < 0.0 || opt.beta1 < 0.0 || opt.beta1 >= 1.0 || opt.beta2 < 0.0 ||
      opt.beta2 >= 1.0 || opt.eps <= 0.0)
    throw ParameterError("adamw_step: hyperparameters out of range");

  ++param.step_count;
  const double t = static_cast<double>(param.step_count);
  const double bias1 = 1.0 - std::pow(opt.beta1, t);
  const double bias2 = 1.0 - std::pow(opt.beta2, t);
  auto& value = param.value.data();
  auto& grad = param.grad.data();
  auto& m1 = param.m1.data();
  auto& m2 = param.m2.data();
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double g = grad[i];
    m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * g;
    m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * g * g;
    const double m_hat = m1[i] / bias1;
    const double v_hat = m2[i] / bias2;
    value[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps) + opt.lr * opt.weight_decay * value[i];
  }
}

/// A tensor whose entries the checker perturbs, paired with the analytic
/// gradient claimed for it.
struct GradCheckTarget {
  Matrix* value;
  const Matrix* grad;
};

struct FiniteDiffOptions {
  double epsilon = 1e-5;
  /// Coordinates probed per tensor; 0 probes all of them.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

/// Max over probed coordinates of |analytic - central| / max(1, |central|).
/// Every perturbation is undone before returning.
inline double finite_diff_check(const std::function<double()>& loss_fn, std::span<const GradCheckTarget> targets,
                                const FiniteDiffOptions& opt = {}) {
  RngStream rng(opt.seed);
  double worst = 0.0;
  auto probe = [&](double& x) {
    const double saved = x;
    x = saved + opt.epsilon;
    const double up = loss_fn();
    x = saved - opt.epsilon;
    const double down = loss_fn();
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("finite_diff_check: non-finite loss");
    return (up - down) / (2.0 * opt.epsilon);
  };
  for (const auto& target : targets) {
    if (!target.value->same_shape(*target.grad))
      throw DimensionError("finite_diff_check: gradient " + target.grad->shape() + " vs value " +
                           target.value->shape());
    const std::size_t count = target.value->size();
    std::vector<std::size_t> coords(count);
    for (std::size_t i = 0; i < count; ++i) coords[i] = i;
    if (opt.max_coords_per_tensor != 0 && opt.max_coords_per_tensor < count) {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i)
        std::swap(coords[i], coords[i + rng.below(count - i)]);
      coords.resize(opt.max_coords_per_tensor);
    }
    for (std::size_t idx : coords) {
      const double numeric = probe(target.value->data()[idx]);
      const double analytic = target.grad->data()[idx];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

inline double finite_diff_check(const std::function<double()>& loss_fn, std::span<Parameter* const> params,
                                const FiniteDiffOptions& opt = {}) {
  std::vector<GradCheckTarget> targets;
  targets.reserve(params.size());
  for (Parameter* p : params) targets.push_back({&p->value, &p->grad});
  return finite_diff_check(loss_fn, targets, opt);
}

}  // namespace gasmil
