// Copyright 2026 The thermaldet Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operations on ad::Var.
//
// Binary elementwise ops broadcast a 1x1 operand to any shape, a 1xN operand
// across rows and an Mx1 operand across columns. Gradients of broadcast
// operands are summed back to their own shape.

#pragma once

#include "thermaldet/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet::ad {

namespace detail {

inline Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw std::invalid_argument(std::string("shape mismatch in ") + op);
}

inline Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

inline void accumulate_reduced(Matrix& dst, const Matrix& g) {
  if (dst.rows() == g.rows() && dst.cols() == g.cols()) {
    dst += g;
  } else if (dst.rows() == 1 && dst.cols() == 1) {
    dst(0, 0) += g.sum();
  } else if (dst.rows() == 1) {
    dst += g.colwise().sum();
  } else {
    dst += g.rowwise().sum();
  }
}

template <class Fwd, class DA, class DB>
Var binary(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
  const Eigen::Index r = broadcast_dim(a.rows(), b.rows(), name);
  const Eigen::Index c = broadcast_dim(a.cols(), b.cols(), name);
  Matrix av = expand(a.value(), r, c);
  Matrix bv = expand(b.value(), r, c);
  Matrix out = fwd(av, bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib, r, c, da, db](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix av = expand(t.value(ia), r, c);
    Matrix bv = expand(t.value(ib), r, c);
    if (t.needs_grad(ia)) accumulate_reduced(t.grad(ia), da(g, av, bv));
    if (t.needs_grad(ib)) accumulate_reduced(t.grad(ib), db(g, av, bv));
  });
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <class F, class D>
Var unary(const Var& a, F f, D dfdx) {
  Matrix out = a.value().unaryExpr(f);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, dfdx](Tape& t, std::size_t self) {
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    Matrix local = x.binaryExpr(y, dfdx);
    t.grad(ia).array() += t.grad(self).array() * local.array();
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](const Matrix& x, const Matrix& y) -> Matrix { return x + y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](const Matrix& x, const Matrix& y) -> Matrix { return x - y; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return g; },
      [](const Matrix& g, const Matrix&, const Matrix&) -> Matrix { return -g; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseProduct(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseProduct(y); },
      [](const Matrix& g, const Matrix& x, const Matrix&) -> Matrix { return g.cwiseProduct(x); });
}

inline Var div(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "div",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix&, const Matrix& y) -> Matrix { return g.cwiseQuotient(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return -(g.array() * x.array() / (y.array() * y.array())).matrix();
      });
}

// Elementwise min/max; the gradient follows the selected operand (a on ties).
inline Var min(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "min",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseMin(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return (x.array() <= y.array()).select(g, 0.0).matrix();
      },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return (x.array() <= y.array()).select(0.0, g).matrix();
      });
}

inline Var max(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "max",
      [](const Matrix& x, const Matrix& y) -> Matrix { return x.cwiseMax(y); },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return (x.array() >= y.array()).select(g, 0.0).matrix();
      },
      [](const Matrix& g, const Matrix& x, const Matrix& y) -> Matrix {
        return (x.array() >= y.array()).select(0.0, g).matrix();
      });
}

inline Var scale(const Var& a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value() * s, {a}, [ia, s](Tape& t, std::size_t self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

inline Var add_scalar(const Var& a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record((a.value().array() + s).matrix(), {a},
                         [ia](Tape& t, std::size_t self) { t.grad(ia) += t.grad(self); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator/(const Var& a, double s) { return scale(a, 1.0 / s); }
inline Var operator/(double s, const Var& a) {
  return detail::unary(
      a, [s](double x) { return s / x; }, [](double x, double y) { return -y / x; });
}

inline Var min(const Var& a, double s) { return min(a, a.tape().constant(s)); }
inline Var max(const Var& a, double s) { return max(a, a.tape().constant(s)); }

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Var square(const Var& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var atan(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::atan(x); }, [](double x, double) { return 1.0 / (1.0 + x * x); });
}

// tanh approximation of GELU.
inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}
inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline Var gelu(const Var& a) {
  return detail::unary(
      a, [](double x) { return gelu_value(x); }, [](double x, double) { return gelu_derivative(x); });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(Matrix::Constant(1, 1, a.value().sum()), {a},
                         [ia](Tape& t, std::size_t self) {
                           t.grad(ia).array() += t.grad(self)(0, 0);
                         });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean of an empty Var");
  return scale(sum(a), 1.0 / n);
}

// Mx N -> M x 1
inline Var row_sum(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().rowwise().sum(), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    ga.colwise() += g.col(0);
  });
}

// M x N -> 1 x N
inline Var col_sum(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().colwise().sum(), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    ga.rowwise() += g.row(0);
  });
}

// ------------------------------------------------------------ linear algebra

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul shape mismatch");
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt shape mismatch");
  const std::size_t ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib);
    if (t.needs_grad(ib)) t.grad(ib).noalias() += g.transpose() * t.value(ia);
  });
}

inline Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(a.value().transpose(), {a}, [ia](Tape& t, std::size_t self) {
    t.grad(ia) += t.grad(self).transpose();
  });
}

// x * W + b with b broadcast over rows.
inline Var linear(const Var& x, const Var& w, const Var& b) { return add(matmul(x, w), b); }

// ------------------------------------------------------------ shape plumbing

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows out of range");
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.value().middleRows(start, count), {a},
                         [ia, start, count](Tape& t, std::size_t self) {
                           t.grad(ia).middleRows(start, count) += t.grad(self);
                         });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols out of range");
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.value().middleCols(start, count), {a},
                         [ia, start, count](Tape& t, std::size_t self) {
                           t.grad(ia).middleCols(start, count) += t.grad(self);
                         });
}

inline Var row(const Var& a, Eigen::Index r) { return slice_rows(a, r, 1); }
inline Var col(const Var& a, Eigen::Index c) { return slice_cols(a, c, 1); }

inline Var element(const Var& a, Eigen::Index r, Eigen::Index c) {
  const std::size_t ia = a.id();
  return a.tape().record(Matrix::Constant(1, 1, a.value()(r, c)), {a},
                         [ia, r, c](Tape& t, std::size_t self) {
                           t.grad(ia)(r, c) += t.grad(self)(0, 0);
                         });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.rows();
  }
  return parts.front().tape().record_many(
      std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.needs_grad(ids[k])) continue;
          Matrix& gk = t.grad(ids[k]);
          gk += g.middleRows(offsets[k], gk.rows());
        }
      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.cols();
  }
  return parts.front().tape().record_many(
      std::move(out), parts, [ids, offsets](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.needs_grad(ids[k])) continue;
          Matrix& gk = t.grad(ids[k]);
          gk += g.middleCols(offsets[k], gk.cols());
        }
      });
}

// Rows of `a` picked by index (repeats allowed).
inline Var gather_rows(const Var& a, const std::vector<Eigen::Index>& index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= a.rows()) throw std::out_of_range("gather_rows index");
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(index[k]);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, index](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t k = 0; k < index.size(); ++k) ga.row(index[k]) += g.row(static_cast<Eigen::Index>(k));
  });
}

// out(i) = a(i, index[i]) as an M x 1 column.
inline Var pick(const Var& a, const std::vector<Eigen::Index>& index) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
    throw std::invalid_argument("pick needs one index per row");
  }
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (index[i] < 0 || index[i] >= a.cols()) throw std::out_of_range("pick index");
    out(i, 0) = a.value()(i, index[i]);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, index](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < ga.rows(); ++i) ga(i, index[i]) += g(i, 0);
  });
}

// out(i, k) = a(i, index(i, k)); index is rows(a) x K.
inline Var pick_cols(const Var& a, const Eigen::MatrixXi& index) {
  if (index.rows() != a.rows()) throw std::invalid_argument("pick_cols needs one index row per row");
  Matrix out(a.rows(), index.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index k = 0; k < index.cols(); ++k) {
      if (index(i, k) < 0 || index(i, k) >= a.cols()) throw std::out_of_range("pick_cols index");
      out(i, k) = a.value()(i, index(i, k));
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, index](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (Eigen::Index k = 0; k < g.cols(); ++k) ga(i, index(i, k)) += g(i, k);
    }
  });
}

// Row-major regrouping: every k consecutive rows become one row of width k*C.
inline Var fold_rows(const Var& a, Eigen::Index k) {
  if (k <= 0 || a.rows() % k != 0) throw std::invalid_argument("fold_rows: rows not divisible");
  const Eigen::Index c = a.cols();
  Matrix out(a.rows() / k, k * c);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index j = 0; j < k; ++j) out.block(r, j * c, 1, c) = a.value().row(r * k + j);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, k, c](Tape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      for (Eigen::Index j = 0; j < k; ++j) ga.row(r * k + j) += g.block(r, j * c, 1, c);
    }
  });
}

// ---------------------------------------------------------- normalizations

// Row-wise softmax. `keep`, when non-empty, has the shape of `a`; zero entries
// are excluded and receive exactly zero probability.
inline Var softmax_rows(const Var& a, const Matrix& keep = Matrix()) {
  const Matrix& x = a.value();
  const bool masked = keep.size() != 0;
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (!masked || keep(i, j) != 0.0) m = std::max(m, x(i, j));
    }
    if (!std::isfinite(m)) throw std::invalid_argument("softmax row has no unmasked entries");
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (!masked || keep(i, j) != 0.0) {
        out(i, j) = std::exp(x(i, j) - m);
        z += out(i, j);
      }
    }
    out.row(i) /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix gy = g.cwiseProduct(y);
    Vector dot = gy.rowwise().sum();
    Matrix ga = gy - (y.array().colwise() * dot.array()).matrix();
    t.grad(ia) += ga;
  });
}

inline Var log_softmax_rows(const Var& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = (x.row(i).array() - lse).matrix();
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Vector gs = g.rowwise().sum();
    Matrix p = y.array().exp().matrix();
    t.grad(ia) += g - (p.array().colwise() * gs.array()).matrix();
  });
}

// Per-row layer normalization with population variance, followed by
// gain * xhat + bias (gain and bias are 1 x N).
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw std::invalid_argument("layer_norm gain/bias shape mismatch");
  }
  Matrix xhat(xv.rows(), n);
  Vector inv_std(xv.rows());
  std::vector<char> floored(static_cast<std::size_t>(xv.rows()), 0);
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    const double mu = xv.row(i).mean();
    const double var = (xv.row(i).array() - mu).square().mean();
    floored[static_cast<std::size_t>(i)] = var < eps;
    inv_std(i) = 1.0 / std::sqrt(std::max(var, eps));
    xhat.row(i) = ((xv.row(i).array() - mu) * inv_std(i)).matrix();
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias}, [ix, ig, ib, xhat, inv_std, floored](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const RowVector gv = t.value(ig).row(0);
        if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (t.needs_grad(ix)) {
          Matrix& gx = t.grad(ix);
          const double n = static_cast<double>(g.cols());
          for (Eigen::Index i = 0; i < g.rows(); ++i) {
            RowVector dxhat = g.row(i).cwiseProduct(gv);
            const double m1 = dxhat.mean();
            // A floored row has a constant scale, so only the mean is differentiated.
            const double m2 = floored[static_cast<std::size_t>(i)] ? 0.0 : dxhat.cwiseProduct(xhat.row(i)).sum() / n;
            gx.row(i) += (inv_std(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2)).matrix();
          }
        }
      });
}

// Pairwise cosine similarity between the rows of a (M x D) and b (N x D):
// c_ij = a_i . b_j / (|a_i| |b_j| + eps).
inline Var cosine_rows(const Var& a, const Var& b, double eps = 1e-12) {
  if (a.cols() != b.cols()) throw std::invalid_argument("cosine_rows dimension mismatch");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Vector na = av.rowwise().norm();
  Vector nb = bv.rowwise().norm();
  Matrix dots = av * bv.transpose();
  Matrix denom = (na * nb.transpose()).array() + eps;
  Matrix out = dots.cwiseQuotient(denom);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b},
                         [ia, ib, na, nb, dots, denom](Tape& t, std::size_t self) {
                           const Matrix& g = t.grad(self);
                           const Matrix& av = t.value(ia);
                           const Matrix& bv = t.value(ib);
                           // dc/da_i = b_j / den - dots * |b_j| a_i / (|a_i| den^2)
                           Matrix w = g.cwiseQuotient(denom);
                           Matrix q = (g.array() * dots.array() / denom.array().square()).matrix();
                           if (t.needs_grad(ia)) {
                             Matrix ga = w * bv;
                             Vector coef = q * nb;
                             for (Eigen::Index i = 0; i < av.rows(); ++i) {
                               if (na(i) > 0.0) ga.row(i) -= (coef(i) / na(i)) * av.row(i);
                             }
                             t.grad(ia) += ga;
                           }
                           if (t.needs_grad(ib)) {
                             Matrix gb = w.transpose() * av;
                             Vector coef = q.transpose() * na;
                             for (Eigen::Index j = 0; j < bv.rows(); ++j) {
                               if (nb(j) > 0.0) gb.row(j) -= (coef(j) / nb(j)) * bv.row(j);
                             }
                             t.grad(ib) += gb;
                           }
                         });
}

// softmax(Q K^T * scale, keep) V
inline Var attention(const Var& q, const Var& k, const Var& v, const Matrix& keep = Matrix()) {
  if (k.rows() != v.rows()) throw std::invalid_argument("attention: K and V row counts differ");
  if (q.cols() != k.cols()) throw std::invalid_argument("attention: Q and K widths differ");
  const double s = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  Var w = softmax_rows(scale(matmul_nt(q, k), s), keep);
  return matmul(w, v);
}


// Attention applied independently to `groups` row blocks: query rows
// [b*nq, (b+1)*nq) attend only to key/value rows [b*nk, (b+1)*nk). `keep` is
// either empty, nq x nk (shared by all blocks) or (groups*nq) x nk.
inline Var block_attention(const Var& q, const Var& k, const Var& v, Eigen::Index groups,
                           const Matrix& keep = Matrix()) {
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0) {
    throw std::invalid_argument("block_attention: rows not divisible by groups");
  }
  if (k.rows() != v.rows()) throw std::invalid_argument("block_attention: K and V row counts differ");
  if (q.cols() != k.cols()) throw std::invalid_argument("block_attention: Q and K widths differ");
  const Eigen::Index nq = q.rows() / groups, nk = k.rows() / groups;
  const bool masked = keep.size() != 0;
  const bool shared = masked && keep.rows() == nq;
  if (masked && (keep.cols() != nk || (keep.rows() != nq && keep.rows() != q.rows()))) {
    throw std::invalid_argument("block_attention: mask shape mismatch");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  Matrix probs(q.rows(), nk);
  Matrix out(q.rows(), v.cols());
  for (Eigen::Index b = 0; b < groups; ++b) {
    Matrix logits = (q.value().middleRows(b * nq, nq) * k.value().middleRows(b * nk, nk).transpose()) * s;
    for (Eigen::Index i = 0; i < nq; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      auto kept = [&](Eigen::Index j) {
        return !masked || (shared ? keep(i, j) : keep(b * nq + i, j)) != 0.0;
      };
      bool any_nan = false;
      for (Eigen::Index j = 0; j < nk; ++j) {
        if (!kept(j)) continue;
        any_nan = any_nan || std::isnan(logits(i, j));
        m = std::max(m, logits(i, j));
      }
      if (any_nan) {
        // Non-finite inputs propagate so the loss check can name the term.
        probs.row(b * nq + i).setConstant(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      if (!std::isfinite(m)) throw std::invalid_argument("block_attention: every key is masked");
      double z = 0.0;
      for (Eigen::Index j = 0; j < nk; ++j) {
        const double e = kept(j) ? std::exp(logits(i, j) - m) : 0.0;
        probs(b * nq + i, j) = e;
        z += e;
      }
      probs.row(b * nq + i) /= z;
    }
    out.middleRows(b * nq, nq) = probs.middleRows(b * nq, nq) * v.value().middleRows(b * nk, nk);
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {q, k, v}, [iq, ik, iv, probs, groups, nq, nk, s](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const bool gq = t.needs_grad(iq), gk = t.needs_grad(ik), gv = t.needs_grad(iv);
        for (Eigen::Index b = 0; b < groups; ++b) {
          const auto p = probs.middleRows(b * nq, nq);
          const auto go = g.middleRows(b * nq, nq);
          if (gv) t.grad(iv).middleRows(b * nk, nk) += p.transpose() * go;
          if (!gq && !gk) continue;
          Matrix dp = go * t.value(iv).middleRows(b * nk, nk).transpose();
          Vector rs = dp.cwiseProduct(p).rowwise().sum();
          Matrix ds = (p.array() * (dp.colwise() - rs).array()).matrix() * s;
          if (gq) t.grad(iq).middleRows(b * nq, nq) += ds * t.value(ik).middleRows(b * nk, nk);
          if (gk) t.grad(ik).middleRows(b * nk, nk) += ds.transpose() * t.value(iq).middleRows(b * nq, nq);
        }
      });
}

}  // namespace thermaldet::ad
