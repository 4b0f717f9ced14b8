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

// Plain-value dense math: cosine similarity, softmax, layer normalization,
// masked scaled-dot attention, and the finite-difference gradient verifier.

#pragma once

#include "thermaldet/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

inline constexpr double kCosineEps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

enum class EmbeddingRole { kText, kRegion, kAttribute, kCalibrated };

inline const char* to_string(EmbeddingRole role) {
  switch (role) {
    case EmbeddingRole::kText: return "text";
    case EmbeddingRole::kRegion: return "region";
    case EmbeddingRole::kAttribute: return "attribute";
    case EmbeddingRole::kCalibrated: return "calibrated";
  }
  return "unknown";
}

struct EmbeddingVector {
  Vector values;
  EmbeddingRole role = EmbeddingRole::kRegion;

  EmbeddingVector() = default;
  EmbeddingVector(Vector v, EmbeddingRole r) : values(std::move(v)), role(r) {
    if (!values.allFinite()) throw std::invalid_argument("embedding has non-finite entries");
  }
  Eigen::Index dim() const { return values.size(); }
};

inline double cosine_sim(const Vector& u, const Vector& v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  return u.dot(v) / (u.norm() * v.norm() + kCosineEps);
}

inline double cosine_sim(const EmbeddingVector& u, const EmbeddingVector& v) {
  return cosine_sim(u.values, v.values);
}

// Temperature softmax with max-subtraction.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be > 0");
  if (logits.empty()) return {};
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logits) {
    if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite logit");
    m = std::max(m, x);
  }
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - m) / temperature);
    z += out[i];
  }
  for (double& p : out) p /= z;
  return out;
}

inline Vector layer_norm(const Vector& x, const Vector& gain, const Vector& bias,
                         double eps = kLayerNormEps) {
  if (x.size() < 2) throw std::invalid_argument("layer_norm: dimension must be >= 2");
  if (gain.size() != x.size() || bias.size() != x.size()) {
    throw std::invalid_argument("layer_norm: gain/bias dimension mismatch");
  }
  const double mu = x.mean();
  const double var = (x.array() - mu).square().mean();
  // eps floors the variance rather than being added to it, so any input with
  // variance above eps normalizes to exactly unit variance.
  const double inv = 1.0 / std::sqrt(std::max(var, eps));
  return ((x.array() - mu) * inv * gain.array() + bias.array()).matrix();
}

inline Vector layer_norm(const Vector& x, double eps = kLayerNormEps) {
  return layer_norm(x, Vector::Ones(x.size()), Vector::Zero(x.size()), eps);
}

// softmax(Q K^T / sqrt(d_k)) V computed row by row. keep(i, j) == 0 excludes
// key j for query i; an empty `keep` keeps every key. Excluded keys are
// skipped outright, so their weight is exactly zero.
inline Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                   const Matrix& keep = Matrix()) {
  if (k.rows() != v.rows()) throw std::invalid_argument("attention: K and V row counts differ");
  if (q.cols() != k.cols()) throw std::invalid_argument("attention: Q and K widths differ");
  const bool masked = keep.size() != 0;
  if (masked && (keep.rows() != q.rows() || keep.cols() != k.rows())) {
    throw std::invalid_argument("attention: mask shape mismatch");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  Matrix out = Matrix::Zero(q.rows(), v.cols());
  std::vector<double> logits(static_cast<std::size_t>(k.rows()));
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (masked && keep(i, j) == 0.0) continue;
      double dot = 0.0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      logits[j] = dot * s;
      m = std::max(m, logits[j]);
    }
    if (!std::isfinite(m)) throw std::invalid_argument("attention: every key is masked");
    double z = 0.0;
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (masked && keep(i, j) == 0.0) continue;
      logits[j] = std::exp(logits[j] - m);
      z += logits[j];
    }
    for (Eigen::Index j = 0; j < k.rows(); ++j) {
      if (masked && keep(i, j) == 0.0) continue;
      const double w = logits[j] / z;
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += w * v(j, c);
    }
  }
  return out;
}

// ------------------------------------------------------ gradient verification

struct GradCheckOptions {
  double step = 1e-4;        // relative: h = step * max(1, |x|)
  double tolerance = 1e-3;   // on the max relative error
  double abs_floor = 1e-6;   // denominators below this compare absolutely
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Eigen::Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool deterministic = true;
  bool passed = false;
  std::string diagnostic;
};

// Evaluates the loss at the store's current values. With `with_grad` set it
// must also leave the analytic gradient in every Parameter::grad slot
// (after zeroing them).
using LossEvaluator = std::function<double(ParameterStore&, bool with_grad)>;

inline double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

// Central differences against the analytic gradient for every trainable,
// non-frozen element in the store.
inline GradCheckReport fd_gradient_check(const LossEvaluator& loss, ParameterStore& store,
                                         const GradCheckOptions& opts = {}) {
  GradCheckReport report;
  store.zero_grad();
  const double f0 = loss(store, true);
  const double f1 = loss(store, false);
  if (f0 != f1 || !std::isfinite(f0)) {
    report.deterministic = std::isfinite(f0) && f0 == f1;
    report.diagnostic = std::isfinite(f0) ? "evaluator is not deterministic: two evaluations differ"
                                          : "evaluator returned a non-finite loss";
    return report;
  }
  // Re-run with gradients so the slots are fresh.
  store.zero_grad();
  loss(store, true);
  std::vector<Matrix> analytic;
  for (const auto& p : store) analytic.push_back(p.grad);

  std::size_t k = 0;
  for (auto& p : store) {
    const Matrix& g = analytic[k++];
    if (!p.updatable()) continue;
    GradCheckEntry entry;
    entry.name = p.name;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      const double h = opts.step * std::max(1.0, std::abs(saved));
      x = saved + h;
      const double fp = loss(store, false);
      x = saved - h;
      const double fm = loss(store, false);
      x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = relative_error(g.data()[i], numeric, opts.abs_floor);
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = g.data()[i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(entry);
  }
  report.passed = report.max_rel_error < opts.tolerance;
  if (!report.passed) {
    for (const auto& e : report.entries) {
      if (e.max_rel_error >= opts.tolerance) {
        report.diagnostic = "gradient mismatch in " + e.name;
        break;
      }
    }
  }
  return report;
}

}  // namespace thermaldet
