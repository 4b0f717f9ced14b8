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

// AdamW with decoupled weight decay, a warmup + cosine learning-rate
// schedule and global-norm gradient clipping.

#pragma once

#include "thermaldet/parameters.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>

namespace thermaldet {

enum class ScheduleKind { kCosine, kConstant };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::kCosine ? "cosine" : "constant"; }
inline ScheduleKind schedule_from_string(const std::string& s) {
  if (s == "cosine") return ScheduleKind::kCosine;
  if (s == "constant") return ScheduleKind::kConstant;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

// lr at 0-based step: linear ramp from 0 over `warmup` steps, then cosine
// decay to zero at `total`.
inline double learning_rate(int step, int total, int warmup, double peak, ScheduleKind kind) {
  if (step < 0) throw std::invalid_argument("negative step");
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step) / warmup;
  if (kind == ScheduleKind::kConstant) return peak;
  const int span = std::max(1, total - warmup);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

// Scales every updatable gradient so the global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store) {
    if (p.updatable()) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : store) {
      if (p.updatable()) p.grad *= s;
    }
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Frozen and non-trainable entries are skipped entirely.
  void step(ParameterStore& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& p : store) {
      if (!p.updatable()) continue;
      auto [it, inserted] = moments_.try_emplace(p.name);
      if (inserted) {
        it->second.m = Matrix::Zero(p.value.rows(), p.value.cols());
        it->second.v = Matrix::Zero(p.value.rows(), p.value.cols());
      }
      Matrix& m = it->second.m;
      Matrix& v = it->second.v;
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
      p.value *= 1.0 - lr * cfg_.weight_decay;
      p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
  }

  int steps() const { return t_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  AdamWConfig cfg_;
  std::map<std::string, Moments> moments_;
  int t_ = 0;
};

}  // namespace thermaldet
