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

// Training objectives.
//
// Every loss exists twice: a plain-value function used for reporting and
// oracles, and a tape version (namespace `tape`) used for training. Tests pin
// the two against each other and finite differences pin the tape gradients.

#pragma once

#include "thermaldet/geometry.hpp"
#include "thermaldet/numerics.hpp"
#include "thermaldet/ops.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

inline constexpr double kProbabilityFloor = 1e-8;

enum class LossTerm : int {
  kDetCls = 0,
  kDetBox,
  kKdBox,
  kKdSem,
  kKdConf,
  kTtahCtr,
  kTtahDrift,
  kCapScene,
  kCapObject,
};
inline constexpr std::size_t kLossTermCount = 9;

inline constexpr std::array<const char*, kLossTermCount> kLossTermNames = {
    "det_cls", "det_box", "kd_box", "kd_sem", "kd_conf", "ttah_ctr", "ttah_drift", "cap_scene", "cap_object"};

inline const char* to_string(LossTerm t) { return kLossTermNames[static_cast<std::size_t>(t)]; }

inline LossTerm loss_term_from_string(const std::string& name) {
  for (std::size_t i = 0; i < kLossTermCount; ++i) {
    if (name == kLossTermNames[i]) return static_cast<LossTerm>(i);
  }
  throw std::invalid_argument("unknown loss term: " + name);
}

inline bool is_kd_term(LossTerm t) {
  return t == LossTerm::kKdBox || t == LossTerm::kKdSem || t == LossTerm::kKdConf;
}
inline bool is_caption_term(LossTerm t) { return t == LossTerm::kCapScene || t == LossTerm::kCapObject; }

enum class BatchKind { kPaired, kSynthetic, kCaptionOnly };

inline const char* to_string(BatchKind k) {
  switch (k) {
    case BatchKind::kPaired: return "paired";
    case BatchKind::kSynthetic: return "synthetic";
    case BatchKind::kCaptionOnly: return "caption_only";
  }
  return "unknown";
}

inline BatchKind batch_kind_from_string(const std::string& s) {
  if (s == "paired") return BatchKind::kPaired;
  if (s == "synthetic") return BatchKind::kSynthetic;
  if (s == "caption_only") return BatchKind::kCaptionOnly;
  throw std::invalid_argument("unknown batch kind: " + s);
}

// Per-term values for one step. A term is active iff it holds a value.
class LossBreakdown {
 public:
  void set(LossTerm t, double v) { terms_[static_cast<std::size_t>(t)] = v; }
  void add(LossTerm t, double v) {
    auto& slot = terms_[static_cast<std::size_t>(t)];
    slot = slot.value_or(0.0) + v;
  }
  void erase(LossTerm t) { terms_[static_cast<std::size_t>(t)].reset(); }
  bool active(LossTerm t) const { return terms_[static_cast<std::size_t>(t)].has_value(); }
  double get(LossTerm t) const {
    const auto& slot = terms_[static_cast<std::size_t>(t)];
    if (!slot) throw std::out_of_range(std::string("inactive loss term: ") + to_string(t));
    return *slot;
  }
  std::vector<LossTerm> active_terms() const {
    std::vector<LossTerm> out;
    for (std::size_t i = 0; i < kLossTermCount; ++i) {
      if (terms_[i]) out.push_back(static_cast<LossTerm>(i));
    }
    return out;
  }
  double sum() const {
    double s = 0.0;
    for (const auto& t : terms_) s += t.value_or(0.0);
    return s;
  }

  double total = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < kLossTermCount; ++i) {
      if (terms_[i]) j[kLossTermNames[i]] = *terms_[i];
    }
    j["total"] = total;
    return j;
  }

  static LossBreakdown from_json(const nlohmann::json& j) {
    LossBreakdown b;
    for (std::size_t i = 0; i < kLossTermCount; ++i) {
      if (j.contains(kLossTermNames[i])) b.terms_[i] = j.at(kLossTermNames[i]).get<double>();
    }
    b.total = j.value("total", b.sum());
    return b;
  }

 private:
  std::array<std::optional<double>, kLossTermCount> terms_{};
};

// Unweighted sum of the active terms. KD terms only exist on paired batches
// and caption-only batches carry nothing but caption terms.
inline double total_loss(LossBreakdown& parts, BatchKind kind) {
  for (LossTerm t : parts.active_terms()) {
    if (is_kd_term(t) && kind != BatchKind::kPaired) {
      throw std::invalid_argument(std::string("KD term ") + to_string(t) + " supplied for a " +
                                  to_string(kind) + " batch");
    }
    if (kind == BatchKind::kCaptionOnly && !is_caption_term(t)) {
      throw std::invalid_argument(std::string("term ") + to_string(t) + " on a caption_only batch");
    }
  }
  parts.total = parts.sum();
  return parts.total;
}

// ------------------------------------------------------------- plain values

inline double log_sum_exp(std::span<const double> x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// -log softmax(logits)[target]
inline double cross_entropy(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw std::invalid_argument("cross_entropy: target out of range");
  return log_sum_exp(logits) - logits[target];
}

inline double det_cls_loss(std::span<const EmbeddingVector> region_feats,
                           std::span<const EmbeddingVector> class_embeds, std::span<const int> targets,
                           double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("det_cls_loss: tau must be > 0");
  if (region_feats.empty()) throw std::invalid_argument("det_cls_loss: empty region set");
  if (targets.size() != region_feats.size()) throw std::invalid_argument("det_cls_loss: one target per region");
  double total = 0.0;
  std::vector<double> logits(class_embeds.size());
  for (std::size_t r = 0; r < region_feats.size(); ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= class_embeds.size()) {
      throw std::invalid_argument("det_cls_loss: invalid target index");
    }
    for (std::size_t c = 0; c < class_embeds.size(); ++c) {
      logits[c] = cosine_sim(region_feats[r], class_embeds[c]) / tau;
    }
    total += cross_entropy(logits, static_cast<std::size_t>(targets[r]));
  }
  return total / static_cast<double>(region_feats.size());
}

inline double det_box_loss(const Box& pred, const Box& gt, double w_l1, double w_giou,
                           BoxOverlap kind = BoxOverlap::kGIoU) {
  if (w_l1 < 0.0 || w_giou < 0.0) throw std::invalid_argument("det_box_loss: weights must be >= 0");
  return w_l1 * box_l1(pred, gt) + w_giou * (1.0 - box_similarity(pred, gt, kind));
}

inline double kd_box_loss(const Box& rgb, const Box& th) { return 1.0 - giou(rgb, th); }

inline double kd_sem_loss(const EmbeddingVector& f_th, std::span<const EmbeddingVector> candidates,
                          std::size_t pos_index, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("kd_sem_loss: tau must be > 0");
  if (candidates.empty()) throw std::invalid_argument("kd_sem_loss: empty candidate set");
  if (pos_index >= candidates.size()) throw std::invalid_argument("kd_sem_loss: invalid positive index");
  std::vector<double> logits(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) logits[j] = cosine_sim(f_th, candidates[j]) / tau;
  return cross_entropy(logits, pos_index);
}

// Floors every entry at kProbabilityFloor, then renormalizes.
inline std::vector<double> floor_probabilities(std::span<const double> p) {
  std::vector<double> out(p.begin(), p.end());
  double s = 0.0;
  for (double& v : out) {
    v = std::max(v, kProbabilityFloor);
    s += v;
  }
  for (double& v : out) v /= s;
  return out;
}

// KL(p_rgb || p_th); zero-probability teacher entries contribute nothing.
inline double kd_conf_loss(std::span<const double> p_rgb, std::span<const double> p_th) {
  if (p_rgb.size() != p_th.size()) throw std::invalid_argument("kd_conf_loss: length mismatch");
  const auto q = floor_probabilities(p_th);
  double kl = 0.0;
  for (std::size_t i = 0; i < p_rgb.size(); ++i) {
    if (p_rgb[i] > 0.0) kl += p_rgb[i] * std::log(p_rgb[i] / q[i]);
  }
  return kl;
}

enum class CaptionLevel { kScene, kObject };

// Mean token cross-entropy under teacher forcing; one logit row per target.
inline double caption_token_loss(const Matrix& logit_rows, std::span<const int> target_tokens) {
  if (logit_rows.rows() != static_cast<Eigen::Index>(target_tokens.size())) {
    throw std::invalid_argument("caption_token_loss: one logit row per target token");
  }
  if (target_tokens.empty()) throw std::invalid_argument("caption_token_loss: empty target");
  double total = 0.0;
  std::vector<double> row(static_cast<std::size_t>(logit_rows.cols()));
  for (Eigen::Index i = 0; i < logit_rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < logit_rows.cols(); ++j) row[j] = logit_rows(i, j);
    if (target_tokens[i] < 0 || target_tokens[i] >= logit_rows.cols()) {
      throw std::invalid_argument("caption_token_loss: token outside vocabulary");
    }
    total += cross_entropy(row, static_cast<std::size_t>(target_tokens[i]));
  }
  return total / static_cast<double>(target_tokens.size());
}

inline void accumulate_caption_loss(LossBreakdown& parts, CaptionLevel level, double value) {
  parts.add(level == CaptionLevel::kScene ? LossTerm::kCapScene : LossTerm::kCapObject, value);
}

// ------------------------------------------------------------ tape versions

namespace tape {

using ad::Var;

// Mean over rows of -log softmax(logits_row)[target].
inline Var cross_entropy_rows(const Var& logits, const std::vector<Eigen::Index>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy_rows: one target per row");
  }
  return ad::neg(ad::mean(ad::pick(ad::log_softmax_rows(logits), targets)));
}

inline Var det_cls(const Var& region_feats, const Var& class_embeds,
                   const std::vector<Eigen::Index>& targets, double tau) {
  return cross_entropy_rows(ad::cosine_rows(region_feats, class_embeds) / tau, targets);
}

// Column-wise box corners: each field is an N x 1 Var.
using BoxColumns = Corners<Var>;

inline BoxColumns box_columns(const Var& boxes) {
  return {ad::col(boxes, 0), ad::col(boxes, 1), ad::col(boxes, 2), ad::col(boxes, 3)};
}

inline Var det_box(const Var& pred, const Var& gt, double w_l1, double w_giou,
                   BoxOverlap kind = BoxOverlap::kGIoU) {
  const auto p = box_columns(pred);
  const auto g = box_columns(gt);
  Var sim = kind == BoxOverlap::kCIoU ? overlap::ciou(p, g) : overlap::giou(p, g);
  return ad::mean(overlap::l1(p, g) * w_l1 + (1.0 - sim) * w_giou);
}

inline Var kd_box(const Var& teacher_boxes, const Var& student_boxes) {
  return ad::mean(1.0 - overlap::giou(box_columns(teacher_boxes), box_columns(student_boxes)));
}

// Row i of the student features is positive with teacher row i; the other
// teacher rows are its negatives.
inline Var kd_sem(const Var& student_feats, const Var& teacher_feats, double tau) {
  std::vector<Eigen::Index> diag(static_cast<std::size_t>(student_feats.rows()));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<Eigen::Index>(i);
  return cross_entropy_rows(ad::cosine_rows(student_feats, teacher_feats) / tau, diag);
}

// Mean over rows of KL(p_teacher || floor(softmax(student_logits))).
inline Var kd_conf(const Matrix& p_teacher, const Var& student_logits) {
  if (p_teacher.rows() != student_logits.rows() || p_teacher.cols() != student_logits.cols()) {
    throw std::invalid_argument("kd_conf: shape mismatch");
  }
  ad::Tape& t = student_logits.tape();
  Var p = ad::softmax_rows(student_logits);
  Var floored = ad::max(p, kProbabilityFloor);
  Var q = floored / ad::row_sum(floored);
  double entropy_part = 0.0;
  for (Eigen::Index i = 0; i < p_teacher.size(); ++i) {
    const double v = p_teacher.data()[i];
    if (v > 0.0) entropy_part += v * std::log(v);
  }
  Var cross = ad::sum(t.constant(p_teacher) * ad::log(q));
  return (ad::neg(cross) + entropy_part) / static_cast<double>(p_teacher.rows());
}

}  // namespace tape

}  // namespace thermaldet
