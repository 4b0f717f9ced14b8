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

// Frozen RGB teacher (a noisy oracle over the generator's ground truth),
// KD loss assembly over matched teacher/student pairs, and pseudo-phrases.

#pragma once

#include "thermaldet/data.hpp"
#include "thermaldet/detection.hpp"
#include "thermaldet/geometry.hpp"
#include "thermaldet/logging.hpp"
#include "thermaldet/losses.hpp"

#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

struct TeacherConfig {
  double box_jitter_sigma = 0.0;
  double label_flip_prob = 0.0;
  double score_temperature = 0.0;  // 0 keeps one-hot class rows
  double feature_noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (box_jitter_sigma < 0.0 || feature_noise_sigma < 0.0 || score_temperature < 0.0) {
      throw std::invalid_argument("teacher: sigmas and temperature must be non-negative");
    }
    if (!(label_flip_prob >= 0.0 && label_flip_prob <= 1.0)) {
      throw std::invalid_argument("teacher: label_flip_prob must lie in [0, 1]");
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"box_jitter_sigma", box_jitter_sigma},
            {"label_flip_prob", label_flip_prob},
            {"score_temperature", score_temperature},
            {"feature_noise_sigma", feature_noise_sigma},
            {"seed", seed}};
  }

  static TeacherConfig from_json(const nlohmann::json& j) {
    TeacherConfig c;
    c.box_jitter_sigma = j.value("box_jitter_sigma", c.box_jitter_sigma);
    c.label_flip_prob = j.value("label_flip_prob", c.label_flip_prob);
    c.score_temperature = j.value("score_temperature", c.score_temperature);
    c.feature_noise_sigma = j.value("feature_noise_sigma", c.feature_noise_sigma);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

// The teacher owns its own registry; every entry is frozen and none is
// trainable, so it can never reach an optimizer.
class Teacher {
 public:
  Teacher(const Matrix& class_prototypes, TeacherConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    if (class_prototypes.rows() < 1) throw std::invalid_argument("teacher: no class prototypes");
    store_.add("teacher.prototypes", class_prototypes, /*trainable=*/false, /*frozen=*/true);
  }

  const TeacherConfig& config() const { return cfg_; }
  const ParameterStore& store() const { return store_; }
  const Matrix& prototypes() const { return store_.at("teacher.prototypes").value; }
  int classes() const { return static_cast<int>(prototypes().rows()); }

  // Pseudo-labels for one paired view. Deterministic in (cfg.seed, record seed).
  DetectionSet infer(const TrainingRecord& rgb_view, std::span<const Box> gt_boxes,
                     std::span<const int> gt_labels) const {
    if (gt_boxes.size() != gt_labels.size()) throw std::invalid_argument("teacher: box/label count mismatch");
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(rgb_view.seed), static_cast<std::uint32_t>(rgb_view.seed >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int k = classes();
    const double min_side = 1.0 / std::max(1, std::max(rgb_view.width, rgb_view.height));
    DetectionSet out;
    for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
      Box b = gt_boxes[i];
      if (cfg_.box_jitter_sigma > 0.0) {
        double c[4] = {b.x1, b.y1, b.x2, b.y2};
        for (double& v : c) v = std::clamp(v + cfg_.box_jitter_sigma * gauss(rng), 0.0, 1.0);
        b = Box{std::min(c[0], c[2]), std::min(c[1], c[3]), std::max(c[0], c[2]), std::max(c[1], c[3])};
        // Keep a positive extent inside the unit square.
        if (b.x2 - b.x1 < min_side) {
          b.x1 = std::clamp(b.x1, 0.0, 1.0 - min_side);
          b.x2 = b.x1 + min_side;
        }
        if (b.y2 - b.y1 < min_side) {
          b.y1 = std::clamp(b.y1, 0.0, 1.0 - min_side);
          b.y2 = b.y1 + min_side;
        }
      }
      int label = gt_labels[i];
      if (label < 0 || label >= k) throw std::invalid_argument("teacher: ground-truth label outside taxonomy");
      if (k > 1 && cfg_.label_flip_prob > 0.0 && unit(rng) < cfg_.label_flip_prob) {
        const int shift = std::uniform_int_distribution<int>(1, k - 1)(rng);
        label = (label + shift) % k;
      }
      std::vector<double> probs(static_cast<std::size_t>(k), 0.0);
      if (cfg_.score_temperature > 0.0) {
        std::vector<double> logits(static_cast<std::size_t>(k), 0.0);
        logits[static_cast<std::size_t>(label)] = 1.0;
        probs = softmax(logits, cfg_.score_temperature);
      } else {
        probs[static_cast<std::size_t>(label)] = 1.0;
      }
      Vector f = prototypes().row(label).transpose();
      if (cfg_.feature_noise_sigma > 0.0) {
        for (Eigen::Index d = 0; d < f.size(); ++d) f(d) += cfg_.feature_noise_sigma * gauss(rng);
      }
      out.boxes.push_back(b);
      out.labels.push_back(label);
      out.confidences.push_back(probs[static_cast<std::size_t>(label)]);
      out.class_probs.push_back(std::move(probs));
      out.region_feats.push_back(std::move(f));
    }
    return out;
  }

 private:
  TeacherConfig cfg_;
  ParameterStore store_;
};

inline DetectionSet teacher_infer(const TrainingRecord& rgb_view, const Teacher& teacher) {
  if (!rgb_view.paired) throw std::invalid_argument("teacher: record has no paired RGB view");
  return teacher.infer(rgb_view, rgb_view.boxes, rgb_view.class_ids);
}

// KD terms over a given set of (teacher, student) pairs: mean 1 - GIoU, mean
// InfoNCE of each student feature against the matched teacher features, and
// mean KL(p_teacher || p_student).
inline LossBreakdown kd_fragment(const DetectionSet& teacher, const DetectionSet& student,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double tau) {
  if (pairs.empty()) throw std::invalid_argument("kd_fragment: no pairs");
  std::vector<EmbeddingVector> teacher_feats;
  for (const auto& [t, s] : pairs) teacher_feats.emplace_back(teacher.region_feats[t], EmbeddingRole::kRegion);
  double box = 0.0, sem = 0.0, conf = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [t, s] = pairs[i];
    box += kd_box_loss(teacher.boxes[t], student.boxes[s]);
    sem += kd_sem_loss(EmbeddingVector(student.region_feats[s], EmbeddingRole::kRegion), teacher_feats, i, tau);
    conf += kd_conf_loss(teacher.class_probs[t], student.class_probs[s]);
  }
  const double n = static_cast<double>(pairs.size());
  LossBreakdown out;
  out.set(LossTerm::kKdBox, box / n);
  out.set(LossTerm::kKdSem, sem / n);
  out.set(LossTerm::kKdConf, conf / n);
  return out;
}

// Matches teacher to student and returns the KD fragment, or nothing when no
// pair clears the IoU gate. Only paired batches carry KD.
inline std::optional<LossBreakdown> kd_batch_loss(const DetectionSet& teacher, const DetectionSet& student,
                                                  double tau, BatchKind kind, double iou_min = 0.5) {
  if (kind != BatchKind::kPaired) {
    throw std::invalid_argument(std::string("kd_batch_loss: KD is only defined on paired batches, got ") +
                                to_string(kind));
  }
  const MatchSet m = match_teacher_student(teacher, student, iou_min);
  if (m.pairs.empty()) {
    log_warning("KD fragment absent: 0 of " + std::to_string(teacher.size()) + " teacher boxes matched");
    return std::nullopt;
  }
  return kd_fragment(teacher, student, m.pairs, tau);
}

// One phrase per object: teacher class names when the teacher predicted
// anything, else the dataset labels. Order follows the boxes.
inline std::vector<std::string> derive_pseudo_phrases(const DetectionSet* teacher,
                                                      std::span<const std::string> class_names,
                                                      std::span<const std::string> dataset_labels = {}) {
  std::vector<std::string> out;
  if (teacher != nullptr && !teacher->empty()) {
    for (int lab : teacher->labels) {
      if (lab < 0 || static_cast<std::size_t>(lab) >= class_names.size()) {
        throw std::invalid_argument("derive_pseudo_phrases: teacher label outside taxonomy");
      }
      out.push_back(class_names[static_cast<std::size_t>(lab)]);
    }
    return out;
  }
  out.assign(dataset_labels.begin(), dataset_labels.end());
  return out;
}

}  // namespace thermaldet
