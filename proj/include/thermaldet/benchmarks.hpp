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

// The distillation micro-benchmark: a student trained with the KD terms only
// against a noise-free teacher on a small fixed set of paired scenes.

#pragma once

#include "thermaldet/training.hpp"

#include <cmath>
#include <limits>

namespace thermaldet {

struct KdAgreement {
  double mean_giou = 0.0;  // over matched teacher/student pairs
  double mean_kl = 0.0;    // KL(teacher || student) over matched pairs
  std::size_t pairs = 0;
  std::size_t teacher_boxes = 0;
};

// Agreement between the student and the teacher on `records`, matched with
// the training gate.
inline KdAgreement kd_agreement(const Detector& det, const std::vector<TrainingRecord>& records) {
  const auto preds = predict(det, records, det.config().seed);
  KdAgreement a;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const DetectionSet teach = teacher_infer(records[i], det.teacher());
    a.teacher_boxes += teach.size();
    const MatchSet m = match_teacher_student(teach, preds[i], det.config().kd_iou_min);
    for (const auto& [ti, si] : m.pairs) {
      a.mean_giou += giou(teach.boxes[ti], preds[i].boxes[si]);
      a.mean_kl += kd_conf_loss(teach.class_probs[ti], preds[i].class_probs[si]);
      ++a.pairs;
    }
  }
  if (a.pairs > 0) {
    a.mean_giou /= static_cast<double>(a.pairs);
    a.mean_kl /= static_cast<double>(a.pairs);
  }
  return a;
}

struct KdBenchmarkConfig {
  std::size_t scenes = 16;
  std::uint64_t data_seed = 4242;
  int max_steps = 3000;
  int check_every = 100;
  double giou_target = 0.9;
  double kl_target = 0.05;
  double min_match_rate = 0.9;  // matched share of teacher boxes at convergence
};

struct KdBenchmarkResult {
  bool converged = false;
  int steps = 0;
  KdAgreement agreement;
  double match_rate = 0.0;
  double max_grad_norm_after_50 = 0.0;
  int clipped_after_50 = 0;
};

inline RunConfig kd_benchmark_config(RunConfig base, std::uint64_t seed, const KdBenchmarkConfig& kb) {
  base.seed = seed;
  base.steps = kb.max_steps;
  base.enable.fill(false);
  for (LossTerm t : {LossTerm::kKdBox, LossTerm::kKdSem, LossTerm::kKdConf}) base.enable[static_cast<std::size_t>(t)] = true;
  base.teacher = TeacherConfig{};  // noise-free, one-hot class rows
  base.data.train_n = kb.scenes;
  base.data.eval_n = 0;
  base.data.paired_fraction = 1.0;
  base.data.train_seed = kb.data_seed;
  base.eval_every = 0;
  return base;
}

inline KdBenchmarkResult kd_micro_benchmark(const RunConfig& base, std::uint64_t seed,
                                            const std::vector<std::string>& class_names,
                                            const KdBenchmarkConfig& kb = {}) {
  const RunConfig cfg = kd_benchmark_config(base, seed, kb);
  const SceneGrammar g = SceneGrammar::load_default();
  const Datasets data = make_datasets(g, cfg.data);
  KdBenchmarkResult out;
  TrainOptions opts;
  opts.final_eval = false;
  opts.check_every = kb.check_every;
  opts.on_check = [&](int step, Detector& det) {
    out.steps = step;
    out.agreement = kd_agreement(det, data.train);
    out.match_rate = out.agreement.teacher_boxes == 0
                         ? 0.0
                         : static_cast<double>(out.agreement.pairs) / static_cast<double>(out.agreement.teacher_boxes);
    out.converged = out.agreement.mean_giou >= kb.giou_target && out.agreement.mean_kl <= kb.kl_target &&
                    out.match_rate >= kb.min_match_rate;
    return out.converged;
  };
  const TrainResult res = train(cfg, data, class_names, opts);
  for (std::size_t i = 50; i < res.grad_norms.size(); ++i) {
    if (!std::isfinite(res.grad_norms[i])) continue;
    out.max_grad_norm_after_50 = std::max(out.max_grad_norm_after_50, res.grad_norms[i]);
    out.clipped_after_50 += res.grad_norms[i] > cfg.clip_norm ? 1 : 0;
  }
  return out;
}

}  // namespace thermaldet
