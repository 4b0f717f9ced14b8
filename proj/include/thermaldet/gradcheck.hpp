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

// End-to-end finite-difference verification of every loss term through the
// full model bundle. Checks run on a shrunken copy of the configured
// architecture (same layers, tiny widths and canvas) so that every parameter
// element can be perturbed in seconds.

#pragma once

#include "thermaldet/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace thermaldet {

// Same architecture family as `base`, reduced to verification size.
inline RunConfig verification_config(RunConfig base) {
  StudentConfig& s = base.student;
  s.image_size = 16;
  s.conv_channels = {3, 4};
  s.patch = 4;
  s.query_grid = 2;
  s.window = 2;
  s.width = 8;
  s.feature_dim = 8;
  s.enc_layers = 1;
  s.ffn_mult = 2;
  s.adapter_rank = 2;
  base.decoder.width = 8;
  base.decoder.layers = 1;
  base.decoder.max_len = 24;
  base.decoder.ffn_mult = 2;
  base.decoder.adapter_rank = 2;
  base.batch_size = 2;
  // Any overlap counts as a match so every KD term has pairs to check.
  base.kd_iou_min = 1e-3;
  base.enable.fill(true);
  base.multipliers.fill(1.0);
  base.validate();
  return base;
}

// Small records on the verification canvas: synthetic and paired scenes.
inline std::vector<TrainingRecord> verification_records(std::uint64_t seed, bool paired, std::size_t n = 2,
                                                        int max_objects = 4) {
  SceneGrammar g = SceneGrammar::load_default();
  g.height = g.width = 16;
  g.max_objects = std::min(g.max_objects, max_objects);
  const Stoplist stop = default_stoplist();
  std::vector<TrainingRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(adapt_record(generate_scene(g, splitmix64(seed * 1000003ULL + i + (paired ? 77 : 0)), paired), stop));
  }
  return out;
}

// Checked loss groups: the terms a single batch kind can evaluate.
struct CheckedTerm {
  std::string name;
  std::vector<LossTerm> terms;
  BatchKind kind;
  std::vector<std::string> unused_prefixes;  // modules the term cannot reach
};

inline std::vector<CheckedTerm> checked_terms() {
  const std::vector<std::string> det_only = {"decoder."};
  const std::vector<std::string> box_only = {"decoder.", "ttah."};
  const std::vector<std::string> caption = {"ttah."};
  return {
      {"det_cls", {LossTerm::kDetCls}, BatchKind::kSynthetic, det_only},
      {"det_box", {LossTerm::kDetBox}, BatchKind::kSynthetic, box_only},
      {"kd_box", {LossTerm::kKdBox}, BatchKind::kPaired, box_only},
      {"kd_sem", {LossTerm::kKdSem}, BatchKind::kPaired, det_only},
      {"kd_conf", {LossTerm::kKdConf}, BatchKind::kPaired, det_only},
      {"ttah", {LossTerm::kTtahCtr, LossTerm::kTtahDrift}, BatchKind::kSynthetic, det_only},
      {"cap_scene", {LossTerm::kCapScene}, BatchKind::kSynthetic, caption},
      // Paired batches drive the object captions through the RGB stream, so
      // this also covers the fusion gates.
      {"cap_object", {LossTerm::kCapObject}, BatchKind::kPaired, caption},
  };
}

// Reporting group of a parameter: adapters and fusion gates are called out,
// the rest is grouped by module.
inline std::string parameter_group(const std::string& name) {
  if (name.find("adapter") != std::string::npos) return "adapters";
  if (name.find("gate_") != std::string::npos) return "mfca_gates";
  return name.substr(0, name.find('.'));
}

struct TermCheckResult {
  std::string term;
  bool active = false;          // the batch produced the term
  bool deterministic = true;
  bool unused_zero = true;      // unreachable modules got exactly zero gradient
  std::size_t elements = 0;     // elements checked by central differences
  double max_rel_error = 0.0;
  std::map<std::string, double> by_group;
  std::string worst;            // parameter with the largest error
  bool passed(double tol) const { return active && deterministic && unused_zero && max_rel_error < tol; }
};

// Logits are scaled by 1/tau, so the default step is smaller than the
// generic one to keep truncation error well under the tolerance.
inline GradCheckOptions verification_options() { return GradCheckOptions{1e-5, 1e-3, 1e-6}; }

// Verifies each checked term on a fresh bundle whose parameters are all
// perturbed away from their (often zero) initial values.
inline std::vector<TermCheckResult> gradient_check_terms(const RunConfig& base, std::uint64_t seed,
                                                         const std::vector<std::string>& class_names,
                                                         const GradCheckOptions& opts = verification_options()) {
  std::vector<TermCheckResult> results;
  const auto synthetic = verification_records(seed, false);
  const auto paired = verification_records(seed, true);
  for (const auto& ct : checked_terms()) {
    RunConfig cfg = verification_config(base);
    cfg.seed = seed;
    cfg.enable.fill(false);
    for (LossTerm t : ct.terms) cfg.enable[static_cast<std::size_t>(t)] = true;
    Detector det(cfg, class_names);
    std::mt19937_64 noise(splitmix64(seed ^ 0xfdULL));
    std::normal_distribution<double> n01(0.0, 0.3);
    for (auto& p : det.store()) {
      if (!p.updatable()) continue;
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += n01(noise);
    }
    const auto& recs_src = ct.kind == BatchKind::kPaired ? paired : synthetic;
    std::vector<const TrainingRecord*> recs;
    for (const auto& r : recs_src) recs.push_back(&r);

    TermCheckResult res;
    res.term = ct.name;
    auto evaluator = [&](ParameterStore& store, bool with_grad) {
      ad::Tape t;
      t.set_grad_enabled(with_grad);
      std::mt19937_64 rng(splitmix64(seed + 0x51ULL));
      BatchLoss bl = batch_loss(t, det, recs, ct.kind, rng);
      if (!bl.total.valid()) return std::numeric_limits<double>::quiet_NaN();
      if (with_grad) {
        store.zero_grad();
        t.backward(bl.total);
      }
      return bl.total.item();
    };
    res.active = std::isfinite(evaluator(det.store(), false));
    if (!res.active) {
      results.push_back(res);
      continue;
    }
    // Structurally unreachable modules: the analytic gradient must be exactly
    // zero; they are then excluded from the perturbation sweep.
    det.store().zero_grad();
    evaluator(det.store(), true);
    std::vector<Parameter*> parked;
    for (auto& p : det.store()) {
      if (!p.updatable()) continue;
      for (const auto& prefix : ct.unused_prefixes) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        if (!p.grad.isZero(0.0)) {
          res.unused_zero = false;
          res.worst = p.name;
        }
        p.frozen = true;
        parked.push_back(&p);
      }
    }
    const GradCheckReport rep = fd_gradient_check(evaluator, det.store(), opts);
    for (Parameter* p : parked) p->frozen = false;
    res.deterministic = rep.deterministic;
    res.max_rel_error = rep.max_rel_error;
    double worst = -1.0;
    for (const auto& e : rep.entries) {
      const std::string g = parameter_group(e.name);
      res.by_group[g] = std::max(res.by_group[g], e.max_rel_error);
      res.elements += static_cast<std::size_t>(det.store().at(e.name).value.size());
      if (e.max_rel_error > worst && res.unused_zero) {
        worst = e.max_rel_error;
        res.worst = e.name;
      }
    }
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace thermaldet
