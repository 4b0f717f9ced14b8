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

// End-to-end training: run configuration, the model bundle (student, TTAH,
// caption decoder, frozen text encoder and teacher), per-batch objectives,
// the optimizer loop with logging and checkpoints, and the ablation runner.

#pragma once

#include "thermaldet/data.hpp"
#include "thermaldet/distillation.hpp"
#include "thermaldet/evaluation.hpp"
#include "thermaldet/fusion.hpp"
#include "thermaldet/logging.hpp"
#include "thermaldet/losses.hpp"
#include "thermaldet/model.hpp"
#include "thermaldet/optim.hpp"
#include "thermaldet/text.hpp"
#include "thermaldet/ttah.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

struct DataConfig {
  std::size_t train_n = 500;
  std::size_t eval_n = 200;
  double paired_fraction = 0.6;
  std::uint64_t train_seed = 7;
  std::uint64_t eval_seed = 1007;

  nlohmann::ordered_json to_json() const {
    return {{"train_n", train_n},
            {"eval_n", eval_n},
            {"paired_fraction", paired_fraction},
            {"train_seed", train_seed},
            {"eval_seed", eval_seed}};
  }
  static DataConfig from_json(const nlohmann::json& j) {
    DataConfig c;
    c.train_n = j.value("train_n", c.train_n);
    c.eval_n = j.value("eval_n", c.eval_n);
    c.paired_fraction = j.value("paired_fraction", c.paired_fraction);
    c.train_seed = j.value("train_seed", c.train_seed);
    c.eval_seed = j.value("eval_seed", c.eval_seed);
    return c;
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // ablation seeds
  int steps = 1500;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  int warmup_steps = 100;
  ScheduleKind schedule = ScheduleKind::kCosine;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double tau = 0.07;
  double lambda_drift = 0.25;
  BoxOverlap box_overlap = BoxOverlap::kGIoU;
  double w_l1 = 5.0;
  double w_giou = 2.0;
  double kd_iou_min = 0.05;
  SelectionStrategy strategy = SelectionStrategy::kConfidenceGating;
  std::array<bool, kLossTermCount> enable{};
  std::array<double, kLossTermCount> multipliers{};
  TeacherConfig teacher{0.02, 0.05, 0.5, 0.1, 0};
  StudentConfig student{};
  DecoderConfig decoder{};
  DataConfig data{};
  int eval_every = 0;  // 0: final evaluation only
  std::uint64_t text_seed = 2024;
  std::string output_dir;

  RunConfig() {
    enable.fill(true);
    multipliers.fill(1.0);
  }

  bool enabled(LossTerm t) const { return enable[static_cast<std::size_t>(t)]; }
  double multiplier(LossTerm t) const { return multipliers[static_cast<std::size_t>(t)]; }

  void validate() const {
    if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("config: batch_size must be >= 1");
    if (!(lr >= 0.0) || warmup_steps < 0) throw std::invalid_argument("config: lr and warmup must be non-negative");
    if (!(tau > 0.0)) throw std::invalid_argument("config: tau must be > 0");
    if (!(lambda_drift >= 0.0)) throw std::invalid_argument("config: lambda_drift must be >= 0");
    if (!(w_l1 >= 0.0 && w_giou >= 0.0)) throw std::invalid_argument("config: box weights must be >= 0");
    if (!(kd_iou_min > 0.0 && kd_iou_min < 1.0)) throw std::invalid_argument("config: kd_iou_min must lie in (0, 1)");
    if (eval_every < 0) throw std::invalid_argument("config: eval_every must be >= 0");
    for (double m : multipliers) {
      if (!(m >= 0.0)) throw std::invalid_argument("config: loss multipliers must be >= 0");
    }
    teacher.validate();
    student.validate();
    if (decoder.width != student.width) {
      // The decoder reads student query states directly.
      throw std::invalid_argument("config: decoder visual width must equal the student width");
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json en = nlohmann::ordered_json::object(), mu = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < kLossTermCount; ++i) {
      en[kLossTermNames[i]] = enable[i];
      mu[kLossTermNames[i]] = multipliers[i];
    }
    return {{"seed", seed},
            {"seeds", seeds},
            {"steps", steps},
            {"batch_size", batch_size},
            {"lr", lr},
            {"warmup_steps", warmup_steps},
            {"schedule", to_string(schedule)},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"tau", tau},
            {"lambda_drift", lambda_drift},
            {"box_overlap", box_overlap == BoxOverlap::kCIoU ? "ciou" : "giou"},
            {"w_l1", w_l1},
            {"w_giou", w_giou},
            {"kd_iou_min", kd_iou_min},
            {"strategy", to_string(strategy)},
            {"enable", en},
            {"multipliers", mu},
            {"teacher", teacher.to_json()},
            {"student", student.to_json()},
            {"decoder",
             {{"width", decoder.width},
              {"layers", decoder.layers},
              {"ffn_mult", decoder.ffn_mult},
              {"max_len", decoder.max_len},
              {"adapter_rank", decoder.adapter_rank},
              {"adapter_scale", decoder.adapter_scale}}},
            {"data", data.to_json()},
            {"eval_every", eval_every},
            {"text_seed", text_seed},
            {"epsilons", {{"cosine", kCosineEps}, {"layer_norm", kLayerNormEps}, {"probability", kProbabilityFloor}}},
            {"output_dir", output_dir}};
  }

  // Unknown keys are rejected so typos in grid files fail loudly.
  static RunConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "seed",    "seeds",       "steps",        "batch_size", "lr",         "warmup_steps", "schedule",
        "weight_decay", "clip_norm", "tau",       "lambda_drift", "box_overlap", "w_l1",      "w_giou",
        "kd_iou_min", "strategy", "enable",       "multipliers", "teacher",   "student",      "decoder",
        "data",    "eval_every",  "text_seed",    "epsilons",   "output_dir"};
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (known.count(key) == 0) throw std::invalid_argument("config: unknown field '" + key + "'");
    }
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("schedule")) c.schedule = schedule_from_string(j.at("schedule").get<std::string>());
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.tau = j.value("tau", c.tau);
    c.lambda_drift = j.value("lambda_drift", c.lambda_drift);
    if (j.contains("box_overlap")) {
      const auto s = j.at("box_overlap").get<std::string>();
      if (s != "giou" && s != "ciou") throw std::invalid_argument("config: box_overlap must be giou or ciou");
      c.box_overlap = s == "ciou" ? BoxOverlap::kCIoU : BoxOverlap::kGIoU;
    }
    c.w_l1 = j.value("w_l1", c.w_l1);
    c.w_giou = j.value("w_giou", c.w_giou);
    c.kd_iou_min = j.value("kd_iou_min", c.kd_iou_min);
    if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    for (const char* block : {"enable", "multipliers"}) {
      if (!j.contains(block)) continue;
      for (const auto& [key, value] : j.at(block).items()) {
        const auto i = static_cast<std::size_t>(loss_term_from_string(key));
        if (std::string(block) == "enable") {
          c.enable[i] = value.get<bool>();
        } else {
          c.multipliers[i] = value.get<double>();
        }
      }
    }
    if (j.contains("teacher")) c.teacher = TeacherConfig::from_json(j.at("teacher"));
    if (j.contains("student")) c.student = StudentConfig::from_json(j.at("student"));
    if (j.contains("decoder")) {
      const auto& d = j.at("decoder");
      c.decoder.width = d.value("width", c.decoder.width);
      c.decoder.layers = d.value("layers", c.decoder.layers);
      c.decoder.ffn_mult = d.value("ffn_mult", c.decoder.ffn_mult);
      c.decoder.max_len = d.value("max_len", c.decoder.max_len);
      c.decoder.adapter_rank = d.value("adapter_rank", c.decoder.adapter_rank);
      c.decoder.adapter_scale = d.value("adapter_scale", c.decoder.adapter_scale);
    }
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    c.eval_every = j.value("eval_every", c.eval_every);
    c.text_seed = j.value("text_seed", c.text_seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.validate();
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument(path + ": " + e.what());
    }
    return from_json(j);
  }

  // Content hash of everything that determines a run's outputs.
  std::string hash() const {
    auto j = to_json();
    j.erase("output_dir");
    j.erase("seeds");
    return codec::git_blob_sha1(j.dump());
  }
};

// Applies a JSON merge patch to a config.
inline RunConfig with_overrides(const RunConfig& base, const nlohmann::json& patch) {
  nlohmann::json j = base.to_json();
  j.merge_patch(patch);
  return RunConfig::from_json(j);
}

// ----------------------------------------------------------------- datasets

struct Datasets {
  std::vector<TrainingRecord> train;
  std::vector<TrainingRecord> eval;
};

inline Datasets make_datasets(const SceneGrammar& g, const DataConfig& d) {
  return {generate_dataset(g, d.train_n, d.train_seed, d.paired_fraction), generate_dataset(g, d.eval_n, d.eval_seed, 0.0)};
}

// --------------------------------------------------------------- the bundle

// All models of one run. Parameter pointers refer into `store`, so the
// bundle is pinned in memory.
class Detector {
 public:
  Detector(const RunConfig& cfg, const std::vector<std::string>& class_names)
      : cfg_(cfg), class_names_(class_names), vocab_(Vocabulary::from_file(config_path("vocab.txt"))),
        text_(vocab_, cfg.student.feature_dim, cfg.text_seed) {
    cfg_.validate();
    if (class_names_.empty()) throw std::invalid_argument("detector: empty taxonomy");
    class_embeds_ = text_.encode_rows(class_names_);
    // The stand-in text tower is registered but never trainable.
    store_.add("text.table", text_.table(), /*trainable=*/false, /*frozen=*/true);
    store_.add("text.class_embeds", class_embeds_, /*trainable=*/false, /*frozen=*/true);
    std::mt19937_64 rng(cfg.seed);
    student_ = StudentModel::create(store_, cfg.student, rng);
    TtahConfig tc;
    tc.text_dim = cfg.student.feature_dim;
    tc.attribute_dim = std::max<Eigen::Index>(1, tc.text_dim / 4);
    tc.hidden_dim = tc.text_dim;
    ttah_ = TtahHead::create(store_, tc, rng);
    DecoderConfig dc = cfg.decoder;
    dc.visual_dim = cfg.student.width;
    dc.rgb_dim = cfg.student.feature_dim;
    decoder_ = CaptionDecoder::create(store_, dc, vocab_.size(), rng);
    teacher_ = std::make_unique<Teacher>(class_embeds_, cfg.teacher);
  }
  Detector(const Detector&) = delete;
  Detector& operator=(const Detector&) = delete;

  const RunConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const StudentModel& student() const { return student_; }
  const TtahHead& ttah() const { return ttah_; }
  const CaptionDecoder& decoder() const { return decoder_; }
  const Teacher& teacher() const { return *teacher_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TextEncoder& text() const { return text_; }
  const Matrix& class_embeds() const { return class_embeds_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int classes() const { return static_cast<int>(class_names_.size()); }

  StudentOutput forward(ad::Tape& t, const std::vector<const TrainingRecord*>& batch, std::mt19937_64& rng) const {
    return student_.forward(t, batch, ttah_, class_embeds_, cfg_.strategy, cfg_.tau, rng);
  }

  // Mean squared distance of all K*M calibrated variants to their raw class
  // embeddings.
  double mean_drift() const {
    ad::Tape t;
    t.set_grad_enabled(false);
    const Matrix cal = ttah_.calibrate_all(t, class_embeds_).value();
    const Eigen::Index m = ttah_.bank().size();
    double s = 0.0;
    for (Eigen::Index r = 0; r < cal.rows(); ++r) s += (cal.row(r) - class_embeds_.row(r / m)).squaredNorm();
    return s / static_cast<double>(cal.rows());
  }

 private:
  RunConfig cfg_;
  std::vector<std::string> class_names_;
  Vocabulary vocab_;
  TextEncoder text_;
  Matrix class_embeds_;
  ParameterStore store_;
  StudentModel student_;
  TtahHead ttah_;
  CaptionDecoder decoder_;
  std::unique_ptr<Teacher> teacher_;
};

// --------------------------------------------------------- batch objectives

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(LossTerm term, double value)
      : std::runtime_error(std::string("non-finite loss term ") + to_string(term) + " = " + std::to_string(value)),
        term_(term) {}
  LossTerm term() const { return term_; }

 private:
  LossTerm term_;
};

inline bool term_applies(LossTerm t, BatchKind kind) {
  switch (kind) {
    case BatchKind::kPaired: return is_kd_term(t) || t == LossTerm::kCapObject;
    case BatchKind::kSynthetic: return !is_kd_term(t);
    case BatchKind::kCaptionOnly: return is_caption_term(t);
  }
  return false;
}

struct BatchLoss {
  ad::Var total;  // invalid when no term is active
  LossBreakdown parts;
  double drift_raw = std::numeric_limits<double>::quiet_NaN();
  std::size_t kd_pairs = 0;
  std::size_t teacher_boxes = 0;
};

// Weighted objective of one batch. Breakdown entries are the weighted
// contributions, so parts.total is exactly their sum.
inline BatchLoss batch_loss(ad::Tape& t, const Detector& det, const std::vector<const TrainingRecord*>& recs,
                            BatchKind kind, std::mt19937_64& rng) {
  using namespace ad;
  const RunConfig& cfg = det.config();
  BatchLoss out;
  bool any = false;
  for (std::size_t i = 0; i < kLossTermCount; ++i) {
    const auto term = static_cast<LossTerm>(i);
    any = any || (cfg.enabled(term) && term_applies(term, kind));
  }
  if (!any) return out;
  auto want = [&](LossTerm term) { return cfg.enabled(term) && term_applies(term, kind); };
  auto add = [&](LossTerm term, const Var& v, double weight) {
    if (!std::isfinite(v.item())) throw NonFiniteLoss(term, v.item());
    Var w = v * (weight * cfg.multiplier(term));
    out.parts.set(term, w.item());
    out.total = out.total.valid() ? out.total + w : w;
  };

  const StudentOutput so = det.forward(t, recs, rng);
  const Eigen::Index nq = so.queries, k = so.classes;
  const int grid = cfg.student.query_grid;
  const int prompt_object = det.vocab().id(Vocabulary::kObjectPrompt);
  const int end = det.vocab().id(Vocabulary::kEnd);

  if (kind == BatchKind::kSynthetic) {
    std::vector<Eigen::Index> cls_targets(static_cast<std::size_t>(so.logits.rows()), k);
    std::vector<Eigen::Index> rows, targets;
    Matrix gt(0, 4);
    std::vector<std::vector<int>> obj_caps;
    for (std::size_t b = 0; b < recs.size(); ++b) {
      const TrainingRecord& r = *recs[b];
      const auto assign = assign_queries(r.boxes, grid);
      for (std::size_t o = 0; o < assign.size(); ++o) {
        const Eigen::Index row = static_cast<Eigen::Index>(b) * nq + assign[o];
        cls_targets[static_cast<std::size_t>(row)] = r.class_ids[o];
        rows.push_back(row);
        targets.push_back(r.class_ids[o]);
        gt.conservativeResize(gt.rows() + 1, 4);
        gt.row(gt.rows() - 1) << r.boxes[o].x1, r.boxes[o].y1, r.boxes[o].x2, r.boxes[o].y2;
        obj_caps.push_back(det.vocab().encode(r.phrases[o]));
      }
    }
    if (want(LossTerm::kDetCls)) add(LossTerm::kDetCls, tape::cross_entropy_rows(so.logits, cls_targets), 1.0);
    if (!rows.empty()) {
      if (want(LossTerm::kDetBox)) {
        add(LossTerm::kDetBox,
            tape::det_box(gather_rows(so.boxes, rows), t.constant(gt), cfg.w_l1, cfg.w_giou, cfg.box_overlap), 1.0);
      }
      if (want(LossTerm::kTtahCtr)) {
        add(LossTerm::kTtahCtr, tape::ttah_ctr(gather_rows(so.ttah.scores, rows), targets, cfg.tau), 1.0);
      }
      if (want(LossTerm::kTtahDrift)) {
        Matrix raw(static_cast<Eigen::Index>(targets.size()), det.class_embeds().cols());
        for (std::size_t i = 0; i < targets.size(); ++i) {
          raw.row(static_cast<Eigen::Index>(i)) = det.class_embeds().row(targets[i]);
        }
        Var drift = tape::ttah_drift(tape::effective_embeddings(so.ttah, rows, targets), raw);
        out.drift_raw = drift.item();
        add(LossTerm::kTtahDrift, drift, cfg.lambda_drift);
      }
      if (want(LossTerm::kCapObject)) {
        std::vector<int> prompts(obj_caps.size(), prompt_object);
        add(LossTerm::kCapObject, det.decoder().loss(t, obj_caps, prompts, gather_rows(so.hidden, rows), 1, end), 1.0);
      }
    }
    if (want(LossTerm::kCapScene)) {
      std::vector<std::vector<int>> caps;
      for (const auto* r : recs) caps.push_back(det.vocab().encode(r->caption));
      std::vector<int> prompts(caps.size(), det.vocab().id(Vocabulary::kScenePrompt));
      add(LossTerm::kCapScene, det.decoder().loss(t, caps, prompts, so.hidden, nq, end), 1.0);
    }
  } else if (kind == BatchKind::kPaired) {
    const auto student_sets = StudentModel::detections(so);
    Matrix t_boxes(0, 4), t_feats(0, det.class_embeds().cols()), t_probs(0, k);
    std::vector<Eigen::Index> s_rows, cap_rows;
    std::vector<std::vector<int>> cap_tokens;
    Matrix cap_rgb(0, det.class_embeds().cols());
    for (std::size_t b = 0; b < recs.size(); ++b) {
      const DetectionSet teach = teacher_infer(*recs[b], det.teacher());
      out.teacher_boxes += teach.size();
      const MatchSet m = match_teacher_student(teach, student_sets[b], cfg.kd_iou_min);
      for (const auto& [ti, si] : m.pairs) {
        const Eigen::Index r = t_boxes.rows();
        t_boxes.conservativeResize(r + 1, 4);
        t_boxes.row(r) << teach.boxes[ti].x1, teach.boxes[ti].y1, teach.boxes[ti].x2, teach.boxes[ti].y2;
        t_feats.conservativeResize(r + 1, t_feats.cols());
        t_feats.row(r) = teach.region_feats[ti].transpose();
        t_probs.conservativeResize(r + 1, k);
        for (Eigen::Index c = 0; c < k; ++c) t_probs(r, c) = teach.class_probs[ti][static_cast<std::size_t>(c)];
        s_rows.push_back(static_cast<Eigen::Index>(b) * nq + static_cast<Eigen::Index>(si));
      }
      if (want(LossTerm::kCapObject) && !teach.empty()) {
        const auto phrases = derive_pseudo_phrases(&teach, det.class_names());
        const auto assign = assign_queries(teach.boxes, grid);
        for (std::size_t o = 0; o < phrases.size(); ++o) {
          cap_rows.push_back(static_cast<Eigen::Index>(b) * nq + assign[o]);
          cap_tokens.push_back(det.vocab().encode(phrases[o]));
          const Eigen::Index r = cap_rgb.rows();
          cap_rgb.conservativeResize(r + 1, cap_rgb.cols());
          cap_rgb.row(r) = teach.region_feats[o].transpose();
        }
      }
    }
    out.kd_pairs = s_rows.size();
    const bool kd_wanted = want(LossTerm::kKdBox) || want(LossTerm::kKdSem) || want(LossTerm::kKdConf);
    if (kd_wanted && s_rows.empty()) {
      log_warning("KD fragment absent: 0 of " + std::to_string(out.teacher_boxes) + " teacher boxes matched");
    }
    if (!s_rows.empty()) {
      if (want(LossTerm::kKdBox)) add(LossTerm::kKdBox, tape::kd_box(t.constant(t_boxes), gather_rows(so.boxes, s_rows)), 1.0);
      if (want(LossTerm::kKdSem)) {
        add(LossTerm::kKdSem, tape::kd_sem(gather_rows(so.feats, s_rows), t.constant(t_feats), cfg.tau), 1.0);
      }
      if (want(LossTerm::kKdConf)) {
        add(LossTerm::kKdConf, tape::kd_conf(t_probs, slice_cols(gather_rows(so.logits, s_rows), 0, k)), 1.0);
      }
    }
    if (!cap_tokens.empty()) {
      std::vector<int> prompts(cap_tokens.size(), prompt_object);
      add(LossTerm::kCapObject,
          det.decoder().loss(t, cap_tokens, prompts, gather_rows(so.hidden, cap_rows), 1, end, t.constant(cap_rgb), 1),
          1.0);
    }
  } else {
    if (want(LossTerm::kCapScene)) {
      std::vector<std::vector<int>> caps;
      for (const auto* r : recs) caps.push_back(det.vocab().encode(r->caption));
      std::vector<int> prompts(caps.size(), det.vocab().id(Vocabulary::kScenePrompt));
      add(LossTerm::kCapScene, det.decoder().loss(t, caps, prompts, so.hidden, nq, end), 1.0);
    }
  }
  if (out.total.valid()) total_loss(out.parts, kind);
  return out;
}

// ---------------------------------------------------------------- evaluation

inline std::vector<DetectionSet> predict(const Detector& det, const std::vector<TrainingRecord>& records,
                                         std::uint64_t seed = 0, std::size_t chunk = 25) {
  std::mt19937_64 rng(splitmix64(seed ^ 0x5eedULL));
  std::vector<DetectionSet> out;
  for (std::size_t i = 0; i < records.size(); i += chunk) {
    std::vector<const TrainingRecord*> batch;
    for (std::size_t j = i; j < std::min(records.size(), i + chunk); ++j) batch.push_back(&records[j]);
    ad::Tape t;
    t.set_grad_enabled(false);
    for (auto& d : StudentModel::detections(det.forward(t, batch, rng))) out.push_back(std::move(d));
  }
  return out;
}

inline EvalReport evaluate(const Detector& det, const std::vector<TrainingRecord>& records, std::uint64_t seed = 0) {
  std::vector<GroundTruth> gts;
  for (const auto& r : records) gts.push_back(GroundTruth{r.boxes, r.class_ids});
  EvalOptions opts;
  opts.class_names = det.class_names();
  return compute_ap(predict(det, records, seed), gts, opts);
}

// --------------------------------------------------------------- checkpoints

inline nlohmann::ordered_json checkpoint_json(const Detector& det) {
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const auto& p : det.store()) {
    std::vector<double> values(p.value.data(), p.value.data() + p.value.size());
    params.push_back({{"name", p.name},
                      {"rows", p.value.rows()},
                      {"cols", p.value.cols()},
                      {"trainable", p.trainable},
                      {"frozen", p.frozen},
                      {"values", values}});
  }
  return {{"format", "thermaldet-checkpoint/1"},
          {"config_hash", det.config().hash()},
          {"attributes", det.ttah().bank().names()},
          {"parameters", params}};
}

inline void load_checkpoint(Detector& det, const nlohmann::json& j) {
  if (j.value("format", "") != "thermaldet-checkpoint/1") throw std::invalid_argument("checkpoint: unknown format");
  std::map<std::string, const nlohmann::json*> by_name;
  for (const auto& p : j.at("parameters")) by_name[p.at("name").get<std::string>()] = &p;
  for (auto& p : det.store()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::invalid_argument("checkpoint: missing parameter " + p.name);
    const auto& e = *it->second;
    if (e.at("rows").get<Eigen::Index>() != p.value.rows() || e.at("cols").get<Eigen::Index>() != p.value.cols()) {
      throw std::invalid_argument("checkpoint: shape mismatch for " + p.name);
    }
    const auto values = e.at("values").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != p.value.size()) {
      throw std::invalid_argument("checkpoint: value count mismatch for " + p.name);
    }
    std::copy(values.begin(), values.end(), p.value.data());
  }
}

// ------------------------------------------------------------------- training

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, int step, std::optional<LossTerm> term)
      : std::runtime_error(what), step_(step), term_(term) {}
  int step() const { return step_; }
  std::optional<LossTerm> term() const { return term_; }

 private:
  int step_;
  std::optional<LossTerm> term_;
};

struct TrainOptions {
  std::string out_dir;  // empty: keep everything in memory
  // Called every `check_every` steps (after the update); true stops early.
  int check_every = 0;
  std::function<bool(int step, Detector&)> on_check;
  bool repeat_first_batch = false;  // overfit a single frozen batch
  bool final_eval = true;
  std::map<std::string, std::string> dataset_hashes;  // recorded in the manifest
  std::map<std::string, std::string> dataset_paths;
};

struct TrainResult {
  std::unique_ptr<Detector> model;
  std::vector<std::string> metrics;  // one JSON line per step
  std::vector<std::string> evals;    // periodic evaluation lines
  std::optional<EvalReport> report;
  double drift = 0.0;
  int steps_run = 0;
  int updates = 0;
  std::vector<double> grad_norms;  // per step, NaN on steps without an update
  std::vector<double> totals;      // per step
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  return s;
}

inline nlohmann::ordered_json manifest_json(const RunConfig& cfg, const TrainOptions& opts) {
  nlohmann::ordered_json hashes = nlohmann::ordered_json::object(), paths = nlohmann::ordered_json::object();
  for (const auto& [k, v] : opts.dataset_hashes) hashes[k] = v;
  for (const auto& [k, v] : opts.dataset_paths) paths[k] = v;
  return {{"format", "thermaldet-manifest/1"},
          {"config_hash", cfg.hash()},
          {"config", cfg.to_json()},
          {"datasets", hashes},
          {"dataset_paths", paths}};
}

inline TrainResult train(const RunConfig& cfg, const Datasets& data, const std::vector<std::string>& class_names,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  TrainResult res;
  res.model = std::make_unique<Detector>(cfg, class_names);
  Detector& det = *res.model;
  const Stoplist stop = default_stoplist();
  std::vector<TrainingRecord> paired, synthetic;
  for (const auto& r : data.train) (r.paired ? paired : synthetic).push_back(adapt_record(r, stop));
  // A batch kind that no enabled term applies to is left out of the schedule,
  // as if its pool were empty, so disabling terms never costs updates.
  auto kind_active = [&](BatchKind kind) {
    for (std::size_t i = 0; i < kLossTermCount; ++i) {
      if (cfg.enabled(static_cast<LossTerm>(i)) && term_applies(static_cast<LossTerm>(i), kind)) return true;
    }
    return false;
  };
  const bool use_paired = kind_active(BatchKind::kPaired) || synthetic.empty() || !kind_active(BatchKind::kSynthetic);
  const bool use_synthetic = kind_active(BatchKind::kSynthetic) || paired.empty() || !use_paired;
  BatchScheduler sched(use_paired ? paired.size() : 0, use_synthetic ? synthetic.size() : 0, cfg.batch_size,
                       splitmix64(cfg.seed + 0x9e37ULL));
  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng(splitmix64(cfg.seed + 0x51ULL));
  std::filesystem::path dir;
  if (!opts.out_dir.empty()) {
    dir = opts.out_dir;
    std::filesystem::create_directories(dir);
    write_text(dir / "manifest.json", manifest_json(cfg, opts).dump(2) + "\n");
  }
  auto flush_logs = [&]() {
    if (dir.empty()) return;
    write_text(dir / "metrics.jsonl", join_lines(res.metrics));
    if (!res.evals.empty()) write_text(dir / "evals.jsonl", join_lines(res.evals));
  };

  std::optional<Batch> frozen;
  for (int step = 0; step < cfg.steps; ++step) {
    Batch batch = frozen ? *frozen : sched.next();
    if (opts.repeat_first_batch && !frozen) frozen = batch;
    const auto& pool = batch.kind == BatchKind::kPaired ? paired : synthetic;
    std::vector<const TrainingRecord*> recs;
    for (std::size_t i : batch.indices) recs.push_back(&pool[i]);
    const double lr = learning_rate(step, cfg.steps, cfg.warmup_steps, cfg.lr, cfg.schedule);

    ad::Tape tape;
    BatchLoss bl;
    try {
      bl = batch_loss(tape, det, recs, batch.kind, rng);
    } catch (const NonFiniteLoss& e) {
      nlohmann::ordered_json line = {{"step", step}, {"kind", to_string(batch.kind)}, {"abort", to_string(e.term())}};
      res.metrics.push_back(line.dump());
      flush_logs();
      throw TrainingAborted(std::string("training aborted at step ") + std::to_string(step) + ": " + e.what(), step,
                            e.term());
    }
    double norm = std::numeric_limits<double>::quiet_NaN();
    bool clipped = false;
    if (bl.total.valid()) {
      det.store().zero_grad();
      tape.backward(bl.total);
      norm = clip_grad_norm(det.store(), cfg.clip_norm);
      if (!std::isfinite(norm)) {
        res.metrics.push_back(nlohmann::ordered_json{{"step", step}, {"abort", "gradient"}}.dump());
        flush_logs();
        throw TrainingAborted("training aborted at step " + std::to_string(step) + ": non-finite gradient", step,
                              std::nullopt);
      }
      clipped = cfg.clip_norm > 0.0 && norm > cfg.clip_norm;
      opt.step(det.store(), lr);
      ++res.updates;
    }
    nlohmann::ordered_json line = {{"step", step},
                                   {"kind", to_string(batch.kind)},
                                   {"lr", lr},
                                   {"losses", bl.parts.to_json()},
                                   {"updated", bl.total.valid()}};
    if (bl.total.valid()) {
      line["grad_norm"] = norm;
      line["clipped"] = clipped;
    }
    if (std::isfinite(bl.drift_raw)) line["drift"] = bl.drift_raw;
    if (batch.kind == BatchKind::kPaired) {
      line["kd_pairs"] = bl.kd_pairs;
      line["teacher_boxes"] = bl.teacher_boxes;
    }
    res.metrics.push_back(line.dump());
    res.grad_norms.push_back(norm);
    res.totals.push_back(bl.parts.total);
    res.steps_run = step + 1;

    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
      const EvalReport r = evaluate(det, data.eval, cfg.seed);
      res.evals.push_back(nlohmann::ordered_json{{"step", step + 1}, {"AP", r.ap}, {"AP50", r.ap50}, {"AP75", r.ap75}}.dump());
    }
    if (opts.check_every > 0 && opts.on_check && (step + 1) % opts.check_every == 0) {
      if (opts.on_check(step + 1, det)) break;
    }
  }
  res.drift = det.mean_drift();
  if (opts.final_eval && !data.eval.empty()) {
    res.report = evaluate(det, data.eval, cfg.seed);
    res.evals.push_back(nlohmann::ordered_json{{"step", res.steps_run},
                                               {"AP", res.report->ap},
                                               {"AP50", res.report->ap50},
                                               {"AP75", res.report->ap75}}
                            .dump());
  }
  flush_logs();
  if (!dir.empty()) {
    write_text(dir / "checkpoint.json", checkpoint_json(det).dump() + "\n");
    if (res.report) {
      auto j = res.report->to_json();
      j["drift"] = res.drift;
      write_text(dir / "eval.json", j.dump(2) + "\n");
    }
  }
  return res;
}

// Output root: THERMALDET_OUT wins over the configured directory.
inline std::filesystem::path output_root(const RunConfig& cfg) {
  if (const char* env = std::getenv("THERMALDET_OUT"); env != nullptr && *env != '\0') return env;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "runs";
}

inline std::filesystem::path run_dir(const RunConfig& cfg) { return output_root(cfg) / cfg.hash().substr(0, 16); }

// ----------------------------------------------------------------- ablations

struct AblationCell {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();
};

struct AblationGrid {
  std::string name;
  std::vector<AblationCell> cells;

  static AblationGrid from_json(const nlohmann::json& j) {
    AblationGrid g;
    g.name = j.value("name", std::string("ablation"));
    if (!j.contains("cells") || !j.at("cells").is_array() || j.at("cells").empty()) {
      throw std::invalid_argument("grid: 'cells' must be a non-empty array");
    }
    for (const auto& c : j.at("cells")) {
      AblationCell cell;
      cell.name = c.at("name").get<std::string>();
      if (c.contains("overrides")) cell.overrides = c.at("overrides");
      g.cells.push_back(std::move(cell));
    }
    return g;
  }

  static AblationGrid from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open grid " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw std::invalid_argument(path + ": " + e.what());
    }
    return from_json(j);
  }
};

struct CellRun {
  std::uint64_t seed = 0;
  std::string hash;
  bool cached = false;
  bool failed = false;
  std::string error;
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0, drift = 0.0;
};

struct AblationRow {
  std::string name;
  std::vector<CellRun> runs;
  bool failed = false;
  std::string error;
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0, drift = 0.0;
};

struct AblationOptions {
  std::filesystem::path cache_root;  // empty: no caching, nothing written
  std::function<void(const std::string& cell, const CellRun&)> on_run;
};

// One trained run per cell and seed; identical configurations (by hash) are
// reused from the cache root. A failing cell becomes a failed row.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const AblationGrid& grid,
                                             const std::vector<std::uint64_t>& seeds, const Datasets& data,
                                             const std::vector<std::string>& class_names,
                                             const AblationOptions& opts = {}) {
  std::vector<AblationRow> rows;
  for (const auto& cell : grid.cells) {
    AblationRow row;
    row.name = cell.name;
    try {
      const RunConfig cell_cfg = with_overrides(base, cell.overrides);
      for (std::uint64_t s : seeds) {
        RunConfig cfg = cell_cfg;
        cfg.seed = s;
        CellRun run;
        run.seed = s;
        run.hash = cfg.hash();
        const auto dir = opts.cache_root.empty() ? std::filesystem::path() : opts.cache_root / run.hash.substr(0, 16);
        const auto eval_path = dir / "eval.json";
        if (!dir.empty() && std::filesystem::exists(eval_path)) {
          std::ifstream in(eval_path);
          nlohmann::json j;
          in >> j;
          run.ap = j.at("AP").get<double>();
          run.ap50 = j.at("AP50").get<double>();
          run.ap75 = j.at("AP75").get<double>();
          run.drift = j.at("drift").get<double>();
          run.cached = true;
        } else {
          TrainOptions to;
          to.out_dir = dir.string();
          to.dataset_hashes = {{"train", dataset_hash(data.train)}, {"eval", dataset_hash(data.eval)}};
          const auto res = train(cfg, data, class_names, to);
          run.ap = res.report->ap;
          run.ap50 = res.report->ap50;
          run.ap75 = res.report->ap75;
          run.drift = res.drift;
        }
        if (opts.on_run) opts.on_run(cell.name, run);
        row.runs.push_back(run);
      }
      const double n = static_cast<double>(row.runs.size());
      for (const auto& r : row.runs) {
        row.ap += r.ap / n;
        row.ap50 += r.ap50 / n;
        row.ap75 += r.ap75 / n;
        row.drift += r.drift / n;
      }
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      log_warning("ablation cell '" + cell.name + "' failed: " + e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Table-shaped CSV: one row per cell with seed-mean AP, AP50, AP75, the AP
// change against the previous completed row, and the mean drift.
inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "config,AP,AP50,AP75,delta_AP,drift,seeds,status\n";
  std::optional<double> prev;
  for (const auto& r : rows) {
    if (r.failed) {
      std::string err = r.error;
      for (char& c : err) {
        if (c == ',' || c == '\n') c = ' ';
      }
      os << r.name << ",,,,,," << r.runs.size() << ",failed: " << err << "\n";
      continue;
    }
    os << r.name << "," << format_number(r.ap) << "," << format_number(r.ap50) << "," << format_number(r.ap75) << ","
       << (prev ? format_number(r.ap - *prev) : std::string("")) << "," << format_number(r.drift) << ","
       << r.runs.size() << ",ok\n";
    prev = r.ap;
  }
  return os.str();
}

}  // namespace thermaldet
