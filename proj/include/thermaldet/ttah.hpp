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

// Thermal-text alignment head. Each frozen class embedding t_c is paired
// with every attribute vector a_j of a learnable bank and re-projected by a
// shared two-layer MLP plus layer norm:
//
//   t*_{c,j} = LN(W2 gelu(W1 [t_c; a_j] + b1) + b2)
//
// A region feature is then scored against the M variants of each class and
// one effective embedding per class is chosen by the selection strategy.

#pragma once

#include "thermaldet/losses.hpp"
#include "thermaldet/numerics.hpp"
#include "thermaldet/ops.hpp"
#include "thermaldet/parameters.hpp"

#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

enum class SelectionStrategy { kConfidenceGating, kAverage, kRandom, kSoftGating };

inline const char* to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kConfidenceGating: return "confidence_gating";
    case SelectionStrategy::kAverage: return "average";
    case SelectionStrategy::kRandom: return "random";
    case SelectionStrategy::kSoftGating: return "soft_gating";
  }
  return "unknown";
}

inline SelectionStrategy strategy_from_string(const std::string& s) {
  if (s == "confidence_gating") return SelectionStrategy::kConfidenceGating;
  if (s == "average") return SelectionStrategy::kAverage;
  if (s == "random") return SelectionStrategy::kRandom;
  if (s == "soft_gating") return SelectionStrategy::kSoftGating;
  throw std::invalid_argument("unknown selection strategy: " + s);
}

struct TtahConfig {
  Eigen::Index text_dim = 32;
  Eigen::Index attribute_dim = 8;  // text_dim / 4
  Eigen::Index hidden_dim = 32;    // text_dim
  std::vector<std::string> attributes{"hot", "silhouette", "reflective", "high-emissivity"};
  // Temperature of the soft_gating weights; unused by the other strategies.
  double soft_temperature = 0.1;
};

// Named view over the M x d_a attribute matrix held in a ParameterStore.
class AttributeBank {
 public:
  AttributeBank() = default;
  AttributeBank(std::vector<std::string> names, Parameter* vectors) : names_(std::move(names)), vectors_(vectors) {
    if (names_.empty()) throw std::invalid_argument("attribute bank needs at least one attribute");
    if (std::set<std::string>(names_.begin(), names_.end()).size() != names_.size()) {
      throw std::invalid_argument("attribute names must be unique");
    }
    if (vectors_->value.rows() != static_cast<Eigen::Index>(names_.size())) {
      throw std::invalid_argument("attribute bank row count differs from name count");
    }
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(names_.size()); }
  Eigen::Index dim() const { return vectors_->value.cols(); }
  const std::vector<std::string>& names() const { return names_; }
  Vector vector(Eigen::Index j) const { return vectors_->value.row(j).transpose(); }
  Parameter& parameter() const { return *vectors_; }

 private:
  std::vector<std::string> names_;
  Parameter* vectors_ = nullptr;
};

struct SublabelSet {
  int class_id = 0;
  EmbeddingVector region;                 // f_th the scores refer to
  std::vector<EmbeddingVector> variants;  // t*_{c,1..M}
  std::vector<double> scores;             // s_{c,j} = cos(f_th, t*_{c,j})
};

struct Selection {
  EmbeddingVector embedding;  // effective t~_c
  double score = 0.0;         // s^_c
  int index = -1;             // chosen variant, -1 when the embedding is a blend
};

struct Classification {
  int label = 0;
  std::vector<double> scores;  // s^_c per class
};

struct TtahLossValue {
  double ctr = 0.0;
  double drift = 0.0;
  double combined = 0.0;
};

class TtahHead {
 public:
  static TtahHead create(ParameterStore& store, const TtahConfig& cfg, std::mt19937_64& rng,
                         const std::string& prefix = "ttah") {
    const Eigen::Index in = cfg.text_dim + cfg.attribute_dim;
    const auto m = static_cast<Eigen::Index>(cfg.attributes.size());
    store.add(prefix + ".attributes", random_normal(rng, m, cfg.attribute_dim, 1.0));
    store.add(prefix + ".w1", random_normal(rng, in, cfg.hidden_dim, 1.0 / std::sqrt(static_cast<double>(in))));
    store.add(prefix + ".b1", Matrix::Zero(1, cfg.hidden_dim));
    store.add(prefix + ".w2", random_normal(rng, cfg.hidden_dim, cfg.text_dim,
                                            1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim))));
    store.add(prefix + ".b2", Matrix::Zero(1, cfg.text_dim));
    store.add(prefix + ".ln_gain", Matrix::Ones(1, cfg.text_dim));
    store.add(prefix + ".ln_bias", Matrix::Zero(1, cfg.text_dim));
    return bind(store, cfg, prefix);
  }

  static TtahHead bind(ParameterStore& store, const TtahConfig& cfg, const std::string& prefix = "ttah") {
    TtahHead h;
    h.cfg_ = cfg;
    h.bank_ = AttributeBank(cfg.attributes, &store.at(prefix + ".attributes"));
    h.w1_ = &store.at(prefix + ".w1");
    h.b1_ = &store.at(prefix + ".b1");
    h.w2_ = &store.at(prefix + ".w2");
    h.b2_ = &store.at(prefix + ".b2");
    h.gain_ = &store.at(prefix + ".ln_gain");
    h.bias_ = &store.at(prefix + ".ln_bias");
    return h;
  }

  const TtahConfig& config() const { return cfg_; }
  const AttributeBank& bank() const { return bank_; }

  // --------------------------------------------------------- plain values

  EmbeddingVector calibrate(const EmbeddingVector& t_c, const Vector& a_j) const {
    if (t_c.dim() != cfg_.text_dim) throw std::invalid_argument("calibrate: text embedding dimension mismatch");
    if (a_j.size() != cfg_.attribute_dim) throw std::invalid_argument("calibrate: attribute dimension mismatch");
    Vector x(cfg_.text_dim + cfg_.attribute_dim);
    x << t_c.values, a_j;
    Vector h = w1_->value.transpose() * x + b1_->value.row(0).transpose();
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = ad::gelu_value(h(i));
    const Vector y = w2_->value.transpose() * h + b2_->value.row(0).transpose();
    return EmbeddingVector(layer_norm(y, gain_->value.row(0).transpose(), bias_->value.row(0).transpose()),
                           EmbeddingRole::kCalibrated);
  }

  SublabelSet expand_and_score(const EmbeddingVector& f_th, const EmbeddingVector& t_c, int class_id) const {
    SublabelSet out;
    out.class_id = class_id;
    out.region = f_th;
    for (Eigen::Index j = 0; j < bank_.size(); ++j) {
      out.variants.push_back(calibrate(t_c, bank_.vector(j)));
      out.scores.push_back(cosine_sim(f_th, out.variants.back()));
    }
    return out;
  }

  Classification classify(const EmbeddingVector& f_th, std::span<const EmbeddingVector> classes,
                          SelectionStrategy strategy, std::uint64_t seed = 0) const;

  // ------------------------------------------------------------- tape path

  // All K*M calibrated variants; row c*M + j holds t*_{c,j}.
  ad::Var calibrate_all(ad::Tape& tape, const Matrix& class_embeds) const {
    if (class_embeds.cols() != cfg_.text_dim) throw std::invalid_argument("calibrate_all: dimension mismatch");
    const Eigen::Index k = class_embeds.rows(), m = bank_.size();
    Matrix text_rows(k * m, cfg_.text_dim);
    std::vector<Eigen::Index> attr_rows(static_cast<std::size_t>(k * m));
    for (Eigen::Index c = 0; c < k; ++c) {
      for (Eigen::Index j = 0; j < m; ++j) {
        text_rows.row(c * m + j) = class_embeds.row(c);
        attr_rows[static_cast<std::size_t>(c * m + j)] = j;
      }
    }
    using namespace ad;
    Var a = gather_rows(tape.parameter(bank_.parameter()), attr_rows);
    Var x = concat_cols({tape.constant(std::move(text_rows)), a});
    Var h = gelu(linear(x, tape.parameter(*w1_), tape.parameter(*b1_)));
    Var y = linear(h, tape.parameter(*w2_), tape.parameter(*b2_));
    return layer_norm_rows(y, tape.parameter(*gain_), tape.parameter(*bias_));
  }

 private:
  TtahConfig cfg_;
  AttributeBank bank_;
  Parameter* w1_ = nullptr;
  Parameter* b1_ = nullptr;
  Parameter* w2_ = nullptr;
  Parameter* b2_ = nullptr;
  Parameter* gain_ = nullptr;
  Parameter* bias_ = nullptr;
};

inline Selection select_variant(const SublabelSet& sub, SelectionStrategy strategy, std::uint64_t seed = 0,
                                double soft_temperature = 0.1) {
  if (sub.variants.empty() || sub.variants.size() != sub.scores.size()) {
    throw std::invalid_argument("select_variant needs a scored, non-empty sublabel set");
  }
  const std::size_t m = sub.variants.size();
  Selection out;
  switch (strategy) {
    case SelectionStrategy::kConfidenceGating: {
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j) {
        if (sub.scores[j] > sub.scores[best]) best = j;  // strict: ties keep the lower index
      }
      out = {sub.variants[best], sub.scores[best], static_cast<int>(best)};
      break;
    }
    case SelectionStrategy::kRandom: {
      std::mt19937_64 rng(seed);
      const auto j = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, static_cast<int>(m) - 1)(rng));
      out = {sub.variants[j], sub.scores[j], static_cast<int>(j)};
      break;
    }
    case SelectionStrategy::kAverage: {
      Vector mean = Vector::Zero(sub.variants[0].dim());
      for (const auto& v : sub.variants) mean += v.values;
      mean /= static_cast<double>(m);
      EmbeddingVector e(mean, EmbeddingRole::kCalibrated);
      out = {e, cosine_sim(sub.region, e), -1};
      break;
    }
    case SelectionStrategy::kSoftGating: {
      const auto w = softmax(sub.scores, soft_temperature);
      Vector blend = Vector::Zero(sub.variants[0].dim());
      double score = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        blend += w[j] * sub.variants[j].values;
        score += w[j] * sub.scores[j];
      }
      out = {EmbeddingVector(blend, EmbeddingRole::kCalibrated), score, -1};
      break;
    }
  }
  return out;
}

inline Classification TtahHead::classify(const EmbeddingVector& f_th, std::span<const EmbeddingVector> classes,
                                         SelectionStrategy strategy, std::uint64_t seed) const {
  if (classes.empty()) throw std::invalid_argument("classify: empty class list");
  Classification out;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto sub = expand_and_score(f_th, classes[c], static_cast<int>(c));
    out.scores.push_back(select_variant(sub, strategy, seed + c, cfg_.soft_temperature).score);
    if (out.scores[c] > out.scores[static_cast<std::size_t>(out.label)]) out.label = static_cast<int>(c);
  }
  return out;
}

// InfoNCE of f_th against the effective class embeddings (target positive)
// plus lambda * |t~_target - t_target|^2.
inline TtahLossValue ttah_loss(const EmbeddingVector& f_th, std::span<const EmbeddingVector> effective,
                               std::span<const EmbeddingVector> raw, int target, double tau, double lambda_drift) {
  if (!(tau > 0.0)) throw std::invalid_argument("ttah_loss: tau must be > 0");
  if (lambda_drift < 0.0) throw std::invalid_argument("ttah_loss: lambda_drift must be >= 0");
  if (effective.size() != raw.size()) throw std::invalid_argument("ttah_loss: class count mismatch");
  if (target < 0 || static_cast<std::size_t>(target) >= effective.size()) {
    throw std::invalid_argument("ttah_loss: target class absent");
  }
  std::vector<double> logits;
  for (const auto& e : effective) logits.push_back(cosine_sim(f_th, e) / tau);
  TtahLossValue out;
  out.ctr = cross_entropy(logits, static_cast<std::size_t>(target));
  out.drift = (effective[static_cast<std::size_t>(target)].values - raw[static_cast<std::size_t>(target)].values)
                  .squaredNorm();
  out.combined = out.ctr + lambda_drift * out.drift;
  return out;
}

namespace tape {

// Batched scoring of N region features against K classes x M variants.
struct TtahScores {
  ad::Var scores;           // N x K, s^ per region and class
  ad::Var selection;        // N x (K*M) selection weights; constant unless soft gating
  ad::Var calibrated;       // (K*M) x d
  Eigen::MatrixXi chosen;   // N x K chosen variant index (-1 for blends)
  Eigen::Index classes = 0;
  Eigen::Index variants = 0;
};

inline TtahScores score_regions(const ad::Var& feats, const ad::Var& calibrated, Eigen::Index classes,
                                Eigen::Index variants, SelectionStrategy strategy, std::mt19937_64& rng,
                                double soft_temperature = 0.1) {
  using namespace ad;
  ad::Tape& t = feats.tape();
  const Eigen::Index n = feats.rows(), km = classes * variants;
  if (calibrated.rows() != km) throw std::invalid_argument("score_regions: calibrated row count mismatch");
  TtahScores out;
  out.calibrated = calibrated;
  out.classes = classes;
  out.variants = variants;
  out.chosen = Eigen::MatrixXi::Constant(n, classes, -1);
  Var s = cosine_rows(feats, calibrated);
  Matrix sel = Matrix::Zero(n, km);
  switch (strategy) {
    case SelectionStrategy::kConfidenceGating:
    case SelectionStrategy::kRandom: {
      std::uniform_int_distribution<int> pick_j(0, static_cast<int>(variants) - 1);
      Eigen::MatrixXi idx(n, classes);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index c = 0; c < classes; ++c) {
          Eigen::Index best = 0;
          if (strategy == SelectionStrategy::kRandom) {
            best = pick_j(rng);
          } else {
            for (Eigen::Index j = 1; j < variants; ++j) {
              if (s.value()(i, c * variants + j) > s.value()(i, c * variants + best)) best = j;
            }
          }
          idx(i, c) = static_cast<int>(c * variants + best);
          out.chosen(i, c) = static_cast<int>(best);
          sel(i, c * variants + best) = 1.0;
        }
      }
      out.scores = pick_cols(s, idx);
      out.selection = t.constant(std::move(sel));
      break;
    }
    case SelectionStrategy::kAverage: {
      Matrix avg = Matrix::Zero(classes, km);
      for (Eigen::Index c = 0; c < classes; ++c) avg.block(c, c * variants, 1, variants).setConstant(1.0 / variants);
      Var mean_emb = matmul(t.constant(avg), calibrated);
      out.scores = cosine_rows(feats, mean_emb);
      for (Eigen::Index i = 0; i < n; ++i) sel.row(i) = avg.colwise().sum();
      out.selection = t.constant(std::move(sel));
      break;
    }
    case SelectionStrategy::kSoftGating: {
      std::vector<Var> weights, blocks;
      for (Eigen::Index c = 0; c < classes; ++c) {
        Var sc = slice_cols(s, c * variants, variants);
        Var w = softmax_rows(scale(sc, 1.0 / soft_temperature));
        weights.push_back(w);
        blocks.push_back(row_sum(w * sc));
      }
      out.scores = concat_cols(blocks);
      out.selection = concat_cols(weights);
      break;
    }
  }
  return out;
}

// Effective embedding of class targets[r] for region rows[r]: the chosen
// variant, the class mean, or the soft blend. Returns R x d.
inline ad::Var effective_embeddings(const TtahScores& s, const std::vector<Eigen::Index>& rows,
                                    const std::vector<Eigen::Index>& targets) {
  using namespace ad;
  if (rows.size() != targets.size()) throw std::invalid_argument("effective_embeddings: size mismatch");
  const Eigen::Index km = s.classes * s.variants;
  Matrix block_mask = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), km);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (targets[r] < 0 || targets[r] >= s.classes) throw std::out_of_range("effective_embeddings target");
    block_mask.block(static_cast<Eigen::Index>(r), targets[r] * s.variants, 1, s.variants).setOnes();
  }
  Var w = gather_rows(s.selection, rows) * s.calibrated.tape().constant(std::move(block_mask));
  return matmul(w, s.calibrated);
}

// Mean InfoNCE over rows of N x K scores, tau-scaled.
inline ad::Var ttah_ctr(const ad::Var& scores, const std::vector<Eigen::Index>& targets, double tau) {
  return cross_entropy_rows(ad::scale(scores, 1.0 / tau), targets);
}

// Mean |t~ - t|^2 over rows.
inline ad::Var ttah_drift(const ad::Var& effective, const Matrix& raw_rows) {
  using namespace ad;
  return mean(row_sum(square(effective - effective.tape().constant(raw_rows))));
}

}  // namespace tape
}  // namespace thermaldet
