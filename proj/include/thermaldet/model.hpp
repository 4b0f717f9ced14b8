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

// Thermal student detector. A patch-token transformer encoder feeds a fixed
// grid of learned queries; each query pools a local token window, attends to
// the whole image and emits a box, a region feature and TTAH class scores.
// A learned background embedding completes the K + 1 logits.

#pragma once

#include "thermaldet/data.hpp"
#include "thermaldet/detection.hpp"
#include "thermaldet/fusion.hpp"
#include "thermaldet/geometry.hpp"
#include "thermaldet/ops.hpp"
#include "thermaldet/ttah.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

struct StudentConfig {
  int image_size = 64;
  int patch = 8;  // 2^(conv layers): each stride-2 conv halves the grid
  std::vector<Eigen::Index> conv_channels{8, 16, 32};
  int query_grid = 4;   // queries per side
  int window = 4;       // tokens per side pooled by each query
  Eigen::Index width = 32;
  Eigen::Index feature_dim = 32;  // equals the text embedding width
  int enc_layers = 1;
  Eigen::Index ffn_mult = 2;
  Eigen::Index adapter_rank = 4;
  double adapter_scale = 1.0;

  int token_grid() const { return image_size / patch; }
  int tokens() const { return token_grid() * token_grid(); }
  int queries() const { return query_grid * query_grid; }

  void validate() const {
    if (patch <= 0 || image_size % patch != 0) throw std::invalid_argument("student: image_size must be a multiple of patch");
    if (conv_channels.empty() || (1 << conv_channels.size()) != patch) {
      throw std::invalid_argument("student: patch must equal 2^(number of conv layers)");
    }
    for (auto c : conv_channels) {
      if (c < 1) throw std::invalid_argument("student: conv channels must be positive");
    }
    if (query_grid <= 0 || token_grid() % query_grid != 0) {
      throw std::invalid_argument("student: token grid must be a multiple of query_grid");
    }
    if (window <= 0 || window > token_grid()) throw std::invalid_argument("student: window outside the token grid");
    if (width < 2 || feature_dim < 2 || enc_layers < 0 || ffn_mult < 1) throw std::invalid_argument("student: bad widths");
    if (adapter_rank < 1 || adapter_rank >= width) throw std::invalid_argument("student: adapter rank must be below width");
  }

  nlohmann::ordered_json to_json() const {
    return {{"image_size", image_size}, {"patch", patch},           {"conv_channels", conv_channels},
            {"query_grid", query_grid},
            {"window", window},         {"width", width},           {"feature_dim", feature_dim},
            {"enc_layers", enc_layers}, {"ffn_mult", ffn_mult},     {"adapter_rank", adapter_rank},
            {"adapter_scale", adapter_scale}};
  }

  static StudentConfig from_json(const nlohmann::json& j) {
    StudentConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.patch = j.value("patch", c.patch);
    if (j.contains("conv_channels")) c.conv_channels = j.at("conv_channels").get<std::vector<Eigen::Index>>();
    c.query_grid = j.value("query_grid", c.query_grid);
    c.window = j.value("window", c.window);
    c.width = j.value("width", c.width);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.enc_layers = j.value("enc_layers", c.enc_layers);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.adapter_rank = j.value("adapter_rank", c.adapter_rank);
    c.adapter_scale = j.value("adapter_scale", c.adapter_scale);
    c.validate();
    return c;
  }
};

// Cell box of query q on the query grid, row-major.
inline Box query_cell(int q, int grid) {
  const int i = q / grid, j = q % grid;
  const double s = 1.0 / grid;
  return Box{j * s, i * s, (j + 1) * s, (i + 1) * s};
}

// Each object goes to the query whose cell center is nearest, globally
// greedy over (distance, object, query) and one object per query. Returns
// the query index per object.
inline std::vector<int> assign_queries(const std::vector<Box>& objects, int grid) {
  const int nq = grid * grid;
  if (static_cast<int>(objects.size()) > nq) throw std::invalid_argument("assign_queries: more objects than queries");
  struct Cand {
    double d;
    int o, q;
  };
  std::vector<Cand> cands;
  for (int o = 0; o < static_cast<int>(objects.size()); ++o) {
    const Box& b = objects[static_cast<std::size_t>(o)];
    for (int q = 0; q < nq; ++q) {
      const Box c = query_cell(q, grid);
      const double dx = b.center_x() - c.center_x(), dy = b.center_y() - c.center_y();
      cands.push_back({dx * dx + dy * dy, o, q});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.o != b.o) return a.o < b.o;
    return a.q < b.q;
  });
  std::vector<int> out(objects.size(), -1);
  std::vector<bool> taken(static_cast<std::size_t>(nq), false);
  std::size_t left = objects.size();
  for (const auto& c : cands) {
    if (left == 0) break;
    if (out[static_cast<std::size_t>(c.o)] >= 0 || taken[static_cast<std::size_t>(c.q)]) continue;
    out[static_cast<std::size_t>(c.o)] = c.q;
    taken[static_cast<std::size_t>(c.q)] = true;
    --left;
  }
  return out;
}

// Nudges a predicted box into the valid set (positive extent inside [0,1]).
inline Box sanitize_box(Box b, double min_side = 1e-6) {
  auto fix = [min_side](double& lo, double& hi) {
    lo = std::clamp(lo, 0.0, 1.0 - min_side);
    hi = std::clamp(hi, lo + min_side, 1.0);
  };
  fix(b.x1, b.x2);
  fix(b.y1, b.y2);
  return b;
}

// 3x3 convolution, stride 2, zero padding 1, over row-major images stored as
// (batch * side * side) x C rows. `weight` is (9 * C) x C' with taps in
// row-major order. Returns (batch * side/2 * side/2) x C'.
inline ad::Var conv3x3_s2(const ad::Var& x, Eigen::Index batch, int side, const ad::Var& weight, const ad::Var& bias) {
  using namespace ad;
  const Eigen::Index c = x.cols();
  if (x.rows() != batch * side * side || side % 2 != 0) throw std::invalid_argument("conv3x3_s2: shape mismatch");
  if (weight.rows() != 9 * c) throw std::invalid_argument("conv3x3_s2: weight rows must be 9 * channels");
  const Eigen::Index pad = x.rows();  // index of the appended zero row
  Var padded = concat_rows({x, x.tape().constant(Matrix::Zero(1, c))});
  const int half = side / 2;
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * half * half * 9));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int i = 0; i < half; ++i) {
      for (int j = 0; j < half; ++j) {
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int r = 2 * i + di, q = 2 * j + dj;
            idx.push_back(r < 0 || q < 0 || r >= side || q >= side ? pad : b * side * side + r * side + q);
          }
        }
      }
    }
  }
  return linear(fold_rows(gather_rows(padded, idx), 9), weight, bias);
}

struct StudentOutput {
  ad::Var boxes;    // N x 4 corners, N = batch * queries
  ad::Var feats;    // N x feature_dim region features
  ad::Var hidden;   // N x width query states (visual tokens for captions)
  ad::Var logits;   // N x (K + 1), background last, already divided by tau
  tape::TtahScores ttah;
  Eigen::Index batch = 0;
  Eigen::Index queries = 0;
  Eigen::Index classes = 0;
};

class StudentModel {
 public:
  static StudentModel create(ParameterStore& store, const StudentConfig& cfg, std::mt19937_64& rng,
                             const std::string& prefix = "student") {
    cfg.validate();
    const Eigen::Index w = cfg.width, f = cfg.width * cfg.ffn_mult;
    auto lin = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
      store.add(prefix + "." + name, random_normal(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    };
    auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
      store.add(prefix + "." + name, Matrix::Zero(r, c));
    };
    auto ones = [&](const std::string& name, Eigen::Index c) { store.add(prefix + "." + name, Matrix::Ones(1, c)); };
    Eigen::Index in_ch = 1;
    for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
      lin("conv" + std::to_string(l), 9 * in_ch, cfg.conv_channels[l]);
      zeros("conv" + std::to_string(l) + "_bias", 1, cfg.conv_channels[l]);
      in_ch = cfg.conv_channels[l];
    }
    lin("patch_proj", in_ch, w);
    zeros("patch_bias", 1, w);
    store.add(prefix + ".pos_emb", random_normal(rng, cfg.tokens(), w, 0.1));
    for (int l = 0; l < cfg.enc_layers; ++l) {
      const std::string p = "enc" + std::to_string(l) + ".";
      ones(p + "ln1_gain", w);
      zeros(p + "ln1_bias", 1, w);
      for (const char* m : {"wq", "wk", "wv", "wo"}) lin(p + m, w, w);
      ones(p + "ln2_gain", w);
      zeros(p + "ln2_bias", 1, w);
      lin(p + "ff1", w, f);
      zeros(p + "ff1_bias", 1, f);
      lin(p + "ff2", f, w);
      zeros(p + "ff2_bias", 1, w);
      lin(p + "adapter_down", w, cfg.adapter_rank);
      zeros(p + "adapter_up", cfg.adapter_rank, w);
    }
    const Eigen::Index win = static_cast<Eigen::Index>(cfg.window) * cfg.window;
    lin("local_proj", win * w, w);
    zeros("local_bias", 1, w);
    store.add(prefix + ".query_emb", random_normal(rng, cfg.queries(), w, 0.1));
    ones("q_ln_gain", w);
    zeros("q_ln_bias", 1, w);
    for (const char* m : {"cq", "ck", "cv", "co"}) lin(m, w, w);
    ones("q_ln2_gain", w);
    zeros("q_ln2_bias", 1, w);
    lin("q_ff1", w, f);
    zeros("q_ff1_bias", 1, f);
    lin("q_ff2", f, w);
    zeros("q_ff2_bias", 1, w);
    ones("out_ln_gain", w);
    zeros("out_ln_bias", 1, w);
    // Box head: an MLP whose zero-initialized output starts every query at
    // its cell (center and size logits in the anchor bias).
    lin("box_w1", w, f);
    zeros("box_b1", 1, f);
    zeros("box_w2", f, 4);
    Matrix anchors(cfg.queries(), 4);
    for (int q = 0; q < cfg.queries(); ++q) {
      const Box c = query_cell(q, cfg.query_grid);
      auto logit = [](double p) { return std::log(p / (1.0 - p)); };
      anchors(q, 0) = logit(c.center_x());
      anchors(q, 1) = logit(c.center_y());
      anchors(q, 2) = logit(c.width());
      anchors(q, 3) = logit(c.height());
    }
    store.add(prefix + ".box_anchor", anchors);
    lin("feat_w", w, cfg.feature_dim);
    zeros("feat_b", 1, cfg.feature_dim);
    store.add(prefix + ".background", random_normal(rng, 1, cfg.feature_dim, 1.0));
    return bind(store, cfg, prefix);
  }

  static StudentModel bind(ParameterStore& store, const StudentConfig& cfg, const std::string& prefix = "student") {
    cfg.validate();
    StudentModel m;
    m.store_ = &store;
    m.cfg_ = cfg;
    m.prefix_ = prefix;
    store.at(prefix + ".patch_proj");  // existence check
    store.at(prefix + ".conv0");
    return m;
  }

  const StudentConfig& config() const { return cfg_; }

  // Pixel rows for a batch: (batch * H * W) x 1, row-major, centered at 0.
  Matrix pixels(const std::vector<const TrainingRecord*>& batch) const {
    const int n = cfg_.image_size;
    Matrix out(static_cast<Eigen::Index>(batch.size()) * n * n, 1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const TrainingRecord& r = *batch[b];
      if (r.height != n || r.width != n) throw std::invalid_argument("student: record canvas differs from image_size");
      for (int i = 0; i < n * n; ++i) {
        out(static_cast<Eigen::Index>(b) * n * n + i, 0) = static_cast<double>(r.thermal[static_cast<std::size_t>(i)]) - 0.5;
      }
    }
    return out;
  }

  // Full forward pass. `class_embeds` holds the frozen K x d text embeddings.
  StudentOutput forward(ad::Tape& t, const std::vector<const TrainingRecord*>& batch, const TtahHead& ttah,
                        const Matrix& class_embeds, SelectionStrategy strategy, double tau,
                        std::mt19937_64& rng) const {
    using namespace ad;
    if (batch.empty()) throw std::invalid_argument("student: empty batch");
    if (!(tau > 0.0)) throw std::invalid_argument("student: tau must be > 0");
    const auto nb = static_cast<Eigen::Index>(batch.size());
    const int g = cfg_.token_grid(), nt = cfg_.tokens(), nq = cfg_.queries();

    std::vector<Eigen::Index> pos_idx, q_idx;
    for (Eigen::Index b = 0; b < nb; ++b) {
      for (int i = 0; i < nt; ++i) pos_idx.push_back(i);
      for (int q = 0; q < nq; ++q) q_idx.push_back(q);
    }
    Var x = t.constant(pixels(batch));
    int side = cfg_.image_size;
    for (std::size_t l = 0; l < cfg_.conv_channels.size(); ++l) {
      const std::string name = "conv" + std::to_string(l);
      x = gelu(conv3x3_s2(x, nb, side, param(t, name), param(t, name + "_bias")));
      side /= 2;
    }
    x = linear(x, param(t, "patch_proj"), param(t, "patch_bias")) + gather_rows(param(t, "pos_emb"), pos_idx);
    for (int l = 0; l < cfg_.enc_layers; ++l) {
      const std::string p = "enc" + std::to_string(l) + ".";
      Var h = layer_norm_rows(x, param(t, p + "ln1_gain"), param(t, p + "ln1_bias"));
      Var sa = block_attention(matmul(h, param(t, p + "wq")), matmul(h, param(t, p + "wk")),
                               matmul(h, param(t, p + "wv")), nb);
      x = x + matmul(sa, param(t, p + "wo"));
      h = layer_norm_rows(x, param(t, p + "ln2_gain"), param(t, p + "ln2_bias"));
      Var ff = linear(gelu(linear(h, param(t, p + "ff1"), param(t, p + "ff1_bias"))), param(t, p + "ff2"),
                      param(t, p + "ff2_bias"));
      x = x + tape::adapter(ff, param(t, p + "adapter_down"), param(t, p + "adapter_up"), cfg_.adapter_scale);
    }

    // Local window pooling per query, centered on its cell; positions off
    // the token grid read a zero pad row.
    const int stride = g / cfg_.query_grid, win = cfg_.window;
    const Eigen::Index pad = nb * nt;
    Var padded = concat_rows({x, t.constant(Matrix::Zero(1, x.cols()))});
    std::vector<Eigen::Index> win_idx;
    for (Eigen::Index b = 0; b < nb; ++b) {
      for (int q = 0; q < nq; ++q) {
        const int r0 = (q / cfg_.query_grid) * stride - (win - stride) / 2;
        const int c0 = (q % cfg_.query_grid) * stride - (win - stride) / 2;
        for (int r = r0; r < r0 + win; ++r) {
          for (int c = c0; c < c0 + win; ++c) {
            win_idx.push_back(r < 0 || c < 0 || r >= g || c >= g ? pad : b * nt + r * g + c);
          }
        }
      }
    }
    Var local = linear(fold_rows(gather_rows(padded, win_idx), static_cast<Eigen::Index>(win) * win),
                       param(t, "local_proj"), param(t, "local_bias"));
    Var h = local + gather_rows(param(t, "query_emb"), q_idx);
    Var hq = layer_norm_rows(h, param(t, "q_ln_gain"), param(t, "q_ln_bias"));
    Var ca = block_attention(matmul(hq, param(t, "cq")), matmul(x, param(t, "ck")), matmul(x, param(t, "cv")), nb);
    h = h + matmul(ca, param(t, "co"));
    hq = layer_norm_rows(h, param(t, "q_ln2_gain"), param(t, "q_ln2_bias"));
    h = h + linear(gelu(linear(hq, param(t, "q_ff1"), param(t, "q_ff1_bias"))), param(t, "q_ff2"),
                   param(t, "q_ff2_bias"));
    Var hidden = layer_norm_rows(h, param(t, "out_ln_gain"), param(t, "out_ln_bias"));

    StudentOutput out;
    out.batch = nb;
    out.queries = nq;
    out.classes = class_embeds.rows();
    out.hidden = hidden;

    // Boxes from sigmoid center and size: corners may leave the unit square
    // during training; detections() clips them.
    Var u = matmul(gelu(linear(hidden, param(t, "box_w1"), param(t, "box_b1"))), param(t, "box_w2")) +
            gather_rows(param(t, "box_anchor"), q_idx);
    Var cx = sigmoid(col(u, 0)), cy = sigmoid(col(u, 1));
    Var hw = sigmoid(col(u, 2)) * 0.5, hh = sigmoid(col(u, 3)) * 0.5;
    out.boxes = concat_cols({cx - hw, cy - hh, cx + hw, cy + hh});

    out.feats = linear(hidden, param(t, "feat_w"), param(t, "feat_b"));
    Var calibrated = ttah.calibrate_all(t, class_embeds);
    out.ttah = tape::score_regions(out.feats, calibrated, class_embeds.rows(), ttah.bank().size(), strategy, rng,
                                   ttah.config().soft_temperature);
    Var bg = cosine_rows(out.feats, param(t, "background"));
    out.logits = concat_cols({out.ttah.scores, bg}) / tau;
    return out;
  }

  // Per-image detections (one per query). Class rows are the softmax over
  // the K real classes; the confidence is the K + 1 softmax mass of the label.
  static std::vector<DetectionSet> detections(const StudentOutput& out) {
    const Matrix& lg = out.logits.value();
    const Matrix& bx = out.boxes.value();
    const Matrix& ft = out.feats.value();
    const Eigen::Index k = out.classes;
    std::vector<DetectionSet> sets(static_cast<std::size_t>(out.batch));
    for (Eigen::Index b = 0; b < out.batch; ++b) {
      DetectionSet& d = sets[static_cast<std::size_t>(b)];
      for (Eigen::Index q = 0; q < out.queries; ++q) {
        const Eigen::Index r = b * out.queries + q;
        const double m = lg.row(r).maxCoeff();
        Eigen::RowVectorXd e = (lg.row(r).array() - m).exp();
        const double z_all = e.sum(), z_real = e.head(k).sum();
        Eigen::Index label = 0;
        e.head(k).maxCoeff(&label);
        std::vector<double> probs(static_cast<std::size_t>(k));
        for (Eigen::Index c = 0; c < k; ++c) probs[static_cast<std::size_t>(c)] = e(c) / z_real;
        d.boxes.push_back(sanitize_box(Box{bx(r, 0), bx(r, 1), bx(r, 2), bx(r, 3)}));
        d.class_probs.push_back(std::move(probs));
        d.region_feats.push_back(ft.row(r).transpose());
        d.confidences.push_back(e(label) / z_all);
        d.labels.push_back(static_cast<int>(label));
      }
    }
    return sets;
  }

 private:
  ad::Var param(ad::Tape& t, const std::string& name) const { return t.parameter(store_->at(prefix_ + "." + name)); }

  ParameterStore* store_ = nullptr;
  StudentConfig cfg_;
  std::string prefix_;
};

}  // namespace thermaldet
