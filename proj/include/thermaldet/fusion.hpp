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

// Modality-fused cross-attention (gated thermal + RGB keys), low-rank
// residual adapters, and the small causal caption decoder that consumes them.
//
// At inference, or when a batch carries no RGB stream, the RGB tokens are
// masked out of the softmax rather than scaled by a zero gate: a zero-scaled
// key still receives weight exp(0), a masked key receives none, so only
// masking reduces the operator to thermal-only attention.

#pragma once

#include "thermaldet/numerics.hpp"
#include "thermaldet/ops.hpp"
#include "thermaldet/parameters.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct GatePair {
  double logit_alpha = 0.0;
  double logit_beta = 0.0;
  bool inference_collapse = false;

  double alpha() const { return logistic(logit_alpha); }
  double beta() const { return inference_collapse ? 0.0 : logistic(logit_beta); }
};

// softmax(Q [aK_th; bK_rgb]^T / sqrt(d)) [aV_th; bV_rgb]. Pass empty K_rgb
// and V_rgb when no RGB stream exists.
inline Matrix mfca_forward(const Matrix& q, const Matrix& k_th, const Matrix& v_th, const Matrix& k_rgb,
                           const Matrix& v_rgb, const GatePair& gates) {
  const bool has_k = k_rgb.size() != 0, has_v = v_rgb.size() != 0;
  if (has_k != has_v) throw std::invalid_argument("mfca: RGB keys and values must be given together");
  if (k_th.rows() == 0) throw std::invalid_argument("mfca: thermal keys are required");
  const double a = gates.alpha();
  if (!has_k) return scaled_dot_attention(q, a * k_th, a * v_th);
  if (k_rgb.cols() != k_th.cols() || v_rgb.cols() != v_th.cols() || k_rgb.rows() != v_rgb.rows()) {
    throw std::invalid_argument("mfca: RGB stream shape mismatch");
  }
  const double b = logistic(gates.logit_beta);
  const Eigen::Index nt = k_th.rows(), nr = k_rgb.rows();
  Matrix k(nt + nr, k_th.cols()), v(nt + nr, v_th.cols());
  k << a * k_th, b * k_rgb;
  v << a * v_th, b * v_rgb;
  Matrix keep = Matrix::Ones(q.rows(), nt + nr);
  if (gates.inference_collapse) keep.rightCols(nr).setZero();
  return scaled_dot_attention(q, k, v, keep);
}

struct AdapterBlock {
  Matrix down;  // d x r
  Matrix up;    // r x d
  double scale = 1.0;

  Eigen::Index rank() const { return down.cols(); }
  void validate() const {
    if (up.rows() != down.cols() || up.cols() != down.rows()) throw std::invalid_argument("adapter shape mismatch");
    if (rank() >= down.rows()) throw std::invalid_argument("adapter rank must be below its width");
  }
};

inline AdapterBlock make_adapter(std::mt19937_64& rng, Eigen::Index d, Eigen::Index r, double scale) {
  AdapterBlock b;
  b.down = random_normal(rng, d, r, 1.0 / std::sqrt(static_cast<double>(d)));
  b.up = Matrix::Zero(r, d);
  b.scale = scale;
  b.validate();
  return b;
}

// x + s * gelu(x Down) Up, row-wise over an N x d input.
inline Matrix adapter_forward(const Matrix& x, const AdapterBlock& block) {
  block.validate();
  if (x.cols() != block.down.rows()) throw std::invalid_argument("adapter: input dimension mismatch");
  Matrix h = x * block.down;
  h = h.unaryExpr([](double z) { return ad::gelu_value(z); });
  return x + block.scale * (h * block.up);
}

namespace tape {

// Gated cross-attention over `groups` independent blocks. Query rows are
// grouped as in block_attention; each block sees its own n_th thermal and
// n_rgb RGB tokens. rgb_k/rgb_v may be invalid Vars when absent; collapse
// masks them regardless.
inline ad::Var mfca(const ad::Var& q, const ad::Var& k_th, const ad::Var& v_th, const ad::Var& rgb_k,
                    const ad::Var& rgb_v, const ad::Var& logit_alpha, const ad::Var& logit_beta,
                    Eigen::Index groups, bool collapse) {
  using namespace ad;
  Var a = sigmoid(logit_alpha);
  Var kt = a * k_th, vt = a * v_th;
  if (!rgb_k.valid() || collapse) return block_attention(q, kt, vt, groups);
  if (rgb_k.rows() % groups != 0 || k_th.rows() % groups != 0) throw std::invalid_argument("mfca: grouping mismatch");
  const Eigen::Index nt = k_th.rows() / groups, nr = rgb_k.rows() / groups;
  Var b = sigmoid(logit_beta);
  Var k_all = concat_rows({kt, b * rgb_k});
  Var v_all = concat_rows({vt, b * rgb_v});
  std::vector<Eigen::Index> order;
  for (Eigen::Index g = 0; g < groups; ++g) {
    for (Eigen::Index i = 0; i < nt; ++i) order.push_back(g * nt + i);
    for (Eigen::Index i = 0; i < nr; ++i) order.push_back(groups * nt + g * nr + i);
  }
  return block_attention(q, gather_rows(k_all, order), gather_rows(v_all, order), groups);
}

inline ad::Var adapter(const ad::Var& x, const ad::Var& down, const ad::Var& up, double scale) {
  using namespace ad;
  return x + matmul(gelu(matmul(x, down)), up) * scale;
}

}  // namespace tape

struct DecoderConfig {
  Eigen::Index width = 32;
  Eigen::Index layers = 2;
  Eigen::Index ffn_mult = 2;
  Eigen::Index max_len = 32;
  Eigen::Index adapter_rank = 4;
  double adapter_scale = 1.0;
  Eigen::Index visual_dim = 32;
  Eigen::Index rgb_dim = 32;
};

// One decoding problem per group: a token prefix (prompt first), the group's
// thermal visual tokens and, optionally, its RGB tokens.
struct DecoderInput {
  std::vector<std::vector<int>> prefixes;
  ad::Var visual;  // (groups * visual_per_group) x visual_dim
  Eigen::Index visual_per_group = 0;
  ad::Var rgb;     // (groups * rgb_per_group) x rgb_dim, or invalid
  Eigen::Index rgb_per_group = 0;
  bool collapse = false;
};

class CaptionDecoder {
 public:
  static CaptionDecoder create(ParameterStore& store, const DecoderConfig& cfg, int vocab_size, std::mt19937_64& rng,
                               const std::string& prefix = "decoder") {
    const Eigen::Index w = cfg.width, f = cfg.width * cfg.ffn_mult;
    auto lin = [&](const std::string& name, Eigen::Index in, Eigen::Index out) {
      store.add(prefix + "." + name, random_normal(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    };
    auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
      store.add(prefix + "." + name, Matrix::Zero(r, c));
    };
    auto ones = [&](const std::string& name, Eigen::Index c) { store.add(prefix + "." + name, Matrix::Ones(1, c)); };
    store.add(prefix + ".tok_emb", random_normal(rng, vocab_size, w, 0.5));
    store.add(prefix + ".pos_emb", random_normal(rng, cfg.max_len, w, 0.1));
    lin("vis_proj", cfg.visual_dim, w);
    zeros("vis_bias", 1, w);
    lin("rgb_proj", cfg.rgb_dim, w);
    zeros("rgb_bias", 1, w);
    for (Eigen::Index l = 0; l < cfg.layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      ones(p + "ln1_gain", w);
      zeros(p + "ln1_bias", 1, w);
      for (const char* m : {"wq", "wk", "wv", "wo"}) lin(p + m, w, w);
      ones(p + "ln2_gain", w);
      zeros(p + "ln2_bias", 1, w);
      for (const char* m : {"cq", "ck", "cv", "co"}) lin(p + m, w, w);
      store.add(prefix + "." + p + "gate_alpha", Matrix::Constant(1, 1, 2.0));
      store.add(prefix + "." + p + "gate_beta", Matrix::Zero(1, 1));
      ones(p + "ln3_gain", w);
      zeros(p + "ln3_bias", 1, w);
      lin(p + "ff1", w, f);
      zeros(p + "ff1_bias", 1, f);
      lin(p + "ff2", f, w);
      zeros(p + "ff2_bias", 1, w);
      lin(p + "adapter_down", w, cfg.adapter_rank);
      zeros(p + "adapter_up", cfg.adapter_rank, w);
    }
    ones("lnf_gain", w);
    zeros("lnf_bias", 1, w);
    lin("out", w, vocab_size);
    zeros("out_bias", 1, vocab_size);
    return bind(store, cfg, vocab_size, prefix);
  }

  static CaptionDecoder bind(ParameterStore& store, const DecoderConfig& cfg, int vocab_size,
                             const std::string& prefix = "decoder") {
    if (cfg.adapter_rank >= cfg.width) throw std::invalid_argument("adapter rank must be below decoder width");
    CaptionDecoder d;
    d.store_ = &store;
    d.cfg_ = cfg;
    d.vocab_size_ = vocab_size;
    d.prefix_ = prefix;
    store.at(prefix + ".tok_emb");  // existence check
    return d;
  }

  const DecoderConfig& config() const { return cfg_; }
  int vocab_size() const { return vocab_size_; }

  // Logit rows for every prefix position, (groups * T) x V with T the
  // longest prefix; shorter prefixes are right-padded with their last token.
  ad::Var logits(ad::Tape& t, const DecoderInput& in) const {
    using namespace ad;
    const auto groups = static_cast<Eigen::Index>(in.prefixes.size());
    if (groups == 0) throw std::invalid_argument("decoder: empty batch");
    Eigen::Index len = 0;
    for (const auto& p : in.prefixes) {
      if (p.empty()) throw std::invalid_argument("decoder: empty prefix");
      len = std::max<Eigen::Index>(len, static_cast<Eigen::Index>(p.size()));
    }
    if (len > cfg_.max_len) throw std::invalid_argument("decoder: prefix exceeds max length");
    std::vector<Eigen::Index> ids, pos;
    for (const auto& p : in.prefixes) {
      for (Eigen::Index i = 0; i < len; ++i) {
        const int tok = p[static_cast<std::size_t>(std::min<Eigen::Index>(i, static_cast<Eigen::Index>(p.size()) - 1))];
        if (tok < 0 || tok >= vocab_size_) throw std::invalid_argument("decoder: token outside vocabulary");
        ids.push_back(tok);
        pos.push_back(i);
      }
    }
    Var x = gather_rows(param(t, "tok_emb"), ids) + gather_rows(param(t, "pos_emb"), pos);
    Var vis = linear(in.visual, param(t, "vis_proj"), param(t, "vis_bias"));
    Var rgb;
    if (in.rgb.valid() && !in.collapse) rgb = linear(in.rgb, param(t, "rgb_proj"), param(t, "rgb_bias"));
    Matrix causal = Matrix::Zero(len, len);
    for (Eigen::Index i = 0; i < len; ++i) causal.row(i).head(i + 1).setOnes();

    for (Eigen::Index l = 0; l < cfg_.layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      Var h = layer_norm_rows(x, param(t, p + "ln1_gain"), param(t, p + "ln1_bias"));
      Var sa = block_attention(matmul(h, param(t, p + "wq")), matmul(h, param(t, p + "wk")),
                               matmul(h, param(t, p + "wv")), groups, causal);
      x = x + matmul(sa, param(t, p + "wo"));

      h = layer_norm_rows(x, param(t, p + "ln2_gain"), param(t, p + "ln2_bias"));
      Var ck = param(t, p + "ck"), cv = param(t, p + "cv");
      Var rk, rv;
      if (rgb.valid()) {
        rk = matmul(rgb, ck);
        rv = matmul(rgb, cv);
      }
      Var ca = tape::mfca(matmul(h, param(t, p + "cq")), matmul(vis, ck), matmul(vis, cv), rk, rv,
                          param(t, p + "gate_alpha"), param(t, p + "gate_beta"), groups, in.collapse);
      x = x + matmul(ca, param(t, p + "co"));

      h = layer_norm_rows(x, param(t, p + "ln3_gain"), param(t, p + "ln3_bias"));
      Var ff = linear(gelu(linear(h, param(t, p + "ff1"), param(t, p + "ff1_bias"))), param(t, p + "ff2"),
                      param(t, p + "ff2_bias"));
      x = x + tape::adapter(ff, param(t, p + "adapter_down"), param(t, p + "adapter_up"), cfg_.adapter_scale);
    }
    Var h = layer_norm_rows(x, param(t, "lnf_gain"), param(t, "lnf_bias"));
    return linear(h, param(t, "out"), param(t, "out_bias"));
  }

  // Teacher-forced caption loss: each sequence is prompt + tokens, targets
  // are tokens + end. Token-mean cross-entropy per sequence, averaged over
  // sequences.
  ad::Var loss(ad::Tape& t, const std::vector<std::vector<int>>& captions, const std::vector<int>& prompts,
               const ad::Var& visual, Eigen::Index visual_per_group, int end_token, const ad::Var& rgb = ad::Var(),
               Eigen::Index rgb_per_group = 0) const {
    using namespace ad;
    if (captions.size() != prompts.size()) throw std::invalid_argument("decoder loss: prompt count mismatch");
    DecoderInput in;
    in.visual = visual;
    in.visual_per_group = visual_per_group;
    in.rgb = rgb;
    in.rgb_per_group = rgb_per_group;
    for (std::size_t g = 0; g < captions.size(); ++g) {
      std::vector<int> p{prompts[g]};
      p.insert(p.end(), captions[g].begin(), captions[g].end());
      in.prefixes.push_back(std::move(p));
    }
    Var lg = log_softmax_rows(logits(t, in));
    const Eigen::Index len = lg.rows() / static_cast<Eigen::Index>(captions.size());
    std::vector<Eigen::Index> targets(static_cast<std::size_t>(lg.rows()), 0);
    Matrix weights = Matrix::Zero(lg.rows(), 1);
    for (std::size_t g = 0; g < captions.size(); ++g) {
      const auto n = static_cast<Eigen::Index>(captions[g].size()) + 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index row = static_cast<Eigen::Index>(g) * len + i;
        targets[static_cast<std::size_t>(row)] =
            i + 1 < n ? captions[g][static_cast<std::size_t>(i)] : end_token;
        weights(row, 0) = -1.0 / (static_cast<double>(n) * static_cast<double>(captions.size()));
      }
    }
    return sum(pick(lg, targets) * t.constant(std::move(weights)));
  }

  // Greedy decoding with the RGB stream collapsed away. Returns the tokens
  // after the prompt, without the end token.
  std::vector<int> greedy(const Matrix& visual, int prompt, int end_token) const {
    std::vector<int> prefix{prompt};
    while (static_cast<Eigen::Index>(prefix.size()) < cfg_.max_len) {
      ad::Tape t;
      t.set_grad_enabled(false);
      DecoderInput in;
      in.prefixes = {prefix};
      in.visual = t.constant(visual);
      in.visual_per_group = visual.rows();
      in.collapse = true;
      const Matrix lg = logits(t, in).value();
      Eigen::Index best = 0;
      lg.row(lg.rows() - 1).maxCoeff(&best);
      if (static_cast<int>(best) == end_token) break;
      prefix.push_back(static_cast<int>(best));
    }
    return {prefix.begin() + 1, prefix.end()};
  }

  GatePair gates(Eigen::Index layer) const {
    const std::string p = prefix_ + ".l" + std::to_string(layer) + ".";
    return {store_->at(p + "gate_alpha").value(0, 0), store_->at(p + "gate_beta").value(0, 0), false};
  }

  AdapterBlock adapter(Eigen::Index layer) const {
    const std::string p = prefix_ + ".l" + std::to_string(layer) + ".";
    return {store_->at(p + "adapter_down").value, store_->at(p + "adapter_up").value, cfg_.adapter_scale};
  }

 private:
  ad::Var param(ad::Tape& t, const std::string& name) const { return t.parameter(store_->at(prefix_ + "." + name)); }

  ParameterStore* store_ = nullptr;
  DecoderConfig cfg_;
  int vocab_size_ = 0;
  std::string prefix_;
};

}  // namespace thermaldet
