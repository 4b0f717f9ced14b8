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

#include <gtest/gtest.h>

#include "thermaldet/fusion.hpp"
#include "thermaldet/losses.hpp"
#include "thermaldet/optim.hpp"
#include "thermaldet/text.hpp"

#include <random>

namespace thermaldet {
namespace {

Matrix rnd(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) { return random_normal(rng, r, c, 1.0); }

TEST(Mfca, CollapseIsBitIdenticalToThermalOnlyAttention) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> n(1, 7);
  std::normal_distribution<double> logit(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int nq = n(rng), nt = n(rng), nr = n(rng), d = n(rng) + 1, dv = n(rng);
    const Matrix q = rnd(rng, nq, d), kt = rnd(rng, nt, d), vt = rnd(rng, nt, dv);
    const Matrix kr = rnd(rng, nr, d), vr = rnd(rng, nr, dv);
    GatePair g{logit(rng), logit(rng), true};
    const Matrix fused = mfca_forward(q, kt, vt, kr, vr, g);
    const Matrix thermal = scaled_dot_attention(q, g.alpha() * kt, g.alpha() * vt);
    ASSERT_EQ(fused.rows(), thermal.rows());
    for (Eigen::Index i = 0; i < fused.size(); ++i) ASSERT_EQ(fused.data()[i], thermal.data()[i]) << trial;
    EXPECT_EQ(g.beta(), 0.0);
  }
}

TEST(Mfca, DuplicatedStreamsWithEqualGatesMatchThermalOnly) {
  std::mt19937_64 rng(5);
  const Matrix q = rnd(rng, 3, 4), k = rnd(rng, 5, 4), v = rnd(rng, 5, 2);
  GatePair g{0.7, 0.7, false};
  const Matrix fused = mfca_forward(q, k, v, k, v, g);
  const Matrix thermal = scaled_dot_attention(q, g.alpha() * k, g.alpha() * v);
  EXPECT_TRUE(fused.isApprox(thermal, 1e-12));
}

TEST(Mfca, SingleThermalTokenReturnsGatedValue) {
  std::mt19937_64 rng(6);
  const Matrix q = rnd(rng, 4, 3), k = rnd(rng, 1, 3), v = rnd(rng, 1, 5);
  GatePair g{-0.4, 1.3, false};
  const Matrix out = mfca_forward(q, k, v, Matrix(), Matrix(), g);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_TRUE(out.row(i).isApprox(g.alpha() * v.row(0), 1e-14));
}

TEST(Mfca, RgbKeysWithoutValuesRejected) {
  const Matrix m = Matrix::Ones(2, 2);
  EXPECT_THROW(mfca_forward(m, m, m, m, Matrix(), GatePair{}), std::invalid_argument);
  EXPECT_THROW(mfca_forward(m, m, m, Matrix(), m, GatePair{}), std::invalid_argument);
}

TEST(Mfca, RowsAreConvexCombinationsOfGatedValues) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix q = rnd(rng, 3, 4), kt = rnd(rng, 4, 4), vt = rnd(rng, 4, 1), kr = rnd(rng, 2, 4),
                 vr = rnd(rng, 2, 1);
    GatePair g{0.3, -0.5, false};
    Matrix gated(6, 1);
    gated << g.alpha() * vt, logistic(g.logit_beta) * vr;
    const Matrix out = mfca_forward(q, kt, vt, kr, vr, g);
    for (Eigen::Index i = 0; i < 3; ++i) {
      EXPECT_GE(out(i, 0), gated.minCoeff() - 1e-12);
      EXPECT_LE(out(i, 0), gated.maxCoeff() + 1e-12);
    }
  }
}

TEST(Mfca, TapePathMatchesPlainPath) {
  std::mt19937_64 rng(8);
  const Matrix q = rnd(rng, 6, 4), kt = rnd(rng, 9, 4), vt = rnd(rng, 9, 3), kr = rnd(rng, 3, 4), vr = rnd(rng, 3, 3);
  GatePair g{0.4, -1.1, false};
  ad::Tape t;
  const auto la = t.constant(g.logit_alpha), lb = t.constant(g.logit_beta);
  for (bool collapse : {false, true}) {
    g.inference_collapse = collapse;
    const Matrix batched =
        tape::mfca(t.constant(q), t.constant(kt), t.constant(vt), t.constant(kr), t.constant(vr), la, lb, 3, collapse)
            .value();
    for (Eigen::Index b = 0; b < 3; ++b) {
      const Matrix ref = mfca_forward(q.middleRows(2 * b, 2), kt.middleRows(3 * b, 3), vt.middleRows(3 * b, 3),
                                      kr.middleRows(b, 1), vr.middleRows(b, 1), g);
      EXPECT_TRUE(batched.middleRows(2 * b, 2).isApprox(ref, 1e-12)) << "collapse " << collapse;
    }
  }
}

TEST(Adapter, IdentityCases) {
  std::mt19937_64 rng(9);
  const Matrix x = rnd(rng, 5, 8);
  const AdapterBlock fresh = make_adapter(rng, 8, 4, 1.0);
  EXPECT_EQ(adapter_forward(x, fresh), x);
  AdapterBlock trained = fresh;
  trained.up = rnd(rng, 4, 8);
  trained.scale = 0.0;
  EXPECT_EQ(adapter_forward(x, trained), x);
  EXPECT_THROW(adapter_forward(rnd(rng, 2, 7), fresh), std::invalid_argument);
  AdapterBlock wide = fresh;
  wide.down = rnd(rng, 8, 8);
  wide.up = rnd(rng, 8, 8);
  EXPECT_THROW(adapter_forward(x, wide), std::invalid_argument);
}

TEST(Adapter, MatchesRecomputationAndNormBound) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    AdapterBlock b = make_adapter(rng, 6, 2, 0.7);
    b.up = rnd(rng, 2, 6);
    const Matrix x = rnd(rng, 4, 6);
    const Matrix y = adapter_forward(x, b);
    for (Eigen::Index i = 0; i < 4; ++i) {
      RowVector h(2);
      for (Eigen::Index r = 0; r < 2; ++r) {
        double z = 0.0;
        for (Eigen::Index c = 0; c < 6; ++c) z += x(i, c) * b.down(c, r);
        h(r) = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (z + 0.044715 * z * z * z)));
      }
      const RowVector expected = x.row(i) + 0.7 * h * b.up;
      EXPECT_TRUE(y.row(i).isApprox(expected, 1e-13));
      const double op_norm = Eigen::JacobiSVD<Matrix>(b.up).singularValues()(0);
      EXPECT_LE((y.row(i) - x.row(i)).norm(), 0.7 * op_norm * h.norm() + 1e-12);
    }
  }
}

DecoderConfig tiny_decoder() {
  DecoderConfig cfg;
  cfg.width = 8;
  cfg.layers = 2;
  cfg.max_len = 12;
  cfg.adapter_rank = 2;
  cfg.visual_dim = 5;
  cfg.rgb_dim = 4;
  return cfg;
}

TEST(CaptionDecoder, TeacherForcingShapeAndLossMatchPlainTokenLoss) {
  std::mt19937_64 rng(11);
  ParameterStore store;
  const auto dec = CaptionDecoder::create(store, tiny_decoder(), 9, rng);
  const std::vector<int> caption{3, 5, 4, 8};
  ad::Tape t;
  const Matrix vis = rnd(rng, 3, 5);
  DecoderInput in;
  in.prefixes = {{0, 3, 5, 4, 8}};
  in.visual = t.constant(vis);
  in.visual_per_group = 3;
  const Matrix lg = dec.logits(t, in).value();
  EXPECT_EQ(lg.rows(), 5);  // one row per target token (4 words + end)
  EXPECT_EQ(lg.cols(), 9);
  std::vector<int> targets = caption;
  targets.push_back(2);
  const double ref = caption_token_loss(lg, targets);
  EXPECT_NEAR(dec.loss(t, {caption}, {0}, t.constant(vis), 3, 2).item(), ref, 1e-12);

  DecoderInput bad = in;
  bad.prefixes = {{0, 9}};
  EXPECT_THROW(dec.logits(t, bad), std::invalid_argument);
}

TEST(CaptionDecoder, PaddingDoesNotLeakIntoShorterSequences) {
  std::mt19937_64 rng(12);
  ParameterStore store;
  const auto dec = CaptionDecoder::create(store, tiny_decoder(), 9, rng);
  const Matrix vis = rnd(rng, 6, 5);
  ad::Tape t;
  const double both = dec.loss(t, {{3, 4}, {5, 6, 7, 8, 3}}, {0, 1}, t.constant(vis), 3, 2).item();
  const double a = dec.loss(t, {{3, 4}}, {0}, t.constant(Matrix(vis.topRows(3))), 3, 2).item();
  const double b = dec.loss(t, {{5, 6, 7, 8, 3}}, {1}, t.constant(Matrix(vis.bottomRows(3))), 3, 2).item();
  EXPECT_NEAR(both, 0.5 * (a + b), 1e-12);
}

TEST(FusionGradients, GatesAndAdaptersPassFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(100 + seed);
    ParameterStore store;
    const auto dec = CaptionDecoder::create(store, tiny_decoder(), 9, rng);
    for (auto& p : store) {
      if (p.name.find("adapter_up") != std::string::npos) p.value = random_normal(rng, 2, 8, 0.5);
    }
    store.add("visual", rnd(rng, 4, 5));
    store.add("rgb", rnd(rng, 2, 4));
    auto evaluator = [&](ParameterStore& s, bool with_grad) {
      ad::Tape t;
      t.set_grad_enabled(with_grad);
      ad::Var loss = dec.loss(t, {{3, 4, 5}, {6, 7}}, {0, 1}, t.parameter(s.at("visual")), 2, 2,
                              t.parameter(s.at("rgb")), 1);
      if (with_grad) {
        s.zero_grad();
        t.backward(loss);
      }
      return loss.item();
    };
    const auto report = fd_gradient_check(evaluator, store);
    EXPECT_TRUE(report.passed) << "seed " << seed << ": " << report.diagnostic << " " << report.max_rel_error;
    for (const auto& e : report.entries) {
      if (e.name.find("gate") != std::string::npos || e.name.find("adapter") != std::string::npos) {
        EXPECT_LT(e.max_rel_error, 1e-3) << e.name;
      }
    }
  }
}

TEST(CaptionDecoder, OverfitsOneSceneAndDecodesItGreedily) {
  const Vocabulary vocab({"scene", "with", "three", "objects", "car", "left", "and", "person", "center", "pole",
                          "right", "dog"});
  const std::vector<int> caption =
      vocab.encode("scene with three objects car left and person center and pole right");
  std::mt19937_64 rng(13);
  ParameterStore store;
  DecoderConfig cfg;
  cfg.visual_dim = 8;
  const auto dec = CaptionDecoder::create(store, cfg, vocab.size(), rng);
  const Matrix vis = rnd(rng, 16, 8);
  const int prompt = vocab.id(Vocabulary::kScenePrompt), end = vocab.id(Vocabulary::kEnd);
  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  double loss = 1e9;
  int step = 0;
  for (; step < 2000 && loss >= 0.05; ++step) {
    ad::Tape t;
    ad::Var l = dec.loss(t, {caption}, {prompt}, t.constant(vis), 16, end);
    loss = l.item();
    store.zero_grad();
    t.backward(l);
    opt.step(store, 3e-3);
  }
  EXPECT_LT(loss, 0.05) << "after " << step << " steps";
  EXPECT_EQ(dec.greedy(vis, prompt, end), caption);
}

}  // namespace
}  // namespace thermaldet
