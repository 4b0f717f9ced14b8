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

#include "thermaldet/numerics.hpp"
#include "thermaldet/ops.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace thermaldet {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

TEST(CosineSim, Examples) {
  const Vector u = vec({0.6, 0.8});
  // The 1e-12 denominator guard shifts the result by about 1e-12.
  EXPECT_NEAR(cosine_sim(u, u), 1.0, 2e-12);
  EXPECT_DOUBLE_EQ(cosine_sim(vec({1, 0}), vec({0, 1})), 0.0);
  EXPECT_NEAR(cosine_sim(vec({1, 1}), vec({1, 0})), 0.70710678, 1e-8);
}

TEST(CosineSim, DimensionMismatchRejected) {
  EXPECT_THROW(cosine_sim(vec({1, 0}), vec({1, 0, 0})), std::invalid_argument);
}

TEST(CosineSim, ZeroVectorIsGuarded) {
  EXPECT_DOUBLE_EQ(cosine_sim(vec({0, 0}), vec({1, 0})), 0.0);
}

TEST(Softmax, Examples) {
  const std::vector<double> a{0.0, 0.0};
  auto p = softmax(a, 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);

  const std::vector<double> b{0.0, std::log(3.0)};
  p = softmax(b, 1.0);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
  const std::vector<double> base{0.0, 1.7};
  const auto ref = softmax(base, 0.5);
  for (double c : {-1000.0, -3.0, 2.5, 800.0}) {
    const std::vector<double> shifted{c, c + 1.7};
    const auto p = softmax(shifted, 0.5);
    EXPECT_NEAR(p[0], ref[0], 1e-12);
    EXPECT_NEAR(p[1], ref[1], 1e-12);
  }
}

TEST(Softmax, RejectsNonPositiveTemperature) {
  const std::vector<double> a{1.0, 2.0};
  EXPECT_THROW(softmax(a, 0.0), std::invalid_argument);
  EXPECT_THROW(softmax(a, -1.0), std::invalid_argument);
}

TEST(Softmax, SumsToOneForRandomLogits) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 30.0);
  std::uniform_real_distribution<double> tau(0.01, 5.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(1 + trial % 17);
    for (double& x : logits) x = n(rng);
    const auto p = softmax(logits, tau(rng));
    double s = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, Examples) {
  Vector y = layer_norm(vec({1, -1}), 0.0);
  EXPECT_NEAR(y(0), 1.0, 1e-12);
  EXPECT_NEAR(y(1), -1.0, 1e-12);

  y = layer_norm(vec({5, 5}));
  EXPECT_NEAR(y(0), 0.0, 1e-12);
  EXPECT_NEAR(y(1), 0.0, 1e-12);

  y = layer_norm(vec({2, 0}), 0.0);
  EXPECT_NEAR(y(0), 1.0, 1e-12);
  EXPECT_NEAR(y(1), -1.0, 1e-12);
}

TEST(LayerNorm, AffineApplied) {
  const Vector y = layer_norm(vec({2, 0}), vec({2, 3}), vec({1, 1}), 0.0);
  EXPECT_NEAR(y(0), 3.0, 1e-12);
  EXPECT_NEAR(y(1), -2.0, 1e-12);
}

TEST(LayerNorm, NormalizedStatisticsForRandomInputs) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    // Scales from 0.05 to 50, well below and well above unit variance.
    const double scale = 0.05 * std::pow(10.0, (trial % 4));
    Vector x(2 + trial % 30);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = 3.0 + scale * n(rng);
    const Vector y = layer_norm(x);
    const double mu = y.mean();
    const double var = (y.array() - mu).square().mean();
    EXPECT_LT(std::abs(mu), 1e-9);
    EXPECT_LT(std::abs(var - 1.0), 1e-6);
  }
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Matrix q = Matrix::Random(3, 4);
  Matrix k = Matrix::Random(1, 4);
  Matrix v = Matrix::Random(1, 5);
  Matrix out = scaled_dot_attention(q, k, v);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_TRUE(out.row(i).isApprox(v.row(0), 1e-14));
}

TEST(Attention, IdenticalRowsReturnThatRow) {
  Matrix q = Matrix::Random(2, 3);
  RowVector kr = RowVector::Random(3), vr = RowVector::Random(4);
  Matrix k = kr.replicate(5, 1), v = vr.replicate(5, 1);
  Matrix out = scaled_dot_attention(q, k, v);
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_TRUE(out.row(i).isApprox(vr, 1e-14));
}

TEST(Attention, MaskedKeyGetsZeroWeight) {
  Matrix q = Matrix::Random(1, 3);
  Matrix k = Matrix::Random(2, 3);
  Matrix v = Matrix::Random(2, 3);
  Matrix keep(1, 2);
  keep << 1.0, 0.0;
  Matrix out = scaled_dot_attention(q, k, v, keep);
  EXPECT_EQ(out.row(0), v.row(0));
}

TEST(Attention, AllMaskedRejected) {
  Matrix q = Matrix::Random(1, 3), k = Matrix::Random(2, 3), v = Matrix::Random(2, 3);
  Matrix keep = Matrix::Zero(1, 2);
  EXPECT_THROW(scaled_dot_attention(q, k, v, keep), std::invalid_argument);
}

TEST(Attention, RowsAreConvexCombinations) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index n = 2 + trial % 6;
    Matrix q(2, 4), k(n, 4), v(n, 3);
    for (auto* m : {&q, &k, &v}) {
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
    }
    Matrix keep = Matrix::Ones(2, n);
    keep(0, 0) = 0.0;
    Matrix out = scaled_dot_attention(q, k, v, keep);
    for (Eigen::Index c = 0; c < 3; ++c) {
      EXPECT_LE(out(0, c), v.col(c).tail(n - 1).maxCoeff() + 1e-12);
      EXPECT_GE(out(0, c), v.col(c).tail(n - 1).minCoeff() - 1e-12);
      EXPECT_LE(out(1, c), v.col(c).maxCoeff() + 1e-12);
      EXPECT_GE(out(1, c), v.col(c).minCoeff() - 1e-12);
    }
  }
}

// ---------------------------------------------------------- FD gradient check

TEST(FdGradientCheck, SquareAtThreePasses) {
  ParameterStore store;
  store.add("x", Matrix::Constant(1, 1, 3.0));
  auto loss = [](ParameterStore& s, bool with_grad) {
    const double x = s.at("x").value(0, 0);
    if (with_grad) {
      s.zero_grad();
      s.at("x").grad(0, 0) = 2.0 * x;
    }
    return x * x;
  };
  const auto report = fd_gradient_check(loss, store);
  EXPECT_TRUE(report.passed) << report.diagnostic;
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_NEAR(report.entries[0].analytic, 6.0, 1e-12);
}

TEST(FdGradientCheck, PlantedFaultIsReported) {
  ParameterStore store;
  store.add("x", Matrix::Constant(1, 1, 3.0));
  auto loss = [](ParameterStore& s, bool with_grad) {
    const double x = s.at("x").value(0, 0);
    if (with_grad) {
      s.zero_grad();
      s.at("x").grad(0, 0) = 2.0 * (2.0 * x);
    }
    return x * x;
  };
  const auto report = fd_gradient_check(loss, store);
  EXPECT_FALSE(report.passed);
  EXPECT_NE(report.diagnostic.find("x"), std::string::npos);
}

TEST(FdGradientCheck, NonDeterministicEvaluatorDiagnosed) {
  ParameterStore store;
  store.add("x", Matrix::Constant(1, 1, 1.0));
  int calls = 0;
  auto loss = [&calls](ParameterStore& s, bool) { return s.at("x").value(0, 0) + 1e-3 * (++calls); };
  const auto report = fd_gradient_check(loss, store);
  EXPECT_FALSE(report.passed);
  EXPECT_FALSE(report.deterministic);
}

TEST(FdGradientCheck, FrozenEntriesAreSkipped) {
  ParameterStore store;
  store.add("x", Matrix::Constant(1, 1, 2.0));
  store.add("frozen", Matrix::Constant(1, 1, 5.0), true, true);
  auto loss = [](ParameterStore& s, bool with_grad) {
    const double x = s.at("x").value(0, 0), f = s.at("frozen").value(0, 0);
    if (with_grad) {
      s.zero_grad();
      s.at("x").grad(0, 0) = f;
    }
    return x * f;
  };
  const auto report = fd_gradient_check(loss, store);
  EXPECT_TRUE(report.passed);
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_EQ(report.entries[0].name, "x");
}

// Random two-layer MLP feeding a cosine loss, gradients from the tape.
TEST(FdGradientCheck, MlpCosineLossOnTape) {
  for (unsigned seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.7);
    auto rnd = [&](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
      return m;
    };
    ParameterStore store;
    store.add("w1", rnd(5, 6));
    store.add("b1", rnd(1, 6));
    store.add("w2", rnd(6, 4));
    store.add("b2", rnd(1, 4));
    const Matrix x = rnd(3, 5);
    const Matrix target = rnd(3, 4);
    auto loss = [&](ParameterStore& s, bool with_grad) {
      ad::Tape t;
      t.set_grad_enabled(with_grad);
      auto h = ad::gelu(ad::linear(t.constant(x), t.parameter(s.at("w1")), t.parameter(s.at("b1"))));
      auto y = ad::linear(h, t.parameter(s.at("w2")), t.parameter(s.at("b2")));
      auto c = ad::cosine_rows(y, t.constant(target));
      std::vector<Eigen::Index> diag{0, 1, 2};
      auto l = ad::neg(ad::mean(ad::pick(c, diag)));
      if (with_grad) {
        s.zero_grad();
        t.backward(l);
      }
      return l.item();
    };
    const auto report = fd_gradient_check(loss, store);
    EXPECT_TRUE(report.passed) << "seed " << seed << ": " << report.diagnostic << " max "
                               << report.max_rel_error;
  }
}

}  // namespace
}  // namespace thermaldet
