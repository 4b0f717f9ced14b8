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

#include "thermaldet/geometry.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

namespace thermaldet {
namespace {

TEST(Iou, Examples) {
  const Box a{0.1, 0.1, 0.4, 0.4};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 0.2, 0.2}, {0.5, 0.5, 0.9, 0.9}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {0, 0, 0.5, 1}), 0.5);
}

TEST(Iou, DegenerateBoxRejected) {
  EXPECT_THROW(iou({0.2, 0.2, 0.2, 0.5}, {0, 0, 1, 1}), std::invalid_argument);
  EXPECT_THROW(giou({0, 0, 1, 1}, {0.3, 0.4, 0.6, 0.4}), std::invalid_argument);
  EXPECT_THROW(ciou({0, 0, 1.2, 1}, {0, 0, 1, 1}), std::invalid_argument);
  EXPECT_THROW(box_l1({0.5, 0, 0.4, 1}, {0, 0, 1, 1}), std::invalid_argument);
}

TEST(Giou, Examples) {
  const Box a{0.1, 0.2, 0.6, 0.9};
  EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(giou({0, 0, 0.5, 1}, {0.5, 0, 1, 1}), 0.0);
  // Independent reference: intersection 0, union 0.125, hull 1.
  EXPECT_NEAR(oracle::giou_reference({0, 0, 0.25, 0.25}, {0.75, 0.75, 1, 1}), -0.875, 1e-15);
  EXPECT_NEAR(giou({0, 0, 0.25, 0.25}, {0.75, 0.75, 1, 1}), -0.875, 1e-15);
}

TEST(Ciou, Examples) {
  const Box a{0.1, 0.2, 0.6, 0.9};
  EXPECT_DOUBLE_EQ(ciou(a, a), 1.0);
  // Concentric, same aspect ratio, half scale: both penalties vanish.
  const Box outer{0.2, 0.2, 0.6, 0.8};
  const Box inner{0.3, 0.35, 0.5, 0.65};
  EXPECT_NEAR(ciou(outer, inner), iou(outer, inner), 1e-12);
  EXPECT_NEAR(iou(outer, inner), 0.25, 1e-12);
  const Box far_a{0, 0, 0.2, 0.2}, far_b{0.8, 0.8, 1, 1};
  EXPECT_NEAR(ciou(far_a, far_b), oracle::ciou_reference(far_a, far_b), 1e-12);
  EXPECT_LT(ciou(far_a, far_b), 0.0);
}

TEST(BoxL1, Examples) {
  const Box a{0.1, 0.1, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(box_l1(a, a), 0.0);
  Box b = a;
  b.x1 = 0.2;
  EXPECT_NEAR(box_l1(a, b), 0.1, 1e-15);
  EXPECT_NEAR(box_l1({0, 0, 0.5, 0.5}, {0.1, 0.1, 0.6, 0.6}), 0.4, 1e-15);
}

TEST(OverlapProperties, RandomPairs) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
    const double i = iou(a, b), g = giou(a, b);
    EXPECT_GE(i, 0.0);
    EXPECT_LE(i, 1.0);
    EXPECT_GT(g, -1.0);
    EXPECT_LE(g, 1.0);
    EXPECT_LE(g, i + 1e-15);
    EXPECT_DOUBLE_EQ(i, iou(b, a));
    EXPECT_DOUBLE_EQ(g, giou(b, a));
    EXPECT_NEAR(ciou(a, b), ciou(b, a), 1e-15);
    EXPECT_DOUBLE_EQ(box_l1(a, b), box_l1(b, a));
    EXPECT_GT(box_l1(a, b), 0.0);
    EXPECT_NEAR(i, oracle::iou_reference(a, b), 1e-12);
    EXPECT_NEAR(g, oracle::giou_reference(a, b), 1e-12);
  }
}

TEST(OverlapProperties, GiouEqualsIouIffHullEqualsUnion) {
  // Nested boxes: hull equals the outer box, which is the union.
  EXPECT_DOUBLE_EQ(giou({0.1, 0.1, 0.9, 0.9}, {0.2, 0.3, 0.5, 0.6}), iou({0.1, 0.1, 0.9, 0.9}, {0.2, 0.3, 0.5, 0.6}));
  // Offset boxes: hull strictly larger than union.
  EXPECT_LT(giou({0.1, 0.1, 0.5, 0.5}, {0.3, 0.3, 0.7, 0.7}), iou({0.1, 0.1, 0.5, 0.5}, {0.3, 0.3, 0.7, 0.7}));
}

TEST(OverlapProperties, GiouAgreesWithRasterEstimate) {
  std::mt19937_64 rng(512);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
    worst = std::max(worst, std::abs(giou(a, b) - oracle::raster_giou(a, b, 512)));
  }
  EXPECT_LT(worst, 2e-3);
}

// ------------------------------------------------------------------ matching

TEST(Matching, SinglePairAboveGate) {
  const std::vector<Box> t{{0.1, 0.1, 0.5, 0.5}};
  const std::vector<Box> s{{0.1, 0.1, 0.5, 0.48}};
  ASSERT_GE(iou(t[0], s[0]), 0.9);
  const auto m = match_boxes(t, s, 0.5);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0], std::make_pair(std::size_t{0}, std::size_t{0}));
  EXPECT_TRUE(m.unmatched_teacher.empty());
  EXPECT_TRUE(m.unmatched_student.empty());
}

TEST(Matching, DisjointBoxesStayUnmatched) {
  const std::vector<Box> t{{0, 0, 0.2, 0.2}};
  const std::vector<Box> s{{0.5, 0.5, 0.9, 0.9}};
  const auto m = match_boxes(t, s, 0.5);
  EXPECT_TRUE(m.pairs.empty());
  EXPECT_EQ(m.unmatched_teacher.size(), 1u);
  EXPECT_EQ(m.unmatched_student.size(), 1u);
}

TEST(Matching, EmptySetsAreNotAnError) {
  const std::vector<Box> none;
  const std::vector<Box> one{{0, 0, 0.5, 0.5}};
  EXPECT_TRUE(match_boxes(none, none).pairs.empty());
  EXPECT_EQ(match_boxes(none, one).unmatched_student.size(), 1u);
  EXPECT_EQ(match_boxes(one, none).unmatched_teacher.size(), 1u);
}

TEST(Matching, GateOutsideOpenIntervalRejected) {
  const std::vector<Box> one{{0, 0, 0.5, 0.5}};
  EXPECT_THROW(match_boxes(one, one, 0.0), std::invalid_argument);
  EXPECT_THROW(match_boxes(one, one, 1.0), std::invalid_argument);
}

TEST(Matching, CrossingTwoByTwoAgreesWithEnumeration) {
  // Student 0 overlaps both teachers; greedy-by-index would take the wrong one.
  const std::vector<Box> t{{0.10, 0.10, 0.50, 0.50}, {0.20, 0.10, 0.60, 0.50}};
  const std::vector<Box> s{{0.15, 0.10, 0.55, 0.50}, {0.10, 0.12, 0.50, 0.52}};
  const auto m = match_boxes(t, s, 0.5);
  const auto ref = oracle::brute_force_match(t, s, 0.5);
  EXPECT_EQ(m.pairs.size(), ref.pairs);
  EXPECT_NEAR(m.total_cost, ref.cost, 1e-12);
  ASSERT_EQ(m.pairs.size(), 2u);
  EXPECT_EQ(m.pairs[0].second, 1u);
  EXPECT_EQ(m.pairs[1].second, 0u);
}

TEST(Matching, AgreesWithBruteForceUpToSixBySix) {
  std::mt19937_64 rng(66);
  std::uniform_int_distribution<int> count(0, 6);
  for (int trial = 0; trial < 400; ++trial) {
    const auto t = oracle::clustered_boxes(rng, count(rng));
    const auto s = oracle::clustered_boxes(rng, count(rng));
    const double gate = trial % 2 == 0 ? 0.5 : 0.2;
    const auto m = match_boxes(t, s, gate);
    const auto ref = oracle::brute_force_match(t, s, gate);
    ASSERT_EQ(m.pairs.size(), ref.pairs) << "trial " << trial;
    EXPECT_NEAR(m.total_cost, ref.cost, 1e-9) << "trial " << trial;
    std::vector<int> seen_t(t.size(), 0), seen_s(s.size(), 0);
    for (auto [ti, si] : m.pairs) {
      EXPECT_GE(iou(t[ti], s[si]), gate);
      EXPECT_EQ(++seen_t[ti], 1);
      EXPECT_EQ(++seen_s[si], 1);
    }
    EXPECT_EQ(m.pairs.size() + m.unmatched_teacher.size(), t.size());
    EXPECT_EQ(m.pairs.size() + m.unmatched_student.size(), s.size());
  }
}

}  // namespace
}  // namespace thermaldet
