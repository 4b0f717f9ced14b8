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

#include "oracles.hpp"
#include "thermaldet/distillation.hpp"

namespace thermaldet {
namespace {

const SceneGrammar& grammar() {
  static const SceneGrammar g = SceneGrammar::load_default();
  return g;
}

Matrix prototypes(int k, int d = 8) {
  std::mt19937_64 rng(1);
  return random_normal(rng, k, d, 1.0);
}

TEST(Teacher, ZeroNoiseReproducesGroundTruth) {
  const Teacher teacher(prototypes(6), TeacherConfig{});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto rec = generate_scene(grammar(), seed, true);
    const auto out = teacher_infer(rec, teacher);
    ASSERT_NO_THROW(out.validate());
    EXPECT_EQ(out.boxes, rec.boxes);
    EXPECT_EQ(out.labels, rec.class_ids);
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (int c = 0; c < 6; ++c) EXPECT_EQ(out.class_probs[i][static_cast<std::size_t>(c)], c == rec.class_ids[i]);
      EXPECT_EQ(out.region_feats[i], Vector(teacher.prototypes().row(rec.class_ids[i]).transpose()));
      EXPECT_EQ(out.confidences[i], 1.0);
    }
  }
}

TEST(Teacher, JitteredBoxesStayValid) {
  TeacherConfig cfg;
  cfg.box_jitter_sigma = 0.05;
  cfg.seed = 3;
  const Teacher teacher(prototypes(6), cfg);
  int moved = 0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto rec = generate_scene(grammar(), seed, true);
    const auto out = teacher_infer(rec, teacher);
    for (std::size_t i = 0; i < out.size(); ++i) {
      ASSERT_TRUE(out.boxes[i].valid()) << to_string(out.boxes[i]);
      moved += out.boxes[i] == rec.boxes[i] ? 0 : 1;
    }
  }
  EXPECT_GT(moved, 100);
  // Degenerate extremes: a box on the border jittered hard.
  TeacherConfig wild;
  wild.box_jitter_sigma = 5.0;
  const Teacher t2(prototypes(1), wild);
  TrainingRecord rec = generate_scene(grammar(), 1, true);
  std::vector<Box> gt(200, Box{0.0, 0.0, 0.01, 0.01});
  std::vector<int> labels(200, 0);
  for (const auto& b : t2.infer(rec, gt, labels).boxes) ASSERT_TRUE(b.valid()) << to_string(b);
}

TEST(Teacher, FlipProbabilityOneFlipsEveryLabel) {
  TeacherConfig cfg;
  cfg.label_flip_prob = 1.0;
  const Teacher teacher(prototypes(2), cfg);
  const auto rec = generate_scene(grammar(), 9, true);
  std::vector<int> labels;
  for (std::size_t i = 0; i < rec.boxes.size(); ++i) labels.push_back(static_cast<int>(i % 2));
  const auto out = teacher.infer(rec, rec.boxes, labels);
  for (std::size_t i = 0; i < labels.size(); ++i) EXPECT_EQ(out.labels[i], 1 - labels[i]);
}

TEST(Teacher, TemperatureSoftensRowsAndNoiseIsDeterministic) {
  TeacherConfig cfg;
  cfg.score_temperature = 1.0;
  cfg.feature_noise_sigma = 0.3;
  cfg.box_jitter_sigma = 0.02;
  cfg.label_flip_prob = 0.3;
  cfg.seed = 11;
  const Teacher teacher(prototypes(6), cfg);
  const auto rec = generate_scene(grammar(), 4, true);
  const auto a = teacher_infer(rec, teacher), b = teacher_infer(rec, teacher);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.class_probs, b.class_probs);
  EXPECT_EQ(a.region_feats, b.region_feats);
  const double top = std::exp(1.0) / (std::exp(1.0) + 5.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a.class_probs[i][static_cast<std::size_t>(a.labels[i])], top, 1e-12);
  }
  cfg.seed = 12;
  const auto c = teacher_infer(rec, Teacher(prototypes(6), cfg));
  EXPECT_NE(a.region_feats, c.region_feats);
}

TEST(Teacher, RegistryIsFrozenAndUntrainable) {
  const Teacher teacher(prototypes(6), TeacherConfig{});
  ASSERT_GT(teacher.store().size(), 0u);
  for (const auto& p : teacher.store()) {
    EXPECT_FALSE(p.trainable) << p.name;
    EXPECT_TRUE(p.frozen) << p.name;
  }
  EXPECT_EQ(teacher.store().element_count(/*updatable_only=*/true), 0u);
  EXPECT_THROW(teacher_infer(generate_scene(grammar(), 1, false), teacher), std::invalid_argument);
  TeacherConfig bad;
  bad.label_flip_prob = 1.5;
  EXPECT_THROW(Teacher(prototypes(2), bad), std::invalid_argument);
}

DetectionSet two_objects() {
  DetectionSet d;
  d.boxes = {Box{0.1, 0.1, 0.4, 0.4}, Box{0.5, 0.5, 0.9, 0.8}};
  d.class_probs = {{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}};
  Vector e0 = Vector::Zero(4), e1 = Vector::Zero(4);
  e0(0) = 1.0;
  e1(1) = 1.0;
  d.region_feats = {e0, e1};
  d.confidences = {0.7, 0.8};
  d.labels = {0, 2};
  return d;
}

TEST(KdBatchLoss, IdenticalStudentGivesZeroFragment) {
  const DetectionSet t = two_objects();
  const auto frag = kd_batch_loss(t, t, 0.01, BatchKind::kPaired);
  ASSERT_TRUE(frag.has_value());
  EXPECT_NEAR(frag->get(LossTerm::kKdBox), 0.0, 1e-15);
  EXPECT_NEAR(frag->get(LossTerm::kKdSem), 0.0, 1e-15);  // orthogonal negatives at tau 0.01
  EXPECT_NEAR(frag->get(LossTerm::kKdConf), 0.0, 1e-15);
  EXPECT_EQ(frag->active_terms().size(), 3u);
}

TEST(KdBatchLoss, AbsentWithoutMatchesAndRejectedOffPairedBatches) {
  DetectionSet t = two_objects(), s = two_objects();
  s.boxes = {Box{0.0, 0.6, 0.05, 0.7}, Box{0.9, 0.0, 1.0, 0.05}};
  std::vector<std::string> log;
  ScopedLogSink sink([&](const std::string& m) { log.push_back(m); });
  EXPECT_FALSE(kd_batch_loss(t, s, 0.1, BatchKind::kPaired).has_value());
  ASSERT_EQ(log.size(), 1u);
  EXPECT_NE(log[0].find("0 of 2"), std::string::npos);
  EXPECT_THROW(kd_batch_loss(t, t, 0.1, BatchKind::kSynthetic), std::invalid_argument);
  EXPECT_THROW(kd_batch_loss(t, t, 0.1, BatchKind::kCaptionOnly), std::invalid_argument);
}

TEST(KdBatchLoss, ComposesTheTermOracles) {
  // One pair at GIoU 0 (verified by the reference), equal class rows, one feature.
  DetectionSet t, s;
  t.boxes = {Box{0.0, 0.0, 0.5, 1.0}};
  s.boxes = {Box{0.5, 0.0, 1.0, 1.0}};
  ASSERT_NEAR(oracle::giou_reference(t.boxes[0], s.boxes[0]), 0.0, 1e-15);
  t.class_probs = s.class_probs = {{0.25, 0.75}};
  t.region_feats = {Vector::Ones(3)};
  s.region_feats = {Vector::LinSpaced(3, -1.0, 2.0)};
  t.confidences = s.confidences = {0.75};
  t.labels = s.labels = {1};
  const auto frag = kd_fragment(t, s, {{0, 0}}, 0.07);
  EXPECT_NEAR(frag.get(LossTerm::kKdBox), 1.0, 1e-12);
  EXPECT_NEAR(frag.get(LossTerm::kKdSem), 0.0, 1e-12);
  EXPECT_NEAR(frag.get(LossTerm::kKdConf), 0.0, 1e-12);
}

TEST(KdBatchLoss, MatchedPairsOnlyAndMeanOverPairs) {
  DetectionSet t = two_objects(), s = two_objects();
  s.boxes[1] = Box{0.0, 0.9, 0.05, 1.0};  // unmatched student prediction
  s.class_probs[0] = {0.2, 0.5, 0.3};
  const auto frag = kd_batch_loss(t, s, 0.1, BatchKind::kPaired);
  ASSERT_TRUE(frag.has_value());
  EXPECT_NEAR(frag->get(LossTerm::kKdConf), kd_conf_loss(t.class_probs[0], s.class_probs[0]), 1e-15);
  EXPECT_NEAR(frag->get(LossTerm::kKdSem), 0.0, 1e-15);  // single candidate
}

TEST(PseudoPhrases, SourcePreferenceAndOrder) {
  const std::vector<std::string> names = {"person", "car", "bicycle"};
  DetectionSet t;
  t.labels = {0, 1};
  t.boxes = {Box{0, 0, 0.5, 0.5}, Box{0.5, 0.5, 1, 1}};
  EXPECT_EQ(derive_pseudo_phrases(&t, names), (std::vector<std::string>{"person", "car"}));
  t.labels = {1, 0};
  EXPECT_EQ(derive_pseudo_phrases(&t, names), (std::vector<std::string>{"car", "person"}));
  const std::vector<std::string> labels = {"vehicle"};
  EXPECT_EQ(derive_pseudo_phrases(nullptr, names, labels), labels);
  DetectionSet empty;
  EXPECT_EQ(derive_pseudo_phrases(&empty, names, labels), labels);
  EXPECT_TRUE(derive_pseudo_phrases(nullptr, names).empty());
}

}  // namespace
}  // namespace thermaldet
