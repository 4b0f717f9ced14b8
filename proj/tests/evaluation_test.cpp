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

#include "ap_fixtures.hpp"
#include "oracles.hpp"
#include "thermaldet/evaluation.hpp"

#include <filesystem>
#include <fstream>

namespace thermaldet {
namespace {

EvalOptions options(int classes, ApIntegration mode = ApIntegration::kInterpolated101) {
  EvalOptions o;
  for (int c = 0; c < classes; ++c) o.class_names.push_back("c" + std::to_string(c));
  o.integration = mode;
  return o;
}

TEST(ComputeAp, HandComputedFixtures) {
  for (const auto& f : fixtures::ap_fixtures()) {
    const auto r = compute_ap(f.preds, f.gts, options(f.classes));
    if (!std::isnan(f.ap)) EXPECT_DOUBLE_EQ(r.ap, f.ap) << f.name;
    if (!std::isnan(f.ap50)) EXPECT_DOUBLE_EQ(r.ap50, f.ap50) << f.name;
    if (!std::isnan(f.ap75)) EXPECT_DOUBLE_EQ(r.ap75, f.ap75) << f.name;
    const auto exact = compute_ap(f.preds, f.gts, options(f.classes, ApIntegration::kExact));
    EXPECT_DOUBLE_EQ(exact.ap50, f.ap50_exact) << f.name;
  }
}

TEST(ComputeAp, TwoGroundTruthCaseUnderBothIntegrations) {
  const auto all = fixtures::ap_fixtures();
  const auto& f = all[2];
  EXPECT_EQ(compute_ap(f.preds, f.gts, options(1, ApIntegration::kExact)).ap50, 0.5);
  EXPECT_EQ(compute_ap(f.preds, f.gts, options(1)).ap50, 51.0 / 101.0);
}

// Random fixtures with pairwise-disjoint ground truth and noisy predictions.
struct Random {
  std::vector<DetectionSet> preds;
  std::vector<GroundTruth> gts;
  oracle::ApOracleInput oracle;
};

Random random_fixture(std::mt19937_64& rng, int classes, int max_preds) {
  std::uniform_int_distribution<int> n_img(1, 3), n_gt(0, 3), cls(0, classes - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0), jitter(-0.04, 0.04);
  Random out;
  const int images = n_img(rng);
  int budget = max_preds;
  for (int im = 0; im < images; ++im) {
    GroundTruth g;
    const int ng = n_gt(rng);
    for (int k = 0; k < ng; ++k) {
      // Disjoint slots along the diagonal.
      const double x = 0.25 * k + 0.02, y = 0.25 * k + 0.02;
      g.boxes.push_back(Box{x, y, x + 0.1 + 0.1 * u(rng), y + 0.1 + 0.1 * u(rng)});
      g.labels.push_back(cls(rng));
    }
    std::vector<Box> pb;
    std::vector<int> pl;
    std::vector<double> ps;
    const int np = std::uniform_int_distribution<int>(0, std::max(0, std::min(4, budget)))(rng);
    budget -= np;
    for (int k = 0; k < np; ++k) {
      Box b;
      if (!g.boxes.empty() && u(rng) < 0.7) {
        const Box& t = g.boxes[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, ng - 1)(rng))];
        b = Box{std::clamp(t.x1 + jitter(rng), 0.0, 0.98), std::clamp(t.y1 + jitter(rng), 0.0, 0.98), 0.0, 0.0};
        b.x2 = std::clamp(t.x2 + jitter(rng), b.x1 + 0.01, 1.0);
        b.y2 = std::clamp(t.y2 + jitter(rng), b.y1 + 0.01, 1.0);
      } else {
        b = oracle::random_box(rng, 0.02);
      }
      pb.push_back(b);
      pl.push_back(cls(rng));
      ps.push_back(std::round(u(rng) * 1e6) / 1e6);
    }
    out.preds.push_back(fixtures::dets(pb, pl, ps, classes));
    out.gts.push_back(g);
    out.oracle.pred_boxes.push_back(pb);
    out.oracle.pred_labels.push_back(pl);
    out.oracle.pred_scores.push_back(ps);
    out.oracle.gt_boxes.push_back(g.boxes);
    out.oracle.gt_labels.push_back(g.labels);
  }
  return out;
}

TEST(ComputeAp, AgreesWithBruteForcePrConstruction) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const auto f = random_fixture(rng, 2, 10);
    for (auto mode : {ApIntegration::kInterpolated101, ApIntegration::kExact}) {
      const auto r = compute_ap(f.preds, f.gts, options(2, mode));
      const double ref = oracle::brute_force_map(f.oracle, 2, coco_thresholds(), mode == ApIntegration::kExact);
      bool any_gt = false;
      for (const auto& g : f.gts) any_gt = any_gt || !g.boxes.empty();
      ASSERT_NEAR(r.ap, any_gt ? ref : 0.0, 1e-12) << trial;
    }
  }
}

TEST(ComputeAp, RankInvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    auto f = random_fixture(rng, 3, 12);
    const auto before = compute_ap(f.preds, f.gts, options(3));
    for (auto& p : f.preds) {
      for (double& s : p.confidences) s = std::exp(5.0 * s) - 7.0;
    }
    const auto after = compute_ap(f.preds, f.gts, options(3));
    EXPECT_EQ(before, after) << trial;
  }
}

TEST(ComputeAp, DuplicateBelowATruePositiveNeverHelps) {
  std::mt19937_64 rng(23);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto f = random_fixture(rng, 2, 10);
    const auto base = compute_ap(f.preds, f.gts, options(2));
    for (std::size_t im = 0; im < f.preds.size(); ++im) {
      for (std::size_t i = 0; i < f.preds[im].size(); ++i) {
        auto g = f;
        auto& d = g.preds[im];
        d.boxes.push_back(d.boxes[i]);
        d.labels.push_back(d.labels[i]);
        d.confidences.push_back(d.confidences[i] - 1e-7);
        d.class_probs.push_back(d.class_probs[i]);
        d.region_feats.push_back(d.region_feats[i]);
        EXPECT_LE(compute_ap(g.preds, g.gts, options(2)).ap, base.ap + 1e-12) << trial;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(ComputeAp, MeanEqualsMeanOfThresholdsAndValuesInRange) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = random_fixture(rng, 3, 12);
    const auto r = compute_ap(f.preds, f.gts, options(3));
    double s = 0.0;
    for (double v : r.per_threshold) s += v;
    EXPECT_NEAR(r.ap, s / static_cast<double>(r.per_threshold.size()), 1e-9);
    for (double v : {r.ap, r.ap50, r.ap75}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(ComputeAp, ScaleBucketsUseAreaFractions) {
  const Box tiny{0.10, 0.10, 0.14, 0.14};   // 0.0016 < 0.25%
  const Box mid{0.50, 0.50, 0.60, 0.60};    // 1%
  const Box large{0.20, 0.60, 0.60, 0.95};  // 14%
  std::vector<DetectionSet> preds = {fixtures::dets({tiny, mid}, {0, 0}, {0.9, 0.8}, 1)};
  std::vector<GroundTruth> gts = {{{tiny, mid, large}, {0, 0, 0}}};
  const auto r = compute_ap(preds, gts, options(1));
  EXPECT_DOUBLE_EQ(r.per_scale.at("small"), 1.0);
  EXPECT_DOUBLE_EQ(r.per_scale.at("medium"), 1.0);
  EXPECT_DOUBLE_EQ(r.per_scale.at("large"), 0.0);
  EXPECT_DOUBLE_EQ(r.per_class.at("c0"), r.ap);
}

TEST(ComputeAp, RejectsUnknownClassesAndCapsPredictions) {
  std::vector<DetectionSet> preds = {fixtures::dets({Box{0, 0, 1, 1}}, {3}, {0.5}, 4)};
  std::vector<GroundTruth> gts = {{{Box{0, 0, 1, 1}}, {0}}};
  EXPECT_THROW(compute_ap(preds, gts, options(2)), std::invalid_argument);

  // A true positive ranked 101st is cut by the default cap.
  std::vector<Box> boxes(100, Box{0.8, 0.8, 0.9, 0.9});
  boxes.push_back(Box{0.0, 0.0, 0.5, 0.5});
  std::vector<double> scores(100, 0.9);
  scores.push_back(0.1);
  preds = {fixtures::dets(boxes, std::vector<int>(101, 0), scores, 1)};
  gts = {{{Box{0.0, 0.0, 0.5, 0.5}}, {0}}};
  EXPECT_EQ(compute_ap(preds, gts, options(1)).ap50, 0.0);
  auto wide = options(1);
  wide.max_detections = 101;
  EXPECT_GT(compute_ap(preds, gts, wide).ap50, 0.0);
}

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("thermaldet_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

TEST(Reports, JsonRoundTrip) {
  std::mt19937_64 rng(25);
  const auto f = random_fixture(rng, 3, 12);
  const auto r = compute_ap(f.preds, f.gts, options(3));
  const std::string path = temp_file("report.json");
  emit_report({{"run", r}}, path, ReportFormat::kJson);
  const auto back = read_json_reports(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].first, "run");
  EXPECT_EQ(back[0].second, r);
  std::filesystem::remove(path);
}

TEST(Reports, CsvRowsWithDeltaAndPerClassSection) {
  EvalReport a, b;
  a.ap = 0.2;
  a.ap50 = 0.4;
  a.ap75 = 0.1;
  b.ap = 0.3;
  b.ap50 = 0.5;
  b.ap75 = 0.1;
  const std::string path = temp_file("report.csv");
  emit_report({{"base", a}, {"ours", b}}, path, ReportFormat::kCsv);
  EXPECT_EQ(slurp(path),
            "config,AP,AP50,AP75\n"
            "base,0.2000,0.4000,0.1000\n"
            "ours,0.3000,0.5000,0.1000\n"
            "delta_pct,50.0000,25.0000,0.0000\n"
            "\nconfig,class,AP\n");
  std::filesystem::remove(path);
  EXPECT_THROW(emit_report({{"x", a}}, "/nonexistent-dir/r.csv", ReportFormat::kCsv), std::runtime_error);
}

}  // namespace
}  // namespace thermaldet
