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

// COCO-style average precision with per-class and per-scale breakdowns, and
// JSON / CSV report emission.

#pragma once

#include "thermaldet/detection.hpp"
#include "thermaldet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;
};

enum class ApIntegration { kInterpolated101, kExact };

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct EvalOptions {
  std::vector<std::string> class_names;
  std::vector<double> iou_thresholds = coco_thresholds();
  ApIntegration integration = ApIntegration::kInterpolated101;
  std::size_t max_detections = 100;
  // Area fractions equivalent to 32^2 and 96^2 pixels of a 640^2 frame.
  double small_area = 0.0025;
  double medium_area = 0.0225;
};

struct EvalReport {
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> thresholds;
  std::vector<double> per_threshold;
  std::map<std::string, double> per_class;
  std::map<std::string, double> per_scale;
  std::size_t images = 0;
  std::size_t ground_truths = 0;
  std::size_t predictions = 0;

  bool operator==(const EvalReport&) const = default;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["AP"] = ap;
    j["AP50"] = ap50;
    j["AP75"] = ap75;
    j["thresholds"] = thresholds;
    j["per_threshold"] = per_threshold;
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (const auto& [k, v] : per_class) pc[k] = v;
    j["per_class"] = pc;
    nlohmann::ordered_json ps = nlohmann::ordered_json::object();
    for (const char* k : {"small", "medium", "large"}) {
      if (auto it = per_scale.find(k); it != per_scale.end()) ps[k] = it->second;
    }
    j["per_scale"] = ps;
    j["counts"] = {{"images", images}, {"ground_truths", ground_truths}, {"predictions", predictions}};
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.ap = j.at("AP").get<double>();
    r.ap50 = j.at("AP50").get<double>();
    r.ap75 = j.at("AP75").get<double>();
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
    r.per_threshold = j.at("per_threshold").get<std::vector<double>>();
    for (const auto& [k, v] : j.at("per_class").items()) r.per_class[k] = v.get<double>();
    for (const auto& [k, v] : j.at("per_scale").items()) r.per_scale[k] = v.get<double>();
    const auto& c = j.at("counts");
    r.images = c.at("images").get<std::size_t>();
    r.ground_truths = c.at("ground_truths").get<std::size_t>();
    r.predictions = c.at("predictions").get<std::size_t>();
    return r;
  }
};

namespace detail {

struct ScoredPrediction {
  double confidence;
  std::size_t image;
  std::size_t index;
};

// Area under the precision/recall curve of a ranked list. `tp` and `fp` are
// cumulative counts per rank; `npos` the number of non-ignored ground truths.
inline double integrate_pr(const std::vector<double>& tp, const std::vector<double>& fp, double npos,
                           ApIntegration mode) {
  const std::size_t n = tp.size();
  std::vector<double> recall(n), precision(n);
  for (std::size_t i = 0; i < n; ++i) {
    recall[i] = tp[i] / npos;
    precision[i] = tp[i] / std::max(tp[i] + fp[i], std::numeric_limits<double>::min());
  }
  // Monotone envelope from the right; `best` keeps the rank that supplies it.
  std::vector<std::size_t> best(n);
  for (std::size_t i = n; i-- > 0;) {
    best[i] = i;
    if (i + 1 < n && precision[i + 1] > precision[i]) {
      precision[i] = precision[i + 1];
      best[i] = best[i + 1];
    }
  }
  if (mode == ApIntegration::kExact) {
    double area = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      area += (recall[i] - prev) * precision[i];
      prev = recall[i];
    }
    return area;
  }
  // Count the recall levels served by each rank, then weight once per rank so
  // repeated precisions are not summed one level at a time.
  std::vector<int> levels(n, 0);
  std::size_t k = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (k < n && recall[k] < level - 1e-12) ++k;
    if (k < n) ++levels[k];
  }
  long double sum = 0.0L;
  // Weighted from the counts so that e.g. 33 levels at 2/3 contribute exactly 22.
  for (std::size_t i = 0; i < n; ++i) {
    if (levels[i] == 0) continue;
    const std::size_t j = best[i];
    const long double den = std::max(tp[j] + fp[j], std::numeric_limits<double>::min());
    sum += static_cast<long double>(levels[i]) * static_cast<long double>(tp[j]) / den;
  }
  return static_cast<double>(sum / 101.0L);
}

}  // namespace detail

// AP for one class at one IoU threshold under an area range; returns NaN
// when no ground truth of that class falls in range.
inline double class_ap(const std::vector<DetectionSet>& preds, const std::vector<GroundTruth>& gts, int cls,
                       double threshold, double area_lo, double area_hi, const std::vector<std::vector<char>>& kept,
                       ApIntegration mode) {
  double npos = 0.0;
  std::vector<std::vector<std::size_t>> gt_idx(gts.size());
  std::vector<std::vector<char>> gt_ignored(gts.size());
  for (std::size_t im = 0; im < gts.size(); ++im) {
    for (std::size_t g = 0; g < gts[im].boxes.size(); ++g) {
      if (gts[im].labels[g] != cls) continue;
      const double a = gts[im].boxes[g].area();
      const bool ignore = a < area_lo || a >= area_hi;
      gt_idx[im].push_back(g);
      gt_ignored[im].push_back(ignore ? 1 : 0);
      if (!ignore) npos += 1.0;
    }
  }
  if (npos == 0.0) return std::numeric_limits<double>::quiet_NaN();

  std::vector<detail::ScoredPrediction> ranked;
  for (std::size_t im = 0; im < preds.size(); ++im) {
    for (std::size_t i = 0; i < preds[im].size(); ++i) {
      if (kept[im][i] && preds[im].labels[i] == cls) ranked.push_back({preds[im].confidences[i], im, i});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.confidence > b.confidence; });

  std::vector<std::vector<char>> taken(gts.size());
  for (std::size_t im = 0; im < gts.size(); ++im) taken[im].assign(gt_idx[im].size(), 0);
  std::vector<double> tp, fp;
  double ctp = 0.0, cfp = 0.0;
  for (const auto& p : ranked) {
    const Box& box = preds[p.image].boxes[p.index];
    // Best unmatched ground truth, preferring in-range ones.
    long best = -1;
    double best_iou = threshold;
    bool best_ignored = true;
    for (std::size_t k = 0; k < gt_idx[p.image].size(); ++k) {
      if (taken[p.image][k]) continue;
      const bool ign = gt_ignored[p.image][k] != 0;
      if (best >= 0 && !best_ignored && ign) continue;
      const double v = iou(box, gts[p.image].boxes[gt_idx[p.image][k]]);
      if (v < threshold) continue;
      if (best < 0 || (best_ignored && !ign) || v > best_iou) {
        best = static_cast<long>(k);
        best_iou = v;
        best_ignored = ign;
      }
    }
    if (best >= 0) {
      taken[p.image][static_cast<std::size_t>(best)] = 1;
      if (best_ignored) continue;
      ctp += 1.0;
    } else {
      const double a = box.area();
      if (a < area_lo || a >= area_hi) continue;
      cfp += 1.0;
    }
    tp.push_back(ctp);
    fp.push_back(cfp);
  }
  if (tp.empty()) return 0.0;
  return detail::integrate_pr(tp, fp, npos, mode);
}

inline EvalReport compute_ap(const std::vector<DetectionSet>& preds, const std::vector<GroundTruth>& gts,
                             const EvalOptions& opts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("compute_ap: one prediction set per image");
  if (opts.iou_thresholds.empty()) throw std::invalid_argument("compute_ap: no IoU thresholds");
  const int k = static_cast<int>(opts.class_names.size());
  EvalReport r;
  r.images = gts.size();
  r.thresholds = opts.iou_thresholds;
  std::vector<std::vector<char>> kept(preds.size());
  for (std::size_t im = 0; im < preds.size(); ++im) {
    const auto& p = preds[im];
    if (p.labels.size() != p.size() || p.confidences.size() != p.size()) {
      throw std::invalid_argument("compute_ap: predictions need one label and confidence per box");
    }
    for (int lab : p.labels) {
      if (lab < 0 || lab >= k) throw std::invalid_argument("compute_ap: predicted class outside the taxonomy");
    }
    for (int lab : gts[im].labels) {
      if (lab < 0 || lab >= k) throw std::invalid_argument("compute_ap: ground-truth class outside the taxonomy");
    }
    if (gts[im].labels.size() != gts[im].boxes.size()) throw std::invalid_argument("compute_ap: ground truth sizes");
    // Per-image cap on the highest-confidence predictions.
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p.confidences[a] > p.confidences[b]; });
    kept[im].assign(p.size(), 0);
    for (std::size_t i = 0; i < std::min(order.size(), opts.max_detections); ++i) kept[im][order[i]] = 1;
    r.predictions += std::min(p.size(), opts.max_detections);
    r.ground_truths += gts[im].boxes.size();
  }

  const double inf = std::numeric_limits<double>::infinity();
  auto mean_over_classes = [&](double threshold, double lo, double hi, std::vector<double>* per_class) {
    double s = 0.0;
    int n = 0;
    for (int c = 0; c < k; ++c) {
      const double v = class_ap(preds, gts, c, threshold, lo, hi, kept, opts.integration);
      if (per_class) (*per_class)[static_cast<std::size_t>(c)] = v;
      if (std::isnan(v)) continue;
      s += v;
      ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / n;
  };

  std::vector<double> class_sum(static_cast<std::size_t>(k), 0.0);
  std::vector<int> class_n(static_cast<std::size_t>(k), 0);
  std::vector<double> per_class(static_cast<std::size_t>(k));
  for (double t : opts.iou_thresholds) {
    const double m = mean_over_classes(t, -inf, inf, &per_class);
    r.per_threshold.push_back(std::isnan(m) ? 0.0 : m);
    for (int c = 0; c < k; ++c) {
      if (std::isnan(per_class[static_cast<std::size_t>(c)])) continue;
      class_sum[static_cast<std::size_t>(c)] += per_class[static_cast<std::size_t>(c)];
      class_n[static_cast<std::size_t>(c)] += 1;
    }
  }
  r.ap = static_cast<double>(std::accumulate(r.per_threshold.begin(), r.per_threshold.end(), 0.0L) /
                            static_cast<long double>(r.per_threshold.size()));
  auto at_threshold = [&](double t) {
    for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
      if (std::abs(r.thresholds[i] - t) < 1e-9) return r.per_threshold[i];
    }
    return mean_over_classes(t, -inf, inf, nullptr);
  };
  r.ap50 = at_threshold(0.5);
  r.ap75 = at_threshold(0.75);
  if (std::isnan(r.ap75)) r.ap75 = 0.0;
  if (std::isnan(r.ap50)) r.ap50 = 0.0;
  for (int c = 0; c < k; ++c) {
    if (class_n[static_cast<std::size_t>(c)] > 0) {
      r.per_class[opts.class_names[static_cast<std::size_t>(c)]] =
          class_sum[static_cast<std::size_t>(c)] / class_n[static_cast<std::size_t>(c)];
    }
  }
  const std::pair<const char*, std::pair<double, double>> scales[] = {
      {"small", {-inf, opts.small_area}}, {"medium", {opts.small_area, opts.medium_area}},
      {"large", {opts.medium_area, inf}}};
  for (const auto& [name, range] : scales) {
    double s = 0.0;
    int n = 0;
    for (double t : opts.iou_thresholds) {
      const double m = mean_over_classes(t, range.first, range.second, nullptr);
      if (std::isnan(m)) continue;
      s += m;
      ++n;
    }
    if (n > 0) r.per_scale[name] = s / n;
  }
  return r;
}

// ------------------------------------------------------------------ reports

enum class ReportFormat { kJson, kCsv };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::kJson;
  if (s == "csv") return ReportFormat::kCsv;
  throw std::invalid_argument("unknown report format: " + s);
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

// Summary rows (config, AP, AP50, AP75) followed by a delta row whenever
// there are exactly two configs, then a per-class section.
inline std::string reports_to_csv(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::ostringstream os;
  os << "config,AP,AP50,AP75\n";
  for (const auto& [name, r] : rows) {
    os << name << ',' << format_number(r.ap) << ',' << format_number(r.ap50) << ',' << format_number(r.ap75) << '\n';
  }
  if (rows.size() == 2) {
    const EvalReport& a = rows[0].second;
    const EvalReport& b = rows[1].second;
    auto pct = [](double base, double v) {
      return base == 0.0 ? std::string("nan") : format_number(100.0 * (v - base) / base);
    };
    os << "delta_pct," << pct(a.ap, b.ap) << ',' << pct(a.ap50, b.ap50) << ',' << pct(a.ap75, b.ap75) << '\n';
  }
  os << "\nconfig,class,AP\n";
  for (const auto& [name, r] : rows) {
    for (const auto& [cls, v] : r.per_class) os << name << ',' << cls << ',' << format_number(v) << '\n';
  }
  return os.str();
}

inline void emit_report(const std::vector<std::pair<std::string, EvalReport>>& rows, const std::string& path,
                        ReportFormat format) {
  std::string text;
  if (format == ReportFormat::kJson) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [name, r] : rows) j[name] = r.to_json();
    text = j.dump(2) + "\n";
  } else {
    text = reports_to_csv(rows);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline std::vector<std::pair<std::string, EvalReport>> read_json_reports(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report " + path);
  const auto j = nlohmann::ordered_json::parse(in);
  std::vector<std::pair<std::string, EvalReport>> out;
  for (const auto& [k, v] : j.items()) out.emplace_back(k, EvalReport::from_json(v));
  return out;
}

}  // namespace thermaldet
