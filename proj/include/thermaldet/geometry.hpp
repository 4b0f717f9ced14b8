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

// Box overlap measures and teacher/student prediction matching.
//
// The overlap formulas are written once over a generic scalar so the same
// arithmetic serves plain doubles and ad::Var columns (one box pair per row)
// in the training losses.

#pragma once

#include "thermaldet/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace thermaldet {

enum class BoxOverlap { kGIoU, kCIoU };

template <class T>
struct Corners {
  T x1, y1, x2, y2;
};

inline Corners<double> corners(const Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

namespace overlap {

using std::abs;
using std::atan;
using std::max;
using std::min;

template <class T>
struct Parts {
  T inter;
  T uni;
  T hull_w;
  T hull_h;
};

template <class T>
Parts<T> parts(const Corners<T>& a, const Corners<T>& b) {
  T iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0);
  T ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0);
  T inter = iw * ih;
  T area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
  T area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
  T uni = area_a + area_b - inter;
  T hull_w = max(a.x2, b.x2) - min(a.x1, b.x1);
  T hull_h = max(a.y2, b.y2) - min(a.y1, b.y1);
  return {inter, uni, hull_w, hull_h};
}

template <class T>
T iou(const Corners<T>& a, const Corners<T>& b) {
  auto p = parts(a, b);
  return p.inter / p.uni;
}

template <class T>
T giou(const Corners<T>& a, const Corners<T>& b) {
  auto p = parts(a, b);
  T hull = p.hull_w * p.hull_h;
  return p.inter / p.uni - (hull - p.uni) / hull;
}

// IoU - rho^2 / c^2 - alpha * v, with v = 4/pi^2 (atan(wa/ha) - atan(wb/hb))^2
// and alpha = v / ((1 - IoU) + v).
template <class T>
T ciou(const Corners<T>& a, const Corners<T>& b) {
  auto p = parts(a, b);
  T i = p.inter / p.uni;
  T dx = (a.x1 + a.x2) * 0.5 - (b.x1 + b.x2) * 0.5;
  T dy = (a.y1 + a.y2) * 0.5 - (b.y1 + b.y2) * 0.5;
  T rho2 = dx * dx + dy * dy;
  T c2 = p.hull_w * p.hull_w + p.hull_h * p.hull_h;
  T dang = atan((a.x2 - a.x1) / (a.y2 - a.y1)) - atan((b.x2 - b.x1) / (b.y2 - b.y1));
  T v = dang * dang * (4.0 / (std::numbers::pi * std::numbers::pi));
  // The 1e-12 keeps alpha defined when IoU == 1 and v == 0.
  T alpha = v / ((1.0 - i) + v + 1e-12);
  return i - rho2 / c2 - alpha * v;
}

template <class T>
T l1(const Corners<T>& a, const Corners<T>& b) {
  return abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2);
}

}  // namespace overlap

inline double iou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  return overlap::iou(corners(a), corners(b));
}

inline double giou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  return overlap::giou(corners(a), corners(b));
}

inline double ciou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  return overlap::ciou(corners(a), corners(b));
}

inline double box_l1(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  return overlap::l1(corners(a), corners(b));
}

inline double box_similarity(const Box& a, const Box& b, BoxOverlap kind) {
  return kind == BoxOverlap::kCIoU ? ciou(a, b) : giou(a, b);
}

// ------------------------------------------------------------------ matching

struct MatchSet {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (teacher, student)
  std::vector<std::size_t> unmatched_teacher;
  std::vector<std::size_t> unmatched_student;

  double total_cost = 0.0;  // sum of (1 - GIoU) over pairs
};

// Minimum-cost assignment of rows to columns for rows <= cols; returns, for
// each row, its column. Shortest augmenting path with potentials.
inline std::vector<std::size_t> solve_assignment(const Matrix& cost) {
  const auto n = static_cast<std::size_t>(cost.rows());
  const auto m = static_cast<std::size_t>(cost.cols());
  if (n > m) throw std::invalid_argument("solve_assignment expects rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  }
  return assignment;
}

// One-to-one pairing that first maximizes the number of pairs with
// IoU >= iou_min and then minimizes their total (1 - GIoU).
inline MatchSet match_boxes(std::span<const Box> teacher, std::span<const Box> student,
                            double iou_min = 0.5) {
  if (!(iou_min > 0.0 && iou_min < 1.0)) {
    throw std::invalid_argument("match_boxes: iou_min must lie in (0, 1)");
  }
  MatchSet out;
  const std::size_t nt = teacher.size(), ns = student.size();
  if (nt == 0 || ns == 0) {
    for (std::size_t i = 0; i < nt; ++i) out.unmatched_teacher.push_back(i);
    for (std::size_t j = 0; j < ns; ++j) out.unmatched_student.push_back(j);
    return out;
  }
  // Any infeasible pair costs more than every feasible matching combined.
  const double big = 4.0 * static_cast<double>(std::min(nt, ns) + 1);
  Matrix cost(static_cast<Eigen::Index>(nt), static_cast<Eigen::Index>(ns));
  Matrix feasible(cost.rows(), cost.cols());
  for (std::size_t i = 0; i < nt; ++i) {
    for (std::size_t j = 0; j < ns; ++j) {
      const bool ok = iou(teacher[i], student[j]) >= iou_min;
      feasible(i, j) = ok ? 1.0 : 0.0;
      cost(i, j) = ok ? 1.0 - giou(teacher[i], student[j]) : big;
    }
  }
  const bool transposed = nt > ns;
  const Matrix c = transposed ? Matrix(cost.transpose()) : cost;
  const auto assign = solve_assignment(c);
  std::vector<char> t_used(nt, 0), s_used(ns, 0);
  for (std::size_t r = 0; r < assign.size(); ++r) {
    const std::size_t ti = transposed ? assign[r] : r;
    const std::size_t si = transposed ? r : assign[r];
    if (feasible(ti, si) == 0.0) continue;
    out.pairs.emplace_back(ti, si);
    out.total_cost += cost(ti, si);
    t_used[ti] = 1;
    s_used[si] = 1;
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  for (std::size_t i = 0; i < nt; ++i) {
    if (!t_used[i]) out.unmatched_teacher.push_back(i);
  }
  for (std::size_t j = 0; j < ns; ++j) {
    if (!s_used[j]) out.unmatched_student.push_back(j);
  }
  return out;
}

inline MatchSet match_teacher_student(const DetectionSet& teacher, const DetectionSet& student,
                                      double iou_min = 0.5) {
  return match_boxes(teacher.boxes, student.boxes, iou_min);
}

}  // namespace thermaldet
