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

#pragma once

#include "thermaldet/parameters.hpp"

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    const bool finite = std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
    return finite && x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 && x1 < x2 && y1 < y2;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "(" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ")";
  return os.str();
}

inline void require_valid(const Box& b, const char* what = "box") {
  if (!b.valid()) {
    throw std::invalid_argument(std::string(what) + " is not a valid normalized box " + to_string(b));
  }
}

// Per-image predictions from either the teacher or the student.
struct DetectionSet {
  std::vector<Box> boxes;
  std::vector<std::vector<double>> class_probs;
  std::vector<Vector> region_feats;
  std::vector<double> confidences;
  std::vector<int> labels;

  std::size_t size() const { return boxes.size(); }
  bool empty() const { return boxes.empty(); }

  void validate() const {
    const std::size_t n = boxes.size();
    if (class_probs.size() != n || region_feats.size() != n || confidences.size() != n ||
        labels.size() != n) {
      throw std::invalid_argument("DetectionSet fields have unequal lengths");
    }
    for (std::size_t i = 0; i < n; ++i) {
      require_valid(boxes[i], "detection box");
      double s = 0.0;
      for (double p : class_probs[i]) s += p;
      if (std::abs(s - 1.0) > 1e-6) {
        throw std::invalid_argument("DetectionSet class probabilities do not sum to 1");
      }
    }
  }
};

}  // namespace thermaldet
