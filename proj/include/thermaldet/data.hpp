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

// Synthetic paired thermal/RGB scenes, caption adaptation, the paired:synthetic
// batch scheduler and the JSONL dataset format.

#pragma once

#include "thermaldet/detection.hpp"
#include "thermaldet/geometry.hpp"
#include "thermaldet/logging.hpp"
#include "thermaldet/losses.hpp"
#include "thermaldet/text.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

#ifndef THERMALDET_CONFIG_DIR
#define THERMALDET_CONFIG_DIR "config"
#endif

// Shipped config files; THERMALDET_CONFIG points at another directory.
inline std::string config_path(const std::string& name) {
  const char* dir = std::getenv("THERMALDET_CONFIG");
  return std::string(dir != nullptr && *dir != '\0' ? dir : THERMALDET_CONFIG_DIR) + "/" + name;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// ------------------------------------------------------------------ grammar

struct ClassSpec {
  std::string name;
  double radiance = 0.5;
  std::string shape = "rect";
  double min_w = 0.1, max_w = 0.2, min_h = 0.1, max_h = 0.2;
  std::vector<std::string> palette;
};

struct StateSpec {
  std::string name;
  double offset = 0.0;
  std::string pattern = "flat";
  double amplitude = 0.0;
};

struct ColorSpec {
  std::string name;
  double r = 0.0, g = 0.0, b = 0.0;
};

struct LightingSpec {
  std::string name;
  double level = 1.0;
};

class SceneGrammar {
 public:
  int height = 64;
  int width = 64;
  double background = 0.12;
  double noise = 0.03;
  int min_objects = 1;
  int max_objects = 6;
  std::vector<ClassSpec> classes;
  std::vector<StateSpec> states;
  std::vector<ColorSpec> colors;
  std::vector<LightingSpec> lighting;

  static SceneGrammar parse(std::istream& in, const std::string& source = "grammar") {
    SceneGrammar g;
    g.classes.clear();
    int line_no = 0;
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument(source + ":" + std::to_string(line_no) + ": " + why);
    };
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      std::string key;
      if (!(ls >> key)) continue;
      auto num = [&](const char* what) {
        double v = 0.0;
        if (!(ls >> v)) fail(std::string("expected a number for ") + what);
        return v;
      };
      auto word = [&](const char* what) {
        std::string w;
        if (!(ls >> w)) fail(std::string("expected ") + what);
        return w;
      };
      if (key == "canvas") {
        g.height = static_cast<int>(num("height"));
        g.width = static_cast<int>(num("width"));
      } else if (key == "background") {
        g.background = num("background");
      } else if (key == "noise") {
        g.noise = num("noise");
      } else if (key == "objects") {
        g.min_objects = static_cast<int>(num("min"));
        g.max_objects = static_cast<int>(num("max"));
      } else if (key == "class") {
        ClassSpec c;
        c.name = word("class name");
        c.radiance = num("radiance");
        c.shape = word("shape");
        if (c.shape != "rect" && c.shape != "ellipse" && c.shape != "wheels") fail("unknown shape '" + c.shape + "'");
        c.min_w = num("min_w");
        c.max_w = num("max_w");
        c.min_h = num("min_h");
        c.max_h = num("max_h");
        g.classes.push_back(c);
      } else if (key == "state") {
        StateSpec s;
        s.name = word("state name");
        s.offset = num("offset");
        s.pattern = word("pattern");
        s.amplitude = num("amplitude");
        g.states.push_back(s);
      } else if (key == "color") {
        ColorSpec c;
        c.name = word("color name");
        c.r = num("r");
        c.g = num("g");
        c.b = num("b");
        g.colors.push_back(c);
      } else if (key == "palette") {
        const std::string cls = word("class name");
        auto it = std::find_if(g.classes.begin(), g.classes.end(), [&](const ClassSpec& c) { return c.name == cls; });
        if (it == g.classes.end()) fail("palette for unknown class '" + cls + "'");
        for (std::string w; ls >> w;) it->palette.push_back(w);
      } else if (key == "lighting") {
        LightingSpec l;
        l.name = word("lighting name");
        l.level = num("level");
        g.lighting.push_back(l);
      } else {
        fail("unknown directive '" + key + "'");
      }
      std::string extra;
      if (key != "palette" && (ls >> extra)) fail("trailing token '" + extra + "'");
    }
    g.validate();
    return g;
  }

  static SceneGrammar from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open grammar " + path);
    return parse(in, path);
  }

  static SceneGrammar load_default() { return from_file(config_path("grammar.txt")); }

  void validate() const {
    if (height < 8 || width < 8) throw std::invalid_argument("grammar: canvas must be at least 8x8");
    if (min_objects < 1 || max_objects < min_objects) throw std::invalid_argument("grammar: bad object count range");
    if (noise < 0.0) throw std::invalid_argument("grammar: negative noise");
    if (classes.empty() || states.empty() || colors.empty() || lighting.empty()) {
      throw std::invalid_argument("grammar: classes, states, colors and lighting must all be non-empty");
    }
    std::set<std::string> names;
    for (const auto& c : classes) {
      if (!names.insert(c.name).second) throw std::invalid_argument("grammar: duplicate class " + c.name);
      if (c.shape != "rect" && c.shape != "ellipse" && c.shape != "wheels") {
        throw std::invalid_argument("grammar: class " + c.name + " has unknown shape " + c.shape);
      }
      if (!(c.min_w > 0.0 && c.min_w <= c.max_w && c.max_w <= 1.0 && c.min_h > 0.0 && c.min_h <= c.max_h &&
            c.max_h <= 1.0)) {
        throw std::invalid_argument("grammar: class " + c.name + " has an invalid size range");
      }
      if (c.palette.empty()) throw std::invalid_argument("grammar: class " + c.name + " has no palette");
      for (const auto& col : c.palette) color_index(col);
    }
    for (const auto& s : states) {
      if (s.pattern != "flat" && s.pattern != "stripes" && s.pattern != "checker") {
        throw std::invalid_argument("grammar: state " + s.name + " has unknown pattern " + s.pattern);
      }
    }
  }

  int class_count() const { return static_cast<int>(classes.size()); }
  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& c : classes) out.push_back(c.name);
    return out;
  }
  std::vector<std::string> state_names() const {
    std::vector<std::string> out;
    for (const auto& s : states) out.push_back(s.name);
    return out;
  }
  int class_index(const std::string& name) const { return find(classes, name, "class"); }
  int state_index(const std::string& name) const { return find(states, name, "state"); }
  int color_index(const std::string& name) const { return find(colors, name, "color"); }

 private:
  template <typename T>
  static int find(const std::vector<T>& v, const std::string& name, const char* what) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].name == name) return static_cast<int>(i);
    }
    throw std::invalid_argument(std::string("grammar: unknown ") + what + " '" + name + "'");
  }
};

// ------------------------------------------------------------------- record

struct TrainingRecord {
  std::uint64_t seed = 0;
  bool paired = false;
  int height = 0;
  int width = 0;
  std::vector<float> thermal;  // H*W, row-major, radiance in [0, 1]
  std::vector<float> rgb;      // H*W*3 interleaved; present iff paired
  std::vector<Box> boxes;
  std::vector<int> class_ids;
  std::vector<std::string> phrases;
  std::string caption;

  bool operator==(const TrainingRecord&) const = default;

  // Throws naming the offending field; `num_classes` < 0 skips the taxonomy check.
  void validate(int num_classes = -1) const {
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument("record seed " + std::to_string(seed) + ": " + why);
    };
    if (height <= 0 || width <= 0) fail("field 'shape' must be positive");
    if (thermal.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
      fail("field 'thermal_b64' does not match shape");
    }
    if (paired && rgb.size() != thermal.size() * 3) fail("field 'rgb_b64' missing or wrong size on a paired record");
    if (!paired && !rgb.empty()) fail("field 'rgb_b64' present on an unpaired record");
    if (class_ids.size() != boxes.size() || phrases.size() != boxes.size()) {
      fail("fields 'boxes', 'class_ids' and 'phrases' differ in length");
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!boxes[i].valid()) fail("field 'boxes[" + std::to_string(i) + "]' is not a valid box " + to_string(boxes[i]));
      if (class_ids[i] < 0 || (num_classes >= 0 && class_ids[i] >= num_classes)) {
        fail("field 'class_ids[" + std::to_string(i) + "]' outside the taxonomy");
      }
    }
  }

  Matrix thermal_matrix() const {
    Matrix m(height, width);
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) m(r, c) = thermal[static_cast<std::size_t>(r * width + c)];
    }
    return m;
  }
};

// Generator-side facts that the file format does not carry.
struct PlacedObject {
  int class_id = 0;
  int state = 0;
  int color = 0;
  Box box;
  std::vector<std::uint8_t> visible;  // H*W, pixels this object owns after occlusion
};

struct RenderedScene {
  TrainingRecord record;
  std::vector<PlacedObject> objects;
  int lighting = 0;
  std::uint64_t sub_seed = 0;
};

namespace detail {

inline std::vector<std::uint8_t> rasterize(const ClassSpec& cls, double x0, double y0, double w, double h, int H,
                                           int W) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(H * W), 0);
  const double cx = x0 + 0.5 * w, cy = y0 + 0.5 * h;
  const double r = 0.35 * h;
  const int r0 = std::max(0, static_cast<int>(y0) - 1), r1 = std::min(H, static_cast<int>(y0 + h) + 2);
  const int c0 = std::max(0, static_cast<int>(x0) - 1), c1 = std::min(W, static_cast<int>(x0 + w) + 2);
  for (int row = r0; row < r1; ++row) {
    for (int col = c0; col < c1; ++col) {
      const double px = col + 0.5, py = row + 0.5;
      bool in = false;
      if (cls.shape == "rect") {
        in = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
      } else if (cls.shape == "ellipse") {
        const double dx = (px - cx) / (0.5 * w), dy = (py - cy) / (0.5 * h);
        in = dx * dx + dy * dy <= 1.0;
      } else {  // wheels: two circles joined by a frame bar
        const double wy = y0 + h - r;
        const double ax = x0 + r, bx = x0 + w - r;
        in = (px - ax) * (px - ax) + (py - wy) * (py - wy) <= r * r ||
             (px - bx) * (px - bx) + (py - wy) * (py - wy) <= r * r ||
             (px >= ax && px < bx && py >= y0 + 0.15 * h && py < y0 + 0.15 * h + std::max(1.0, 0.2 * h)) ||
             (px >= cx - 0.5 && px < cx + 0.5 && py >= y0 && py < wy);
      }
      if (in) m[static_cast<std::size_t>(row * W + col)] = 1;
    }
  }
  return m;
}

inline bool tight_box(const std::vector<std::uint8_t>& mask, int H, int W, Box& out) {
  int r0 = H, r1 = -1, c0 = W, c1 = -1;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (!mask[static_cast<std::size_t>(r * W + c)]) continue;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  }
  if (r1 < 0) return false;
  out = Box{static_cast<double>(c0) / W, static_cast<double>(r0) / H, static_cast<double>(c1 + 1) / W,
            static_cast<double>(r1 + 1) / H};
  return true;
}

inline double pattern_value(const StateSpec& s, int row, int col) {
  if (s.pattern == "stripes") return ((row / 2) % 2 == 0 ? 1.0 : -1.0) * s.amplitude;
  if (s.pattern == "checker") return (((row / 2) + (col / 2)) % 2 == 0 ? 1.0 : -1.0) * s.amplitude;
  return 0.0;
}

inline const char* count_word(std::size_t n) {
  static const char* words[] = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};
  return n < 10 ? words[n] : "many";
}

inline std::string position_words(const Box& b) {
  const double cx = b.center_x(), cy = b.center_y();
  const char* v = cy < 1.0 / 3.0 ? "top" : (cy < 2.0 / 3.0 ? "middle" : "bottom");
  const char* h = cx < 1.0 / 3.0 ? "left" : (cx < 2.0 / 3.0 ? "center" : "right");
  return std::string(v) + " " + h;
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace detail

inline constexpr int kPlacementAttempts = 100;
inline constexpr double kMaxPairIoU = 0.7;
inline constexpr std::size_t kCaptionObjects = 4;

// Renders one scene. Placement that fails 100 times for an object restarts
// the whole scene from the next sub-seed, so the call never fails.
inline RenderedScene render_scene(const SceneGrammar& g, std::uint64_t seed, bool paired = false) {
  const int H = g.height, W = g.width;
  for (std::uint64_t sub = 0;; ++sub) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(sub)};
    std::mt19937_64 rng(seq);
    auto uniform = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

    RenderedScene out;
    out.sub_seed = sub;
    out.lighting = static_cast<int>(pick(g.lighting.size()));
    const int n = std::uniform_int_distribution<int>(g.min_objects, g.max_objects)(rng);
    std::vector<std::vector<std::uint8_t>> shapes;
    bool placed_all = true;
    for (int k = 0; k < n && placed_all; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
        const int cls = static_cast<int>(pick(g.classes.size()));
        const ClassSpec& spec = g.classes[static_cast<std::size_t>(cls)];
        const double w = uniform(spec.min_w, spec.max_w) * W, h = uniform(spec.min_h, spec.max_h) * H;
        const double x0 = uniform(0.0, W - w), y0 = uniform(0.0, H - h);
        auto mask = detail::rasterize(spec, x0, y0, w, h, H, W);
        Box box;
        if (!detail::tight_box(mask, H, W, box)) continue;
        bool ok = true;
        for (const auto& o : out.objects) ok = ok && iou(o.box, box) <= kMaxPairIoU;
        if (!ok) continue;
        PlacedObject o;
        o.class_id = cls;
        o.box = box;
        out.objects.push_back(o);
        shapes.push_back(std::move(mask));
        placed = true;
      }
      placed_all = placed;
    }
    if (!placed_all) continue;

    for (auto& o : out.objects) {
      const ClassSpec& spec = g.classes[static_cast<std::size_t>(o.class_id)];
      o.state = static_cast<int>(pick(g.states.size()));
      o.color = g.color_index(spec.palette[pick(spec.palette.size())]);
    }

    // Larger objects sit behind smaller ones.
    std::vector<std::size_t> order(out.objects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return out.objects[a].box.area() > out.objects[b].box.area();
    });
    std::vector<int> owner(static_cast<std::size_t>(H * W), -1);
    for (std::size_t i : order) {
      for (std::size_t p = 0; p < owner.size(); ++p) {
        if (shapes[i][p]) owner[p] = static_cast<int>(i);
      }
    }

    TrainingRecord& rec = out.record;
    rec.seed = seed;
    rec.paired = paired;
    rec.height = H;
    rec.width = W;
    rec.thermal.resize(static_cast<std::size_t>(H * W));
    std::normal_distribution<double> noise(0.0, 1.0);
    const LightingSpec& light = g.lighting[static_cast<std::size_t>(out.lighting)];
    for (auto& o : out.objects) o.visible.assign(owner.size(), 0);
    for (int r = 0; r < H; ++r) {
      for (int c = 0; c < W; ++c) {
        const std::size_t p = static_cast<std::size_t>(r * W + c);
        double v = g.background;
        if (owner[p] >= 0) {
          PlacedObject& o = out.objects[static_cast<std::size_t>(owner[p])];
          o.visible[p] = 1;
          const StateSpec& s = g.states[static_cast<std::size_t>(o.state)];
          v = g.classes[static_cast<std::size_t>(o.class_id)].radiance + s.offset + detail::pattern_value(s, r, c);
        }
        rec.thermal[p] = detail::clamp01(v + g.noise * noise(rng));
      }
    }
    // RGB is always drawn so the noise stream does not depend on the flag.
    std::vector<float> rgb(static_cast<std::size_t>(H * W * 3));
    for (std::size_t p = 0; p < owner.size(); ++p) {
      double col[3] = {0.50, 0.55, 0.45};
      if (owner[p] >= 0) {
        const ColorSpec& cs = g.colors[static_cast<std::size_t>(out.objects[static_cast<std::size_t>(owner[p])].color)];
        col[0] = cs.r;
        col[1] = cs.g;
        col[2] = cs.b;
      }
      for (int ch = 0; ch < 3; ++ch) rgb[p * 3 + static_cast<std::size_t>(ch)] =
          detail::clamp01(light.level * col[ch] + 0.03 * noise(rng));
    }
    if (paired) rec.rgb = std::move(rgb);

    std::ostringstream cap;
    cap << light.name << " scene with " << detail::count_word(out.objects.size()) << " objects";
    for (std::size_t i = 0; i < out.objects.size(); ++i) {
      const PlacedObject& o = out.objects[i];
      const std::string& cls = g.classes[static_cast<std::size_t>(o.class_id)].name;
      const std::string& color = g.colors[static_cast<std::size_t>(o.color)].name;
      rec.boxes.push_back(o.box);
      rec.class_ids.push_back(o.class_id);
      rec.phrases.push_back(color + " " + g.states[static_cast<std::size_t>(o.state)].name + " " + cls);
      if (i < kCaptionObjects) {
        cap << (i == 0 ? " " : " and ") << color << " " << cls << " " << detail::position_words(o.box);
      }
    }
    rec.caption = cap.str();
    return out;
  }
}

inline TrainingRecord generate_scene(const SceneGrammar& g, std::uint64_t seed, bool paired = false) {
  return render_scene(g, seed, paired).record;
}

// `n` records with per-record seeds derived from `seed`; exactly
// floor(n * paired_fraction) of them, spread evenly, carry the RGB view.
inline std::vector<TrainingRecord> generate_dataset(const SceneGrammar& g, std::size_t n, std::uint64_t seed,
                                                    double paired_fraction) {
  if (!(paired_fraction >= 0.0 && paired_fraction <= 1.0)) {
    throw std::invalid_argument("paired fraction must lie in [0, 1]");
  }
  std::vector<TrainingRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto before = static_cast<std::size_t>(static_cast<double>(i) * paired_fraction);
    const auto after = static_cast<std::size_t>(static_cast<double>(i + 1) * paired_fraction);
    out.push_back(generate_scene(g, splitmix64(seed * 0x100000001b3ULL + i), after > before));
  }
  return out;
}

// ------------------------------------------------------- caption adaptation

inline std::string to_lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

using Stoplist = std::set<std::string>;

inline Stoplist load_stoplist(const std::string& path) {
  Stoplist out;
  for (const auto& w : read_lines(path)) out.insert(to_lower(w));
  return out;
}

inline Stoplist default_stoplist() { return load_stoplist(config_path("stoplist.txt")); }

// Drops stoplisted tokens. Words split on whitespace, then on hyphens; the
// surviving parts of a hyphenated word are re-joined with hyphens.
inline std::string adapt_caption(const std::string& text, const Stoplist& stoplist) {
  std::vector<std::string> kept;
  for (const auto& word : split_words(text)) {
    std::string rebuilt;
    std::size_t start = 0;
    while (start <= word.size()) {
      const std::size_t dash = std::min(word.find('-', start), word.size());
      const std::string part = word.substr(start, dash - start);
      if (!part.empty() && stoplist.count(to_lower(part)) == 0) {
        if (!rebuilt.empty()) rebuilt += '-';
        rebuilt += part;
      }
      start = dash + 1;
    }
    if (!rebuilt.empty()) kept.push_back(rebuilt);
  }
  return join_words(kept);
}

inline TrainingRecord adapt_record(TrainingRecord rec, const Stoplist& stoplist) {
  rec.caption = adapt_caption(rec.caption, stoplist);
  for (auto& p : rec.phrases) p = adapt_caption(p, stoplist);
  return rec;
}

// ---------------------------------------------------------------- scheduler

struct Batch {
  BatchKind kind = BatchKind::kSynthetic;
  std::vector<std::size_t> indices;  // into the pool of `kind`
};

// Repeating cycle of 3 paired then 2 synthetic batches. Each pool is walked in
// a seeded shuffled order and reshuffled when exhausted.
class BatchScheduler {
 public:
  static constexpr int kPairedPerCycle = 3;
  static constexpr int kCycle = 5;

  BatchScheduler(std::size_t paired_size, std::size_t synthetic_size, std::size_t batch_size, std::uint64_t seed)
      : batch_size_(batch_size), rng_(seed) {
    if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
    if (paired_size == 0 && synthetic_size == 0) throw std::invalid_argument("both data pools are empty");
    if (paired_size == 0) log_warning("empty paired pool: every batch is synthetic and KD stays inactive");
    if (synthetic_size == 0) log_warning("empty synthetic pool: every batch is paired");
    pools_[0].order.resize(paired_size);
    pools_[1].order.resize(synthetic_size);
    for (auto& p : pools_) {
      for (std::size_t i = 0; i < p.order.size(); ++i) p.order[i] = i;
      std::shuffle(p.order.begin(), p.order.end(), rng_);
    }
  }

  BatchKind kind_at(std::size_t position) const {
    if (pools_[0].order.empty()) return BatchKind::kSynthetic;
    if (pools_[1].order.empty()) return BatchKind::kPaired;
    return static_cast<int>(position % kCycle) < kPairedPerCycle ? BatchKind::kPaired : BatchKind::kSynthetic;
  }

  Batch next() {
    Batch b;
    b.kind = kind_at(position_++);
    Pool& p = pools_[b.kind == BatchKind::kPaired ? 0 : 1];
    for (std::size_t i = 0; i < batch_size_; ++i) {
      if (p.cursor == p.order.size()) {
        std::shuffle(p.order.begin(), p.order.end(), rng_);
        p.cursor = 0;
      }
      b.indices.push_back(p.order[p.cursor++]);
    }
    return b;
  }

  std::size_t position() const { return position_; }

 private:
  struct Pool {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  std::size_t batch_size_;
  std::mt19937_64 rng_;
  Pool pools_[2];
  std::size_t position_ = 0;
};

inline BatchScheduler schedule_batches(std::size_t paired_size, std::size_t synthetic_size, std::size_t batch_size,
                                       std::uint64_t seed) {
  return BatchScheduler(paired_size, synthetic_size, batch_size, seed);
}

// -------------------------------------------------------------- file format

namespace codec {

inline std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3), '\0');
  const int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data, static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int len = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
  if (len < 0) throw std::invalid_argument("invalid base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(len) - pad);
  return out;
}

inline std::string encode_floats(const std::vector<float>& v) {
  static_assert(std::endian::native == std::endian::little, "fp32 grids are stored little-endian");
  return base64_encode(reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float));
}

inline std::vector<float> decode_floats(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() % sizeof(float) != 0) throw std::invalid_argument("grid payload is not whole fp32 values");
  std::vector<float> v(bytes.size() / sizeof(float));
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

// Lowercase hex SHA-1 of `data` hashed as a git blob.
inline std::string git_blob_sha1(const std::string& data) {
  const std::string header = "blob " + std::to_string(data.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, data.data(), data.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

}  // namespace codec

class RecordFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::ordered_json record_to_json(const TrainingRecord& r) {
  nlohmann::ordered_json j;
  j["seed"] = r.seed;
  j["paired"] = r.paired;
  j["shape"] = {r.height, r.width};
  j["thermal_b64"] = codec::encode_floats(r.thermal);
  if (r.paired) j["rgb_b64"] = codec::encode_floats(r.rgb);
  nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
  for (const auto& b : r.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  j["boxes"] = boxes;
  j["class_ids"] = r.class_ids;
  j["phrases"] = r.phrases;
  j["caption"] = r.caption;
  return j;
}

// Schema errors name the record (its line) and the field.
inline TrainingRecord record_from_json(const nlohmann::json& j, const std::string& where) {
  auto fail = [&](const std::string& why) { throw RecordFormatError(where + ": schema error: " + why); };
  static const std::set<std::string> allowed = {"seed",  "paired",    "shape",   "thermal_b64", "rgb_b64",
                                                "boxes", "class_ids", "phrases", "caption"};
  if (!j.is_object()) fail("record is not a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (allowed.count(key) == 0) fail("unknown field '" + key + "'");
  }
  for (const char* key : {"seed", "paired", "shape", "thermal_b64", "boxes", "class_ids", "phrases", "caption"}) {
    if (!j.contains(key)) fail(std::string("missing field '") + key + "'");
  }
  TrainingRecord r;
  try {
    r.seed = j.at("seed").get<std::uint64_t>();
    r.paired = j.at("paired").get<bool>();
    const auto shape = j.at("shape").get<std::vector<int>>();
    if (shape.size() != 2) fail("field 'shape' must be [H, W]");
    r.height = shape[0];
    r.width = shape[1];
    r.thermal = codec::decode_floats(j.at("thermal_b64").get<std::string>());
    if (j.contains("rgb_b64")) r.rgb = codec::decode_floats(j.at("rgb_b64").get<std::string>());
    for (const auto& b : j.at("boxes")) {
      const auto v = b.get<std::vector<double>>();
      if (v.size() != 4) fail("field 'boxes' entries must have four coordinates");
      r.boxes.push_back(Box{v[0], v[1], v[2], v[3]});
    }
    r.class_ids = j.at("class_ids").get<std::vector<int>>();
    r.phrases = j.at("phrases").get<std::vector<std::string>>();
    r.caption = j.at("caption").get<std::string>();
  } catch (const RecordFormatError&) {
    throw;
  } catch (const std::exception& e) {
    fail(e.what());
  }
  try {
    r.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  return r;
}

inline std::string serialize_records(const std::vector<TrainingRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<TrainingRecord> parse_records(std::istream& in, const std::string& source = "records") {
  std::vector<TrainingRecord> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw RecordFormatError(where + ": parse error: " + e.what());
    }
    out.push_back(record_from_json(j, where));
  }
  return out;
}

inline void write_records(const std::string& path, const std::vector<TrainingRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::string text = serialize_records(records);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

inline std::vector<TrainingRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_records(in, path);
}

inline std::string dataset_hash(const std::vector<TrainingRecord>& records) {
  return codec::git_blob_sha1(serialize_records(records));
}

}  // namespace thermaldet
