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

// Token vocabulary and the frozen text encoder that stands in for a
// pretrained language-image text tower.

#pragma once

#include "thermaldet/numerics.hpp"
#include "thermaldet/parameters.hpp"

#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Reads one entry per line; blank lines and lines starting with '#' are skipped.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos || line[a] == '#') continue;
    const auto b = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(a, b - a + 1));
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr const char* kScenePrompt = "<scene>";
  static constexpr const char* kObjectPrompt = "<object>";
  static constexpr const char* kEnd = "<eos>";

  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* special : {kScenePrompt, kObjectPrompt, kEnd}) add(special);
    for (const auto& w : words) add(w);
  }
  static Vocabulary from_file(const std::string& path) { return Vocabulary(read_lines(path)); }

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& w) const { return ids_.count(w) != 0; }
  int id(const std::string& w) const {
    auto it = ids_.find(w);
    if (it == ids_.end()) throw std::invalid_argument("token outside vocabulary: '" + w + "'");
    return it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }
  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> w;
    for (int i : ids) w.push_back(word(i));
    return join_words(w);
  }

 private:
  void add(const std::string& w) {
    if (ids_.count(w) != 0) return;
    ids_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::map<std::string, int> ids_;
};

// Frozen random projection: every vocabulary token owns a fixed Gaussian
// vector; a phrase embeds as the standardized mean of its token vectors
// (zero mean, unit population variance, the same manifold the calibration
// head's layer norm produces).
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const Vocabulary& vocab, Eigen::Index dim, std::uint64_t seed) : vocab_(vocab) {
    std::mt19937_64 rng(seed);
    table_ = random_normal(rng, vocab.size(), dim, 1.0);
  }

  Eigen::Index dim() const { return table_.cols(); }
  const Matrix& table() const { return table_; }

  EmbeddingVector encode(const std::string& phrase) const {
    const auto ids = vocab_.encode(phrase);
    if (ids.empty()) throw std::invalid_argument("cannot embed an empty phrase");
    Vector v = Vector::Zero(dim());
    for (int i : ids) v += table_.row(i).transpose();
    return EmbeddingVector(layer_norm(v), EmbeddingRole::kText);
  }

  Matrix encode_rows(const std::vector<std::string>& phrases) const {
    Matrix out(static_cast<Eigen::Index>(phrases.size()), dim());
    for (std::size_t i = 0; i < phrases.size(); ++i) {
      out.row(static_cast<Eigen::Index>(i)) = encode(phrases[i]).values.transpose();
    }
    return out;
  }

 private:
  Vocabulary vocab_;
  Matrix table_;
};

}  // namespace thermaldet
