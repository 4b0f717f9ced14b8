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

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace thermaldet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// One named array in the registry. `grad` always has the shape of `value`.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;
  // Frozen entries keep their gradient slot but the optimizer never touches them.
  bool frozen = false;

  bool updatable() const { return trainable && !frozen; }
};

// Flat registry of every array a model owns. Entries live in a deque so that
// references handed out by add()/at() stay valid as the store grows.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix value, bool trainable = true,
                 bool frozen = false) {
    if (index_.count(name) != 0) {
      throw std::invalid_argument("duplicate parameter name: " + name);
    }
    Parameter p;
    p.name = name;
    p.grad = Matrix::Zero(value.rows(), value.cols());
    p.value = std::move(value);
    p.trainable = trainable;
    p.frozen = frozen;
    index_[name] = entries_.size();
    entries_.push_back(std::move(p));
    return entries_.back();
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& p : entries_) p.grad.setZero();
  }

  std::size_t element_count(bool updatable_only = false) const {
    std::size_t n = 0;
    for (const auto& p : entries_) {
      if (!updatable_only || p.updatable()) n += static_cast<std::size_t>(p.value.size());
    }
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& p : entries_) out.push_back(p.name);
    return out;
  }

  // Freeze or unfreeze every entry whose name starts with `prefix`.
  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& p : entries_) {
      if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
    }
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::deque<Parameter> entries_;
  std::map<std::string, std::size_t> index_;
};

// Gaussian init; the stddev is chosen by the caller (usually 1/sqrt(fan_in)).
inline Matrix random_normal(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace thermaldet
