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

// Reverse-mode differentiation over dense fp64 matrices.
//
// A Tape records every intermediate value together with a closure that
// pushes the output gradient back to its inputs. Nodes whose inputs are all
// constants carry no closure, so forward-only evaluation costs little more
// than plain Eigen arithmetic. Parameters enter the tape through
// Tape::parameter(); Tape::backward() adds their gradients into the owning
// ParameterStore slots.

#pragma once

#include "thermaldet/parameters.hpp"

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace thermaldet::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double item() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), nullptr, false});
    return Var(this, nodes_.size() - 1);
  }
  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  // Leaf bound to a registry entry. Non-trainable entries and no-grad tapes
  // yield plain constants.
  Var parameter(Parameter& p) {
    if (!grad_enabled_ || !p.trainable) return constant(p.value);
    nodes_.push_back(Node{p.value, Matrix(), nullptr, true});
    bindings_.emplace_back(nodes_.size() - 1, &p);
    return Var(this, nodes_.size() - 1);
  }

  // Leaf that needs a gradient but is not bound to a registry entry.
  Var variable(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), nullptr, grad_enabled_});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::invalid_argument("Var from a different tape");
      needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  Var record_many(Matrix value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (const Var& in : inputs) {
      if (&in.tape() != this) throw std::invalid_argument("Var from a different tape");
      needs = needs || nodes_[in.id()].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient slot, allocated on first touch.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0 && n.value.size() != 0) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  void backward(const Var& root) {
    if (root.value().size() != 1) {
      throw std::invalid_argument("backward() expects a scalar root");
    }
    if (!nodes_[root.id()].needs_grad) return;
    grad(root.id())(0, 0) += 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
    for (auto& [id, param] : bindings_) {
      if (has_grad(id)) param->grad += nodes_[id].grad;
    }
  }

  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of a free leaf created with variable(); empty if it received none.
  Matrix gradient_of(const Var& v) const { return nodes_[v.id()].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::pair<std::size_t, Parameter*>> bindings_;
  bool grad_enabled_ = true;

  friend class Var;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("item() on a non-scalar Var");
  return v(0, 0);
}

}  // namespace thermaldet::ad

