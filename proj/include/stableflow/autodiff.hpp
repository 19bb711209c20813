// Copyright 2026 The StableFlow Authors
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

#ifndef STABLEFLOW_AUTODIFF_HPP_
#define STABLEFLOW_AUTODIFF_HPP_

// Two small differentiation engines that compose:
//
//   Var      reverse mode. Every non-constant operation appends one node
//            (at most two parents with their local partials) to a Tape;
//            Tape::backward sweeps the adjoints from one output.
//   Dual<T>  forward mode with up to kMaxDirections tangent directions over
//            an arbitrary scalar T.
//
// Dual<Var> is the nested form: the tangents of a forward pass (e.g. the
// columns of an input Jacobian) are themselves Vars, so a reverse sweep over
// the tape yields mixed second derivatives d^2 f / dx dtheta.

#include <array>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "stableflow/errors.hpp"

namespace stableflow::ad {

class Tape {
 public:
  struct Node {
    int lhs = -1;
    int rhs = -1;
    double dlhs = 0.0;
    double drhs = 0.0;
  };

  int push(int lhs, double dlhs, int rhs = -1, double drhs = 0.0) {
    nodes_.push_back({lhs, rhs, dlhs, drhs});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // Adjoints of every node with respect to `output`. `adj` is resized to
  // size() and overwritten.
  void backward(int output, std::vector<double>& adj) const {
    adj.assign(nodes_.size(), 0.0);
    if (output < 0) return;
    adj[output] = 1.0;
    for (int i = output; i >= 0; --i) {
      const double a = adj[i];
      if (a == 0.0) continue;
      const Node& n = nodes_[i];
      if (n.lhs >= 0) adj[n.lhs] += a * n.dlhs;
      if (n.rhs >= 0) adj[n.rhs] += a * n.drhs;
    }
  }

 private:
  std::vector<Node> nodes_;
};

class Var {
 public:
  Var() = default;
  Var(double v) : value_(v) {}  // NOLINT: constants convert implicitly

  static Var leaf(Tape& tape, double v) {
    Var out(v);
    out.tape_ = &tape;
    out.index_ = tape.push(-1, 0.0);
    return out;
  }

  double value() const { return value_; }
  int index() const { return index_; }
  Tape* tape() const { return tape_; }
  bool is_constant() const { return tape_ == nullptr; }

  // Result of a unary operation with local partial `d`.
  static Var unary(double v, const Var& a, double d) {
    if (a.is_constant()) return Var(v);
    Var out(v);
    out.tape_ = a.tape_;
    out.index_ = a.tape_->push(a.index_, d);
    return out;
  }

  static Var binary(double v, const Var& a, double da, const Var& b, double db) {
    if (a.is_constant()) return unary(v, b, db);
    if (b.is_constant()) return unary(v, a, da);
    Var out(v);
    out.tape_ = a.tape_;
    out.index_ = a.tape_->push(a.index_, da, b.index_, db);
    return out;
  }

  Var& operator+=(const Var& o) { return *this = *this + o; }
  Var& operator-=(const Var& o) { return *this = *this - o; }
  Var& operator*=(const Var& o) { return *this = *this * o; }

  friend Var operator+(const Var& a, const Var& b) {
    return binary(a.value_ + b.value_, a, 1.0, b, 1.0);
  }
  friend Var operator-(const Var& a, const Var& b) {
    return binary(a.value_ - b.value_, a, 1.0, b, -1.0);
  }
  friend Var operator*(const Var& a, const Var& b) {
    return binary(a.value_ * b.value_, a, b.value_, b, a.value_);
  }
  friend Var operator/(const Var& a, const Var& b) {
    const double inv = 1.0 / b.value_;
    const double v = a.value_ * inv;
    return binary(v, a, inv, b, -v * inv);
  }
  friend Var operator-(const Var& a) { return unary(-a.value_, a, -1.0); }

  friend Var exp(const Var& a) {
    const double e = std::exp(a.value_);
    return unary(e, a, e);
  }
  friend Var tanh(const Var& a) {
    const double t = std::tanh(a.value_);
    return unary(t, a, 1.0 - t * t);
  }
  friend Var log(const Var& a) { return unary(std::log(a.value_), a, 1.0 / a.value_); }

 private:
  double value_ = 0.0;
  int index_ = -1;
  Tape* tape_ = nullptr;
};

inline constexpr int kMaxDirections = 6;

template <class T>
class Dual {
 public:
  T val{};
  std::array<T, kMaxDirections> der{};
  int n = 0;

  Dual() = default;
  Dual(T v, int directions) : val(std::move(v)), n(directions) {
    require_shape(directions >= 0 && directions <= kMaxDirections,
                  "Dual: direction count exceeds kMaxDirections");
  }

  // Independent input: unit tangent along `direction`.
  static Dual variable(T v, int directions, int direction) {
    Dual out(std::move(v), directions);
    out.der[direction] = T(1.0);
    return out;
  }

  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual out(a.val + b.val, a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] + b.der[i];
    return out;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual out(a.val - b.val, a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] - b.der[i];
    return out;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual out(a.val * b.val, a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] * b.val + a.val * b.der[i];
    return out;
  }
  friend Dual operator-(const Dual& a) {
    Dual out(-a.val, a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = -a.der[i];
    return out;
  }

  // Mixed operations with the underlying scalar (tangent of `s` is zero).
  friend Dual operator+(const Dual& a, const std::type_identity_t<T>& s) {
    Dual out = a;
    out.val = a.val + s;
    return out;
  }
  friend Dual operator+(const std::type_identity_t<T>& s, const Dual& a) { return a + s; }
  friend Dual operator-(const Dual& a, const std::type_identity_t<T>& s) {
    Dual out = a;
    out.val = a.val - s;
    return out;
  }
  friend Dual operator*(const Dual& a, const std::type_identity_t<T>& s) {
    Dual out(a.val * s, a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] * s;
    return out;
  }
  friend Dual operator*(const std::type_identity_t<T>& s, const Dual& a) { return a * s; }

  friend Dual exp(const Dual& a) {
    using std::exp;
    Dual out(exp(a.val), a.n);
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] * out.val;
    return out;
  }
  friend Dual tanh(const Dual& a) {
    using std::tanh;
    Dual out(tanh(a.val), a.n);
    const T slope = T(1.0) - out.val * out.val;
    for (int i = 0; i < a.n; ++i) out.der[i] = a.der[i] * slope;
    return out;
  }
};

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }
template <class T>
double value_of(const Dual<T>& x) {
  return value_of(x.val);
}

}  // namespace stableflow::ad

#endif  // STABLEFLOW_AUTODIFF_HPP_
