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

#ifndef STABLEFLOW_FLOW_HPP_
#define STABLEFLOW_FLOW_HPP_

// Stacked affine coupling layers forming a bijection phi: R^d -> R^d.
//
// Layer k splits the coordinates at its partition_index p into A = [0, p)
// and B = [p, d). Even layers keep A and transform B, odd layers keep B and
// transform A, so each consecutive pair ("flow element") touches every
// coordinate. The transformed block becomes
//
//     x_B * exp(s(x_A)) + t(x_A)
//
// where s and t are one-hidden-layer tanh networks and the raw output of s
// is squashed into [-kScaleBound, kScaleBound].
//
// Flat parameter order (ParamVector): layer-major; inside a layer s_net then
// t_net; inside a network W1 (row-major, hidden x in), b1, W2 (row-major,
// out x hidden), b2.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stableflow/autodiff.hpp"
#include "stableflow/errors.hpp"

namespace stableflow {

inline constexpr double kScaleBound = 3.0;

template <class T>
struct BasicDenseNet {
  int in = 0;
  int hidden = 0;
  int out = 0;
  std::vector<T> W1;
  std::vector<T> b1;
  std::vector<T> W2;
  std::vector<T> b2;

  std::size_t num_params() const { return W1.size() + b1.size() + W2.size() + b2.size(); }
};

template <class T>
struct BasicCouplingLayer {
  int partition_index = 1;
  BasicDenseNet<T> s_net;
  BasicDenseNet<T> t_net;
};

template <class T>
struct BasicFlowParams {
  int dim = 0;
  int n_flow = 0;
  int n_h = 0;
  std::vector<BasicCouplingLayer<T>> layers;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.s_net.num_params() + l.t_net.num_params();
    return n;
  }
};

using DenseNet = BasicDenseNet<double>;
using CouplingLayer = BasicCouplingLayer<double>;
using FlowParams = BasicFlowParams<double>;

// Coordinates a layer leaves untouched (first) and transforms (second).
struct LayerSplit {
  int kept_begin, kept_end;
  int trans_begin, trans_end;
  int kept() const { return kept_end - kept_begin; }
  int transformed() const { return trans_end - trans_begin; }
};

inline LayerSplit layer_split(int dim, int partition_index, std::size_t layer) {
  if (layer % 2 == 0) return {0, partition_index, partition_index, dim};
  return {partition_index, dim, 0, partition_index};
}

// d=2: 1 everywhere. d=3: 1, 2, 1, 2, ... In general floor(d/2) on even
// layers and d - floor(d/2) on odd ones.
inline int default_partition(int dim, std::size_t layer) {
  const int half = dim / 2;
  return layer % 2 == 0 ? half : dim - half;
}

namespace detail {

template <class T>
BasicDenseNet<T> zero_net(int in, int hidden, int out) {
  BasicDenseNet<T> net;
  net.in = in;
  net.hidden = hidden;
  net.out = out;
  net.W1.assign(static_cast<std::size_t>(hidden) * in, T(0.0));
  net.b1.assign(hidden, T(0.0));
  net.W2.assign(static_cast<std::size_t>(out) * hidden, T(0.0));
  net.b2.assign(out, T(0.0));
  return net;
}

template <class X>
void check_finite(const std::vector<X>& x, int begin, int end, std::size_t layer) {
  for (int i = begin; i < end; ++i) {
    if (!std::isfinite(ad::value_of(x[i]))) {
      throw NumericError("non-finite value produced by coupling layer " + std::to_string(layer));
    }
  }
}

}  // namespace detail

// All-zero weights: every layer is the identity.
inline FlowParams make_identity_flow(int dim, int n_flow, int n_h) {
  require_shape(dim >= 2, "flow: dim must be at least 2");
  require_shape(n_flow >= 0 && n_h >= 1, "flow: n_flow >= 0 and n_h >= 1 required");
  FlowParams p;
  p.dim = dim;
  p.n_flow = n_flow;
  p.n_h = n_h;
  for (std::size_t k = 0; k < static_cast<std::size_t>(2 * n_flow); ++k) {
    CouplingLayer layer;
    layer.partition_index = default_partition(dim, k);
    const LayerSplit sp = layer_split(dim, layer.partition_index, k);
    layer.s_net = detail::zero_net<double>(sp.kept(), n_h, sp.transformed());
    layer.t_net = detail::zero_net<double>(sp.kept(), n_h, sp.transformed());
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// Gaussian weights (std `weight_std`), zero biases.
template <class Rng>
FlowParams init_flow(int dim, int n_flow, int n_h, Rng& rng, double weight_std = 0.1) {
  FlowParams p = make_identity_flow(dim, n_flow, n_h);
  std::normal_distribution<double> normal(0.0, weight_std);
  for (auto& layer : p.layers) {
    for (auto* net : {&layer.s_net, &layer.t_net}) {
      for (double& w : net->W1) w = normal(rng);
      for (double& w : net->W2) w = normal(rng);
    }
  }
  return p;
}

inline void validate(const FlowParams& p) {
  require_shape(p.dim >= 2, "flow: dim must be at least 2");
  require_shape(p.layers.size() == static_cast<std::size_t>(2 * p.n_flow),
                "flow: expected 2*n_flow layers");
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& l = p.layers[k];
    const std::string where = "flow layer " + std::to_string(k) + ": ";
    require_shape(l.partition_index > 0 && l.partition_index < p.dim,
                  where + "partition_index must lie strictly between 0 and dim");
    const LayerSplit sp = layer_split(p.dim, l.partition_index, k);
    for (const auto* net : {&l.s_net, &l.t_net}) {
      require_shape(net->in == sp.kept() && net->out == sp.transformed() && net->hidden == p.n_h,
                    where + "network shape inconsistent with partition");
      require_shape(net->W1.size() == static_cast<std::size_t>(net->hidden) * net->in &&
                        net->b1.size() == static_cast<std::size_t>(net->hidden) &&
                        net->W2.size() == static_cast<std::size_t>(net->out) * net->hidden &&
                        net->b2.size() == static_cast<std::size_t>(net->out),
                    where + "weight array sizes inconsistent");
    }
  }
}

// ---- ParamVector -----------------------------------------------------------

template <class T>
std::vector<T> flatten(const BasicFlowParams<T>& p) {
  std::vector<T> out;
  out.reserve(p.num_params());
  for (const auto& l : p.layers) {
    for (const auto* net : {&l.s_net, &l.t_net}) {
      out.insert(out.end(), net->W1.begin(), net->W1.end());
      out.insert(out.end(), net->b1.begin(), net->b1.end());
      out.insert(out.end(), net->W2.begin(), net->W2.end());
      out.insert(out.end(), net->b2.begin(), net->b2.end());
    }
  }
  return out;
}

// Same layout as `shape`, values taken from `values` (converted to T).
template <class T, class U>
BasicFlowParams<T> unflatten(const FlowParams& shape, std::span<const U> values) {
  require_shape(values.size() == shape.num_params(), "unflatten: parameter count mismatch");
  BasicFlowParams<T> p;
  p.dim = shape.dim;
  p.n_flow = shape.n_flow;
  p.n_h = shape.n_h;
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    std::vector<T> v(values.begin() + pos, values.begin() + pos + n);
    pos += n;
    return v;
  };
  for (const auto& l : shape.layers) {
    BasicCouplingLayer<T> out;
    out.partition_index = l.partition_index;
    for (auto [src, dst] : {std::pair{&l.s_net, &out.s_net}, std::pair{&l.t_net, &out.t_net}}) {
      dst->in = src->in;
      dst->hidden = src->hidden;
      dst->out = src->out;
      dst->W1 = take(src->W1.size());
      dst->b1 = take(src->b1.size());
      dst->W2 = take(src->W2.size());
      dst->b2 = take(src->b2.size());
    }
    p.layers.push_back(std::move(out));
  }
  return p;
}

inline FlowParams unflatten(const FlowParams& shape, std::span<const double> values) {
  return unflatten<double, double>(shape, values);
}

// ---- Evaluation ------------------------------------------------------------

// out = W2 tanh(W1 in + b1) + b2 over any scalar pair where X*P and X+P exist.
template <class X, class P>
void dense_net_eval(const BasicDenseNet<P>& net, std::span<const X> in, std::span<X> out) {
  using std::tanh;
  std::vector<X> h;
  h.reserve(net.hidden);
  for (int j = 0; j < net.hidden; ++j) {
    const P* row = &net.W1[static_cast<std::size_t>(j) * net.in];
    X acc = in[0] * row[0];
    for (int i = 1; i < net.in; ++i) acc = acc + in[i] * row[i];
    h.push_back(tanh(acc + net.b1[j]));
  }
  for (int o = 0; o < net.out; ++o) {
    const P* row = &net.W2[static_cast<std::size_t>(o) * net.hidden];
    X acc = h[0] * row[0];
    for (int j = 1; j < net.hidden; ++j) acc = acc + h[j] * row[j];
    out[o] = acc + net.b2[o];
  }
}

// Apply the whole flow in place. `x` holds dim scalars of type X.
template <class X, class P>
void flow_apply(const BasicFlowParams<P>& p, std::vector<X>& x) {
  using std::exp;
  using std::tanh;
  require_shape(x.size() == static_cast<std::size_t>(p.dim), "flow: input dimension mismatch");
  std::vector<X> s;
  std::vector<X> t;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& layer = p.layers[k];
    const LayerSplit sp = layer_split(p.dim, layer.partition_index, k);
    std::span<const X> kept(x.data() + sp.kept_begin, sp.kept());
    s.assign(sp.transformed(), x[0]);
    t.assign(sp.transformed(), x[0]);
    dense_net_eval<X, P>(layer.s_net, kept, s);
    dense_net_eval<X, P>(layer.t_net, kept, t);
    for (int j = 0; j < sp.transformed(); ++j) {
      const X scale = tanh(s[j] * (1.0 / kScaleBound)) * kScaleBound;
      X& xi = x[sp.trans_begin + j];
      xi = xi * exp(scale) + t[j];
    }
    detail::check_finite(x, sp.trans_begin, sp.trans_end, k);
  }
}

inline Eigen::VectorXd flow_forward(const FlowParams& p, const Eigen::VectorXd& x) {
  require_shape(x.size() == p.dim, "flow_forward: input dimension mismatch");
  std::vector<double> v(x.data(), x.data() + x.size());
  flow_apply<double, double>(p, v);
  return Eigen::Map<Eigen::VectorXd>(v.data(), p.dim);
}

inline Eigen::VectorXd flow_inverse(const FlowParams& p, const Eigen::VectorXd& y) {
  require_shape(y.size() == p.dim, "flow_inverse: input dimension mismatch");
  std::vector<double> v(y.data(), y.data() + y.size());
  std::vector<double> s, t;
  for (std::size_t k = p.layers.size(); k-- > 0;) {
    const auto& layer = p.layers[k];
    const LayerSplit sp = layer_split(p.dim, layer.partition_index, k);
    std::span<const double> kept(v.data() + sp.kept_begin, sp.kept());
    s.assign(sp.transformed(), 0.0);
    t.assign(sp.transformed(), 0.0);
    dense_net_eval<double, double>(layer.s_net, kept, s);
    dense_net_eval<double, double>(layer.t_net, kept, t);
    for (int j = 0; j < sp.transformed(); ++j) {
      const double scale = std::tanh(s[j] / kScaleBound) * kScaleBound;
      double& vi = v[sp.trans_begin + j];
      vi = (vi - t[j]) * std::exp(-scale);
    }
    detail::check_finite(v, sp.trans_begin, sp.trans_end, k);
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), p.dim);
}

struct FlowEval {
  Eigen::VectorXd y;
  Eigen::MatrixXd jacobian;
};

namespace detail {

// phi(x) and d phi / dx by forward-mode duals; reference for the direct
// chain-rule evaluation below.
inline FlowEval flow_forward_with_jacobian_dual(const FlowParams& p, const Eigen::VectorXd& x) {
  require_shape(x.size() == p.dim, "flow_jacobian: input dimension mismatch");
  require_shape(p.dim <= ad::kMaxDirections, "flow_jacobian: dimension exceeds kMaxDirections");
  using D = ad::Dual<double>;
  std::vector<D> v;
  v.reserve(p.dim);
  for (int i = 0; i < p.dim; ++i) v.push_back(D::variable(x[i], p.dim, i));
  flow_apply<D, double>(p, v);
  FlowEval out{Eigen::VectorXd(p.dim), Eigen::MatrixXd(p.dim, p.dim)};
  for (int i = 0; i < p.dim; ++i) {
    out.y[i] = v[i].val;
    for (int j = 0; j < p.dim; ++j) out.jacobian(i, j) = v[i].der[j];
  }
  return out;
}

// d out / d in of one dense net at `in` (row-major out x in), plus its value
// computed in the same operation order as dense_net_eval.
inline void dense_net_jacobian(const DenseNet& net, const double* in, double* out, double* jac,
                               std::vector<double>& hidden) {
  hidden.resize(2 * static_cast<std::size_t>(net.hidden));
  double* h = hidden.data();
  double* slope = h + net.hidden;
  for (int j = 0; j < net.hidden; ++j) {
    const double* row = &net.W1[static_cast<std::size_t>(j) * net.in];
    double acc = in[0] * row[0];
    for (int i = 1; i < net.in; ++i) acc = acc + in[i] * row[i];
    h[j] = std::tanh(acc + net.b1[j]);
    slope[j] = 1.0 - h[j] * h[j];
  }
  for (int o = 0; o < net.out; ++o) {
    const double* row = &net.W2[static_cast<std::size_t>(o) * net.hidden];
    double acc = h[0] * row[0];
    for (int j = 1; j < net.hidden; ++j) acc = acc + h[j] * row[j];
    out[o] = acc + net.b2[o];
    double* jrow = jac + static_cast<std::size_t>(o) * net.in;
    for (int i = 0; i < net.in; ++i) jrow[i] = 0.0;
    for (int j = 0; j < net.hidden; ++j) {
      const double w = row[j] * slope[j];
      const double* w1 = &net.W1[static_cast<std::size_t>(j) * net.in];
      for (int i = 0; i < net.in; ++i) jrow[i] += w * w1[i];
    }
  }
}

}  // namespace detail

// phi(x) and d phi / dx, propagating the Jacobian layer by layer:
// y_B' = y_B exp(s(y_A)) + t(y_A), so dy_B' = diag(exp s) dy_B +
// (diag(y_B exp(s) s') ds_raw/dy_A + dt/dy_A) dy_A.
inline FlowEval flow_forward_with_jacobian(const FlowParams& p, const Eigen::VectorXd& x) {
  require_shape(x.size() == p.dim, "flow_jacobian: input dimension mismatch");
  const int d = p.dim;
  thread_local std::vector<double> s_raw, t_val, ds, dt, slope, row_mix;
  FlowEval out{x, Eigen::MatrixXd::Identity(d, d)};
  Eigen::VectorXd& y = out.y;
  Eigen::MatrixXd& J = out.jacobian;
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    const auto& layer = p.layers[k];
    const LayerSplit sp = layer_split(d, layer.partition_index, k);
    const int na = sp.kept(), nb = sp.transformed();
    thread_local std::vector<double> kept;
    kept.assign(y.data() + sp.kept_begin, y.data() + sp.kept_end);
    s_raw.resize(nb);
    t_val.resize(nb);
    ds.resize(static_cast<std::size_t>(nb) * na);
    dt.resize(static_cast<std::size_t>(nb) * na);
    detail::dense_net_jacobian(layer.s_net, kept.data(), s_raw.data(), ds.data(), slope);
    detail::dense_net_jacobian(layer.t_net, kept.data(), t_val.data(), dt.data(), slope);
    row_mix.resize(d);
    for (int j = 0; j < nb; ++j) {
      const int b = sp.trans_begin + j;
      const double th = std::tanh(s_raw[j] * (1.0 / kScaleBound));
      const double e = std::exp(th * kScaleBound);
      const double coeff = y[b] * e * (1.0 - th * th);
      // Row b of the new Jacobian: e * J_b + sum_a (coeff ds_ja + dt_ja) J_a.
      for (int c = 0; c < d; ++c) row_mix[c] = e * J(b, c);
      for (int a = 0; a < na; ++a) {
        const double w = coeff * ds[static_cast<std::size_t>(j) * na + a] + dt[static_cast<std::size_t>(j) * na + a];
        for (int c = 0; c < d; ++c) row_mix[c] += w * J(sp.kept_begin + a, c);
      }
      for (int c = 0; c < d; ++c) J(b, c) = row_mix[c];
      y[b] = y[b] * e + t_val[j];
    }
    for (int j = sp.trans_begin; j < sp.trans_end; ++j) {
      if (!std::isfinite(y[j])) {
        throw NumericError("non-finite value produced by coupling layer " + std::to_string(k));
      }
    }
  }
  return out;
}

inline Eigen::MatrixXd flow_jacobian(const FlowParams& p, const Eigen::VectorXd& x) {
  return flow_forward_with_jacobian(p, x).jacobian;
}

// ---- JSON ------------------------------------------------------------------

namespace detail {

inline nlohmann::json matrix_rows(const std::vector<double>& w, int rows, int cols) {
  nlohmann::json out = nlohmann::json::array();
  for (int r = 0; r < rows; ++r) {
    out.push_back(std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                                      w.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols));
  }
  return out;
}

inline std::vector<double> read_rows(const nlohmann::json& j, int rows, int cols,
                                     const std::string& what) {
  require_shape(j.is_array() && static_cast<int>(j.size()) == rows, what + ": wrong row count");
  std::vector<double> out;
  for (const auto& row : j) {
    require_shape(row.is_array() && static_cast<int>(row.size()) == cols,
                  what + ": wrong column count");
    for (const auto& v : row) out.push_back(v.get<double>());
  }
  return out;
}

inline nlohmann::json net_to_json(const DenseNet& n) {
  return {{"W1", matrix_rows(n.W1, n.hidden, n.in)},
          {"b1", n.b1},
          {"W2", matrix_rows(n.W2, n.out, n.hidden)},
          {"b2", n.b2}};
}

inline DenseNet net_from_json(const nlohmann::json& j, int in, int hidden, int out,
                              const std::string& what) {
  DenseNet n;
  n.in = in;
  n.hidden = hidden;
  n.out = out;
  n.W1 = read_rows(j.at("W1"), hidden, in, what + ".W1");
  n.b1 = j.at("b1").get<std::vector<double>>();
  n.W2 = read_rows(j.at("W2"), out, hidden, what + ".W2");
  n.b2 = j.at("b2").get<std::vector<double>>();
  require_shape(static_cast<int>(n.b1.size()) == hidden, what + ".b1: wrong length");
  require_shape(static_cast<int>(n.b2.size()) == out, what + ".b2: wrong length");
  return n;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const FlowParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers) {
    layers.push_back({{"partition_index", l.partition_index},
                      {"s_net", detail::net_to_json(l.s_net)},
                      {"t_net", detail::net_to_json(l.t_net)}});
  }
  j = {{"dim", p.dim}, {"n_flow", p.n_flow}, {"n_h", p.n_h}, {"layers", layers}};
}

inline void from_json(const nlohmann::json& j, FlowParams& p) {
  p = FlowParams{};
  p.dim = j.at("dim").get<int>();
  p.n_flow = j.at("n_flow").get<int>();
  p.n_h = j.at("n_h").get<int>();
  const auto& layers = j.at("layers");
  require_shape(layers.is_array() && static_cast<int>(layers.size()) == 2 * p.n_flow,
                "flow json: expected 2*n_flow layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& lj = layers[k];
    CouplingLayer l;
    l.partition_index = lj.at("partition_index").get<int>();
    require_shape(l.partition_index > 0 && l.partition_index < p.dim,
                  "flow json: partition_index out of range in layer " + std::to_string(k));
    const LayerSplit sp = layer_split(p.dim, l.partition_index, k);
    const std::string where = "layers[" + std::to_string(k) + "]";
    l.s_net = detail::net_from_json(lj.at("s_net"), sp.kept(), p.n_h, sp.transformed(),
                                    where + ".s_net");
    l.t_net = detail::net_from_json(lj.at("t_net"), sp.kept(), p.n_h, sp.transformed(),
                                    where + ".t_net");
    p.layers.push_back(std::move(l));
  }
  validate(p);
}

}  // namespace stableflow

#endif  // STABLEFLOW_FLOW_HPP_
