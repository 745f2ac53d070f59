// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ems/autograd.hpp"

#include <string>
#include <vector>

namespace ems::nn {

template <typename S>
using ParamList = std::vector<Parameter<S>*>;

template <typename S>
Mat<S> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal01(rng) * stddev);
  return m;
}

/// y = x W + b with W stored in x out.
template <typename S>
struct Linear {
  Parameter<S> weight;
  Parameter<S> bias;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng, bool with_bias = true)
      : weight(name + ".weight", random_normal<S>(in, out, std::sqrt(2.0 / (in + out)), rng)),
        bias(name + ".bias", Mat<S>::Zero(1, out)),
        has_bias(with_bias) {}

  int in_dim() const { return static_cast<int>(weight.value.rows()); }
  int out_dim() const { return static_cast<int>(weight.value.cols()); }

  Var<S> operator()(Tape<S>& tape, Var<S> x) {
    if (x.cols() != weight.value.rows())
      throw DimensionError(weight.name + ": expected input width " + std::to_string(weight.value.rows()) + ", got " +
                           std::to_string(x.cols()));
    Var<S> y = ag::matmul(x, tape.leaf(weight));
    return has_bias ? ag::add_row(y, tape.leaf(bias)) : y;
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S> gain;
  Parameter<S> shift;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim)
      : gain(name + ".gain", Mat<S>::Ones(1, dim)), shift(name + ".shift", Mat<S>::Zero(1, dim)) {}

  Var<S> operator()(Tape<S>& tape, Var<S> x) { return ag::layer_norm(x, tape.leaf(gain), tape.leaf(shift)); }

  void collect(ParamList<S>& out) {
    out.push_back(&gain);
    out.push_back(&shift);
  }
};

/// Two linear layers with a GELU in between.
template <typename S>
struct FeedForward {
  Linear<S> first;
  Linear<S> second;

  FeedForward() = default;
  FeedForward(const std::string& name, int in, int hidden, int out, Rng& rng)
      : first(name + ".fc1", in, hidden, rng), second(name + ".fc2", hidden, out, rng) {}

  Var<S> operator()(Tape<S>& tape, Var<S> x) { return second(tape, ag::gelu(first(tape, x))); }

  void collect(ParamList<S>& out) {
    first.collect(out);
    second.collect(out);
  }
};

/// Same-length temporal convolution; the kernel is (k*Cin) x Cout.
template <typename S>
struct Conv1d {
  Parameter<S> weight;
  Parameter<S> bias;
  int kernel = 1;

  Conv1d() = default;
  Conv1d(const std::string& name, int in, int out, int k, Rng& rng)
      : weight(name + ".weight", random_normal<S>(static_cast<Eigen::Index>(k) * in, out, std::sqrt(2.0 / (k * in + out)), rng)),
        bias(name + ".bias", Mat<S>::Zero(1, out)),
        kernel(k) {
    if (k < 1 || k % 2 == 0) throw ConfigError(name + ": kernel size must be odd and positive");
  }

  int radius() const { return (kernel - 1) / 2; }

  Var<S> operator()(Tape<S>& tape, Var<S> x) { return (*this)(tape, x, std::vector<S>(static_cast<std::size_t>(kernel), S(1))); }

  Var<S> operator()(Tape<S>& tape, Var<S> x, const std::vector<S>& row_gate) {
    return ag::conv1d(x, tape.leaf(weight), tape.leaf(bias), row_gate);
  }

  void collect(ParamList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Bidirectional LSTM: forward and backward hidden states concatenated (T x 2H).
template <typename S>
struct BiLstm {
  Parameter<S> fwd_x, fwd_h, fwd_b;
  Parameter<S> bwd_x, bwd_h, bwd_b;

  BiLstm() = default;
  BiLstm(const std::string& name, int in, int hidden, Rng& rng) {
    const double sx = std::sqrt(1.0 / in), sh = std::sqrt(1.0 / hidden);
    auto forget_bias = [hidden]() {
      Mat<S> b = Mat<S>::Zero(1, 4 * hidden);
      b.middleCols(hidden, hidden).setConstant(S(1));
      return b;
    };
    fwd_x = Parameter<S>(name + ".fwd.wx", random_normal<S>(in, 4 * hidden, sx, rng));
    fwd_h = Parameter<S>(name + ".fwd.wh", random_normal<S>(hidden, 4 * hidden, sh, rng));
    fwd_b = Parameter<S>(name + ".fwd.bias", forget_bias());
    bwd_x = Parameter<S>(name + ".bwd.wx", random_normal<S>(in, 4 * hidden, sx, rng));
    bwd_h = Parameter<S>(name + ".bwd.wh", random_normal<S>(hidden, 4 * hidden, sh, rng));
    bwd_b = Parameter<S>(name + ".bwd.bias", forget_bias());
  }

  int hidden() const { return static_cast<int>(fwd_h.value.rows()); }

  Var<S> operator()(Tape<S>& tape, Var<S> x) {
    Var<S> f = ag::lstm(x, tape.leaf(fwd_x), tape.leaf(fwd_h), tape.leaf(fwd_b), false);
    Var<S> b = ag::lstm(x, tape.leaf(bwd_x), tape.leaf(bwd_h), tape.leaf(bwd_b), true);
    return ag::concat_cols(f, b);
  }

  void collect(ParamList<S>& out) {
    for (auto* p : {&fwd_x, &fwd_h, &fwd_b, &bwd_x, &bwd_h, &bwd_b}) out.push_back(p);
  }
};

template <typename S>
void zero_grads(const ParamList<S>& params) {
  for (auto* p : params) p->zero_grad();
}

template <typename S>
std::size_t count_parameters(const ParamList<S>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += static_cast<std::size_t>(p->value.size());
  return n;
}

}  // namespace ems::nn
