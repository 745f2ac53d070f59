// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate matrix produced during one forward pass
// together with a closure that propagates the output gradient back to its
// inputs. Parameters live outside the tape; backward() accumulates their
// gradients into Parameter::grad.

#include "ems/tensor.hpp"

#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace ems {

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)) { zero_grad(); }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var<S> constant(Mat<S> v) { return push(std::move(v), false, nullptr, nullptr); }

  Var<S> leaf(Parameter<S>& p) { return push(p.value, true, nullptr, &p); }

  /// Records an op result. The backward closure is dropped when no input
  /// requires a gradient.
  Var<S> record(Mat<S> v, std::initializer_list<Var<S>> inputs, Backward bw) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(v), needs, needs ? std::move(bw) : nullptr, nullptr);
  }

  const Mat<S>& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  /// Gradient slot for a node, zero-initialized on first access.
  Mat<S>& grad(int id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Back-propagates from a 1x1 loss node and accumulates into parameters.
  void backward(Var<S> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw DimensionError("backward: loss must be 1x1");
    grad(loss.id).setConstant(S(1));
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    Backward backward;
    Parameter<S>* param = nullptr;
    bool needs_grad = false;
  };

  Var<S> push(Mat<S> v, bool needs, Backward bw, Parameter<S>* p) {
    nodes_.push_back(Node{std::move(v), Mat<S>(), std::move(bw), p, needs});
    return Var<S>{this, static_cast<int>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

namespace ag {

template <typename S>
void require_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimension mismatch");
  Mat<S> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) += g;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ib)) t.grad(ib) -= g;
  });
}

/// a (n x m) plus a 1 x m row broadcast over every row.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: bias shape mismatch");
  Mat<S> out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id, ir = row.id;
  return a.tape->record(std::move(out), {a, row}, [ia, ir](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g;
    if (t.needs_grad(ir)) t.grad(ir) += g.colwise().sum();
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  Mat<S> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  const int ia = a.id;
  return a.tape->record(a.value() * s, {a}, [ia, s](Tape<S>& t, int self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

// tanh approximation of GELU.
template <typename S>
Var<S> gelu(Var<S> a) {
  constexpr S k0 = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S k1 = S(0.044715);
  const Mat<S>& x = a.value();
  Mat<S> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S v = x.data()[i];
    out.data()[i] = S(0.5) * v * (S(1) + std::tanh(k0 * (v + k1 * v * v * v)));
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    const Mat<S>& xv = t.value(ia);
    Mat<S>& gx = t.grad(ia);
    for (Eigen::Index i = 0; i < xv.size(); ++i) {
      const S v = xv.data()[i];
      const S u = k0 * (v + k1 * v * v * v);
      const S th = std::tanh(u);
      const S du = k0 * (S(1) + S(3) * k1 * v * v);
      gx.data()[i] += g.data()[i] * (S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du);
    }
  });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  Mat<S> out = a.value().array().tanh().matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * (S(1) - y.array().square());
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Mat<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * y.array() * (S(1) - y.array());
  });
}

/// Per-row layer normalization with learned gain and bias (both 1 x n).
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  const Mat<S>& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) throw DimensionError("layer_norm: gain/bias width mismatch");
  Mat<S> xhat(xv.rows(), n);
  std::vector<S> inv_std(static_cast<std::size_t>(xv.rows()));
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S mean = xv.row(r).mean();
    const S var = (xv.row(r).array() - mean).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    xhat.row(r) = (xv.row(r).array() - mean) * is;
  }
  Mat<S> out = xhat;
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    out.row(r) = out.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, int self) {
                          const Mat<S>& g = t.grad(self);
                          const RowVec<S> gam = t.value(ig).row(0);
                          if (t.needs_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                          if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
                          if (t.needs_grad(ix)) {
                            Mat<S>& gx = t.grad(ix);
                            const S n_inv = S(1) / static_cast<S>(xhat.cols());
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                              const RowVec<S> gh = g.row(r).cwiseProduct(gam);
                              const S m1 = gh.sum() * n_inv;
                              const S m2 = gh.cwiseProduct(xhat.row(r)).sum() * n_inv;
                              gx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                                   (gh.array() - m1 - xhat.row(r).array() * m2);
                            }
                          }
                        });
}

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row count mismatch");
  Mat<S> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int ia = a.id, ib = b.id;
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return a.tape->record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += g.leftCols(ca);
    if (t.needs_grad(ib)) t.grad(ib) += g.rightCols(cb);
  });
}

/// out.row(t) = a.row(src[t]), or zeros when src[t] < 0.
template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<int> src) {
  Mat<S> out = Mat<S>::Zero(static_cast<Eigen::Index>(src.size()), a.cols());
  for (std::size_t t = 0; t < src.size(); ++t) {
    if (src[t] < 0) continue;
    if (src[t] >= a.rows()) throw DimensionError("gather_rows: source index out of range");
    out.row(static_cast<Eigen::Index>(t)) = a.value().row(src[t]);
  }
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, src = std::move(src)](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    Mat<S>& ga = t.grad(ia);
    for (std::size_t r = 0; r < src.size(); ++r)
      if (src[r] >= 0) ga.row(src[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

/// Column means over rows: n x m -> 1 x m.
template <typename S>
Var<S> mean_rows(Var<S> a) {
  const S inv = S(1) / static_cast<S>(a.rows());
  Mat<S> out = a.value().colwise().sum() * inv;
  const int ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, inv](Tape<S>& t, int self) {
    t.grad(ia).rowwise() += t.grad(self).row(0) * inv;
  });
}

/// Sum of 1x1 scalars.
template <typename S>
Var<S> add_scalars(std::initializer_list<Var<S>> terms) {
  Tape<S>* tape = terms.begin()->tape;
  Var<S> acc = *terms.begin();
  for (auto it = terms.begin() + 1; it != terms.end(); ++it) acc = add(acc, *it);
  (void)tape;
  return acc;
}

/// Mean absolute error over the rows where row_mask is true (all columns).
/// Gradient of |r| at r == 0 is taken as 0.
template <typename S>
Var<S> l1_mean(Var<S> pred, Var<S> target, const std::vector<bool>& row_mask) {
  require_same_shape(pred, target, "l1_mean");
  if (static_cast<Eigen::Index>(row_mask.size()) != pred.rows()) throw DimensionError("l1_mean: mask length mismatch");
  std::size_t rows = 0;
  for (bool b : row_mask) rows += b ? 1 : 0;
  if (rows == 0) throw Error("l1_mean: empty loss scope");
  const S denom = static_cast<S>(rows) * static_cast<S>(pred.cols());
  S total = 0;
  for (Eigen::Index r = 0; r < pred.rows(); ++r)
    if (row_mask[static_cast<std::size_t>(r)]) total += (pred.value().row(r) - target.value().row(r)).cwiseAbs().sum();
  Mat<S> out(1, 1);
  out(0, 0) = total / denom;
  const int ip = pred.id, it = target.id;
  return pred.tape->record(std::move(out), {pred, target}, [ip, it, row_mask, denom](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0) / denom;
    const Mat<S>& p = t.value(ip);
    const Mat<S>& y = t.value(it);
    Mat<S> d = Mat<S>::Zero(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      if (!row_mask[static_cast<std::size_t>(r)]) continue;
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const S diff = p(r, c) - y(r, c);
        d(r, c) = diff > S(0) ? g : (diff < S(0) ? -g : S(0));
      }
    }
    if (t.needs_grad(ip)) t.grad(ip) += d;
    if (t.needs_grad(it)) t.grad(it) -= d;
  });
}

/// Softmax cross-entropy of a 1 x C logit row against a class label.
template <typename S>
Var<S> softmax_cross_entropy(Var<S> logits, int label) {
  if (logits.rows() != 1 || label < 0 || label >= logits.cols()) throw DimensionError("softmax_cross_entropy: bad input");
  const RowVec<S> z = logits.value().row(0);
  const S mx = z.maxCoeff();
  RowVec<S> p = (z.array() - mx).exp().matrix();
  const S sum = p.sum();
  p /= sum;
  Mat<S> out(1, 1);
  out(0, 0) = -(z(label) - mx - std::log(sum));
  const int il = logits.id;
  return logits.tape->record(std::move(out), {logits}, [il, label, p](Tape<S>& t, int self) {
    RowVec<S> d = p;
    d(label) -= S(1);
    t.grad(il).row(0) += d * t.grad(self)(0, 0);
  });
}

/// Multi-head scaled dot-product self-attention without masking.
/// q, k, v are T x D with D divisible by heads; returns the concatenated
/// per-head outputs (T x D).
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int heads) {
  const Eigen::Index T = q.rows(), D = q.cols();
  if (heads < 1 || D % heads != 0) throw DimensionError("attention: width not divisible by heads");
  if (k.rows() != T || v.rows() != T || k.cols() != D || v.cols() != D) throw DimensionError("attention: q/k/v mismatch");
  const Eigen::Index dh = D / heads;
  const S inv = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Mat<S>> probs(static_cast<std::size_t>(heads));
  Mat<S> out(T, D);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    Mat<S> s = (qh * kh.transpose()) * inv;
    for (Eigen::Index r = 0; r < T; ++r) {
      const S mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * vh;
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(std::move(out), {q, k, v}, [iq, ik, iv, heads, dh, inv, probs = std::move(probs)](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    const Mat<S>& qv = t.value(iq);
    const Mat<S>& kv = t.value(ik);
    const Mat<S>& vv = t.value(iv);
    const bool nq = t.needs_grad(iq), nk = t.needs_grad(ik), nv = t.needs_grad(iv);
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& p = probs[static_cast<std::size_t>(h)];
      const auto gh = g.middleCols(h * dh, dh);
      if (nv) t.grad(iv).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
      if (!nq && !nk) continue;
      Mat<S> gp = gh * vv.middleCols(h * dh, dh).transpose();
      Mat<S> gs = p.cwiseProduct(gp);
      const Eigen::Matrix<S, Eigen::Dynamic, 1> rs = gs.rowwise().sum();
      gs -= p.cwiseProduct(rs.replicate(1, p.cols()));
      gs *= inv;
      if (nq) t.grad(iq).middleCols(h * dh, dh).noalias() += gs * kv.middleCols(h * dh, dh);
      if (nk) t.grad(ik).middleCols(h * dh, dh).noalias() += gs.transpose() * qv.middleCols(h * dh, dh);
    }
  });
}

/// Same-length 1-D convolution over time with zero padding.
/// x: T x Cin; w: (k*Cin) x Cout where kernel row i (0-indexed) occupies
/// rows [i*Cin, (i+1)*Cin) and reads x[t + i - (k-1)/2]; bias: 1 x Cout.
/// row_gate (length k, entries 0/1) multiplies each kernel row, realizing
/// (W . D) * Z with D constant across channels.
template <typename S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> bias, const std::vector<S>& row_gate) {
  const Eigen::Index T = x.rows(), cin = x.cols();
  const int k = static_cast<int>(row_gate.size());
  if (k < 1 || w.rows() != k * cin) throw DimensionError("conv1d: kernel shape mismatch");
  const Eigen::Index cout = w.cols();
  if (bias.rows() != 1 || bias.cols() != cout) throw DimensionError("conv1d: bias shape mismatch");
  const int c = (k - 1) / 2;
  Mat<S> out(T, cout);
  out.rowwise() = bias.value().row(0);
  for (int i = 0; i < k; ++i) {
    if (row_gate[static_cast<std::size_t>(i)] == S(0)) continue;
    const int off = i - c;
    // out[t] += gate * x[t + off] W_i for t with 0 <= t + off < T
    const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
    const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
    if (t1 <= t0) continue;
    out.middleRows(t0, t1 - t0).noalias() +=
        row_gate[static_cast<std::size_t>(i)] * (x.value().middleRows(t0 + off, t1 - t0) * w.value().middleRows(i * cin, cin));
  }
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, w, bias}, [ix, iw, ib, row_gate, c, cin](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    const Eigen::Index T = g.rows();
    if (t.needs_grad(ib)) t.grad(ib) += g.colwise().sum();
    const bool nx = t.needs_grad(ix), nw = t.needs_grad(iw);
    for (int i = 0; i < static_cast<int>(row_gate.size()); ++i) {
      const S gate = row_gate[static_cast<std::size_t>(i)];
      if (gate == S(0)) continue;
      const int off = i - c;
      const Eigen::Index t0 = std::max<Eigen::Index>(0, -off);
      const Eigen::Index t1 = std::min<Eigen::Index>(T, T - off);
      if (t1 <= t0) continue;
      const auto gs = g.middleRows(t0, t1 - t0);
      if (nw) t.grad(iw).middleRows(i * cin, cin).noalias() += gate * (t.value(ix).middleRows(t0 + off, t1 - t0).transpose() * gs);
      if (nx) t.grad(ix).middleRows(t0 + off, t1 - t0).noalias() += gate * (gs * t.value(iw).middleRows(i * cin, cin).transpose());
    }
  });
}

/// One unidirectional LSTM layer. Gate order in the 4H columns: input,
/// forget, cell candidate, output. reverse runs from t = T-1 down to 0.
/// Returns T x H hidden states aligned with input time.
template <typename S>
Var<S> lstm(Var<S> x, Var<S> wx, Var<S> wh, Var<S> bias, bool reverse) {
  const Eigen::Index T = x.rows();
  const Eigen::Index H = wh.rows();
  if (wx.rows() != x.cols() || wx.cols() != 4 * H || wh.cols() != 4 * H || bias.cols() != 4 * H)
    throw DimensionError("lstm: weight shape mismatch");
  Mat<S> xw = x.value() * wx.value();
  xw.rowwise() += bias.value().row(0);
  Mat<S> gates(T, 4 * H);  // post-activation i, f, g, o
  Mat<S> cells(T, H);
  Mat<S> hidden(T, H);
  RowVec<S> h_prev = RowVec<S>::Zero(H), c_prev = RowVec<S>::Zero(H);
  for (Eigen::Index s = 0; s < T; ++s) {
    const Eigen::Index t = reverse ? T - 1 - s : s;
    RowVec<S> a = xw.row(t) + h_prev * wh.value();
    for (Eigen::Index j = 0; j < H; ++j) {
      a(j) = S(1) / (S(1) + std::exp(-a(j)));
      a(H + j) = S(1) / (S(1) + std::exp(-a(H + j)));
      a(2 * H + j) = std::tanh(a(2 * H + j));
      a(3 * H + j) = S(1) / (S(1) + std::exp(-a(3 * H + j)));
    }
    RowVec<S> c = a.segment(H, H).cwiseProduct(c_prev) + a.segment(0, H).cwiseProduct(a.segment(2 * H, H));
    RowVec<S> h = a.segment(3 * H, H).cwiseProduct(c.array().tanh().matrix());
    gates.row(t) = a;
    cells.row(t) = c;
    hidden.row(t) = h;
    h_prev = h;
    c_prev = c;
  }
  const int ix = x.id, iwx = wx.id, iwh = wh.id, ib = bias.id;
  Mat<S> out = hidden;
  return x.tape->record(std::move(out), {x, wx, wh, bias},
                        [ix, iwx, iwh, ib, reverse, H, gates = std::move(gates), cells = std::move(cells)](Tape<S>& t, int self) {
                          const Mat<S>& g = t.grad(self);
                          const Mat<S>& hid = t.value(self);
                          const Mat<S>& whv = t.value(iwh);
                          const Eigen::Index T = g.rows();
                          Mat<S> dxw(T, 4 * H);
                          RowVec<S> dh_next = RowVec<S>::Zero(H), dc_next = RowVec<S>::Zero(H);
                          Mat<S> dwh = Mat<S>::Zero(H, 4 * H);
                          for (Eigen::Index s = T - 1; s >= 0; --s) {
                            const Eigen::Index tt = reverse ? T - 1 - s : s;
                            const bool has_prev = s > 0;
                            const Eigen::Index tp = reverse ? tt + 1 : tt - 1;
                            const RowVec<S> c_prev = has_prev ? RowVec<S>(cells.row(tp)) : RowVec<S>::Zero(H);
                            const RowVec<S> h_prev = has_prev ? RowVec<S>(hid.row(tp)) : RowVec<S>::Zero(H);
                            const auto a = gates.row(tt);
                            const RowVec<S> tc = cells.row(tt).array().tanh().matrix();
                            const RowVec<S> dh = g.row(tt) + dh_next;
                            RowVec<S> da(4 * H);
                            for (Eigen::Index j = 0; j < H; ++j) {
                              const S i = a(j), f = a(H + j), gg = a(2 * H + j), o = a(3 * H + j);
                              const S dc = dh(j) * o * (S(1) - tc(j) * tc(j)) + dc_next(j);
                              da(j) = dc * gg * i * (S(1) - i);
                              da(H + j) = dc * c_prev(j) * f * (S(1) - f);
                              da(2 * H + j) = dc * i * (S(1) - gg * gg);
                              da(3 * H + j) = dh(j) * tc(j) * o * (S(1) - o);
                              dc_next(j) = dc * f;
                            }
                            if (has_prev) dwh.noalias() += h_prev.transpose() * da;
                            dh_next = da * whv.transpose();
                            dxw.row(tt) = da;
                          }
                          if (t.needs_grad(iwh)) t.grad(iwh) += dwh;
                          if (t.needs_grad(ib)) t.grad(ib) += dxw.colwise().sum();
                          if (t.needs_grad(iwx)) t.grad(iwx).noalias() += t.value(ix).transpose() * dxw;
                          if (t.needs_grad(ix)) t.grad(ix).noalias() += dxw * t.value(iwx).transpose();
                        });
}

}  // namespace ag
}  // namespace ems
