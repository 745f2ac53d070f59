// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The two encoder families.
//
// TransformerEncoder: input projection, sinusoidal positions, post-norm
// self-attention layers, a two-layer feed-forward joint head and a linear
// score head.
//
// NpcEncoder: a masked convolution over the input (kernel rows gated by D,
// optionally with one more row removed per utterance), residual convolution
// blocks, a vector-quantization bottleneck, and linear projections to the
// joint and score predictions. h_t only sees inputs within t +- r.

#include "ems/masking.hpp"
#include "ems/nn.hpp"

#include "json.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ems {

// ---------------------------------------------------------------------------
// Vector quantization

struct VqAssignment {
  std::vector<int> indices;
  std::vector<double> sq_errors;
};

/// Nearest codebook row per input row (squared Euclidean, lower index on ties).
template <typename S>
VqAssignment vq_nearest(const Mat<S>& z, const Mat<S>& codebook) {
  if (codebook.rows() < 1) throw ConfigError("vq: empty codebook");
  if (codebook.cols() != z.cols()) throw DimensionError("vq: code width does not match input width");
  VqAssignment a;
  a.indices.resize(static_cast<std::size_t>(z.rows()));
  a.sq_errors.resize(static_cast<std::size_t>(z.rows()));
  const Eigen::Matrix<S, Eigen::Dynamic, 1> cnorm = codebook.rowwise().squaredNorm();
  const Mat<S> cross = z * codebook.transpose();
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    int best = 0;
    S best_d = std::numeric_limits<S>::infinity();
    for (Eigen::Index j = 0; j < codebook.rows(); ++j) {
      const S dist = cnorm(j) - S(2) * cross(t, j);
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(j);
      }
    }
    a.indices[static_cast<std::size_t>(t)] = best;
    a.sq_errors[static_cast<std::size_t>(t)] = static_cast<double>((z.row(t) - codebook.row(best)).squaredNorm());
  }
  return a;
}

template <typename S>
struct VqResult {
  Var<S> quantized;  // exact codebook rows; straight-through gradient to z
  Var<S> loss;       // codebook term + commitment * commitment term
  std::vector<int> indices;
};

template <typename S>
VqResult<S> vq_quantize(Var<S> z, Var<S> codebook, S commitment = S(0.25)) {
  const auto assign = vq_nearest(z.value(), codebook.value());
  Tape<S>& tape = *z.tape;
  Mat<S> q(z.rows(), z.cols());
  for (Eigen::Index t = 0; t < z.rows(); ++t) q.row(t) = codebook.value().row(assign.indices[static_cast<std::size_t>(t)]);
  const int iz = z.id, ic = codebook.id;
  // straight-through: d quantized / d z = identity, no codebook gradient from this path
  Var<S> quantized = tape.record(q, {z}, [iz](Tape<S>& t, int self) { t.grad(iz) += t.grad(self); });

  const S n = static_cast<S>(z.value().size());
  Mat<S> diff = z.value() - q;  // z - q
  Mat<S> lv(1, 1);
  lv(0, 0) = (S(1) + commitment) * diff.squaredNorm() / n;
  Var<S> loss = tape.record(std::move(lv), {z, codebook},
                            [iz, ic, commitment, n, diff = std::move(diff), idx = assign.indices](Tape<S>& t, int self) {
                              const S g = t.grad(self)(0, 0);
                              if (t.needs_grad(iz)) t.grad(iz) += diff * (S(2) * commitment * g / n);
                              if (t.needs_grad(ic)) {
                                Mat<S>& gc = t.grad(ic);
                                for (std::size_t r = 0; r < idx.size(); ++r) gc.row(idx[r]) -= diff.row(static_cast<Eigen::Index>(r)) * (S(2) * g / n);
                              }
                            });
  return {quantized, loss, assign.indices};
}

// ---------------------------------------------------------------------------
// Shared output types

template <typename S>
struct EncoderOutput {
  Var<S> hidden;  // n x d_model representation H
  Var<S> joint;   // n x d joint-input prediction
  Var<S> score;   // n x 1 score prediction
  std::optional<Var<S>> vq_loss;
  std::vector<int> codes;
};

/// Value-level snapshot of an encoder pass.
struct Representation {
  MatF hidden;
  MatF joint;
  std::vector<float> score;
};

template <typename S>
Representation to_representation(const EncoderOutput<S>& out) {
  Representation r;
  r.hidden = out.hidden.value().template cast<float>();
  r.joint = out.joint.value().template cast<float>();
  r.score.resize(static_cast<std::size_t>(out.score.rows()));
  for (Eigen::Index t = 0; t < out.score.rows(); ++t) r.score[static_cast<std::size_t>(t)] = static_cast<float>(out.score.value()(t, 0));
  if (!r.hidden.array().isFinite().all() || !r.joint.array().isFinite().all()) throw NumericError("encoder produced non-finite activations");
  return r;
}

// ---------------------------------------------------------------------------
// Transformer

struct TransformerConfig {
  int input_dim = 40;    // encoder input width (2d for separate input)
  int output_dim = 40;   // joint prediction width d
  int layers = 3;
  int d_model = 128;
  int heads = 4;
  int ff_dim = 256;
  bool positional_encoding = true;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"family", "transformer"}, {"input_dim", input_dim}, {"output_dim", output_dim}, {"layers", layers}, {"d_model", d_model},
            {"heads", heads}, {"ff_dim", ff_dim}, {"positional_encoding", positional_encoding}};
  }
};

template <typename S>
Mat<S> sinusoidal_positions(Eigen::Index T, int d) {
  Mat<S> pe(T, d);
  for (Eigen::Index t = 0; t < T; ++t)
    for (int i = 0; i < d; ++i) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * (i / 2)) / d);
      pe(t, i) = static_cast<S>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

/// Joint head (two-layer feed-forward) and score head (linear) over H.
template <typename S>
struct PredictionHeads {
  nn::FeedForward<S> joint;
  nn::Linear<S> score;

  PredictionHeads() = default;
  PredictionHeads(const std::string& name, int hidden_dim, int out_dim, Rng& rng)
      : joint(name + ".joint", hidden_dim, hidden_dim, out_dim, rng), score(name + ".score", hidden_dim, 1, rng) {}

  std::pair<Var<S>, Var<S>> operator()(Tape<S>& tape, Var<S> h) { return {joint(tape, h), score(tape, h)}; }

  void collect(nn::ParamList<S>& out) {
    joint.collect(out);
    score.collect(out);
  }
};

template <typename S>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  explicit TransformerEncoder(const TransformerConfig& cfg) : cfg_(cfg) {
    if (cfg.layers < 1 || cfg.d_model < 1 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0 || cfg.input_dim < 1 || cfg.output_dim < 1 ||
        cfg.ff_dim < 1)
      throw ConfigError("transformer: invalid layer sizes (d_model must be divisible by heads)");
    Rng rng(derive_seed(cfg.seed, {0x7F0u}));
    input_proj_ = nn::Linear<S>("transformer.input", cfg.input_dim, cfg.d_model, rng);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "transformer.layer" + std::to_string(l);
      Layer layer;
      layer.q = nn::Linear<S>(p + ".attn.q", cfg.d_model, cfg.d_model, rng);
      layer.k = nn::Linear<S>(p + ".attn.k", cfg.d_model, cfg.d_model, rng);
      layer.v = nn::Linear<S>(p + ".attn.v", cfg.d_model, cfg.d_model, rng);
      layer.o = nn::Linear<S>(p + ".attn.o", cfg.d_model, cfg.d_model, rng);
      layer.norm1 = nn::LayerNorm<S>(p + ".norm1", cfg.d_model);
      layer.ff = nn::FeedForward<S>(p + ".ff", cfg.d_model, cfg.ff_dim, cfg.d_model, rng);
      layer.norm2 = nn::LayerNorm<S>(p + ".norm2", cfg.d_model);
      layers_.push_back(std::move(layer));
    }
    heads_ = PredictionHeads<S>("transformer.heads", cfg.d_model, cfg.output_dim, rng);
  }

  const TransformerConfig& config() const { return cfg_; }
  PredictionHeads<S>& heads() { return heads_; }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    input_proj_.collect(ps);
    for (auto& l : layers_) {
      l.q.collect(ps);
      l.k.collect(ps);
      l.v.collect(ps);
      l.o.collect(ps);
      l.norm1.collect(ps);
      l.ff.collect(ps);
      l.norm2.collect(ps);
    }
    heads_.collect(ps);
    return ps;
  }

  /// Encodes a T x input_dim matrix into H (T x d_model) plus head outputs.
  EncoderOutput<S> forward(Tape<S>& tape, Var<S> input) {
    if (input.cols() != cfg_.input_dim)
      throw DimensionError("transformer: expected input width " + std::to_string(cfg_.input_dim) + ", got " + std::to_string(input.cols()));
    if (input.rows() < 1) throw DimensionError("transformer: empty input");
    Var<S> x = input_proj_(tape, input);
    if (cfg_.positional_encoding) x = ag::add(x, tape.constant(sinusoidal_positions<S>(input.rows(), cfg_.d_model)));
    for (auto& l : layers_) {
      Var<S> a = ag::attention(l.q(tape, x), l.k(tape, x), l.v(tape, x), cfg_.heads);
      x = l.norm1(tape, ag::add(x, l.o(tape, a)));
      x = l.norm2(tape, ag::add(x, l.ff(tape, x)));
    }
    auto [joint, score] = heads_(tape, x);
    return {x, joint, score, std::nullopt, {}};
  }

 private:
  struct Layer {
    nn::Linear<S> q, k, v, o;
    nn::LayerNorm<S> norm1;
    nn::FeedForward<S> ff;
    nn::LayerNorm<S> norm2;
  };

  TransformerConfig cfg_;
  nn::Linear<S> input_proj_;
  std::vector<Layer> layers_;
  PredictionHeads<S> heads_;
};

// ---------------------------------------------------------------------------
// NPC

struct NpcConfig {
  int input_dim = 40;
  int output_dim = 40;
  int conv_blocks = 2;
  int conv_kernel = 3;
  int hidden = 64;  // conv width, equal to the code width
  int masked_kernel = 15;
  int mask_m = 3;  // D zeroes 2m central rows
  int codebook_size = 64;
  double commitment = 0.25;
  int ems_stride = 0;  // 0 selects stride = masked_kernel
  bool quantize = true;
  std::uint64_t seed = 0;

  int stride() const { return ems_stride > 0 ? ems_stride : masked_kernel; }

  nlohmann::json to_json() const {
    return {{"family", "npc"},         {"input_dim", input_dim},       {"output_dim", output_dim},     {"conv_blocks", conv_blocks},
            {"conv_kernel", conv_kernel}, {"hidden", hidden},         {"masked_kernel", masked_kernel}, {"mask_m", mask_m},
            {"codebook_size", codebook_size}, {"commitment", commitment}, {"quantize", quantize}};
  }
};

struct ReceptiveField {
  int radius;
  int size;
};

/// r = (masked_kernel - 1)/2 + sum over blocks of (conv_kernel - 1)/2; R = 2r + 1.
inline ReceptiveField receptive_field(const NpcConfig& cfg) {
  if (cfg.masked_kernel < 1 || cfg.masked_kernel % 2 == 0 || cfg.conv_kernel < 1 || cfg.conv_kernel % 2 == 0 || cfg.conv_blocks < 0)
    throw ConfigError("npc: kernel sizes must be odd and positive");
  const int r = (cfg.masked_kernel - 1) / 2 + cfg.conv_blocks * ((cfg.conv_kernel - 1) / 2);
  return {r, 2 * r + 1};
}

template <typename S>
class NpcEncoder {
 public:
  NpcEncoder() = default;
  explicit NpcEncoder(const NpcConfig& cfg) : cfg_(cfg) {
    if (cfg.hidden < 1 || cfg.codebook_size < 1 || cfg.input_dim < 1 || cfg.output_dim < 1) throw ConfigError("npc: invalid layer sizes");
    static_mask_ = build_kernel_mask(cfg.masked_kernel, cfg.mask_m, 1);
    (void)receptive_field(cfg);
    Rng rng(derive_seed(cfg.seed, {0x4E9u}));
    masked_ = nn::Conv1d<S>("npc.masked_conv", cfg.input_dim, cfg.hidden, cfg.masked_kernel, rng);
    for (int b = 0; b < cfg.conv_blocks; ++b) blocks_.emplace_back("npc.block" + std::to_string(b), cfg.hidden, cfg.hidden, cfg.conv_kernel, rng);
    codebook_ = Parameter<S>("npc.vq.codebook", nn::random_normal<S>(cfg.codebook_size, cfg.hidden, 0.5, rng));
    projection_ = nn::Linear<S>("npc.projection", cfg.hidden, cfg.output_dim, rng);
    score_ = nn::Linear<S>("npc.score", cfg.hidden, 1, rng);
  }

  const NpcConfig& config() const { return cfg_; }
  ReceptiveField receptive() const { return receptive_field(cfg_); }
  const MatF& static_mask() const { return static_mask_; }
  Parameter<S>& masked_weight() { return masked_.weight; }
  Parameter<S>& codebook() { return codebook_; }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    masked_.collect(ps);
    for (auto& b : blocks_) b.collect(ps);
    if (cfg_.quantize) ps.push_back(&codebook_);
    projection_.collect(ps);
    score_.collect(ps);
    return ps;
  }

  /// Effective k x 1 kernel mask: D, with the intensity-selected row also
  /// zeroed when scores are given.
  MatF effective_mask(std::optional<std::span<const float>> scores) const {
    if (!scores) return static_mask_;
    const int pos = ems_kernel_position(*scores, cfg_.masked_kernel, cfg_.stride());
    return combine_kernel_masks(static_mask_, pos);
  }

  /// scores enables the per-utterance kernel-row zeroing.
  EncoderOutput<S> forward(Tape<S>& tape, Var<S> input, std::optional<std::span<const float>> scores = std::nullopt) {
    if (input.cols() != cfg_.input_dim)
      throw DimensionError("npc: expected input width " + std::to_string(cfg_.input_dim) + ", got " + std::to_string(input.cols()));
    const auto rf = receptive();
    if (input.rows() < rf.size)
      throw DimensionError("npc: sequence length " + std::to_string(input.rows()) + " is shorter than the receptive field " + std::to_string(rf.size));
    const MatF mask = effective_mask(scores);
    Var<S> h = ag::gelu(masked_(tape, input, kernel_row_gate<S>(mask)));
    for (auto& b : blocks_) h = ag::add(h, ag::gelu(b(tape, h)));
    if (!cfg_.quantize) return {h, projection_(tape, h), score_(tape, h), std::nullopt, {}};
    auto vq = vq_quantize(h, tape.leaf(codebook_), static_cast<S>(cfg_.commitment));
    Var<S> joint = projection_(tape, vq.quantized);
    Var<S> score = score_(tape, vq.quantized);
    return {h, joint, score, vq.loss, std::move(vq.indices)};
  }

 private:
  NpcConfig cfg_;
  MatF static_mask_;
  nn::Conv1d<S> masked_;
  std::vector<nn::Conv1d<S>> blocks_;
  Parameter<S> codebook_;
  nn::Linear<S> projection_;
  nn::Linear<S> score_;
};

}  // namespace ems
