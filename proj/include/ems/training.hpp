// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Pre-training under the composite objective
//   L = L_score + L_joint_input (+ the VQ term for the convolutional family)
// with either intensity-guided or uniform masking.

#include "ems/checkpoint.hpp"
#include "ems/corpus.hpp"
#include "ems/intensity.hpp"
#include "ems/masking.hpp"
#include "ems/models.hpp"
#include "ems/optim.hpp"

#include "json.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace ems {

enum class ModelFamily { Transformer, Npc };
enum class MaskStrategy { Ems, Uniform };
enum class InputMode { Joint, Separate };
enum class LossScope { MaskedOnly, AllFrames };

inline std::string_view family_name(ModelFamily f) { return f == ModelFamily::Transformer ? "transformer" : "npc"; }
inline std::string_view strategy_name(MaskStrategy s) { return s == MaskStrategy::Ems ? "ems" : "uniform"; }
inline std::string_view input_mode_name(InputMode m) { return m == InputMode::Joint ? "joint" : "separate"; }
inline std::string_view scope_name(LossScope s) { return s == LossScope::MaskedOnly ? "masked_only" : "all_frames"; }

inline ModelFamily parse_family(std::string_view s) {
  if (s == "transformer") return ModelFamily::Transformer;
  if (s == "npc") return ModelFamily::Npc;
  throw ConfigError("unknown model family '" + std::string(s) + "'");
}
inline MaskStrategy parse_strategy(std::string_view s) {
  if (s == "ems") return MaskStrategy::Ems;
  if (s == "uniform") return MaskStrategy::Uniform;
  throw ConfigError("unknown mask strategy '" + std::string(s) + "'");
}
inline InputMode parse_input_mode(std::string_view s) {
  if (s == "joint") return InputMode::Joint;
  if (s == "separate") return InputMode::Separate;
  throw ConfigError("unknown input mode '" + std::string(s) + "'");
}
inline LossScope parse_scope(std::string_view s) {
  if (s == "masked_only") return LossScope::MaskedOnly;
  if (s == "all_frames") return LossScope::AllFrames;
  throw ConfigError("unknown loss scope '" + std::string(s) + "'");
}

inline LossScope default_scope(ModelFamily f) { return f == ModelFamily::Transformer ? LossScope::MaskedOnly : LossScope::AllFrames; }

struct LossBreakdown {
  double l_score = 0.0;
  double l_joint_input = 0.0;
  std::optional<double> l_vq;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Input construction

template <typename S>
Mat<S> make_joint_input(const Mat<S>& features, const Mat<S>& score_embeddings) {
  if (features.rows() != score_embeddings.rows() || features.cols() != score_embeddings.cols())
    throw DimensionError("make_joint_input: features and score embeddings differ in shape");
  return features + score_embeddings;
}

template <typename S>
Mat<S> make_separate_input(const Mat<S>& features, const Mat<S>& score_embeddings) {
  if (features.rows() != score_embeddings.rows()) throw DimensionError("make_separate_input: length mismatch");
  Mat<S> out(features.rows(), features.cols() + score_embeddings.cols());
  out << features, score_embeddings;
  return out;
}

template <typename S>
Var<S> make_input(InputMode mode, Var<S> features, Var<S> score_embeddings) {
  if (features.rows() != score_embeddings.rows()) throw DimensionError("make_input: length mismatch");
  return mode == InputMode::Joint ? ag::add(features, score_embeddings) : ag::concat_cols(features, score_embeddings);
}

// ---------------------------------------------------------------------------
// Losses

template <typename S>
struct LossTerms {
  Var<S> total;
  LossBreakdown breakdown;
};

/// L1 over the scope for both heads, plus the VQ term when present.
template <typename S>
LossTerms<S> compute_losses(Var<S> joint_pred, Var<S> score_pred, Var<S> joint_target, Var<S> score_target, const std::vector<bool>& masked,
                            LossScope scope, std::optional<Var<S>> vq_loss = std::nullopt) {
  std::vector<bool> rows = scope == LossScope::AllFrames ? std::vector<bool>(static_cast<std::size_t>(joint_pred.rows()), true) : masked;
  if (scope == LossScope::MaskedOnly && std::none_of(rows.begin(), rows.end(), [](bool b) { return b; }))
    throw Error("compute_losses: masked_only scope with no masked frames");
  Var<S> l_joint = ag::l1_mean(joint_pred, joint_target, rows);
  Var<S> l_score = ag::l1_mean(score_pred, score_target, rows);
  LossTerms<S> out{ag::add(l_score, l_joint), {}};
  out.breakdown.l_score = static_cast<double>(l_score.scalar());
  out.breakdown.l_joint_input = static_cast<double>(l_joint.scalar());
  if (vq_loss) {
    out.total = ag::add(out.total, *vq_loss);
    out.breakdown.l_vq = static_cast<double>(vq_loss->scalar());
  }
  out.breakdown.total = out.breakdown.l_score + out.breakdown.l_joint_input + out.breakdown.l_vq.value_or(0.0);
  return out;
}

/// Value-level convenience for audits and tests.
template <typename S>
LossBreakdown compute_losses(const Mat<S>& joint_pred, const Mat<S>& score_pred, const Mat<S>& joint_target, const Mat<S>& score_target,
                             const MaskPlan& plan, LossScope scope) {
  Tape<S> tape;
  return compute_losses(tape.constant(joint_pred), tape.constant(score_pred), tape.constant(joint_target), tape.constant(score_target),
                        plan.masked(), scope)
      .breakdown;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  ModelFamily family = ModelFamily::Transformer;
  MaskStrategy strategy = MaskStrategy::Ems;
  InputMode input_mode = InputMode::Joint;
  std::optional<LossScope> loss_scope;  // family default when unset
  double k_percent = 25.0;
  int span = 7;
  ActionRatios action_ratios{0.8, 0.1, 0.1};
  int mask_size = 5;  // convolutional family: zeroed central kernel rows
  int steps = 2000;
  int batch_size = 4;
  double learning_rate = 5e-4;
  int warmup_steps = 100;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  TransformerConfig transformer;
  NpcConfig npc;

  LossScope scope() const { return loss_scope.value_or(default_scope(family)); }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"family", family_name(family)},
                        {"strategy", strategy_name(strategy)},
                        {"input_mode", input_mode_name(input_mode)},
                        {"loss_scope", scope_name(scope())},
                        {"k_percent", k_percent},
                        {"span", span},
                        {"action_ratios", action_ratios},
                        {"mask_size", mask_size},
                        {"steps", steps},
                        {"batch_size", batch_size},
                        {"learning_rate", learning_rate},
                        {"warmup_steps", warmup_steps},
                        {"clip_norm", clip_norm},
                        {"seed", seed},
                        {"checkpoint_every", checkpoint_every}};
    auto t = transformer.to_json();
    t.erase("family");
    t.erase("input_dim");
    t.erase("output_dim");
    j["transformer"] = t;
    auto n = npc.to_json();
    n.erase("family");
    n.erase("input_dim");
    n.erase("output_dim");
    n.erase("mask_m");
    n["ems_stride"] = npc.ems_stride;
    j["npc"] = n;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Model wrapper: encoder of either family plus the score aligner.

template <typename S>
class SslModel {
 public:
  SslModel() = default;

  /// feature_dim is d, the log-mel width.
  SslModel(const TrainConfig& cfg, int feature_dim) : family_(cfg.family), input_mode_(cfg.input_mode), feature_dim_(feature_dim) {
    if (feature_dim < 1) throw ConfigError("model: feature dimension must be >= 1");
    const int in = cfg.input_mode == InputMode::Joint ? feature_dim : 2 * feature_dim;
    if (family_ == ModelFamily::Transformer) {
      TransformerConfig t = cfg.transformer;
      t.input_dim = in;
      t.output_dim = feature_dim;
      t.seed = cfg.seed;
      transformer_ = TransformerEncoder<S>(t);
    } else {
      NpcConfig n = cfg.npc;
      n.input_dim = in;
      n.output_dim = feature_dim;
      n.mask_m = center_param_for_mask_size(cfg.mask_size);
      n.seed = cfg.seed;
      npc_ = NpcEncoder<S>(n);
    }
    Rng rng(derive_seed(cfg.seed, {0xA11u}));
    aligner_ = ScoreAligner<S>("aligner", feature_dim, rng);
  }

  ModelFamily family() const { return family_; }
  InputMode input_mode() const { return input_mode_; }
  int feature_dim() const { return feature_dim_; }
  int hidden_dim() const { return family_ == ModelFamily::Transformer ? transformer_.config().d_model : npc_.config().hidden; }
  TransformerEncoder<S>& transformer() { return transformer_; }
  NpcEncoder<S>& npc() { return npc_; }
  ScoreAligner<S>& aligner() { return aligner_; }
  FeatureNormalizer& normalizer() { return norm_; }
  const FeatureNormalizer& normalizer() const { return norm_; }

  nlohmann::json arch_json() const {
    nlohmann::json a = family_ == ModelFamily::Transformer ? transformer_.config().to_json() : npc_.config().to_json();
    a["input_mode"] = input_mode_name(input_mode_);
    a["feature_dim"] = feature_dim_;
    return a;
  }
  std::string arch_hash() const { return architecture_hash(arch_json()); }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps = family_ == ModelFamily::Transformer ? transformer_.parameters() : npc_.parameters();
    aligner_.collect(ps);
    return ps;
  }

  /// Builds the encoder input (joint or separate) from normalized features
  /// and scores. Returns (input, joint target, score column).
  struct Inputs {
    Var<S> input;
    Var<S> joint_target;
    Var<S> score_column;
  };

  Inputs build_inputs(Tape<S>& tape, const Mat<S>& features, std::span<const float> scores) {
    if (static_cast<Eigen::Index>(scores.size()) != features.rows()) throw DimensionError("model: score track length does not match T");
    Mat<S> col(features.rows(), 1);
    for (Eigen::Index t = 0; t < features.rows(); ++t) col(t, 0) = static_cast<S>(scores[static_cast<std::size_t>(t)]);
    Var<S> x = tape.constant(features);
    Var<S> s = tape.constant(std::move(col));
    Var<S> e = aligner_(tape, s);
    return {make_input(input_mode_, x, e), ag::add(x, e), s};
  }

  /// Forward pass on an already-built (and possibly masked) input.
  EncoderOutput<S> encode(Tape<S>& tape, Var<S> input, std::optional<std::span<const float>> ems_scores) {
    if (family_ == ModelFamily::Transformer) return transformer_.forward(tape, input);
    return npc_.forward(tape, input, ems_scores);
  }

 private:
  ModelFamily family_ = ModelFamily::Transformer;
  InputMode input_mode_ = InputMode::Joint;
  int feature_dim_ = 0;
  TransformerEncoder<S> transformer_;
  NpcEncoder<S> npc_;
  ScoreAligner<S> aligner_;
  FeatureNormalizer norm_;
};

/// Frame mask for one utterance at one step.
inline MaskPlan plan_for(const TrainConfig& cfg, std::span<const float> scores, std::uint64_t seed) {
  if (cfg.strategy == MaskStrategy::Ems) {
    MaskConfig mc;
    mc.k_percent = cfg.k_percent;
    mc.span = cfg.span;
    mc.action_ratios = cfg.action_ratios;
    mc.seed = seed;
    return ems_mask_plan(scores, mc);
  }
  return uniform_mask_plan(static_cast<int>(scores.size()), cfg.k_percent, cfg.span, seed, cfg.action_ratios);
}

/// One utterance's loss under the configured strategy. The transformer masks
/// input frames; the convolutional family applies the intensity-selected
/// kernel row removal instead (EMS) or the static D only (uniform).
template <typename S>
LossTerms<S> utterance_loss(SslModel<S>& model, Tape<S>& tape, const TrainConfig& cfg, const Mat<S>& features, std::span<const float> scores,
                            std::uint64_t mask_seed) {
  auto in = model.build_inputs(tape, features, scores);
  if (model.family() == ModelFamily::Transformer) {
    const MaskPlan plan = plan_for(cfg, scores, mask_seed);
    Var<S> masked = ag::gather_rows(in.input, plan_row_sources(plan));
    auto out = model.encode(tape, masked, std::nullopt);
    return compute_losses(out.joint, out.score, in.joint_target, in.score_column, plan.masked(), cfg.scope());
  }
  std::optional<std::span<const float>> ems;
  if (cfg.strategy == MaskStrategy::Ems) ems = scores;
  auto out = model.encode(tape, in.input, ems);
  std::vector<bool> masked(static_cast<std::size_t>(features.rows()), false);
  if (cfg.scope() == LossScope::MaskedOnly) masked = plan_for(cfg, scores, mask_seed).masked();
  return compute_losses(out.joint, out.score, in.joint_target, in.score_column, masked, cfg.scope(), out.vq_loss);
}

// ---------------------------------------------------------------------------
// Training state and loop

struct MetricsRecord {
  long step = 0;
  LossBreakdown loss;
  double wall_ms = 0.0;
  std::string strategy;
  bool transition = false;
  double grad_norm = 0.0;

  nlohmann::json to_json(bool include_wall = true) const {
    nlohmann::json j = {{"step", step},
                        {"l_score", loss.l_score},
                        {"l_joint_input", loss.l_joint_input},
                        {"l_vq", loss.l_vq ? nlohmann::json(*loss.l_vq) : nlohmann::json(nullptr)},
                        {"total", loss.total},
                        {"strategy", strategy},
                        {"grad_norm", grad_norm}};
    if (transition) j["transition"] = true;
    if (include_wall) j["wall_ms"] = wall_ms;
    return j;
  }
};

/// Prepared training data: normalized features and frozen score tracks.
template <typename S>
struct TrainingSet {
  std::vector<Mat<S>> features;
  std::vector<std::vector<float>> scores;
  std::vector<std::string> ids;

  std::size_t size() const { return features.size(); }
};

template <typename S>
TrainingSet<S> prepare_training_set(const std::vector<FeatureSequence>& data, const std::vector<IntensityTrack>& tracks,
                                    const FeatureNormalizer& norm) {
  if (data.size() != tracks.size()) throw DimensionError("training set: one intensity track per record required");
  TrainingSet<S> ts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ts.features.push_back(norm.template apply<S>(data[i].frames));
    ts.scores.push_back(resample_linear(tracks[i].scores, static_cast<std::size_t>(data[i].frames.rows())));
    ts.ids.push_back(data[i].utterance_id);
  }
  return ts;
}

template <typename S>
class Trainer {
 public:
  Trainer(TrainConfig cfg, int feature_dim) : cfg_(std::move(cfg)), model_(cfg_, feature_dim), opt_(adam_config(cfg_)) {
    strategy_history_.push_back({{"step", 0}, {"strategy", strategy_name(cfg_.strategy)}});
  }

  static AdamConfig adam_config(const TrainConfig& c) { return AdamConfig{c.learning_rate, 0.9, 0.999, 1e-8, c.warmup_steps, c.clip_norm}; }

  const TrainConfig& config() const { return cfg_; }
  SslModel<S>& model() { return model_; }
  Adam<S>& optimizer() { return opt_; }
  long step() const { return step_; }
  const nlohmann::json& strategy_history() const { return strategy_history_; }

  /// Batch indices for a step: distinct, drawn from a per-step stream.
  std::vector<std::size_t> batch_for(long step, std::size_t n) const {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(cfg_.seed, {0xBA7Cu, static_cast<std::uint64_t>(step)}));
    const std::size_t b = std::min(n, static_cast<std::size_t>(std::max(1, cfg_.batch_size)));
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
    idx.resize(b);
    return idx;
  }

  /// One optimizer update over the given batch. Components are batch means.
  MetricsRecord pretrain_step(const TrainingSet<S>& data, const std::vector<std::size_t>& batch) {
    if (batch.empty()) throw ConfigError("pretrain_step: empty batch");
    const long step = step_ + 1;
    auto params = model_.parameters();
    nn::zero_grads(params);
    MetricsRecord rec;
    rec.step = step;
    rec.strategy = std::string(strategy_name(cfg_.strategy));
    double l_score = 0.0, l_joint = 0.0, l_vq = 0.0;
    bool has_vq = false;
    const S inv = S(1) / static_cast<S>(batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const std::size_t i = batch[k];
      Tape<S> tape;
      const auto seed = derive_seed(cfg_.seed, {0x3A5Cu, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
      auto terms = utterance_loss(model_, tape, cfg_, data.features[i], data.scores[i], seed);
      if (!std::isfinite(terms.breakdown.total))
        throw NumericError("pretrain: non-finite loss at step " + std::to_string(step) + " on record " + data.ids[i] + " (l_score=" +
                           std::to_string(terms.breakdown.l_score) + ", l_joint_input=" + std::to_string(terms.breakdown.l_joint_input) + ")");
      l_score += terms.breakdown.l_score;
      l_joint += terms.breakdown.l_joint_input;
      if (terms.breakdown.l_vq) {
        has_vq = true;
        l_vq += *terms.breakdown.l_vq;
      }
      tape.backward(ag::scale(terms.total, inv));
    }
    rec.grad_norm = opt_.step(params);
    const double n = static_cast<double>(batch.size());
    rec.loss.l_score = l_score / n;
    rec.loss.l_joint_input = l_joint / n;
    if (has_vq) rec.loss.l_vq = l_vq / n;
    rec.loss.total = rec.loss.l_score + rec.loss.l_joint_input + rec.loss.l_vq.value_or(0.0);
    step_ = step;
    return rec;
  }

  /// Switches the masking strategy (warm start from a base run).
  void set_strategy(MaskStrategy s) {
    if (s == cfg_.strategy) return;
    cfg_.strategy = s;
    strategy_history_.push_back({{"step", step_ + 1}, {"strategy", strategy_name(s)}});
    pending_transition_ = true;
  }

  bool take_transition() {
    const bool t = pending_transition_;
    pending_transition_ = false;
    return t;
  }

  Checkpoint checkpoint() {
    Checkpoint ck;
    ck.header = {{"kind", "ssl"},
                 {"arch_hash", model_.arch_hash()},
                 {"arch", model_.arch_json()},
                 {"config", cfg_.to_json()},
                 {"step", step_},
                 {"adam_step", opt_.step_count()},
                 {"strategy", strategy_name(cfg_.strategy)},
                 {"strategy_history", strategy_history_},
                 {"seed", cfg_.seed}};
    auto params = model_.parameters();
    ck.put_params(params);
    for (auto* p : params) {
      auto& m = opt_.first_moments()[p->name];
      auto& v = opt_.second_moments()[p->name];
      if (m.size() == 0) continue;
      ck.put("adam.m/" + p->name, m.template cast<float>());
      ck.put("adam.v/" + p->name, v.template cast<float>());
    }
    if (!model_.normalizer().empty()) {
      ck.put("norm.mean", MatF(model_.normalizer().mean));
      ck.put("norm.inv_std", MatF(model_.normalizer().inv_std));
    }
    return ck;
  }

  /// Loads parameters (and, with full_state, optimizer moments and the step).
  void load(const Checkpoint& ck, bool full_state) {
    check_architecture(ck, "ssl", model_.arch_hash());
    auto params = model_.parameters();
    ck.load_params(params);
    if (const MatF* m = ck.find("norm.mean")) model_.normalizer().mean = m->row(0);
    if (const MatF* s = ck.find("norm.inv_std")) model_.normalizer().inv_std = s->row(0);
    step_ = ck.header.value("step", 0L);
    if (ck.header.contains("strategy_history")) strategy_history_ = ck.header.at("strategy_history");
    if (!full_state) {
      opt_ = Adam<S>(adam_config(cfg_));
      const auto base = parse_strategy(ck.header.value("strategy", std::string("uniform")));
      if (base != cfg_.strategy) {
        strategy_history_.push_back({{"step", step_ + 1}, {"strategy", strategy_name(cfg_.strategy)}});
        pending_transition_ = true;
      }
      return;
    }
    opt_.set_step_count(ck.header.value("adam_step", 0L));
    for (auto* p : params) {
      const MatF* m = ck.find("adam.m/" + p->name);
      const MatF* v = ck.find("adam.v/" + p->name);
      if (m == nullptr || v == nullptr) continue;
      opt_.first_moments()[p->name] = m->template cast<S>();
      opt_.second_moments()[p->name] = v->template cast<S>();
    }
  }

 private:
  TrainConfig cfg_;
  SslModel<S> model_;
  Adam<S> opt_;
  long step_ = 0;
  nlohmann::json strategy_history_ = nlohmann::json::array();
  bool pending_transition_ = false;
};

struct PretrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(long step, Checkpoint&)> on_checkpoint;
};

/// Runs cfg.steps updates after the trainer's current step.
template <typename S>
std::vector<MetricsRecord> pretrain(Trainer<S>& trainer, const TrainingSet<S>& data, const PretrainHooks& hooks = {}) {
  if (data.size() == 0) throw ConfigError("pretrain: empty training set");
  const auto& cfg = trainer.config();
  if (cfg.scope() == LossScope::MaskedOnly)
    for (std::size_t i = 0; i < data.size(); ++i)
      if (mask_budget(static_cast<std::size_t>(data.features[i].rows()), cfg.k_percent) < static_cast<std::size_t>(cfg.span))
        throw ConfigError("pretrain: span " + std::to_string(cfg.span) + " exceeds the mask budget of record " + data.ids[i] + " (T=" +
                          std::to_string(data.features[i].rows()) + "); no frame would be masked");
  std::vector<MetricsRecord> log;
  const auto t0 = std::chrono::steady_clock::now();
  const long start = trainer.step();
  const int every = trainer.config().checkpoint_every;
  for (long s = 0; s < trainer.config().steps; ++s) {
    const bool transition = trainer.take_transition();
    auto rec = trainer.pretrain_step(data, trainer.batch_for(start + s + 1, data.size()));
    rec.transition = transition;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_record) hooks.on_record(rec);
    log.push_back(std::move(rec));
    if (every > 0 && trainer.step() % every == 0 && hooks.on_checkpoint) {
      auto ck = trainer.checkpoint();
      hooks.on_checkpoint(trainer.step(), ck);
    }
  }
  return log;
}

/// Mean over the first `head` records vs. the mean over the last `tail` records.
inline std::pair<double, double> loss_reduction(const std::vector<MetricsRecord>& log, std::size_t head = 10, std::size_t tail = 100) {
  if (log.empty()) return {0.0, 0.0};
  head = std::min(head, log.size());
  tail = std::min(tail, log.size());
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < head; ++i) a += log[i].loss.total;
  for (std::size_t i = log.size() - tail; i < log.size(); ++i) b += log[i].loss.total;
  return {a / head, b / tail};
}

}  // namespace ems
