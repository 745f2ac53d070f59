// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Frame-level emotion intensity: a trainable extractor (convolutional
// encoder, BiLSTM intensity and emotion heads), an energy heuristic, and the
// linear aligner that lifts scalar scores into the encoder feature space.

#include "ems/checkpoint.hpp"
#include "ems/corpus.hpp"
#include "ems/nn.hpp"
#include "ems/optim.hpp"
#include "ems/stats.hpp"

#include "json.hpp"

#include <array>
#include <chrono>
#include <functional>
#include <string>
#include <vector>

namespace ems {

enum class IntensitySource { Model, Heuristic, GroundTruth };

inline std::string_view source_name(IntensitySource s) {
  switch (s) {
    case IntensitySource::Model: return "model";
    case IntensitySource::Heuristic: return "heuristic";
    case IntensitySource::GroundTruth: return "ground_truth";
  }
  return "?";
}

inline IntensitySource parse_source(std::string_view s) {
  if (s == "model") return IntensitySource::Model;
  if (s == "heuristic") return IntensitySource::Heuristic;
  if (s == "ground_truth") return IntensitySource::GroundTruth;
  throw ConfigError("unknown intensity source '" + std::string(s) + "'");
}

struct IntensityTrack {
  std::vector<float> scores;
  IntensitySource source = IntensitySource::Heuristic;
  std::string utterance_id;
};

inline IntensityTrack ground_truth_track(const FeatureSequence& fs) {
  return {fs.truth_frame_intensity, IntensitySource::GroundTruth, fs.utterance_id};
}

/// Per-frame RMS of the mel power spectrum, min-max normalized over the
/// utterance. Zero dynamic range maps to all zeros.
inline IntensityTrack heuristic_intensity(const FeatureSequence& fs) {
  const Eigen::Index T = fs.frames.rows();
  if (T < 1) throw DimensionError("heuristic_intensity: empty feature sequence");
  std::vector<double> rms(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t)
    rms[static_cast<std::size_t>(t)] = std::sqrt(fs.frames.row(t).cast<double>().array().exp().mean());
  const auto [lo, hi] = std::minmax_element(rms.begin(), rms.end());
  const double lo_v = *lo, range = *hi - *lo;
  IntensityTrack tr{std::vector<float>(static_cast<std::size_t>(T), 0.0f), IntensitySource::Heuristic, fs.utterance_id};
  if (range > 0.0)
    for (std::size_t t = 0; t < rms.size(); ++t) tr.scores[t] = static_cast<float>((rms[t] - lo_v) / range);
  return tr;
}

struct ExtractorConfig {
  int input_dim = 40;
  int conv_layers = 4;  // reference depth 12
  int conv_channels = 32;
  int conv_kernel = 5;
  int lstm_hidden = 32;
  int fc_hidden = 32;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"input_dim", input_dim}, {"conv_layers", conv_layers}, {"conv_channels", conv_channels}, {"conv_kernel", conv_kernel},
            {"lstm_hidden", lstm_hidden}, {"fc_hidden", fc_hidden}};
  }
};

template <typename S>
struct ExtractorOutput {
  Var<S> frame_scores;   // T x 1, in [0,1]
  Var<S> pooled_score;   // 1 x 1, mean over frames
  Var<S> emotion_logits;  // 1 x 4
};

/// Conv + BiLSTM intensity extractor. Per-frame intensity comes from the head's
/// pre-pooling outputs; the pooled value is the utterance-level score.
template <typename S>
class IntensityExtractor {
 public:
  IntensityExtractor() = default;
  explicit IntensityExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
    if (cfg.conv_layers < 1 || cfg.conv_channels < 1 || cfg.lstm_hidden < 1 || cfg.fc_hidden < 1 || cfg.input_dim < 1)
      throw ConfigError("extractor: layer sizes must be positive");
    Rng rng(derive_seed(cfg.seed, {0x1E7u}));
    int in = cfg.input_dim;
    for (int l = 0; l < cfg.conv_layers; ++l) {
      convs_.emplace_back("extractor.conv" + std::to_string(l), in, cfg.conv_channels, cfg.conv_kernel, rng);
      in = cfg.conv_channels;
    }
    intensity_lstm_ = nn::BiLstm<S>("extractor.intensity.lstm", in, cfg.lstm_hidden, rng);
    fc1_ = nn::Linear<S>("extractor.intensity.fc1", 2 * cfg.lstm_hidden, cfg.fc_hidden, rng);
    fc2_ = nn::Linear<S>("extractor.intensity.fc2", cfg.fc_hidden, 1, rng);
    emotion_lstm_ = nn::BiLstm<S>("extractor.emotion.lstm", in, cfg.lstm_hidden, rng);
    emotion_out_ = nn::Linear<S>("extractor.emotion.out", 2 * cfg.lstm_hidden, kNumEmotions, rng);
  }

  const ExtractorConfig& config() const { return cfg_; }
  FeatureNormalizer& normalizer() { return norm_; }
  const FeatureNormalizer& normalizer() const { return norm_; }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    for (auto& c : convs_) c.collect(ps);
    intensity_lstm_.collect(ps);
    fc1_.collect(ps);
    fc2_.collect(ps);
    emotion_lstm_.collect(ps);
    emotion_out_.collect(ps);
    return ps;
  }

  /// x is the normalized T x d feature matrix.
  ExtractorOutput<S> forward(Tape<S>& tape, Var<S> x) {
    if (x.cols() != cfg_.input_dim)
      throw DimensionError("extractor: expected feature dimension " + std::to_string(cfg_.input_dim) + ", got " + std::to_string(x.cols()));
    Var<S> h = x;
    for (auto& c : convs_) h = ag::gelu(c(tape, h));
    Var<S> hi = intensity_lstm_(tape, h);
    Var<S> frame = ag::sigmoid(fc2_(tape, ag::gelu(fc1_(tape, hi))));
    Var<S> pooled = ag::mean_rows(frame);
    Var<S> he = emotion_lstm_(tape, h);
    Var<S> logits = emotion_out_(tape, ag::mean_rows(he));
    return {frame, pooled, logits};
  }

  std::string arch_hash() const { return architecture_hash(cfg_.to_json()); }

 private:
  ExtractorConfig cfg_;
  FeatureNormalizer norm_;
  std::vector<nn::Conv1d<S>> convs_;
  nn::BiLstm<S> intensity_lstm_;
  nn::Linear<S> fc1_, fc2_;
  nn::BiLstm<S> emotion_lstm_;
  nn::Linear<S> emotion_out_;
};

struct IntensityPrediction {
  IntensityTrack track;
  std::array<double, kNumEmotions> emotion_distribution{};
  double pooled_score = 0.0;
};

template <typename S>
IntensityPrediction predict_intensity(IntensityExtractor<S>& model, const FeatureSequence& fs) {
  if (fs.dim() != model.config().input_dim)
    throw DimensionError("predict_intensity: feature dimension " + std::to_string(fs.dim()) + " does not match model input " +
                         std::to_string(model.config().input_dim));
  Tape<S> tape;
  auto out = model.forward(tape, tape.constant(model.normalizer().template apply<S>(fs.frames)));
  const Mat<S>& fr = out.frame_scores.value();
  if (!all_finite(fr) || !all_finite(out.emotion_logits.value()))
    throw NumericError("predict_intensity: non-finite activations for utterance " + fs.utterance_id);
  IntensityPrediction p;
  p.track.source = IntensitySource::Model;
  p.track.utterance_id = fs.utterance_id;
  p.track.scores.resize(static_cast<std::size_t>(fr.rows()));
  for (Eigen::Index t = 0; t < fr.rows(); ++t) p.track.scores[static_cast<std::size_t>(t)] = static_cast<float>(std::clamp<double>(fr(t, 0), 0.0, 1.0));
  const RowVec<S> z = out.emotion_logits.value().row(0);
  const double mx = static_cast<double>(z.maxCoeff());
  double sum = 0.0;
  for (int c = 0; c < kNumEmotions; ++c) sum += p.emotion_distribution[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(z(c)) - mx);
  for (auto& v : p.emotion_distribution) v /= sum;
  p.pooled_score = static_cast<double>(out.pooled_score.scalar());
  return p;
}

/// L1 frame regression plus weighted emotion cross-entropy for one utterance.
template <typename S>
struct ExtractorLoss {
  Var<S> total;
  S l1 = 0;
  S ce = 0;
};

template <typename S>
ExtractorLoss<S> extractor_loss(IntensityExtractor<S>& model, Tape<S>& tape, const Mat<S>& normalized, const std::vector<float>& truth,
                                Emotion label, S ce_weight) {
  auto out = model.forward(tape, tape.constant(normalized));
  Mat<S> target(static_cast<Eigen::Index>(truth.size()), 1);
  for (std::size_t t = 0; t < truth.size(); ++t) target(static_cast<Eigen::Index>(t), 0) = static_cast<S>(truth[t]);
  Var<S> l1 = ag::l1_mean(out.frame_scores, tape.constant(std::move(target)), std::vector<bool>(truth.size(), true));
  Var<S> ce = ag::softmax_cross_entropy(out.emotion_logits, static_cast<int>(label));
  return {ag::add(l1, ag::scale(ce, ce_weight)), l1.scalar(), ce.scalar()};
}

struct IntensityTrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double ce_weight = 0.2;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
};

struct IntensityEpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_l1 = 0.0;
  double dev_mae = 0.0;
  double dev_accuracy = 0.0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"train_l1", train_l1}, {"dev_mae", dev_mae}, {"dev_accuracy", dev_accuracy}, {"wall_ms", wall_ms}};
  }
};

struct ExtractorEval {
  double mae = 0.0;
  double accuracy = 0.0;
};

template <typename S>
ExtractorEval evaluate_extractor(IntensityExtractor<S>& model, const std::vector<FeatureSequence>& data) {
  ExtractorEval ev;
  if (data.empty()) return ev;
  double abs_sum = 0.0, frames = 0.0;
  int correct = 0;
  for (const auto& fs : data) {
    const auto p = predict_intensity(model, fs);
    for (std::size_t t = 0; t < p.track.scores.size(); ++t) abs_sum += std::abs(p.track.scores[t] - fs.truth_frame_intensity[t]);
    frames += static_cast<double>(p.track.scores.size());
    const auto best = std::max_element(p.emotion_distribution.begin(), p.emotion_distribution.end()) - p.emotion_distribution.begin();
    correct += best == static_cast<int>(fs.emotion) ? 1 : 0;
  }
  ev.mae = abs_sum / frames;
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return ev;
}

/// Trains the extractor in place. Fits the feature normalizer on `train`.
/// epoch 0 of the log is the untrained evaluation.
template <typename S>
std::vector<IntensityEpochRecord> train_intensity(IntensityExtractor<S>& model, const std::vector<FeatureSequence>& train,
                                                  const std::vector<FeatureSequence>& dev, const IntensityTrainConfig& cfg,
                                                  const std::function<void(const IntensityEpochRecord&)>& on_epoch = {}) {
  if (train.empty()) throw ConfigError("train_intensity: empty training split");
  for (const auto& fs : train)
    if (static_cast<Eigen::Index>(fs.truth_frame_intensity.size()) != fs.frames.rows())
      throw DimensionError("train_intensity: record " + fs.utterance_id + " lacks a frame intensity track");
  std::vector<IntensityEpochRecord> log;
  if (cfg.epochs <= 0) return log;
  model.normalizer() = FeatureNormalizer::fit(train);
  std::vector<Mat<S>> inputs;
  inputs.reserve(train.size());
  for (const auto& fs : train) inputs.push_back(model.normalizer().template apply<S>(fs.frames));

  auto params = model.parameters();
  Adam<S> opt(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 0, cfg.clip_norm});
  const auto t_start = std::chrono::steady_clock::now();
  auto epoch_stats = [&](int epoch, double loss, double l1) {
    IntensityEpochRecord r;
    r.epoch = epoch;
    r.train_loss = loss;
    r.train_l1 = l1;
    const auto ev = evaluate_extractor(model, dev.empty() ? train : dev);
    r.dev_mae = ev.mae;
    r.dev_accuracy = ev.accuracy;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    log.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  // epoch 0: loss of the initialization over the training split
  {
    double loss = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      Tape<S> tape;
      auto l = extractor_loss(model, tape, inputs[i], train[i].truth_frame_intensity, train[i].emotion, static_cast<S>(cfg.ce_weight));
      loss += static_cast<double>(l.total.scalar());
      l1 += static_cast<double>(l.l1);
    }
    epoch_stats(0, loss / train.size(), l1 / train.size());
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, {0x7A1u, static_cast<std::uint64_t>(epoch)}));
    shuffle_in_place(order, rng);
    double loss = 0.0, l1 = 0.0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      nn::zero_grads(params);
      const std::size_t end = std::min(order.size(), b + batch);
      for (std::size_t k = b; k < end; ++k) {
        const std::size_t i = order[k];
        Tape<S> tape;
        auto l = extractor_loss(model, tape, inputs[i], train[i].truth_frame_intensity, train[i].emotion, static_cast<S>(cfg.ce_weight));
        const double v = static_cast<double>(l.total.scalar());
        if (!std::isfinite(v))
          throw NumericError("train_intensity: non-finite loss at epoch " + std::to_string(epoch) + " on record " + train[i].utterance_id);
        loss += v;
        l1 += static_cast<double>(l.l1);
        tape.backward(ag::scale(l.total, S(1) / static_cast<S>(end - b)));
      }
      opt.step(params);
    }
    epoch_stats(epoch, loss / train.size(), l1 / train.size());
  }
  return log;
}

template <typename S>
Checkpoint extractor_checkpoint(IntensityExtractor<S>& model) {
  Checkpoint ck;
  ck.header = {{"kind", "intensity"}, {"arch_hash", model.arch_hash()}, {"config", model.config().to_json()}, {"seed", model.config().seed}};
  ck.put_params(model.parameters());
  if (!model.normalizer().empty()) {
    ck.put("norm.mean", MatF(model.normalizer().mean));
    ck.put("norm.inv_std", MatF(model.normalizer().inv_std));
  }
  return ck;
}

inline ExtractorConfig extractor_config_from_json(const nlohmann::json& j) {
  ExtractorConfig c;
  c.input_dim = j.at("input_dim");
  c.conv_layers = j.at("conv_layers");
  c.conv_channels = j.at("conv_channels");
  c.conv_kernel = j.at("conv_kernel");
  c.lstm_hidden = j.at("lstm_hidden");
  c.fc_hidden = j.at("fc_hidden");
  return c;
}

template <typename S>
IntensityExtractor<S> extractor_from_checkpoint(const Checkpoint& ck) {
  if (ck.header.value("kind", std::string()) != "intensity") throw ArchitectureMismatch("checkpoint is not an intensity extractor");
  IntensityExtractor<S> model(extractor_config_from_json(ck.header.at("config")));
  check_architecture(ck, "intensity", model.arch_hash());
  ck.load_params(model.parameters());
  if (const MatF* m = ck.find("norm.mean")) model.normalizer().mean = m->row(0);
  if (const MatF* s = ck.find("norm.inv_std")) model.normalizer().inv_std = s->row(0);
  return model;
}

// ---------------------------------------------------------------------------
// Score alignment

/// Linear map from a scalar score to a d-dimensional vector.
template <typename S>
struct ScoreAligner {
  nn::Linear<S> map;

  ScoreAligner() = default;
  ScoreAligner(const std::string& name, int d, Rng& rng, bool with_bias = true) : map(name, 1, d, rng, with_bias) {}

  int dim() const { return map.out_dim(); }

  /// scores: T x 1 column -> T x d embeddings.
  Var<S> operator()(Tape<S>& tape, Var<S> scores) { return map(tape, scores); }

  void collect(nn::ParamList<S>& out) { map.collect(out); }
};

/// Linear resampling to target_T samples with both endpoints preserved.
inline std::vector<float> resample_linear(const std::vector<float>& x, std::size_t target_T) {
  if (target_T < 1) throw ConfigError("resample: target length must be >= 1");
  if (x.empty()) throw DimensionError("resample: empty track");
  if (x.size() == target_T) return x;
  std::vector<float> out(target_T);
  if (target_T == 1) {
    out[0] = x[(x.size() - 1) / 2];
    return out;
  }
  const double step = static_cast<double>(x.size() - 1) / static_cast<double>(target_T - 1);
  for (std::size_t t = 0; t < target_T; ++t) {
    const double pos = step * static_cast<double>(t);
    const auto i0 = std::min(static_cast<std::size_t>(pos), x.size() - 1);
    const auto i1 = std::min(i0 + 1, x.size() - 1);
    const double w = pos - static_cast<double>(i0);
    out[t] = static_cast<float>((1.0 - w) * x[i0] + w * x[i1]);
  }
  return out;
}

template <typename S>
struct AlignedScores {
  std::vector<float> scores;
  Mat<S> embeddings;  // T x d
};

template <typename S>
AlignedScores<S> align_scores(const IntensityTrack& track, ScoreAligner<S>& aligner, std::size_t target_T) {
  AlignedScores<S> out;
  out.scores = resample_linear(track.scores, target_T);
  Tape<S> tape;
  Mat<S> col(static_cast<Eigen::Index>(target_T), 1);
  for (std::size_t t = 0; t < target_T; ++t) col(static_cast<Eigen::Index>(t), 0) = static_cast<S>(out.scores[t]);
  out.embeddings = aligner(tape, tape.constant(std::move(col))).value();
  return out;
}

}  // namespace ems
