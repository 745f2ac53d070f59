// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end stages shared by the command-line tool and the acceptance runs:
// corpus split, score tracks, pre-training, probing, comparison cells.

#include "ems/config.hpp"

#include <functional>
#include <memory>
#include <optional>

namespace ems {

struct Splits {
  std::vector<FeatureSequence> train, dev, test;
};

inline Splits make_splits(const ExperimentConfig& cfg, const std::vector<FeatureSequence>& data) {
  auto parts = split_corpus(data, {cfg.split[0], cfg.split[1], cfg.split[2]}, derive_seed(cfg.corpus.seed, {0x5B17u}));
  return {std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
}

/// Trains the extractor on the train split (dev split for model selection logs).
inline IntensityExtractor<float> train_extractor(const ExperimentConfig& cfg, const Splits& s,
                                                 const std::function<void(const IntensityEpochRecord&)>& on_epoch = {}) {
  ExtractorConfig ec = cfg.intensity.model;
  ec.input_dim = static_cast<int>(s.train.front().dim());
  IntensityExtractor<float> model(ec);
  model.normalizer() = FeatureNormalizer::fit(s.train);
  train_intensity(model, s.train, s.dev, cfg.intensity.train, on_epoch);
  return model;
}

inline std::vector<IntensityTrack> score_tracks(IntensitySource source, IntensityExtractor<float>* model, const std::vector<FeatureSequence>& data) {
  std::vector<IntensityTrack> out;
  out.reserve(data.size());
  for (const auto& fs : data) {
    switch (source) {
      case IntensitySource::GroundTruth: out.push_back(ground_truth_track(fs)); break;
      case IntensitySource::Heuristic: out.push_back(heuristic_intensity(fs)); break;
      case IntensitySource::Model:
        if (model == nullptr) throw ConfigError("score tracks: the model source needs an extractor");
        out.push_back(predict_intensity(*model, fs).track);
        break;
    }
  }
  return out;
}

struct SplitTracks {
  std::vector<IntensityTrack> train, dev, test;
};

/// Score tracks for every split under the configured source. The extractor is
/// loaded from intensity.checkpoint when set, trained otherwise.
inline SplitTracks make_tracks(const ExperimentConfig& cfg, const Splits& s) {
  std::unique_ptr<IntensityExtractor<float>> model;
  if (cfg.intensity.source == IntensitySource::Model) {
    if (!cfg.intensity.checkpoint.empty())
      model = std::make_unique<IntensityExtractor<float>>(extractor_from_checkpoint<float>(load_checkpoint(cfg.intensity.checkpoint)));
    else
      model = std::make_unique<IntensityExtractor<float>>(train_extractor(cfg, s));
  }
  return {score_tracks(cfg.intensity.source, model.get(), s.train), score_tracks(cfg.intensity.source, model.get(), s.dev),
          score_tracks(cfg.intensity.source, model.get(), s.test)};
}

/// Builds a trainer (fresh, warm-started or resumed) with the normalizer
/// fitted on the train split unless the checkpoint carries one.
inline std::unique_ptr<Trainer<float>> make_trainer(const ExperimentConfig& cfg, const Splits& s) {
  if (s.train.empty()) throw ConfigError("pretrain: empty train split");
  auto t = std::make_unique<Trainer<float>>(cfg.pretrain, static_cast<int>(s.train.front().dim()));
  t->model().normalizer() = FeatureNormalizer::fit(s.train);
  if (!cfg.resume_checkpoint.empty()) t->load(load_checkpoint(cfg.resume_checkpoint), true);
  if (!cfg.init_checkpoint.empty()) t->load(load_checkpoint(cfg.init_checkpoint), false);
  return t;
}

inline std::vector<MetricsRecord> run_pretrain(Trainer<float>& trainer, const Splits& s, const SplitTracks& tracks, const PretrainHooks& hooks = {}) {
  const auto data = prepare_training_set<float>(s.train, tracks.train, trainer.model().normalizer());
  return pretrain(trainer, data, hooks);
}

struct ProbeOutcome {
  ProbeResult utterance;
  std::optional<ProbeResult> frame;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"utterance_emotion", utterance.to_json()}};
    if (frame) j["frame_label"] = frame->to_json();
    return j;
  }
};

/// Probes the frozen model: fit on the train split, score on the test split.
inline ProbeOutcome run_probes(Trainer<float>& trainer, const ExperimentConfig& cfg, const Splits& s, const SplitTracks& tracks,
                               std::optional<std::vector<std::uint64_t>> seeds = std::nullopt) {
  ProbeConfig pc = cfg.probe;
  if (seeds) pc.seeds = *seeds;
  auto& model = trainer.model();
  const auto tr = extract_representations(model, trainer.config(), prepare_training_set<float>(s.train, tracks.train, model.normalizer()));
  const auto te = extract_representations(model, trainer.config(), prepare_training_set<float>(s.test, tracks.test, model.normalizer()));
  ProbeOutcome out;
  out.utterance = train_probe(pooled_probe_data(tr, s.train), pooled_probe_data(te, s.test), kNumEmotions, pc);
  if (cfg.frame_probe)
    out.frame = frame_probe(frame_probe_data(tr, s.train, pc.max_frames_per_utterance), frame_probe_data(te, s.test, pc.max_frames_per_utterance),
                            cfg.corpus.generator.unit_count, pc);
  return out;
}

/// Applies a comparison cell on top of the base configuration.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const CellSpec& cell, std::uint64_t seed) {
  ExperimentConfig c = base;
  c.pretrain.family = cell.family;
  c.pretrain.strategy = cell.strategy;
  c.pretrain.input_mode = cell.input_mode;
  if (cell.family == ModelFamily::Transformer)
    c.pretrain.k_percent = cell.parameter;
  else
    c.pretrain.mask_size = static_cast<int>(std::lround(cell.parameter));
  c.pretrain.seed = seed;
  return c;
}

/// One cell: per seed, pre-train from scratch (or from the configured warm
/// start) and probe with that same seed.
inline CellResult run_cell(const ExperimentConfig& base, const CellSpec& cell, const Splits& s, const SplitTracks& tracks,
                           const std::function<void(const CellSpec&, std::uint64_t, const std::vector<MetricsRecord>&)>& on_seed = {}) {
  CellResult r;
  r.cell = cell;
  for (auto seed : base.probe.seeds) {
    const ExperimentConfig c = cell_config(base, cell, seed);
    auto trainer = make_trainer(c, s);
    const auto log = run_pretrain(*trainer, s, tracks);
    if (on_seed) on_seed(cell, seed, log);
    const auto probes = run_probes(*trainer, c, s, tracks, std::vector<std::uint64_t>{seed});
    r.seeds.push_back(seed);
    r.utterance_accuracy.push_back(probes.utterance.accuracy);
    r.p_values.push_back(probes.utterance.p_value);
    if (probes.frame) r.frame_error_rate.push_back(probes.frame->error_rate);
  }
  return r;
}

}  // namespace ems
