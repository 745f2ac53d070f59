// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment configuration: one JSON document, strict schema. Unknown keys
// and wrongly typed values are rejected with the full key path.

#include "ems/corpus.hpp"
#include "ems/intensity.hpp"
#include "ems/probes.hpp"
#include "ems/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace ems {

namespace detail {

class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section sub(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, where(key));
  }

  const nlohmann::json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const char* key = nullptr) const {
    std::string p = path_;
    if (key) p += (p.empty() ? "" : ".") + std::string(key);
    return p.empty() ? "<root>" : p;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + where(it.key().c_str()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct IntensitySettings {
  IntensitySource source = IntensitySource::Model;
  std::string checkpoint;  // pre-trained extractor; trained on the fly when empty
  ExtractorConfig model;
  IntensityTrainConfig train;
};

struct CompareSettings {
  std::vector<CellSpec> cells;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  std::array<double, 3> split{0.6, 0.1, 0.3};
  IntensitySettings intensity;
  TrainConfig pretrain;
  std::string init_checkpoint;    // warm start: parameters only
  std::string resume_checkpoint;  // full state
  ProbeConfig probe;
  bool frame_probe = true;
  CompareSettings compare;

  /// Seeds of the sub-components follow the top-level seed.
  void propagate_seed() {
    intensity.model.seed = derive_seed(seed, {0x1u});
    intensity.train.seed = derive_seed(seed, {0x2u});
    pretrain.seed = seed;
  }

  nlohmann::json to_json() const;
};

namespace detail {

inline void read_features(Section s, FeatureConfig& f) {
  s.get("window", f.window);
  s.get("hop", f.hop);
  s.get("n_fft", f.n_fft);
  s.get("mel_bins", f.mel_bins);
  s.get("fmin_hz", f.fmin_hz);
  s.get("fmax_hz", f.fmax_hz);
  s.get("log_floor", f.log_floor);
  s.finish();
  if (f.window < 2 || f.hop < 1 || f.mel_bins < 1) throw ConfigError("config: corpus.features needs window >= 2, hop >= 1, mel_bins >= 1");
}

inline void read_generator(Section s, GeneratorConfig& g) {
  s.get("sample_rate", g.sample_rate);
  s.get("burst_fraction", g.burst_fraction);
  s.get("burst_gain", g.burst_gain);
  s.get("burst_pitch_raise", g.burst_pitch_raise);
  s.get("max_bursts", g.max_bursts);
  s.get("burst_ramp", g.burst_ramp);
  s.get("unit_count", g.unit_count);
  s.get("unit_min_ms", g.unit_min_ms);
  s.get("unit_max_ms", g.unit_max_ms);
  s.get("speaker_f0_jitter", g.speaker_f0_jitter);
  s.get("gain_jitter_db", g.gain_jitter_db);
  s.get("noise_floor", g.noise_floor);
  s.get("expression_floor", g.expression_floor);
  s.get("emotion_contrast", g.emotion_contrast);
  s.finish();
  if (g.sample_rate < 1000) throw ConfigError("config: corpus.generator.sample_rate must be >= 1000");
  if (!(g.burst_fraction >= 0 && g.burst_fraction < 1)) throw ConfigError("config: corpus.generator.burst_fraction must be in [0,1)");
  if (g.unit_count < 1) throw ConfigError("config: corpus.generator.unit_count must be >= 1");
}

inline void read_extractor(Section s, ExtractorConfig& e) {
  s.get("conv_layers", e.conv_layers);
  s.get("conv_channels", e.conv_channels);
  s.get("conv_kernel", e.conv_kernel);
  s.get("lstm_hidden", e.lstm_hidden);
  s.get("fc_hidden", e.fc_hidden);
  s.finish();
}

inline void read_transformer(Section s, TransformerConfig& t) {
  s.get("layers", t.layers);
  s.get("d_model", t.d_model);
  s.get("heads", t.heads);
  s.get("ff_dim", t.ff_dim);
  s.get("positional_encoding", t.positional_encoding);
  s.finish();
  if (t.layers < 1 || t.d_model < 1 || t.heads < 1 || t.d_model % t.heads != 0 || t.ff_dim < 1)
    throw ConfigError("config: pretrain.transformer needs layers, d_model, heads, ff_dim >= 1 and heads dividing d_model");
}

inline void read_npc(Section s, NpcConfig& n) {
  s.get("conv_blocks", n.conv_blocks);
  s.get("conv_kernel", n.conv_kernel);
  s.get("hidden", n.hidden);
  s.get("masked_kernel", n.masked_kernel);
  s.get("codebook_size", n.codebook_size);
  s.get("commitment", n.commitment);
  s.get("ems_stride", n.ems_stride);
  s.get("quantize", n.quantize);
  s.finish();
  (void)receptive_field(n);
}

inline void read_pretrain(Section s, ExperimentConfig& x) {
  TrainConfig& c = x.pretrain;
  std::string fam(family_name(c.family)), strat(strategy_name(c.strategy)), mode(input_mode_name(c.input_mode)), scope;
  s.get("family", fam);
  s.get("strategy", strat);
  s.get("input_mode", mode);
  s.get("loss_scope", scope);
  c.family = parse_family(fam);
  c.strategy = parse_strategy(strat);
  c.input_mode = parse_input_mode(mode);
  if (!scope.empty() && scope != "default") c.loss_scope = parse_scope(scope);
  s.get("k_percent", c.k_percent);
  s.get("span", c.span);
  std::vector<double> ratios(c.action_ratios.begin(), c.action_ratios.end());
  s.get("action_ratios", ratios);
  if (ratios.size() != 3) throw ConfigError("config: pretrain.action_ratios must have three entries (zero, replace, keep)");
  c.action_ratios = {ratios[0], ratios[1], ratios[2]};
  validate_ratios(c.action_ratios);
  s.get("mask_size", c.mask_size);
  s.get("steps", c.steps);
  s.get("batch_size", c.batch_size);
  s.get("learning_rate", c.learning_rate);
  s.get("warmup_steps", c.warmup_steps);
  s.get("clip_norm", c.clip_norm);
  s.get("checkpoint_every", c.checkpoint_every);
  s.get("init_checkpoint", x.init_checkpoint);
  s.get("resume_checkpoint", x.resume_checkpoint);
  read_transformer(s.sub("transformer"), c.transformer);
  read_npc(s.sub("npc"), c.npc);
  s.finish();
  if (!(c.k_percent > 0 && c.k_percent < 100)) throw ConfigError("config: pretrain.k_percent must be in (0,100)");
  if (c.span < 1) throw ConfigError("config: pretrain.span must be >= 1");
  if (c.mask_size < 1) throw ConfigError("config: pretrain.mask_size must be >= 1");
  if (c.steps < 0 || c.batch_size < 1) throw ConfigError("config: pretrain.steps must be >= 0 and batch_size >= 1");
  if (!(c.learning_rate >= 0)) throw ConfigError("config: pretrain.learning_rate must be >= 0");
  if (!x.init_checkpoint.empty() && !x.resume_checkpoint.empty())
    throw ConfigError("config: pretrain.init_checkpoint and pretrain.resume_checkpoint are mutually exclusive");
  if (c.family == ModelFamily::Npc) {
    // with EMS one more row goes, so two must survive D
    const auto keep = kernel_keep_rows(c.npc.masked_kernel, center_param_for_mask_size(c.mask_size));
    if (c.strategy == MaskStrategy::Ems && std::count(keep.begin(), keep.end(), true) < 2)
      throw ConfigError("config: mask_size " + std::to_string(c.mask_size) + " leaves fewer than two rows of the masked kernel");
  }
}

inline void read_probe(Section s, ExperimentConfig& x) {
  ProbeConfig& p = x.probe;
  s.get("hidden", p.hidden);
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("learning_rate", p.learning_rate);
  s.get("weight_decay", p.weight_decay);
  s.get("seeds", p.seeds);
  s.get("max_frames_per_utterance", p.max_frames_per_utterance);
  s.get("frame_probe", x.frame_probe);
  s.finish();
  if (p.seeds.empty()) throw ConfigError("config: probe.seeds must list at least one seed");
  if (p.epochs < 1 || p.batch_size < 1) throw ConfigError("config: probe.epochs and probe.batch_size must be >= 1");
}

inline CellSpec read_cell(Section s, const TrainConfig& defaults) {
  CellSpec c;
  c.family = defaults.family;
  c.strategy = defaults.strategy;
  c.input_mode = defaults.input_mode;
  std::string fam(family_name(c.family)), strat(strategy_name(c.strategy)), mode(input_mode_name(c.input_mode));
  s.get("name", c.name);
  s.get("family", fam);
  s.get("strategy", strat);
  s.get("input_mode", mode);
  c.family = parse_family(fam);
  c.strategy = parse_strategy(strat);
  c.input_mode = parse_input_mode(mode);
  c.parameter = c.family == ModelFamily::Transformer ? defaults.k_percent : defaults.mask_size;
  s.get("parameter", c.parameter);
  s.finish();
  if (c.name.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s-%s(%g)", std::string(family_name(c.family)).c_str(), std::string(strategy_name(c.strategy)).c_str(), c.parameter);
    c.name = buf;
  }
  return c;
}

}  // namespace detail

inline nlohmann::json ExperimentConfig::to_json() const {
  const auto& g = corpus.generator;
  const auto& f = corpus.features;
  nlohmann::json pre = pretrain.to_json();
  pre.erase("seed");
  pre["init_checkpoint"] = init_checkpoint;
  pre["resume_checkpoint"] = resume_checkpoint;
  nlohmann::json probe_j = probe.to_json();
  probe_j["frame_probe"] = frame_probe;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : compare.cells) {
    auto k = c.key();
    k["name"] = c.name;
    cells.push_back(k);
  }
  auto ex = intensity.model.to_json();
  ex.erase("input_dim");
  return {{"seed", seed},
          {"corpus",
           {{"per_class", corpus.per_class},
            {"duration_s", corpus.duration_s},
            {"seed", corpus.seed},
            {"split", split},
            {"features",
             {{"window", f.window}, {"hop", f.hop}, {"n_fft", f.n_fft}, {"mel_bins", f.mel_bins}, {"fmin_hz", f.fmin_hz}, {"fmax_hz", f.fmax_hz},
              {"log_floor", f.log_floor}}},
            {"generator",
             {{"sample_rate", g.sample_rate},
              {"burst_fraction", g.burst_fraction},
              {"burst_gain", g.burst_gain},
              {"burst_pitch_raise", g.burst_pitch_raise},
              {"max_bursts", g.max_bursts},
              {"burst_ramp", g.burst_ramp},
              {"unit_count", g.unit_count},
              {"unit_min_ms", g.unit_min_ms},
              {"unit_max_ms", g.unit_max_ms},
              {"speaker_f0_jitter", g.speaker_f0_jitter},
              {"gain_jitter_db", g.gain_jitter_db},
              {"noise_floor", g.noise_floor},
              {"expression_floor", g.expression_floor},
              {"emotion_contrast", g.emotion_contrast}}}}},
          {"intensity",
           {{"source", source_name(intensity.source)},
            {"checkpoint", intensity.checkpoint},
            {"model", ex},
            {"train",
             {{"epochs", intensity.train.epochs},
              {"batch_size", intensity.train.batch_size},
              {"learning_rate", intensity.train.learning_rate},
              {"ce_weight", intensity.train.ce_weight},
              {"clip_norm", intensity.train.clip_norm}}}}},
          {"pretrain", pre},
          {"probe", probe_j},
          {"compare", {{"cells", cells}}}};
}

/// Parses and validates a configuration document.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig x;
  detail::Section root(j, "");
  root.get("seed", x.seed);
  {
    auto c = root.sub("corpus");
    c.get("per_class", x.corpus.per_class);
    c.get("duration_s", x.corpus.duration_s);
    c.get("seed", x.corpus.seed);
    std::vector<double> split(x.split.begin(), x.split.end());
    c.get("split", split);
    if (split.size() != 3) throw ConfigError("config: corpus.split must have three ratios (train, dev, test)");
    std::copy(split.begin(), split.end(), x.split.begin());
    detail::read_features(c.sub("features"), x.corpus.features);
    detail::read_generator(c.sub("generator"), x.corpus.generator);
    c.finish();
    if (x.corpus.per_class < 1) throw ConfigError("config: corpus.per_class must be >= 1");
    if (!(x.corpus.duration_s > 0)) throw ConfigError("config: corpus.duration_s must be > 0");
  }
  {
    auto s = root.sub("intensity");
    std::string src(source_name(x.intensity.source));
    s.get("source", src);
    x.intensity.source = parse_source(src);
    s.get("checkpoint", x.intensity.checkpoint);
    detail::read_extractor(s.sub("model"), x.intensity.model);
    auto t = s.sub("train");
    t.get("epochs", x.intensity.train.epochs);
    t.get("batch_size", x.intensity.train.batch_size);
    t.get("learning_rate", x.intensity.train.learning_rate);
    t.get("ce_weight", x.intensity.train.ce_weight);
    t.get("clip_norm", x.intensity.train.clip_norm);
    t.finish();
    s.finish();
  }
  detail::read_pretrain(root.sub("pretrain"), x);
  detail::read_probe(root.sub("probe"), x);
  {
    auto c = root.sub("compare");
    if (const auto* cells = c.raw("cells")) {
      if (!cells->is_array()) throw ConfigError("config: compare.cells must be an array");
      for (std::size_t i = 0; i < cells->size(); ++i)
        x.compare.cells.push_back(detail::read_cell(detail::Section((*cells)[i], "compare.cells[" + std::to_string(i) + "]"), x.pretrain));
    }
    c.finish();
  }
  root.finish();
  x.intensity.model.input_dim = x.corpus.features.mel_bins;
  x.propagate_seed();
  return x;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const Error&) {
    throw ConfigError("config: cannot read " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

}  // namespace ems
