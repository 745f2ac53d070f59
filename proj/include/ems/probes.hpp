// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Frozen-encoder probes: utterance emotion (4 classes) and frame unit labels.

#include "ems/optim.hpp"
#include "ems/stats.hpp"
#include "ems/training.hpp"

#include "json.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ems {

enum class ProbeTask { UtteranceEmotion, FrameLabel };

inline std::string_view task_name(ProbeTask t) { return t == ProbeTask::UtteranceEmotion ? "utterance_emotion" : "frame_label"; }

struct ProbeConfig {
  int hidden = 0;  // 0 = linear
  int epochs = 150;
  int batch_size = 32;
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t max_frames_per_utterance = 0;  // frame probe subsampling, 0 = all

  nlohmann::json to_json() const {
    return {{"hidden", hidden},       {"epochs", epochs}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"weight_decay", weight_decay}, {"seeds", seeds}, {"max_frames_per_utterance", max_frames_per_utterance}};
  }
};

struct ProbeResult {
  ProbeTask task = ProbeTask::UtteranceEmotion;
  double accuracy = 0.0;  // mean over seeds
  double error_rate = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;
  std::string config_hash;
  int num_classes = 0;
  std::size_t test_size = 0;
  double chance = 0.0;
  double p_value = 1.0;  // one-sided binomial test of the mean accuracy against chance
  bool degenerate = false;
  std::string warning;

  bool above_chance(double alpha = 0.05) const { return p_value < alpha; }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"task", task_name(task)}, {"accuracy", accuracy},   {"error_rate", error_rate}, {"seeds", seeds},
                        {"per_seed", per_seed},     {"config_hash", config_hash}, {"num_classes", num_classes}, {"test_size", test_size},
                        {"chance", chance},         {"p_value", p_value},       {"degenerate", degenerate}};
    if (!warning.empty()) j["warning"] = warning;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Representations

struct UtteranceRepresentation {
  std::string id;
  Eigen::RowVectorXd pooled;  // mean over frames of H
  MatF frames;                // T x d_model
};

/// Frozen forward pass on the unmasked input. The convolutional family keeps
/// its intensity-selected kernel row zeroed when it was trained with EMS.
template <typename S>
std::vector<UtteranceRepresentation> extract_representations(SslModel<S>& model, const TrainConfig& cfg, const TrainingSet<S>& data) {
  std::vector<UtteranceRepresentation> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape<S> tape;
    auto in = model.build_inputs(tape, data.features[i], data.scores[i]);
    std::optional<std::span<const float>> ems;
    if (model.family() == ModelFamily::Npc && cfg.strategy == MaskStrategy::Ems) ems = std::span<const float>(data.scores[i]);
    auto enc = model.encode(tape, in.input, ems);
    UtteranceRepresentation r;
    r.id = data.ids[i];
    r.frames = enc.hidden.value().template cast<float>();
    if (!all_finite(r.frames)) throw NumericError("representation of " + r.id + " is not finite");
    r.pooled = enc.hidden.value().template cast<double>().colwise().mean();
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax classifier on fixed features

struct ProbeData {
  MatD x;
  std::vector<int> y;
};

namespace detail {

inline MatD one_hot(const std::vector<int>& y, int classes) {
  MatD m = MatD::Zero(static_cast<Eigen::Index>(y.size()), classes);
  for (std::size_t i = 0; i < y.size(); ++i) m(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  return m;
}

inline MatD softmax_rows(MatD z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    z.row(i).array() -= z.row(i).maxCoeff();
    z.row(i) = z.row(i).array().exp().matrix();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

}  // namespace detail

/// Trains a linear (or one-hidden-layer ReLU) softmax classifier with Adam on
/// standardized features; returns held-out accuracy.
inline double fit_probe(const ProbeData& train, const ProbeData& test, int classes, const ProbeConfig& cfg, std::uint64_t seed) {
  if (train.x.rows() != static_cast<Eigen::Index>(train.y.size()) || test.x.rows() != static_cast<Eigen::Index>(test.y.size()))
    throw DimensionError("probe: label count does not match sample count");
  if (train.x.cols() != test.x.cols()) throw DimensionError("probe: train and test feature widths differ");
  if (test.y.empty()) throw ConfigError("probe: empty test split");
  const Eigen::RowVectorXd mu = train.x.colwise().mean();
  const Eigen::RowVectorXd sd =
      ((train.x.rowwise() - mu).array().square().colwise().sum() / std::max<double>(1, train.x.rows())).sqrt().max(1e-8).matrix();
  auto standardize = [&](const MatD& x) -> MatD { return ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix(); };
  const MatD xtr = standardize(train.x), xte = standardize(test.x);
  const MatD ytr = detail::one_hot(train.y, classes);
  const int in = static_cast<int>(xtr.cols());

  Rng rng(derive_seed(seed, {0x9B0Bu}));
  const bool deep = cfg.hidden > 0;
  const int width = deep ? cfg.hidden : classes;
  Parameter<double> w1("w1", nn::random_normal<double>(in, width, std::sqrt(1.0 / in), rng));
  Parameter<double> b1("b1", MatD::Zero(1, width));
  Parameter<double> w2("w2", deep ? nn::random_normal<double>(width, classes, std::sqrt(1.0 / width), rng) : MatD(0, 0));
  Parameter<double> b2("b2", deep ? MatD(MatD::Zero(1, classes)) : MatD(0, 0));
  nn::ParamList<double> params{&w1, &b1};
  if (deep) params.insert(params.end(), {&w2, &b2});
  Adam<double> opt(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8, 0, 0.0});

  auto forward = [&](const MatD& x, MatD* hidden) -> MatD {
    MatD z = (x * w1.value).rowwise() + b1.value.row(0);
    if (!deep) return z;
    MatD h = z.cwiseMax(0.0);
    if (hidden) *hidden = h;
    return (h * w2.value).rowwise() + b2.value.row(0);
  };

  std::vector<std::size_t> order(static_cast<std::size_t>(xtr.rows()));
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      MatD xb(static_cast<Eigen::Index>(n), in), yb(static_cast<Eigen::Index>(n), classes);
      for (std::size_t i = 0; i < n; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(order[start + i]));
        yb.row(static_cast<Eigen::Index>(i)) = ytr.row(static_cast<Eigen::Index>(order[start + i]));
      }
      MatD h;
      const MatD g = (detail::softmax_rows(forward(xb, &h)) - yb) / static_cast<double>(n);
      if (deep) {
        w2.grad = h.transpose() * g + cfg.weight_decay * w2.value;
        b2.grad = g.colwise().sum();
        const MatD gh = ((g * w2.value.transpose()).array() * (h.array() > 0.0).cast<double>()).matrix();
        w1.grad = xb.transpose() * gh + cfg.weight_decay * w1.value;
        b1.grad = gh.colwise().sum();
      } else {
        w1.grad = xb.transpose() * g + cfg.weight_decay * w1.value;
        b1.grad = g.colwise().sum();
      }
      opt.step(params);
    }
  }
  const MatD logits = forward(xte, nullptr);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == test.y[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.y.size());
}

inline void summarize(ProbeResult& r, const ProbeConfig& cfg) {
  r.seeds = cfg.seeds;
  r.accuracy = stats::mean(r.per_seed);
  r.error_rate = 1.0 - r.accuracy;
  const int k = static_cast<int>(std::llround(r.accuracy * static_cast<double>(r.test_size)));
  r.p_value = stats::binomial_upper_tail(k, static_cast<int>(r.test_size), r.chance);
}

inline std::string probe_hash(const ProbeConfig& cfg, ProbeTask task, int classes) {
  nlohmann::json j = cfg.to_json();
  j["task"] = task_name(task);
  j["classes"] = classes;
  return architecture_hash(j);
}

/// Utterance-level probe over ≥ 1 seeds (the seed list is taken from cfg).
inline ProbeResult train_probe(const ProbeData& train, const ProbeData& test, int classes, const ProbeConfig& cfg,
                               ProbeTask task = ProbeTask::UtteranceEmotion) {
  if (cfg.seeds.empty()) throw ConfigError("probe: at least one seed is required");
  std::set<int> present(train.y.begin(), train.y.end());
  if (present.size() < 2) throw ConfigError("probe: degenerate training split with a single class");
  for (int y : train.y)
    if (y < 0 || y >= classes) throw ConfigError("probe: label out of range");
  ProbeResult r;
  r.task = task;
  r.num_classes = classes;
  r.test_size = test.y.size();
  r.chance = 1.0 / classes;
  r.config_hash = probe_hash(cfg, task, classes);
  for (auto s : cfg.seeds) r.per_seed.push_back(fit_probe(train, test, classes, cfg, s));
  summarize(r, cfg);
  return r;
}

inline ProbeData pooled_probe_data(const std::vector<UtteranceRepresentation>& reps, const std::vector<FeatureSequence>& data) {
  if (reps.size() != data.size()) throw DimensionError("probe: representation count does not match corpus split");
  ProbeData d;
  if (reps.empty()) return d;
  d.x.resize(static_cast<Eigen::Index>(reps.size()), reps.front().pooled.size());
  for (std::size_t i = 0; i < reps.size(); ++i) {
    d.x.row(static_cast<Eigen::Index>(i)) = reps[i].pooled;
    d.y.push_back(static_cast<int>(data[i].emotion));
  }
  return d;
}

/// Frame rows with their unit labels; `stride` > 1 keeps every stride-th frame.
inline ProbeData frame_probe_data(const std::vector<UtteranceRepresentation>& reps, const std::vector<FeatureSequence>& data,
                                  std::size_t max_per_utterance = 0) {
  if (reps.size() != data.size()) throw DimensionError("frame probe: representation count does not match corpus split");
  std::vector<std::pair<std::size_t, Eigen::Index>> rows;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const Eigen::Index T = reps[i].frames.rows();
    if (static_cast<std::size_t>(T) != data[i].frame_units.size())
      throw DimensionError("frame probe: " + std::to_string(data[i].frame_units.size()) + " labels for " + std::to_string(T) + " frames in " +
                           reps[i].id);
    const Eigen::Index step =
        max_per_utterance > 0 ? std::max<Eigen::Index>(1, (T + static_cast<Eigen::Index>(max_per_utterance) - 1) / static_cast<Eigen::Index>(max_per_utterance)) : 1;
    for (Eigen::Index t = 0; t < T; t += step) rows.emplace_back(i, t);
  }
  ProbeData d;
  if (rows.empty()) return d;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), reps.front().frames.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto [i, t] = rows[r];
    d.x.row(static_cast<Eigen::Index>(r)) = reps[i].frames.row(t).cast<double>();
    d.y.push_back(data[i].frame_units[static_cast<std::size_t>(t)]);
  }
  return d;
}

/// Frame-label probe. A training split with a single label is flagged as
/// degenerate and scored by predicting that label.
inline ProbeResult frame_probe(const ProbeData& train, const ProbeData& test, int classes, const ProbeConfig& cfg) {
  std::set<int> present(train.y.begin(), train.y.end());
  if (present.size() >= 2) {
    auto r = train_probe(train, test, classes, cfg, ProbeTask::FrameLabel);
    const double majority = [&] {
      std::map<int, std::size_t> c;
      for (int y : train.y) ++c[y];
      int best = 0;
      std::size_t bc = 0;
      for (auto [y, n] : c)
        if (n > bc) bc = n, best = y;
      return static_cast<double>(std::count(test.y.begin(), test.y.end(), best)) / std::max<std::size_t>(1, test.y.size());
    }();
    if (majority > 0.9) {
      r.degenerate = true;
      r.warning = "one label covers more than 90% of the test frames";
    }
    return r;
  }
  if (present.empty() || test.y.empty()) throw ConfigError("frame probe: empty split");
  ProbeResult r;
  r.task = ProbeTask::FrameLabel;
  r.num_classes = classes;
  r.test_size = test.y.size();
  r.chance = 1.0 / classes;
  r.config_hash = probe_hash(cfg, ProbeTask::FrameLabel, classes);
  const int only = *present.begin();
  const double acc = static_cast<double>(std::count(test.y.begin(), test.y.end(), only)) / static_cast<double>(test.y.size());
  r.per_seed.assign(cfg.seeds.size(), acc);
  summarize(r, cfg);
  r.degenerate = true;
  r.warning = "training labels are constant; the task is trivial";
  return r;
}

// ---------------------------------------------------------------------------
// Strategy comparison report

struct CellSpec {
  std::string name;  // e.g. "ems(25%)"
  ModelFamily family = ModelFamily::Transformer;
  MaskStrategy strategy = MaskStrategy::Ems;
  double parameter = 25.0;  // k_percent (transformer) or mask size (npc)
  InputMode input_mode = InputMode::Joint;

  nlohmann::json key() const {
    return {{"family", family_name(family)}, {"strategy", strategy_name(strategy)}, {"parameter", parameter}, {"input_mode", input_mode_name(input_mode)}};
  }
};

struct CellResult {
  CellSpec cell;
  std::vector<std::uint64_t> seeds;
  std::vector<double> utterance_accuracy;  // per seed
  std::vector<double> frame_error_rate;    // per seed, may be empty
  std::vector<double> p_values;
  std::optional<std::string> error;

  double mean_accuracy() const { return stats::mean(utterance_accuracy); }
  double mean_frame_error() const { return frame_error_rate.empty() ? 0.0 : stats::mean(frame_error_rate); }
};

struct ReferenceRow {
  std::string table;
  std::string method;
  std::string parameter;
  std::string metric;
  double value;
};

/// Published full-scale numbers (IEMOCAP, hundreds of thousands of steps).
/// Carried as annotations only; the desk-scale pipeline does not reproduce them.
inline const std::vector<ReferenceRow>& published_reference_rows() {
  static const std::vector<ReferenceRow> rows{
      {"ser_transformer", "mockingjay", "", "accuracy_percent", 50.28},
      {"ser_transformer", "mockingjay+ems", "15%", "accuracy_percent", 55.94},
      {"ser_transformer", "mockingjay+ems", "20%", "accuracy_percent", 55.76},
      {"ser_transformer", "mockingjay+ems", "25%", "accuracy_percent", 57.42},
      {"ser_transformer", "mockingjay+ems", "30%", "accuracy_percent", 55.85},
      {"ser_transformer", "mockingjay+ems", "35%", "accuracy_percent", 56.12},
      {"ser_transformer", "mockingjay+ems", "40%", "accuracy_percent", 56.96},
      {"ser_npc", "npc", "", "accuracy_percent", 59.08},
      {"ser_npc", "npc+ems", "7", "accuracy_percent", 47.10},
      {"ser_npc", "npc+ems", "9", "accuracy_percent", 50.04},
      {"ser_npc", "separate_input", "5", "accuracy_percent", 60.56},
      {"ser_npc", "joint_input", "5", "accuracy_percent", 62.14},
      {"content", "mockingjay", "", "intent_accuracy_percent", 34.33},
      {"content", "mockingjay+ems", "15%", "intent_accuracy_percent", 38.84},
      {"content", "mockingjay+ems", "25%", "intent_accuracy_percent", 45.35},
      {"content", "mockingjay", "", "phoneme_error_rate_percent", 70.19},
      {"content", "mockingjay+ems", "15%", "phoneme_error_rate_percent", 63.03},
      {"content", "mockingjay+ems", "25%", "phoneme_error_rate_percent", 63.38},
  };
  return rows;
}

inline constexpr const char* kReferenceFlag = "published reference, NOT reproduced at desk scale";

struct ComparisonReport {
  std::vector<CellResult> cells;
  bool complete = true;

  nlohmann::json to_json() const {
    nlohmann::json by = nlohmann::json::object();
    for (const auto& c : cells) {
      nlohmann::json e = {{"name", c.cell.name},
                          {"family", family_name(c.cell.family)},
                          {"input_mode", input_mode_name(c.cell.input_mode)},
                          {"seeds", c.seeds},
                          {"utterance_accuracy", c.utterance_accuracy},
                          {"frame_error_rate", c.frame_error_rate},
                          {"p_values", c.p_values}};
      if (c.error) {
        e["error"] = *c.error;
      } else {
        e["mean_accuracy"] = c.mean_accuracy();
        if (!c.frame_error_rate.empty()) e["mean_frame_error_rate"] = c.mean_frame_error();
      }
      char param[32];
      std::snprintf(param, sizeof(param), "%g", c.cell.parameter);
      by[std::string(strategy_name(c.cell.strategy))][std::string(param) + "/" + std::string(input_mode_name(c.cell.input_mode)) + "/" +
                                                       std::string(family_name(c.cell.family))] = e;
    }
    nlohmann::json refs = nlohmann::json::array();
    for (const auto& r : published_reference_rows())
      refs.push_back({{"table", r.table}, {"method", r.method}, {"parameter", r.parameter}, {"metric", r.metric}, {"value", r.value},
                      {"reproduced", false}, {"note", kReferenceFlag}});
    return {{"complete", complete}, {"cells", by}, {"reference", refs}};
  }

  /// One row per cell, seed and metric; then per-cell means; then the
  /// annotation rows.
  std::string to_csv() const {
    std::string out = "kind,name,family,strategy,parameter,input_mode,seed,metric,value,status\n";
    char buf[512];
    auto row = [&](const char* kind, const CellResult& c, const std::string& seed, const char* metric, const std::string& value, const char* status) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%g,%s,%s,%s,%s,%s\n", kind, c.cell.name.c_str(), std::string(family_name(c.cell.family)).c_str(),
                    std::string(strategy_name(c.cell.strategy)).c_str(), c.cell.parameter, std::string(input_mode_name(c.cell.input_mode)).c_str(),
                    seed.c_str(), metric, value.c_str(), status);
      out += buf;
    };
    auto num = [](double v) {
      char b[32];
      std::snprintf(b, sizeof(b), "%.6f", v);
      return std::string(b);
    };
    for (const auto& c : cells) {
      if (c.error) {
        row("cell", c, "", "", "", "failed");
        continue;
      }
      for (std::size_t s = 0; s < c.seeds.size(); ++s) {
        row("cell", c, std::to_string(c.seeds[s]), "utterance_accuracy", num(c.utterance_accuracy[s]), "ok");
        if (s < c.frame_error_rate.size()) row("cell", c, std::to_string(c.seeds[s]), "frame_error_rate", num(c.frame_error_rate[s]), "ok");
      }
      row("mean", c, "", "utterance_accuracy", num(c.mean_accuracy()), "ok");
      if (!c.frame_error_rate.empty()) row("mean", c, "", "frame_error_rate", num(c.mean_frame_error()), "ok");
    }
    for (const auto& r : published_reference_rows()) {
      std::snprintf(buf, sizeof(buf), "reference,%s,%s,,%s,,,%s,%.2f,not_reproduced\n", r.method.c_str(), r.table.c_str(), r.parameter.c_str(),
                    r.metric.c_str(), r.value);
      out += buf;
    }
    return out;
  }
};

/// Runs every cell; a throwing cell is recorded as failed and marks the
/// report incomplete.
inline ComparisonReport compare_strategies(const std::vector<CellSpec>& cells, const std::function<CellResult(const CellSpec&)>& run_cell) {
  ComparisonReport rep;
  std::set<std::string> seen;
  for (const auto& c : cells) {
    if (!seen.insert(c.key().dump()).second) throw ConfigError("compare: duplicate cell " + c.name);
    try {
      CellResult r = run_cell(c);
      r.cell = c;
      rep.cells.push_back(std::move(r));
    } catch (const Error& e) {
      CellResult r;
      r.cell = c;
      r.error = e.what();
      rep.cells.push_back(std::move(r));
      rep.complete = false;
    }
  }
  return rep;
}

}  // namespace ems
