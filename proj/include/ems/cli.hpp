// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Command-line driver. Kept in a header so the tests can run it in-process.
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "ems/pipeline.hpp"
#include "ems/plot.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace ems::cli {

namespace fs = std::filesystem;

struct UsageError : ConfigError {
  using ConfigError::ConfigError;
};

inline constexpr const char* kUsage =
    "usage: ems <command> [options] [inputs...]\n"
    "\n"
    "commands:\n"
    "  corpus     generate the synthetic corpus and write it to the output dir\n"
    "  intensity  train (or evaluate) the intensity extractor\n"
    "  pretrain   self-supervised pre-training with the configured masking\n"
    "  probe      frozen-feature emotion and frame-label probes\n"
    "  compare    run every configured comparison cell and write a report\n"
    "  plot       render metrics (.jsonl) and reports (.json/.csv) as SVG + CSV\n"
    "\n"
    "options:\n"
    "  --config PATH      JSON experiment config (defaults apply when omitted)\n"
    "  --out DIR          output dir (default: $EMS_OUTPUT_ROOT/<command>, or runs/<command>)\n"
    "  --seed N           override the top-level seed\n"
    "  --corpus DIR       read a corpus written by `ems corpus` instead of generating one\n"
    "  --checkpoint PATH  model checkpoint to probe\n"
    "  -v, --verbose      progress on stderr (repeat for more)\n"
    "  -h, --help         this text\n";

struct Options {
  std::string command;
  std::optional<fs::path> config;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> corpus;
  std::optional<fs::path> checkpoint;
  std::vector<fs::path> inputs;
  int verbosity = 0;
  bool help = false;
};

inline Options parse_args(const std::vector<std::string>& args) {
  Options o;
  CLI::App app("ems", "ems");
  app.set_help_flag();
  app.allow_extras(false);
  std::string config, out, corpus, checkpoint, seed;
  std::vector<std::string> positional;
  app.add_flag("-h,--help", o.help);
  app.add_flag("-v,--verbose", o.verbosity);
  app.add_option("--config", config);
  app.add_option("--out", out);
  app.add_option("--corpus", corpus);
  app.add_option("--checkpoint", checkpoint);
  app.add_option("--seed", seed);
  app.add_option("args", positional);
  // CLI11 consumes arguments back to front
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  if (app.count("--config")) o.config = config;
  if (app.count("--out")) o.out = out;
  if (app.count("--corpus")) o.corpus = corpus;
  if (app.count("--checkpoint")) o.checkpoint = checkpoint;
  if (app.count("--seed")) {
    try {
      std::size_t used = 0;
      if (seed.empty() || seed[0] == '-') throw std::invalid_argument(seed);
      o.seed = std::stoull(seed, &used);
      if (used != seed.size()) throw std::invalid_argument(seed);
    } catch (const std::exception&) {
      throw UsageError("--seed expects a non-negative integer, got '" + seed + "'");
    }
  }
  if (!positional.empty()) {
    o.command = positional.front();
    o.inputs.assign(positional.begin() + 1, positional.end());
  }
  if (o.help) return o;
  static const std::set<std::string> commands{"corpus", "intensity", "pretrain", "probe", "compare", "plot"};
  if (o.command.empty()) throw UsageError("missing command");
  if (!commands.count(o.command)) throw UsageError("unknown command '" + o.command + "'");
  if (o.command != "plot" && !o.inputs.empty()) throw UsageError("unexpected argument '" + o.inputs.front().string() + "'");
  if (o.command == "plot" && o.inputs.empty()) throw UsageError("plot needs at least one metrics or report file");
  return o;
}

inline fs::path default_out(const std::string& command) {
  const char* root = std::getenv("EMS_OUTPUT_ROOT");
  return fs::path(root != nullptr && *root != '\0' ? root : "runs") / command;
}

/// State of one invocation: output dir, produced files, summary metrics.
class Run {
 public:
  Run(Options opts, std::ostream& log) : opts_(std::move(opts)), log_(log), t0_(std::chrono::steady_clock::now()) {
    cfg_ = opts_.config ? load_config(*opts_.config) : parse_config(nlohmann::json::object());
    if (opts_.seed) {
      cfg_.seed = *opts_.seed;
      cfg_.propagate_seed();
    }
    out_ = opts_.out ? *opts_.out : default_out(opts_.command);
  }

  const ExperimentConfig& config() const { return cfg_; }
  ExperimentConfig& config() { return cfg_; }
  const Options& options() const { return opts_; }
  const fs::path& out() const { return out_; }
  nlohmann::json& metrics() { return metrics_; }

  void say(int level, const std::string& msg) const {
    if (opts_.verbosity >= level) log_ << "[ems " << opts_.command << "] " << msg << "\n";
  }

  /// Creates the output dir and writes the resolved config.
  void begin() {
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw Error("cannot create output dir " + out_.string() + ": " + ec.message());
    write("config.json", cfg_.to_json().dump(2) + "\n");
  }

  fs::path path(const std::string& name) const { return out_ / name; }

  void write(const std::string& name, const std::string& bytes) {
    const auto p = out_ / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    detail::write_file(p, bytes);
    note_output(name);
  }

  void note_output(const std::string& name) {
    if (std::find(outputs_.begin(), outputs_.end(), name) == outputs_.end()) outputs_.push_back(name);
  }

  void finish(nlohmann::json inputs = nlohmann::json::object()) {
    if (opts_.corpus) inputs["corpus"] = opts_.corpus->string();
    if (opts_.checkpoint) inputs["checkpoint"] = opts_.checkpoint->string();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    std::vector<std::string> outs = outputs_;
    outs.push_back("run.json");
    const nlohmann::json run = {{"subcommand", opts_.command},
                                {"config", "config.json"},
                                {"config_hash", architecture_hash(cfg_.to_json())},
                                {"seed", cfg_.seed},
                                {"inputs", inputs},
                                {"wall_clock_s", wall},
                                {"metrics", metrics_},
                                {"outputs", outs}};
    detail::write_file(out_ / "run.json", run.dump(2) + "\n");
  }

  std::vector<FeatureSequence> load_data() const {
    if (opts_.corpus) {
      say(1, "reading corpus " + opts_.corpus->string());
      return read_corpus(*opts_.corpus).records;
    }
    say(1, "generating corpus (" + std::to_string(cfg_.corpus.per_class * kNumEmotions) + " utterances)");
    return generate_corpus(cfg_.corpus);
  }

 private:
  Options opts_;
  std::ostream& log_;
  std::chrono::steady_clock::time_point t0_;
  ExperimentConfig cfg_;
  fs::path out_;
  nlohmann::json metrics_ = nlohmann::json::object();
  std::vector<std::string> outputs_;
};

// Appends one JSON document per line.
class JsonlWriter {
 public:
  JsonlWriter(Run& run, const std::string& name) : out_(run.path(name), std::ios::trunc) {
    if (!out_) throw Error("cannot write " + run.path(name).string());
    run.note_output(name);
  }
  void write(const nlohmann::json& j) {
    out_ << j.dump() << "\n";
    out_.flush();
    if (!out_) throw Error("metrics write failed");
  }

 private:
  std::ofstream out_;
};

inline nlohmann::json split_ids(const Splits& s) {
  auto ids = [](const std::vector<FeatureSequence>& v) {
    std::vector<std::string> out;
    for (const auto& r : v) out.push_back(r.utterance_id);
    return out;
  };
  return {{"train", ids(s.train)}, {"dev", ids(s.dev)}, {"test", ids(s.test)}};
}

inline std::string file_stem(const std::string& name) {
  std::string o;
  for (char c : name) o += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return o;
}

inline void cmd_corpus(Run& run) {
  const auto data = run.load_data();
  const auto splits = make_splits(run.config(), data);
  const auto manifest = write_corpus(data, run.out(), {{"corpus", run.config().to_json()["corpus"]}, {"splits", split_ids(splits)}});
  run.note_output("manifest.json");
  run.note_output("records/");
  std::size_t frames = 0;
  for (const auto& r : data) frames += static_cast<std::size_t>(r.frames.rows());
  run.metrics() = {{"records", data.size()},
                   {"frames", frames},
                   {"feature_dim", data.empty() ? 0 : data.front().dim()},
                   {"split_sizes", {splits.train.size(), splits.dev.size(), splits.test.size()}}};
  run.say(1, "wrote " + std::to_string(manifest["records"].size()) + " records");
}

inline double heuristic_spearman_median(const std::vector<FeatureSequence>& data) {
  std::vector<double> rho;
  for (const auto& fs : data) {
    const auto tr = heuristic_intensity(fs);
    const std::vector<double> a(tr.scores.begin(), tr.scores.end()), b(fs.truth_frame_intensity.begin(), fs.truth_frame_intensity.end());
    rho.push_back(stats::spearman(a, b));
  }
  return rho.empty() ? 0.0 : stats::median(rho);
}

inline void cmd_intensity(Run& run) {
  const auto data = run.load_data();
  const auto s = make_splits(run.config(), data);
  auto& m = run.metrics();
  m["source"] = source_name(run.config().intensity.source);
  m["heuristic_spearman_median_test"] = heuristic_spearman_median(s.test);
  if (run.config().intensity.source == IntensitySource::Model) {
    JsonlWriter log(run, "intensity_metrics.jsonl");
    auto model = train_extractor(run.config(), s, [&](const IntensityEpochRecord& r) {
      log.write(r.to_json());
      run.say(1, "epoch " + std::to_string(r.epoch) + " dev_mae " + plot::fmt(r.dev_mae) + " dev_acc " + plot::fmt(r.dev_accuracy));
    });
    save_checkpoint(extractor_checkpoint(model), run.path("extractor.ckpt"));
    run.note_output("extractor.ckpt");
    const auto ev = evaluate_extractor(model, s.test);
    m["test_mae"] = ev.mae;
    m["test_emotion_accuracy"] = ev.accuracy;
  }
}

inline void cmd_pretrain(Run& run) {
  const auto data = run.load_data();
  const auto s = make_splits(run.config(), data);
  run.say(1, "scoring intensity (" + std::string(source_name(run.config().intensity.source)) + ")");
  const auto tracks = make_tracks(run.config(), s);
  auto trainer = make_trainer(run.config(), s);
  JsonlWriter log(run, "metrics.jsonl");
  PretrainHooks hooks;
  hooks.on_record = [&](const MetricsRecord& r) {
    log.write(r.to_json());
    if (r.step % 100 == 0 || r.transition) run.say(1, "step " + std::to_string(r.step) + " total " + plot::fmt(r.loss.total));
  };
  hooks.on_checkpoint = [&](long step, Checkpoint& ck) {
    const std::string name = "checkpoints/step_" + std::to_string(step) + ".ckpt";
    fs::create_directories(run.path("checkpoints"));
    save_checkpoint(ck, run.path(name));
    run.note_output(name);
  };
  const auto records = run_pretrain(*trainer, s, tracks, hooks);
  save_checkpoint(trainer->checkpoint(), run.path("model.ckpt"));
  run.note_output("model.ckpt");
  auto& m = run.metrics();
  m["steps"] = records.size();
  m["final_step"] = trainer->step();
  if (!records.empty()) {
    const auto [a, b] = loss_reduction(records);
    m["initial_loss_smoothed"] = a;
    m["final_loss_smoothed"] = b;
    m["loss_ratio"] = a > 0 ? b / a : 0.0;
    m["last"] = records.back().to_json(false);
  }
}

inline void cmd_probe(Run& run) {
  const auto data = run.load_data();
  const auto s = make_splits(run.config(), data);
  const auto tracks = make_tracks(run.config(), s);
  ExperimentConfig cfg = run.config();
  if (run.options().checkpoint) {
    cfg.resume_checkpoint = run.options().checkpoint->string();
    cfg.init_checkpoint.clear();
  }
  auto trainer = make_trainer(cfg, s);
  if (cfg.resume_checkpoint.empty() && cfg.init_checkpoint.empty()) run.say(1, "no checkpoint given: probing a randomly initialized encoder");
  const auto out = run_probes(*trainer, cfg, s, tracks);
  run.write("probe.json", out.to_json().dump(2) + "\n");
  auto& m = run.metrics();
  m["utterance_accuracy"] = out.utterance.accuracy;
  m["utterance_p_value"] = out.utterance.p_value;
  if (out.frame) m["frame_error_rate"] = out.frame->error_rate;
}

inline bool cmd_compare(Run& run) {
  const auto& cfg = run.config();
  if (cfg.compare.cells.empty()) throw ConfigError("compare: config lists no compare.cells");
  const auto data = run.load_data();
  const auto s = make_splits(cfg, data);
  const auto tracks = make_tracks(cfg, s);
  fs::create_directories(run.path("metrics"));
  const auto report = compare_strategies(cfg.compare.cells, [&](const CellSpec& cell) {
    run.say(1, "cell " + cell.name);
    return run_cell(cfg, cell, s, tracks, [&](const CellSpec& c, std::uint64_t seed, const std::vector<MetricsRecord>& log) {
      std::string lines;
      for (const auto& r : log) lines += r.to_json().dump() + "\n";
      run.write("metrics/" + file_stem(c.name) + "_seed" + std::to_string(seed) + ".jsonl", lines);
    });
  });
  run.write("report.json", report.to_json().dump(2) + "\n");
  run.write("report.csv", report.to_csv());
  nlohmann::json cells = nlohmann::json::object();
  for (const auto& c : report.cells) cells[c.cell.name] = c.error ? nlohmann::json(*c.error) : nlohmann::json(c.mean_accuracy());
  run.metrics() = {{"complete", report.complete}, {"mean_accuracy", cells}};
  return report.complete;
}

inline void cmd_plot(Run& run) {
  struct Pending {
    std::string name, bytes;
  };
  std::vector<Pending> files;
  std::set<std::string> names;
  for (const auto& in : run.options().inputs) {
    std::string text;
    try {
      text = detail::read_file(in);
    } catch (const CorpusError&) {
      throw Error("plot: cannot read " + in.string());
    }
    const std::string ext = in.extension().string(), stem = file_stem(in.stem().string());
    plot::Chart chart;
    std::string base, xcol, ycol;
    if (ext == ".jsonl") {
      chart = plot::loss_chart(text, "loss: " + in.filename().string());
      base = "loss_" + stem;
      xcol = "step";
      ycol = "loss";
    } else if (ext == ".json" || ext == ".csv") {
      chart = ext == ".json" ? plot::accuracy_chart_from_json(text, "accuracy vs masking: " + in.filename().string())
                             : plot::accuracy_chart_from_csv(text, "accuracy vs masking: " + in.filename().string());
      base = "accuracy_vs_k_" + stem;
      xcol = "parameter";
      ycol = "mean_accuracy";
    } else {
      throw Error("plot: unsupported input " + in.string() + " (expected .jsonl metrics or a .json/.csv report)");
    }
    if (!names.insert(base).second) throw UsageError("plot: two inputs map to the same output name " + base);
    files.push_back({base + ".svg", plot::render_svg(chart)});
    files.push_back({base + ".csv", plot::render_csv(chart, xcol, ycol)});
  }
  // every input parsed: only now touch the output dir
  run.begin();
  for (const auto& f : files) run.write(f.name, f.bytes);
  run.metrics() = {{"files", files.size()}};
}

/// Entry point. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options opts;
  try {
    opts = parse_args(args);
  } catch (const UsageError& e) {
    err << "ems: " << e.what() << "\n\n" << kUsage;
    return 1;
  }
  if (opts.help) {
    out << kUsage;
    return 0;
  }
  try {
    Run r(opts, err);
    bool ok = true;
    if (opts.command != "plot") r.begin();
    if (opts.command == "corpus") cmd_corpus(r);
    else if (opts.command == "intensity") cmd_intensity(r);
    else if (opts.command == "pretrain") cmd_pretrain(r);
    else if (opts.command == "probe") cmd_probe(r);
    else if (opts.command == "compare") ok = cmd_compare(r);
    else cmd_plot(r);
    r.finish();
    out << r.out().string() << "\n";
    if (!ok) {
      err << "ems: comparison report is incomplete (failed cells are listed in report.json)\n";
      return 2;
    }
    return 0;
  } catch (const UsageError& e) {
    err << "ems: " << e.what() << "\n\n" << kUsage;
    return 1;
  } catch (const ConfigError& e) {
    err << "ems: configuration error: " << e.what() << "\n";
    return 1;
  } catch (const ArchitectureMismatch& e) {
    err << "ems: architecture mismatch: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "ems: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "ems: unexpected failure: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ems::cli
