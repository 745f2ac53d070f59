// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic emotional speech with known frame-level intensity, plus the
// log-mel front end and stratified splitting.
//
// Each utterance is a harmonic source whose spectral envelope follows a
// sequence of vowel-like "units" (the frame labels used by the frame probe).
// Emotion class sets the pitch, loudness, vibrato, spectral tilt and
// breathiness profile. Emotional bursts are trapezoidal envelopes that raise
// loudness and pitch; the normalized burst envelope is the intensity ground
// truth.

#include "ems/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ems {

enum class Emotion : int { Neutral = 0, Happy = 1, Sad = 2, Angry = 3 };

inline constexpr int kNumEmotions = 4;

inline std::string_view emotion_name(Emotion e) {
  switch (e) {
    case Emotion::Neutral: return "neutral";
    case Emotion::Happy: return "happy";
    case Emotion::Sad: return "sad";
    case Emotion::Angry: return "angry";
  }
  return "unknown";
}

inline Emotion parse_emotion(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i)
    if (emotion_name(static_cast<Emotion>(i)) == name) return static_cast<Emotion>(i);
  throw ConfigError("unknown emotion label '" + std::string(name) + "'");
}

inline Emotion emotion_from_index(int i) {
  if (i < 0 || i >= kNumEmotions) throw ConfigError("emotion index out of range: " + std::to_string(i));
  return static_cast<Emotion>(i);
}

struct EmotionProfile {
  double f0_hz;
  double amplitude;
  double vibrato_hz;
  double vibrato_depth;
  double spectral_tilt;  // harmonic h is weighted by h^-tilt
  double breathiness;    // relative noise level
};

struct GeneratorConfig {
  int sample_rate = 16000;
  double burst_fraction = 0.3;
  double burst_gain = 2.5;         // peak amplitude multiplier inside a burst
  double burst_pitch_raise = 0.15;  // relative f0 increase at burst peak
  int max_bursts = 3;
  double burst_ramp = 0.1;  // ramp length as a fraction of burst length, per side
  int unit_count = 8;
  double unit_min_ms = 60.0;
  double unit_max_ms = 160.0;
  double speaker_f0_jitter = 0.12;
  double gain_jitter_db = 4.0;
  double noise_floor = 0.002;
  // Share of the emotion profile voiced outside bursts; inside a burst the
  // profile is expressed fully, scaled by the envelope in between.
  double expression_floor = 0.2;
  double emotion_contrast = 0.15;  // scales every profile's distance from the class average
  std::array<EmotionProfile, kNumEmotions> profiles{{
      {120.0, 0.25, 3.0, 0.020, 1.2, 0.02},  // neutral
      {210.0, 0.35, 6.0, 0.060, 0.8, 0.03},  // happy
      {100.0, 0.15, 2.0, 0.015, 1.8, 0.05},  // sad
      {170.0, 0.50, 5.0, 0.040, 0.6, 0.08},  // angry
  }};
};

struct Utterance {
  std::vector<float> samples;
  int sample_rate = 16000;
  Emotion emotion = Emotion::Neutral;
  std::vector<float> truth_intensity;  // one per sample, in [0,1]
  std::vector<int> units;              // one per sample
  std::uint64_t seed = 0;
};

namespace detail {

// Formant pairs (Hz) for the synthetic units; unit u uses row u % size.
inline constexpr std::array<std::array<double, 2>, 8> kUnitFormants{{
    {300.0, 2300.0},
    {400.0, 2000.0},
    {500.0, 1700.0},
    {620.0, 1200.0},
    {720.0, 1100.0},
    {760.0, 1500.0},
    {450.0, 900.0},
    {350.0, 800.0},
}};

inline double formant_response(double f, int unit) {
  const auto& fm = kUnitFormants[static_cast<std::size_t>(unit) % kUnitFormants.size()];
  double r = 0.05;
  for (double c : fm) {
    const double x = (f - c) / 110.0;
    r += 1.0 / (1.0 + x * x);
  }
  return r;
}

struct Burst {
  std::size_t start;
  std::size_t length;
  double peak;
};

inline std::vector<Burst> place_bursts(std::size_t n, const GeneratorConfig& cfg, Rng& rng) {
  std::vector<Burst> bursts;
  const auto total = static_cast<std::size_t>(std::llround(cfg.burst_fraction * static_cast<double>(n)));
  if (cfg.burst_fraction <= 0.0 || total == 0) return bursts;
  const int count = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(std::max(1, cfg.max_bursts))));
  // split the burst budget into `count` parts with weights in [1, 2)
  std::vector<double> w(static_cast<std::size_t>(count));
  for (auto& x : w) x = 1.0 + uniform01(rng);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<std::size_t> lengths(w.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    lengths[i] = (i + 1 == w.size()) ? total - used : static_cast<std::size_t>(static_cast<double>(total) * w[i] / wsum);
    used += lengths[i];
  }
  // distribute the free samples into count + 1 gaps
  const std::size_t free = n > total ? n - total : 0;
  std::vector<double> g(static_cast<std::size_t>(count) + 1);
  for (auto& x : g) x = uniform01(rng) + 0.05;
  const double gsum = std::accumulate(g.begin(), g.end(), 0.0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    pos += static_cast<std::size_t>(static_cast<double>(free) * g[i] / gsum);
    const double peak = 0.7 + 0.3 * uniform01(rng);
    if (lengths[i] > 0) bursts.push_back({pos, lengths[i], peak});
    pos += lengths[i];
  }
  return bursts;
}

}  // namespace detail

/// Deterministic synthetic utterance for (emotion, duration, seed, cfg).
inline Utterance synth_utterance(Emotion emotion, double duration_s, std::uint64_t seed, const GeneratorConfig& cfg) {
  if (!(duration_s > 0.0)) throw ConfigError("synth_utterance: duration must be positive");
  const int ei = static_cast<int>(emotion);
  if (ei < 0 || ei >= kNumEmotions) throw ConfigError("synth_utterance: unknown emotion label");
  if (cfg.sample_rate <= 0) throw ConfigError("synth_utterance: sample_rate must be positive");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(duration_s * cfg.sample_rate)));
  const double sr = cfg.sample_rate;
  const auto& prof = cfg.profiles[static_cast<std::size_t>(ei)];

  Rng rng(derive_seed(seed, {0xE3u}));
  Utterance u;
  u.sample_rate = cfg.sample_rate;
  u.emotion = emotion;
  u.seed = seed;
  u.samples.assign(n, 0.0f);
  u.truth_intensity.assign(n, 0.0f);
  u.units.assign(n, 0);

  // intensity envelope
  std::vector<double> env(n, 0.0);
  for (const auto& b : detail::place_bursts(n, cfg, rng)) {
    const double ramp = std::max(1.0, cfg.burst_ramp * static_cast<double>(b.length));
    for (std::size_t i = 0; i < b.length && b.start + i < n; ++i) {
      const double x = static_cast<double>(i) + 0.5;
      const double shape = std::min({1.0, x / ramp, (static_cast<double>(b.length) - x) / ramp});
      env[b.start + i] = std::max(env[b.start + i], b.peak * std::max(0.0, shape));
    }
  }
  const double env_max = *std::max_element(env.begin(), env.end());
  if (env_max > 0.0)
    for (auto& e : env) e /= env_max;

  // unit sequence
  {
    std::size_t pos = 0;
    const int units = std::max(1, cfg.unit_count);
    while (pos < n) {
      const double ms = cfg.unit_min_ms + (cfg.unit_max_ms - cfg.unit_min_ms) * uniform01(rng);
      const auto len = std::max<std::size_t>(1, static_cast<std::size_t>(ms * sr / 1000.0));
      const int unit = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(units)));
      for (std::size_t i = pos; i < std::min(n, pos + len); ++i) u.units[i] = unit;
      pos += len;
    }
  }

  EmotionProfile centre{0, 0, 0, 0, 0, 0};
  for (const auto& p : cfg.profiles) {
    centre.f0_hz += p.f0_hz / kNumEmotions;
    centre.amplitude += p.amplitude / kNumEmotions;
    centre.vibrato_hz += p.vibrato_hz / kNumEmotions;
    centre.vibrato_depth += p.vibrato_depth / kNumEmotions;
    centre.spectral_tilt += p.spectral_tilt / kNumEmotions;
    centre.breathiness += p.breathiness / kNumEmotions;
  }
  const double floor_w = std::clamp(cfg.expression_floor, 0.0, 1.0);
  auto lerp = [](double a, double b, double w) { return a + w * (b - a); };

  const double speaker = 1.0 + cfg.speaker_f0_jitter * (2.0 * uniform01(rng) - 1.0);
  const double gain_jitter = std::pow(10.0, cfg.gain_jitter_db * (2.0 * uniform01(rng) - 1.0) / 20.0);
  const double vib_phase = 2.0 * M_PI * uniform01(rng);
  const double declination = 0.1 * uniform01(rng);

  constexpr double kTopHz = 4000.0;
  constexpr std::size_t kBlock = 80;  // harmonic weights refreshed every 5 ms at 16 kHz
  std::vector<double> phases(64, 0.0);
  std::vector<double> weights;
  for (std::size_t start = 0; start < n; start += kBlock) {
    const std::size_t end = std::min(n, start + kBlock);
    const double tc = static_cast<double>(start) / sr;
    const double w = cfg.emotion_contrast * (floor_w + (1.0 - floor_w) * env[start]);
    const double tilt = lerp(centre.spectral_tilt, prof.spectral_tilt, w);
    const double breath = lerp(centre.breathiness, prof.breathiness, w);
    const double gain = lerp(centre.amplitude, prof.amplitude, w) * gain_jitter;
    const double f0_block = lerp(centre.f0_hz, prof.f0_hz, w) * speaker * (1.0 - declination * tc / duration_s) *
                            (1.0 + lerp(centre.vibrato_depth, prof.vibrato_depth, w) *
                                       std::sin(2.0 * M_PI * lerp(centre.vibrato_hz, prof.vibrato_hz, w) * tc + vib_phase)) *
                            (1.0 + cfg.burst_pitch_raise * env[start]);
    const auto harmonics = std::min<std::size_t>(phases.size(), static_cast<std::size_t>(kTopHz / f0_block));
    weights.assign(harmonics, 0.0);
    double wnorm = 0.0;
    for (std::size_t h = 0; h < harmonics; ++h) {
      const double fh = f0_block * static_cast<double>(h + 1);
      weights[h] = detail::formant_response(fh, u.units[start]) * std::pow(static_cast<double>(h + 1), -tilt);
      wnorm += weights[h] * weights[h];
    }
    wnorm = std::sqrt(std::max(wnorm, 1e-12));
    for (std::size_t i = start; i < end; ++i) {
      const double amp = gain * (1.0 + (cfg.burst_gain - 1.0) * env[i]);
      double s = 0.0;
      for (std::size_t h = 0; h < harmonics; ++h) {
        phases[h] += 2.0 * M_PI * f0_block * static_cast<double>(h + 1) / sr;
        if (phases[h] > 2.0 * M_PI) phases[h] -= 2.0 * M_PI;
        s += weights[h] / wnorm * std::sin(phases[h]);
      }
      const double noise = normal01(rng);
      s = amp * (s + breath * noise) + cfg.noise_floor * normal01(rng);
      u.samples[i] = static_cast<float>(s);
      u.truth_intensity[i] = static_cast<float>(env[i]);
    }
  }
  return u;
}

struct FeatureConfig {
  int window = 400;
  int hop = 160;
  int n_fft = 0;  // 0 selects the next power of two >= window
  int mel_bins = 40;
  double fmin_hz = 20.0;
  double fmax_hz = 0.0;  // 0 selects Nyquist
  double log_floor = 1e-10;
};

struct FeatureSequence {
  MatF frames;  // T x d log-mel energies
  double frame_rate = 100.0;
  std::vector<float> truth_frame_intensity;
  Emotion emotion = Emotion::Neutral;
  std::string utterance_id;
  std::vector<int> frame_units;  // generator unit label per frame

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

/// Windowed power spectrum -> triangular mel filterbank -> log.
/// The DFT is evaluated as a product with precomputed cosine/sine tables.
class LogMelExtractor {
 public:
  LogMelExtractor(const FeatureConfig& cfg, int sample_rate) : cfg_(cfg), sample_rate_(sample_rate) {
    if (cfg.hop <= 0 || cfg.window < cfg.hop) throw ConfigError("features: require window >= hop > 0");
    if (cfg.mel_bins < 1) throw ConfigError("features: mel_bins must be >= 1");
    n_fft_ = cfg.n_fft > 0 ? cfg.n_fft : 1;
    if (cfg.n_fft <= 0)
      while (n_fft_ < cfg.window) n_fft_ *= 2;
    if (n_fft_ < cfg.window) throw ConfigError("features: n_fft must be >= window");
    const int bins = n_fft_ / 2 + 1;
    // periodic Hann window folded into the DFT tables
    cos_.resize(cfg.window, bins);
    sin_.resize(cfg.window, bins);
    for (int i = 0; i < cfg.window; ++i) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.window);
      for (int k = 0; k < bins; ++k) {
        const double ang = 2.0 * M_PI * static_cast<double>(i) * k / n_fft_;
        cos_(i, k) = w * std::cos(ang);
        sin_(i, k) = w * std::sin(ang);
      }
    }
    const double fmax = cfg.fmax_hz > 0.0 ? cfg.fmax_hz : sample_rate / 2.0;
    auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto mel_to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const double m0 = hz_to_mel(cfg.fmin_hz), m1 = hz_to_mel(fmax);
    std::vector<double> edges(static_cast<std::size_t>(cfg.mel_bins) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(m0 + (m1 - m0) * static_cast<double>(i) / static_cast<double>(edges.size() - 1));
    mel_ = MatD::Zero(bins, cfg.mel_bins);
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft_;
      for (int m = 0; m < cfg.mel_bins; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        double w = 0.0;
        if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
        else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
        mel_(k, m) = w;
      }
    }
  }

  int n_fft() const { return n_fft_; }
  double frame_rate() const { return static_cast<double>(sample_rate_) / cfg_.hop; }

  static std::size_t frame_count(std::size_t num_samples, int window, int hop) {
    if (num_samples < static_cast<std::size_t>(window)) return 0;
    return (num_samples - static_cast<std::size_t>(window)) / static_cast<std::size_t>(hop) + 1;
  }

  MatF log_mel(const std::vector<float>& samples) const {
    const std::size_t T = frame_count(samples.size(), cfg_.window, cfg_.hop);
    if (T == 0) throw DimensionError("extract_features: utterance shorter than one window");
    MatD framed(static_cast<Eigen::Index>(T), cfg_.window);
    for (std::size_t t = 0; t < T; ++t)
      for (int i = 0; i < cfg_.window; ++i)
        framed(static_cast<Eigen::Index>(t), i) = samples[t * static_cast<std::size_t>(cfg_.hop) + static_cast<std::size_t>(i)];
    const MatD re = framed * cos_;
    const MatD im = framed * sin_;
    const MatD power = (re.array().square() + im.array().square()).matrix();
    const MatD mel = power * mel_;
    return mel.array().max(cfg_.log_floor).log().matrix().cast<float>();
  }

  const FeatureConfig& config() const { return cfg_; }

 private:
  FeatureConfig cfg_;
  int sample_rate_;
  int n_fft_ = 0;
  MatD cos_, sin_, mel_;
};

inline FeatureSequence extract_features(const Utterance& utt, const LogMelExtractor& fx, std::string utterance_id = {}) {
  const auto& cfg = fx.config();
  FeatureSequence fs;
  fs.frames = fx.log_mel(utt.samples);
  fs.frame_rate = fx.frame_rate();
  fs.emotion = utt.emotion;
  fs.utterance_id = std::move(utterance_id);
  const auto T = static_cast<std::size_t>(fs.frames.rows());
  fs.truth_frame_intensity.resize(T);
  fs.frame_units.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t b = t * static_cast<std::size_t>(cfg.hop);
    double acc = 0.0;
    for (int i = 0; i < cfg.window; ++i) acc += utt.truth_intensity[b + static_cast<std::size_t>(i)];
    fs.truth_frame_intensity[t] = static_cast<float>(std::clamp(acc / cfg.window, 0.0, 1.0));
    fs.frame_units[t] = utt.units.empty() ? 0 : utt.units[b + static_cast<std::size_t>(cfg.window / 2)];
  }
  return fs;
}

inline FeatureSequence extract_features(const Utterance& utt, const FeatureConfig& cfg, std::string utterance_id = {}) {
  return extract_features(utt, LogMelExtractor(cfg, utt.sample_rate), std::move(utterance_id));
}

struct CorpusConfig {
  int per_class = 60;
  double duration_s = 1.0;
  std::uint64_t seed = 0;
  GeneratorConfig generator;
  FeatureConfig features;
};

inline std::string utterance_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt%05zu", index);
  return buf;
}

/// Class-balanced corpus: record i has emotion i % 4.
inline std::vector<FeatureSequence> generate_corpus(const CorpusConfig& cfg) {
  if (cfg.per_class < 1) throw ConfigError("corpus: per_class must be >= 1");
  const LogMelExtractor fx(cfg.features, cfg.generator.sample_rate);
  std::vector<FeatureSequence> out;
  const std::size_t total = static_cast<std::size_t>(cfg.per_class) * kNumEmotions;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    const auto e = emotion_from_index(static_cast<int>(i % kNumEmotions));
    const Utterance u = synth_utterance(e, cfg.duration_s, derive_seed(cfg.seed, {i}), cfg.generator);
    out.push_back(extract_features(u, fx, utterance_id_for(i)));
  }
  return out;
}

/// Per-bin standardization fitted on a training set.
struct FeatureNormalizer {
  RowVec<float> mean;
  RowVec<float> inv_std;

  bool empty() const { return mean.size() == 0; }

  static FeatureNormalizer fit(const std::vector<FeatureSequence>& data) {
    if (data.empty()) throw DimensionError("normalizer: empty dataset");
    const Eigen::Index d = data.front().dim();
    Eigen::RowVectorXd s = Eigen::RowVectorXd::Zero(d), s2 = Eigen::RowVectorXd::Zero(d);
    double n = 0;
    for (const auto& fs : data) {
      if (fs.dim() != d) throw DimensionError("normalizer: inconsistent feature dimension");
      const MatD f = fs.frames.cast<double>();
      s += f.colwise().sum();
      s2 += f.array().square().matrix().colwise().sum();
      n += static_cast<double>(f.rows());
    }
    FeatureNormalizer z;
    const Eigen::RowVectorXd mu = s / n;
    const Eigen::RowVectorXd var = (s2 / n).array() - mu.array().square();
    z.mean = mu.cast<float>();
    z.inv_std = var.array().max(1e-8).rsqrt().matrix().cast<float>();
    return z;
  }

  template <typename S>
  Mat<S> apply(const MatF& frames) const {
    if (empty()) return frames.cast<S>();
    if (frames.cols() != mean.size()) throw DimensionError("normalizer: feature dimension mismatch");
    MatF out = frames;
    out.rowwise() -= mean;
    out.array().rowwise() *= inv_std.array();
    return out.cast<S>();
  }
};

/// Stratified three-way split. Split sizes follow the ratios exactly (largest
/// remainder); each class receives floor or ceil of its proportional share in
/// every split.
inline std::array<std::vector<FeatureSequence>, 3> split_corpus(const std::vector<FeatureSequence>& data,
                                                                 std::array<double, 3> ratios, std::uint64_t seed) {
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("split_corpus: ratios must be positive (a split would be empty)");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_corpus: ratios must sum to 1");

  auto largest_remainder = [](std::size_t n, const std::array<double, 3>& r) {
    std::array<std::size_t, 3> c{};
    std::array<double, 3> frac{};
    std::size_t used = 0;
    for (int j = 0; j < 3; ++j) {
      const double x = static_cast<double>(n) * r[j];
      c[j] = static_cast<std::size_t>(std::floor(x + 1e-9));
      frac[j] = x - static_cast<double>(c[j]);
      used += c[j];
    }
    while (used < n) {
      int best = 0;
      for (int j = 1; j < 3; ++j)
        if (frac[j] > frac[best] + 1e-12) best = j;
      ++c[best];
      frac[best] = -1.0;
      ++used;
    }
    return c;
  };

  std::array<std::vector<std::size_t>, kNumEmotions> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<std::size_t>(data[i].emotion)].push_back(i);
  const auto totals = largest_remainder(data.size(), ratios);

  // floor allocation then +1 augmentations so row sums (class sizes) and
  // column sums (split sizes) both hold
  std::array<std::array<std::size_t, 3>, kNumEmotions> alloc{};
  std::array<std::array<bool, 3>, kNumEmotions> can_round_up{};
  std::array<std::size_t, kNumEmotions> row_need{};
  std::array<std::size_t, 3> col_need{};
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    std::size_t used = 0;
    for (int j = 0; j < 3; ++j) {
      const double x = static_cast<double>(by_class[c].size()) * ratios[j];
      alloc[c][j] = static_cast<std::size_t>(std::floor(x + 1e-9));
      can_round_up[c][j] = x - static_cast<double>(alloc[c][j]) > 1e-9;
      used += alloc[c][j];
    }
    row_need[c] = by_class[c].size() - used;
  }
  for (int j = 0; j < 3; ++j) {
    std::size_t used = 0;
    for (std::size_t c = 0; c < kNumEmotions; ++c) used += alloc[c][j];
    col_need[j] = totals[j] - used;
  }
  // bipartite augmenting paths: each class row gives row_need[c] units to
  // splits, one unit per (class, split) cell at most
  std::array<std::array<bool, 3>, kNumEmotions> up{};
  auto augment = [&](auto&& self, std::size_t c, std::array<bool, kNumEmotions>& seen) -> bool {
    if (seen[c]) return false;
    seen[c] = true;
    for (int j = 0; j < 3; ++j) {
      if (!can_round_up[c][j] || up[c][j]) continue;
      if (col_need[j] > 0) {
        up[c][j] = true;
        --col_need[j];
        return true;
      }
      // try to move another class's unit in split j elsewhere
      for (std::size_t o = 0; o < kNumEmotions; ++o) {
        if (o == c || !up[o][j]) continue;
        // o must place its unit in a different split
        up[o][j] = false;
        can_round_up[o][j] = false;
        std::array<bool, kNumEmotions> seen2 = seen;
        const bool moved = self(self, o, seen2);
        can_round_up[o][j] = true;
        if (moved) {
          up[c][j] = true;
          return true;
        }
        up[o][j] = true;
      }
    }
    return false;
  };
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    for (std::size_t u = 0; u < row_need[c]; ++u) {
      std::array<bool, kNumEmotions> seen{};
      if (!augment(augment, c, seen)) throw Error("split_corpus: no consistent stratified allocation");
    }
  }

  std::array<std::vector<FeatureSequence>, 3> out;
  std::array<std::vector<std::size_t>, 3> idx;
  for (std::size_t c = 0; c < kNumEmotions; ++c) {
    if (by_class[c].empty()) continue;
    auto order = by_class[c];
    Rng rng(derive_seed(seed, {0x5917u, c}));
    shuffle_in_place(order, rng);
    std::size_t pos = 0;
    for (int j = 0; j < 3; ++j) {
      const std::size_t count = alloc[c][j] + (up[c][j] ? 1 : 0);
      if (count == 0)
        throw Error("split_corpus: split " + std::to_string(j) + " would receive zero records of class " +
                    std::string(emotion_name(static_cast<Emotion>(c))));
      for (std::size_t k = 0; k < count; ++k) idx[j].push_back(order[pos++]);
    }
  }
  for (int j = 0; j < 3; ++j) {
    std::sort(idx[j].begin(), idx[j].end());
    for (auto i : idx[j]) out[j].push_back(data[i]);
  }
  return out;
}

}  // namespace ems
