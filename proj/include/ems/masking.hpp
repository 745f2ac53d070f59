// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Emotion-guided masking: intensity-ranked frame selection with consecutive
// span growth and the zero/replace/keep sub-random process, the uniform
// baseline, and the kernel masks for masked convolution.

#include "ems/tensor.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace ems {

enum class TieRule { LowerIndexFirst };

enum class MaskAction : std::uint8_t { Zero = 0, Replace = 1, Keep = 2 };

inline std::string_view action_name(MaskAction a) {
  switch (a) {
    case MaskAction::Zero: return "zero";
    case MaskAction::Replace: return "replace";
    case MaskAction::Keep: return "keep";
  }
  return "?";
}

inline MaskAction parse_action(std::string_view s) {
  if (s == "zero") return MaskAction::Zero;
  if (s == "replace") return MaskAction::Replace;
  if (s == "keep") return MaskAction::Keep;
  throw ConfigError("unknown mask action '" + std::string(s) + "'");
}

using ActionRatios = std::array<double, 3>;  // zero, replace, keep

inline void validate_ratios(const ActionRatios& r) {
  double s = 0.0;
  for (double x : r) {
    if (!(x >= 0.0)) throw ConfigError("mask action ratios must be non-negative");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("mask action ratios must sum to 1");
}

struct MaskConfig {
  double k_percent = 25.0;
  int span = 7;
  ActionRatios action_ratios{0.8, 0.1, 0.1};
  TieRule tie_rule = TieRule::LowerIndexFirst;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(k_percent > 0.0 && k_percent < 100.0)) throw ConfigError("k_percent must lie in (0, 100)");
    if (span < 1) throw ConfigError("mask span must be >= 1");
    validate_ratios(action_ratios);
  }
};

struct MaskedFrame {
  int index = 0;
  MaskAction action = MaskAction::Zero;
  int source = -1;  // replacement row for MaskAction::Replace

  bool operator==(const MaskedFrame&) const = default;
};

struct MaskPlan {
  int length = 0;
  std::vector<MaskedFrame> entries;  // ascending by index
  std::uint64_t seed = 0;

  std::vector<bool> masked() const {
    std::vector<bool> m(static_cast<std::size_t>(length), false);
    for (const auto& e : entries) m[static_cast<std::size_t>(e.index)] = true;
    return m;
  }

  std::size_t size() const { return entries.size(); }

  bool operator==(const MaskPlan&) const = default;
};

/// Number of frames a k% plan masks: max(1, round(k * T / 100)).
inline std::size_t mask_budget(std::size_t T, double k_percent) {
  const double raw = k_percent * static_cast<double>(T) / 100.0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(raw)));
}

/// All frame indices ordered by descending score; equal scores keep the lower index first.
inline std::vector<int> rank_frames(std::span<const float> scores, TieRule = TieRule::LowerIndexFirst) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  return order;
}

/// Indices of the top k% frames by score, ascending.
inline std::vector<int> select_topk_frames(std::span<const float> scores, double k_percent, TieRule tie = TieRule::LowerIndexFirst) {
  if (scores.empty()) throw DimensionError("select_topk_frames: empty score track");
  if (!(k_percent > 0.0 && k_percent < 100.0)) throw ConfigError("select_topk_frames: k_percent must lie in (0, 100)");
  auto order = rank_frames(scores, tie);
  order.resize(std::min(order.size(), mask_budget(scores.size(), k_percent)));
  std::sort(order.begin(), order.end());
  return order;
}

/// Grows each seed (taken in the given priority order) into the run
/// [s, min(s + span, T)) and stops before the union would exceed budget.
inline std::vector<int> extend_consecutive(std::span<const int> ordered_seeds, int span, int T, std::size_t budget) {
  if (span < 1) throw ConfigError("extend_consecutive: span must be >= 1");
  std::vector<bool> in(static_cast<std::size_t>(std::max(T, 0)), false);
  std::size_t count = 0;
  for (int s : ordered_seeds) {
    if (s < 0 || s >= T) throw DimensionError("extend_consecutive: seed index out of range");
    const int end = std::min(s + span, T);
    std::size_t fresh = 0;
    for (int i = s; i < end; ++i) fresh += in[static_cast<std::size_t>(i)] ? 0 : 1;
    if (count + fresh > budget) break;
    for (int i = s; i < end; ++i) in[static_cast<std::size_t>(i)] = true;
    count += fresh;
    if (count == budget) break;
  }
  std::vector<int> out;
  out.reserve(count);
  for (int i = 0; i < T; ++i)
    if (in[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

/// Draws an action per masked index: zero / replace / keep with the given
/// probabilities. Replacement rows come uniformly from unmasked frames (any
/// frame when every frame is masked).
inline MaskPlan assign_actions(std::span<const int> mask_set, int T, const ActionRatios& ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  MaskPlan plan;
  plan.length = T;
  plan.seed = seed;
  std::vector<int> sorted(mask_set.begin(), mask_set.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<bool> masked(static_cast<std::size_t>(T), false);
  for (int i : sorted) {
    if (i < 0 || i >= T) throw DimensionError("assign_actions: index out of range");
    masked[static_cast<std::size_t>(i)] = true;
  }
  std::vector<int> pool;
  for (int i = 0; i < T; ++i)
    if (!masked[static_cast<std::size_t>(i)]) pool.push_back(i);
  if (pool.empty()) {
    pool.resize(static_cast<std::size_t>(T));
    std::iota(pool.begin(), pool.end(), 0);
  }
  Rng rng(derive_seed(seed, {0xAC7u}));
  for (int i : sorted) {
    MaskedFrame f;
    f.index = i;
    const double u = uniform01(rng);
    if (u < ratios[0]) {
      f.action = MaskAction::Zero;
    } else if (u < ratios[0] + ratios[1]) {
      f.action = MaskAction::Replace;
      f.source = pool[uniform_index(rng, pool.size())];
    } else {
      f.action = MaskAction::Keep;
    }
    plan.entries.push_back(f);
  }
  return plan;
}

/// Returns the masked copy of a T x d matrix; the input is untouched.
template <typename S>
Mat<S> apply_mask_plan(const Mat<S>& frames, const MaskPlan& plan) {
  if (plan.length != frames.rows()) throw DimensionError("apply_mask_plan: plan length does not match T");
  Mat<S> out = frames;
  for (const auto& e : plan.entries) {
    if (e.index < 0 || e.index >= frames.rows()) throw DimensionError("apply_mask_plan: index out of range");
    switch (e.action) {
      case MaskAction::Zero: out.row(e.index).setZero(); break;
      case MaskAction::Replace:
        if (e.source < 0 || e.source >= frames.rows()) throw DimensionError("apply_mask_plan: replacement source out of range");
        out.row(e.index) = frames.row(e.source);
        break;
      case MaskAction::Keep: break;
    }
  }
  return out;
}

/// Row sources for ag::gather_rows realizing the plan (-1 zeroes a row).
inline std::vector<int> plan_row_sources(const MaskPlan& plan) {
  std::vector<int> src(static_cast<std::size_t>(plan.length));
  std::iota(src.begin(), src.end(), 0);
  for (const auto& e : plan.entries) {
    if (e.action == MaskAction::Zero) src[static_cast<std::size_t>(e.index)] = -1;
    else if (e.action == MaskAction::Replace) src[static_cast<std::size_t>(e.index)] = e.source;
  }
  return src;
}

/// EMS plan: intensity-ranked seeds, span growth within the k% budget, actions.
inline MaskPlan ems_mask_plan(std::span<const float> scores, const MaskConfig& cfg) {
  cfg.validate();
  if (scores.empty()) throw DimensionError("ems_mask_plan: empty score track");
  const int T = static_cast<int>(scores.size());
  const auto budget = mask_budget(scores.size(), cfg.k_percent);
  const auto order = rank_frames(scores, cfg.tie_rule);
  const auto set = extend_consecutive(order, cfg.span, T, budget);
  return assign_actions(set, T, cfg.action_ratios, cfg.seed);
}

/// Baseline plan: seeds in uniformly random order, same budget/span/action machinery.
inline MaskPlan uniform_mask_plan(int T, double p_percent, int span, std::uint64_t seed, const ActionRatios& ratios = {0.8, 0.1, 0.1}) {
  if (T < 1) throw DimensionError("uniform_mask_plan: T must be >= 1");
  if (!(p_percent > 0.0 && p_percent < 100.0)) throw ConfigError("uniform_mask_plan: p_percent must lie in (0, 100)");
  std::vector<int> order(static_cast<std::size_t>(T));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x0F1Fu}));
  shuffle_in_place(order, rng);
  const auto set = extend_consecutive(order, span, T, mask_budget(static_cast<std::size_t>(T), p_percent));
  return assign_actions(set, T, ratios, seed);
}

inline nlohmann::json mask_plan_to_json(const MaskPlan& plan) {
  nlohmann::json j;
  j["length"] = plan.length;
  j["seed"] = plan.seed;
  auto& idx = j["indices"] = nlohmann::json::array();
  auto& act = j["actions"] = nlohmann::json::array();
  auto& src = j["sources"] = nlohmann::json::array();
  for (const auto& e : plan.entries) {
    idx.push_back(e.index);
    act.push_back(std::string(action_name(e.action)));
    src.push_back(e.source);
  }
  return j;
}

inline MaskPlan mask_plan_from_json(const nlohmann::json& j) {
  MaskPlan p;
  p.length = j.at("length").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  const auto& idx = j.at("indices");
  const auto& act = j.at("actions");
  const auto& src = j.at("sources");
  if (idx.size() != act.size() || idx.size() != src.size()) throw ConfigError("mask plan: array lengths differ");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    MaskedFrame f{idx[i].get<int>(), parse_action(act[i].get<std::string>()), src[i].get<int>()};
    if (f.index < 0 || f.index >= p.length) throw ConfigError("mask plan: index out of range");
    if (f.action == MaskAction::Replace && (f.source < 0 || f.source >= p.length)) throw ConfigError("mask plan: replacement source out of range");
    if (!p.entries.empty() && f.index <= p.entries.back().index) throw ConfigError("mask plan: indices must be strictly ascending");
    p.entries.push_back(f);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Masked convolution kernels

/// Per-row keep flags of D for kernel size k and center parameter m:
/// row i (1-indexed) is kept iff i <= k/2 - m or i >= k/2 + m.
inline std::vector<bool> kernel_keep_rows(int k, int m) {
  if (k < 3 || k % 2 == 0) throw ConfigError("kernel mask: kernel size must be odd and >= 3");
  if (m < 1) throw ConfigError("kernel mask: m must be >= 1");
  std::vector<bool> keep(static_cast<std::size_t>(k));
  bool any = false;
  for (int i = 1; i <= k; ++i) {
    // compare 2i against k - 2m and k + 2m to stay in integers
    const bool kept = (2 * i <= k - 2 * m) || (2 * i >= k + 2 * m);
    keep[static_cast<std::size_t>(i - 1)] = kept;
    any = any || kept;
  }
  if (!any) throw ConfigError("kernel mask: (k=" + std::to_string(k) + ", m=" + std::to_string(m) + ") leaves no kernel row");
  return keep;
}

/// D as a k x d binary matrix (identical columns).
inline MatF build_kernel_mask(int k, int m, int d) {
  if (d < 1) throw ConfigError("kernel mask: d must be >= 1");
  const auto keep = kernel_keep_rows(k, m);
  MatF D(k, d);
  for (int i = 0; i < k; ++i) D.row(i).setConstant(keep[static_cast<std::size_t>(i)] ? 1.0f : 0.0f);
  return D;
}

/// m such that D zeroes at least `mask_size` central rows (D always zeroes 2m rows).
inline int center_param_for_mask_size(int mask_size) {
  if (mask_size < 1) throw ConfigError("mask size must be >= 1");
  return (mask_size + 1) / 2;
}

/// 1-indexed kernel position with the highest mean score over all complete
/// windows of width k advanced by stride; ties go to the lower position.
inline int ems_kernel_position(std::span<const float> scores, int k, int stride) {
  if (k < 1) throw ConfigError("ems_kernel_position: kernel size must be >= 1");
  if (stride < 1) throw ConfigError("ems_kernel_position: stride must be >= 1");
  if (scores.size() < static_cast<std::size_t>(k)) throw DimensionError("ems_kernel_position: track shorter than kernel");
  std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
  std::size_t windows = 0;
  for (std::size_t start = 0; start + static_cast<std::size_t>(k) <= scores.size(); start += static_cast<std::size_t>(stride)) {
    for (int p = 0; p < k; ++p) sum[static_cast<std::size_t>(p)] += scores[start + static_cast<std::size_t>(p)];
    ++windows;
  }
  int best = 0;
  for (int p = 1; p < k; ++p)
    if (sum[static_cast<std::size_t>(p)] / windows > sum[static_cast<std::size_t>(best)] / windows) best = p;
  return best + 1;
}

/// D with row `ems_position` (1-indexed) forced to zero; rejects an all-zero result.
inline MatF combine_kernel_masks(const MatF& D, int ems_position) {
  if (ems_position < 1 || ems_position > D.rows()) throw ConfigError("combine_kernel_masks: position out of range");
  MatF eff = D;
  eff.row(ems_position - 1).setZero();
  if ((eff.array() == 0.0f).all()) throw ConfigError("combine_kernel_masks: effective kernel mask is all zero");
  return eff;
}

/// Row gate vector (length k) for ag::conv1d from a k x d mask.
template <typename S>
std::vector<S> kernel_row_gate(const MatF& mask) {
  std::vector<S> gate(static_cast<std::size_t>(mask.rows()));
  for (Eigen::Index i = 0; i < mask.rows(); ++i) gate[static_cast<std::size_t>(i)] = mask(i, 0) != 0.0f ? S(1) : S(0);
  return gate;
}

}  // namespace ems
