// Copyright EMS contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ems/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace ems {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int warmup_steps = 0;
  double clip_norm = 0.0;  // 0 disables clipping
};

/// Adam with linear warmup and optional global-norm clipping. Moment
/// buffers are keyed by parameter name so they survive checkpointing.
template <typename S>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long step_count() const { return step_; }
  void set_step_count(long s) { step_ = s; }

  double learning_rate_at(long step) const {
    if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps)
      return cfg_.learning_rate * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    return cfg_.learning_rate;
  }

  /// Applies one update from the accumulated gradients. Returns the
  /// pre-clipping global gradient norm.
  double step(const nn::ParamList<S>& params) {
    ++step_;
    double sq = 0.0;
    for (const auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    const double lr = learning_rate_at(step_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto* p : params) {
      auto& m = first_[p->name];
      auto& v = second_[p->name];
      if (m.size() == 0) {
        m.setZero(p->value.rows(), p->value.cols());
        v.setZero(p->value.rows(), p->value.cols());
      }
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      const S c = static_cast<S>(clip);
      m.array() = b1 * m.array() + (S(1) - b1) * c * p->grad.array();
      v.array() = b2 * v.array() + (S(1) - b2) * (c * p->grad.array()).square();
      if (lr == 0.0) continue;
      const S step_size = static_cast<S>(lr / bc1);
      const S denom_scale = static_cast<S>(1.0 / std::sqrt(bc2));
      p->value.array() -= step_size * m.array() / (v.array().sqrt() * denom_scale + static_cast<S>(cfg_.epsilon));
    }
    return norm;
  }

  std::map<std::string, Mat<S>>& first_moments() { return first_; }
  std::map<std::string, Mat<S>>& second_moments() { return second_; }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, Mat<S>> first_;
  std::map<std::string, Mat<S>> second_;
};

}  // namespace ems
