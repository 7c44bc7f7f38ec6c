// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dff/error.hpp"
#include "dff/tensor.hpp"

namespace dff {

struct AdamConfig {
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("adam: weight_decay must be nonnegative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam: eps must be positive");
  }
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

/// Decoupled weight decay (p -= lr*wd*p), then the bias-corrected Adam step.
inline void adam_update(std::span<double> param, std::span<const double> grad, AdamState& state, const AdamConfig& c) {
  if (grad.size() != param.size()) throw DimensionError("adam_update: grad/param size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw DimensionError("adam_update: state/param size mismatch");
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const double decay = c.lr * c.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= decay * param[i];
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

/// Adam over a fixed list of tensors. A tensor without a gradient buffer
/// is stepped with a zero gradient.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config) : params_(std::move(params)), config_(config), states_(params_.size()) {
    config_.validate();
  }

  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }
  const AdamState& state(std::size_t i) const { return states_.at(i); }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      std::span<const double> g = p.mutable_grad();
      adam_update(p.mutable_values(), g, states_[i], config_);
    }
  }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<AdamState> states_;
};

}  // namespace dff
