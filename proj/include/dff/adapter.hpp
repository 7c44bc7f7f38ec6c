// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dff/backbone.hpp"
#include "dff/ops.hpp"
#include "dff/rng.hpp"
#include "dff/serialize.hpp"

namespace dff {

/// Multi-head LoRA expert routing configuration.
///
/// `head_adapters` counts every channel slice. With `shared_head` set, slice 0
/// is the always-on shared head and slices 1..h-1 are task-routed, so the
/// number of task heads is h - 1. Experts at a site map d/h channels through
/// rank r/h and back.
struct AdapterConfig {
  static constexpr std::size_t kTasks = kNumTasks;

  std::size_t rank = 16;
  double alpha = 32.0;
  std::size_t num_experts = 6;
  std::size_t head_adapters = 4;
  std::size_t top_k = 3;
  std::optional<double> beta;  // defaults to alpha / head_rank()

  // Ablation switches. The full method has all three set.
  bool enabled = true;                 // false: no adapters at all (linear probing)
  bool shared_head = true;             // false: every slice is a task head
  bool shared_in_authenticity = true;  // false: the task-0 delta leaves slice 0 untouched

  std::size_t task_heads() const { return shared_head ? head_adapters - 1 : head_adapters; }
  std::size_t head_width(std::size_t embed_dim) const { return embed_dim / head_adapters; }
  std::size_t head_rank() const { return rank / head_adapters; }
  std::size_t effective_top_k() const { return std::min(top_k, num_experts); }
  double scale() const { return beta.value_or(alpha / static_cast<double>(head_rank())); }

  void validate(std::size_t embed_dim) const {
    if (!enabled) return;
    if (rank == 0 || num_experts == 0 || head_adapters == 0 || top_k == 0) {
      throw ConfigError("adapter: rank, num_experts, head_adapters and top_k must be >= 1");
    }
    if (embed_dim % head_adapters != 0) {
      throw ConfigError("adapter: head_adapters " + std::to_string(head_adapters) + " does not divide embed_dim " +
                        std::to_string(embed_dim));
    }
    if (rank % head_adapters != 0) {
      throw ConfigError("adapter: head_adapters " + std::to_string(head_adapters) + " does not divide rank " +
                        std::to_string(rank));
    }
    if (task_heads() < 1) throw ConfigError("adapter: need at least one task head (h - 1 >= 1 with a shared head)");
    if (!(alpha > 0.0)) throw ConfigError("adapter: alpha must be positive");
    if (beta && !(*beta > 0.0)) throw ConfigError("adapter: beta must be positive");
  }

  friend bool operator==(const AdapterConfig&, const AdapterConfig&) = default;
};

/// Top-k experts for one (task, head) and their renormalized gates.
struct RoutingDecision {
  std::vector<std::size_t> selected;  // by descending probability, ties to the lower index
  std::vector<double> gates;          // aligned with `selected`, sum to 1
};

inline std::vector<double> softmax_values(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= total;
  return p;
}

/// g = softmax(z); S = indices of the top_k largest g; gates = g_S / sum(g_S).
inline RoutingDecision route(std::span<const double> logits, std::size_t top_k) {
  if (logits.empty()) throw ContractError("route: no experts");
  const std::vector<double> g = softmax_values(logits);
  std::vector<std::size_t> order(g.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  const std::size_t k = std::min(top_k, g.size());
  RoutingDecision decision;
  decision.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double total = 0.0;
  for (std::size_t j : decision.selected) total += g[j];
  for (std::size_t j : decision.selected) decision.gates.push_back(g[j] / total);
  return decision;
}

/// N LoRA experts of one site; down: d_h x r_h, up: r_h x d_h.
struct ExpertBank {
  std::vector<Tensor> down;
  std::vector<Tensor> up;

  std::size_t size() const { return down.size(); }
};

/// task: T x h_t x N routing logits; shared: N.
struct RouterTable {
  Tensor task_logits;
  Tensor shared_logits;
};

/// Differentiable renormalized gates for a decision, read from `logits`
/// starting at `offset`. softmax over the selected logits equals
/// g_S / sum(g_S) exactly in real arithmetic, and keeps the unselected
/// logits out of the graph.
inline Tensor routed_gates(Tape& tape, const Tensor& logits, std::size_t offset, const RoutingDecision& decision) {
  std::vector<std::size_t> idx;
  idx.reserve(decision.selected.size());
  for (std::size_t j : decision.selected) idx.push_back(offset + j);
  return softmax(tape, gather(tape, logits, std::move(idx)), 0);
}

/// Merged head weight beta * sum_{j in S} gate_j * (down_j up_j), d_h x d_h.
/// `gates` carries the differentiable gate values aligned with
/// decision.selected; when undefined the decision's gates are constants.
inline Tensor task_head_weight(Tape& tape, const RoutingDecision& decision, const ExpertBank& bank, double beta,
                               const Tensor& gates = {}, bool negate_backward = false) {
  const Tensor g = gates.defined() ? gates : Tensor::vector(decision.gates);
  Tensor acc;
  for (std::size_t s = 0; s < decision.selected.size(); ++s) {
    const std::size_t j = decision.selected[s];
    if (j >= bank.size()) throw ContractError("task_head_forward: expert index outside bank");
    Tensor term = mul_scalar(tape, expert_weight(tape, bank.down[j], bank.up[j], negate_backward), g, s);
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  return scale(tape, acc, beta);
}

/// Merged shared-head weight: all N experts under softmax(shared_logits), no top-k.
inline Tensor shared_head_weight(Tape& tape, const Tensor& shared_logits, const ExpertBank& bank, double beta,
                                 bool negate_backward = false) {
  if (shared_logits.size() != bank.size()) throw DimensionError("shared_head_forward: logits/bank size mismatch");
  Tensor g = softmax(tape, shared_logits, 0);
  Tensor acc;
  for (std::size_t j = 0; j < bank.size(); ++j) {
    Tensor term = mul_scalar(tape, expert_weight(tape, bank.down[j], bank.up[j], negate_backward), g, j);
    acc = acc.defined() ? add(tape, acc, term) : term;
  }
  return scale(tape, acc, beta);
}

/// f = beta * sum_{j in S} gate_j * up_j(down_j(x_k)) for one L x d_h slice.
inline Tensor task_head_forward(Tape& tape, const Tensor& x_k, const RoutingDecision& decision, const ExpertBank& bank,
                                double beta, const Tensor& gates = {}, bool negate_backward = false) {
  return matmul(tape, x_k, task_head_weight(tape, decision, bank, beta, gates, negate_backward));
}

/// f_share = beta * sum_j softmax(shared_logits)_j * up_j(down_j(x_0)).
inline Tensor shared_head_forward(Tape& tape, const Tensor& x_0, const Tensor& shared_logits, const ExpertBank& bank,
                                  double beta, bool negate_backward = false) {
  return matmul(tape, x_0, shared_head_weight(tape, shared_logits, bank, beta, negate_backward));
}

/// Expert bank plus routing tables of one injection site.
class SiteAdapter {
 public:
  static constexpr double kDownInitStd = 0.02;

  SiteAdapter(const AdapterConfig& config, std::size_t embed_dim, Pcg32& rng) : config_(config), embed_dim_(embed_dim) {
    const std::size_t dh = config.head_width(embed_dim), rh = config.head_rank(), n = config.num_experts;
    for (std::size_t j = 0; j < n; ++j) {
      Tensor down = Tensor::zeros({dh, rh}, true);
      for (double& v : down.mutable_values()) v = kDownInitStd * rng.normal();
      bank_.down.push_back(down);
      bank_.up.push_back(Tensor::zeros({rh, dh}, true));
    }
    router_.task_logits = Tensor::zeros({AdapterConfig::kTasks, config.task_heads(), n}, true);
    if (config.shared_head) router_.shared_logits = Tensor::zeros({n}, true);
  }

  const AdapterConfig& config() const { return config_; }
  const ExpertBank& bank() const { return bank_; }
  const RouterTable& router() const { return router_; }
  ExpertBank& bank() { return bank_; }
  RouterTable& router() { return router_; }

  /// Decision for task head k (1-based, 1..h_t).
  RoutingDecision route_task(Task task, std::size_t k) const {
    const std::size_t ht = config_.task_heads(), n = config_.num_experts;
    if (k < 1 || k > ht) throw ContractError("route_task: head " + std::to_string(k) + " outside 1.." + std::to_string(ht));
    const std::size_t offset = (task_index(task) * ht + (k - 1)) * n;
    return route(router_.task_logits.values().subspan(offset, n), config_.effective_top_k());
  }

  /// Per-slice head weights: slice 0 is the shared head (undefined when it
  /// is switched off for this task), slices 1..h_t the routed task heads.
  std::vector<Tensor> head_weights(Tape& tape, Task task, bool negate_backward = false) const {
    const double beta = config_.scale();
    const std::size_t ht = config_.task_heads(), n = config_.num_experts;
    std::vector<Tensor> weights;
    weights.reserve(config_.head_adapters);
    if (config_.shared_head) {
      if (task == Task::kAuthenticity && !config_.shared_in_authenticity) {
        weights.emplace_back();
      } else {
        weights.push_back(shared_head_weight(tape, router_.shared_logits, bank_, beta, negate_backward));
      }
    }
    for (std::size_t k = 1; k <= ht; ++k) {
      RoutingDecision decision = route_task(task, k);
      const std::size_t offset = (task_index(task) * ht + (k - 1)) * n;
      Tensor gates = routed_gates(tape, router_.task_logits, offset, decision);
      weights.push_back(task_head_weight(tape, decision, bank_, beta, gates, negate_backward));
    }
    return weights;
  }

  /// Shared head on channel slice 0, routed task heads on the remaining
  /// slices, reassembled to L x d.
  Tensor delta(Tape& tape, const Tensor& x, Task task, bool negate_backward = false) const {
    if (x.rank() != 2 || x.dim(1) != embed_dim_) {
      throw DimensionError("adapter delta: expected L x " + std::to_string(embed_dim_) + ", got " + to_string(x.shape()));
    }
    return block_diag_matmul(tape, x, head_weights(tape, task, negate_backward));
  }

  std::vector<NamedTensor> named_tensors(const std::string& prefix) const {
    std::vector<NamedTensor> out;
    for (std::size_t j = 0; j < bank_.size(); ++j) {
      out.push_back({prefix + ".expert" + std::to_string(j) + ".down", bank_.down[j]});
      out.push_back({prefix + ".expert" + std::to_string(j) + ".up", bank_.up[j]});
    }
    out.push_back({prefix + ".router.task", router_.task_logits});
    if (router_.shared_logits.defined()) out.push_back({prefix + ".router.shared", router_.shared_logits});
    return out;
  }

 private:
  AdapterConfig config_;
  std::size_t embed_dim_;
  ExpertBank bank_;
  RouterTable router_;
};

/// DFF adapters at every query / value / dense site of a backbone; a
/// SiteDeltaProvider for Backbone::block_forward.
class DffAdapter {
 public:
  DffAdapter(const AdapterConfig& config, const BackboneConfig& backbone, std::uint64_t seed)
      : config_(config), depth_(backbone.depth) {
    config_.validate(backbone.embed_dim);
    if (!config_.enabled) return;
    for (const InjectionSite& site : all_sites(backbone.depth)) {
      Pcg32 rng = Pcg32::stream(seed, Stream::kAdapterInit, site.flat_index());
      sites_.emplace_back(config_, backbone.embed_dim, rng);
    }
  }

  const AdapterConfig& config() const { return config_; }

  bool covers(InjectionSite site) const { return site.block < depth_; }

  Tensor delta(Tape& tape, const Tensor& x, InjectionSite site, Task task) const {
    if (!config_.enabled) return {};
    return sites_.at(site.flat_index()).delta(tape, x, task, negate_expert_backward_);
  }

  const SiteAdapter& site(InjectionSite s) const { return sites_.at(s.flat_index()); }
  SiteAdapter& site(InjectionSite s) { return sites_.at(s.flat_index()); }
  std::size_t num_sites() const { return sites_.size(); }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < sites_.size(); ++i) {
      auto part = sites_[i].named_tensors(InjectionSite{i / kSitesPerBlock, static_cast<SiteKind>(i % kSitesPerBlock)}.name());
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }

  /// Negative control for gradient verification: flips the sign of every
  /// expert backward rule while leaving the forward pass unchanged.
  void set_negate_expert_backward(bool on) { negate_expert_backward_ = on; }

 private:
  AdapterConfig config_;
  std::size_t depth_;
  std::vector<SiteAdapter> sites_;
  bool negate_expert_backward_ = false;
};

/// Closed-form trainable parameter count: expert banks and routers at
/// 3 * depth sites plus both classifier heads.
inline std::size_t count_trainable_params(const AdapterConfig& adapter, const BackboneConfig& backbone,
                                          std::size_t num_classes) {
  const std::size_t d = backbone.embed_dim;
  const std::size_t heads = (d + 1) + num_classes * (d + 1);
  if (!adapter.enabled) return heads;
  adapter.validate(d);
  const std::size_t sites = kSitesPerBlock * backbone.depth;
  const std::size_t n = adapter.num_experts, dh = adapter.head_width(d), rh = adapter.head_rank();
  const std::size_t experts = 2 * n * dh * rh;
  const std::size_t router = AdapterConfig::kTasks * adapter.task_heads() * n + (adapter.shared_head ? n : 0);
  return sites * (experts + router) + heads;
}

inline void to_json(json& j, const AdapterConfig& c) {
  j = json{{"rank", c.rank},
           {"alpha", c.alpha},
           {"num_experts", c.num_experts},
           {"head_adapters", c.head_adapters},
           {"top_k", c.top_k},
           {"beta", c.scale()},
           {"enabled", c.enabled},
           {"shared_head", c.shared_head},
           {"shared_in_authenticity", c.shared_in_authenticity}};
}

}  // namespace dff
