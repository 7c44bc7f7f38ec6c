// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dff/adapter.hpp"
#include "dff/backbone.hpp"
#include "dff/ops.hpp"
#include "dff/serialize.hpp"

namespace dff {

/// Weights of the two loss terms: total = bce * L_bce + ftc * L_ftc.
struct LossWeights {
  double bce = 10.0;
  double ftc = 2.0;

  void validate() const {
    if (bce < 0.0 || ftc < 0.0) throw ConfigError("loss weights must be nonnegative");
    if (bce == 0.0 && ftc == 0.0) throw ConfigError("loss weights must not both be zero");
  }
};

/// Stable binary cross-entropy of one logit: max(z,0) - z*y + log(1 + exp(-|z|)).
inline double loss_bce(double logit, int y) {
  if (y != 0 && y != 1) throw LabelError("loss_bce: label must be 0 or 1");
  if (std::isinf(logit)) return (logit > 0) == (y == 1) ? 0.0 : std::numeric_limits<double>::infinity();
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

/// -log softmax(logits)_c in log-sum-exp form.
inline double loss_ftc(std::span<const double> logits, int c) {
  if (c < 0 || static_cast<std::size_t>(c) >= logits.size()) {
    throw LabelError("loss_ftc: class " + std::to_string(c) + " outside [0, " + std::to_string(logits.size()) + ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  if (std::isinf(mx)) return logits[static_cast<std::size_t>(c)] == mx ? 0.0 : std::numeric_limits<double>::infinity();
  double se = 0.0;
  for (double z : logits) se += std::exp(z - mx);
  return mx + std::log(se) - logits[static_cast<std::size_t>(c)];
}

inline double total_loss(double l_bce, double l_ftc, const LossWeights& w) { return w.bce * l_bce + w.ftc * l_ftc; }

inline Tensor total_loss(Tape& tape, const Tensor& l_bce, const Tensor& l_ftc, const LossWeights& w) {
  return add(tape, scale(tape, l_bce, w.bce), scale(tape, l_ftc, w.ftc));
}

/// Authenticity head (d -> 1) and forgery-type head (d -> C); zero-initialized.
struct ClassifierHeads {
  Tensor bce_weight, bce_bias, ftc_weight, ftc_bias;

  ClassifierHeads(std::size_t embed_dim, std::size_t num_classes)
      : bce_weight(Tensor::zeros({embed_dim, 1}, true)),
        bce_bias(Tensor::zeros({1}, true)),
        ftc_weight(Tensor::zeros({embed_dim, num_classes}, true)),
        ftc_bias(Tensor::zeros({num_classes}, true)) {}

  std::size_t num_classes() const { return ftc_bias.size(); }

  std::vector<NamedTensor> named_tensors() const {
    return {{"head.bce.weight", bce_weight}, {"head.bce.bias", bce_bias},
            {"head.ftc.weight", ftc_weight}, {"head.ftc.bias", ftc_bias}};
  }
};

/// Frozen backbone + DFF adapters + both classifier heads.
class DffModel {
 public:
  DffModel(std::shared_ptr<const Backbone> backbone, const AdapterConfig& adapter, std::size_t num_classes,
           std::uint64_t seed)
      : backbone_(std::move(backbone)),
        adapter_(adapter, backbone_->config(), seed),
        heads_(backbone_->config().embed_dim, num_classes) {
    if (num_classes < 2) throw ConfigError("model: need at least 2 forgery-type classes");
  }

  const Backbone& backbone() const { return *backbone_; }
  std::shared_ptr<const Backbone> shared_backbone() const { return backbone_; }
  const DffAdapter& adapter() const { return adapter_; }
  DffAdapter& adapter() { return adapter_; }
  const ClassifierHeads& heads() const { return heads_; }
  std::size_t num_classes() const { return heads_.num_classes(); }

  /// Fused CLS features (f_bin for task 0, f_ftc for task 1), batch x d.
  Tensor features(Tape& tape, std::span<const Tensor> images, Task task) const {
    return backbone_->forward_cls(tape, images, adapter_, task);
  }

  /// batch x 1
  Tensor authenticity_logits(Tape& tape, std::span<const Tensor> images) const {
    return linear(tape, features(tape, images, Task::kAuthenticity), heads_.bce_weight, heads_.bce_bias);
  }

  /// batch x C
  Tensor forgery_type_logits(Tape& tape, std::span<const Tensor> images) const {
    return linear(tape, features(tape, images, Task::kForgeryType), heads_.ftc_weight, heads_.ftc_bias);
  }

  double authenticity_logit(const Tensor& image) const {
    Tape tape(Tape::Mode::kInference);
    return authenticity_logits(tape, std::span<const Tensor>(&image, 1)).item();
  }

  Tensor forgery_type_logits(const Tensor& image) const {
    Tape tape(Tape::Mode::kInference);
    Tensor logits = forgery_type_logits(tape, std::span<const Tensor>(&image, 1));
    return logits.reshaped({num_classes()});
  }

  /// Adapter tensors then classifier heads; the exact set the optimizer updates.
  std::vector<NamedTensor> trainable() const {
    std::vector<NamedTensor> out = adapter_.named_tensors();
    auto heads = heads_.named_tensors();
    out.insert(out.end(), heads.begin(), heads.end());
    return out;
  }

  std::vector<Tensor> trainable_tensors() const {
    std::vector<Tensor> out;
    for (NamedTensor& nt : trainable()) out.push_back(nt.tensor);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const NamedTensor& nt : trainable()) n += nt.tensor.size();
    return n;
  }

  json config_json() const {
    return {{"backbone", backbone_->config()}, {"adapter", adapter_.config()}, {"num_classes", num_classes()}};
  }

  /// Identifies the architecture a checkpoint belongs to.
  std::string config_digest() const { return json_digest(config_json()); }

  void save_checkpoint(const std::filesystem::path& path) const {
    save_tensors(path, trainable(), {{"config", config_json()}, {"config_digest", config_digest()}});
  }

  /// Throws DigestMismatch when the checkpoint was written for another configuration.
  void load_checkpoint(const std::filesystem::path& path) {
    TensorFile file = load_tensors(path);
    const std::string found = file.meta.value("config_digest", std::string("<none>"));
    if (found != config_digest()) throw DigestMismatch(config_digest(), found);
    std::vector<NamedTensor> targets = trainable();
    assign_tensors(file, targets, "checkpoint " + path.string());
  }

 private:
  std::shared_ptr<const Backbone> backbone_;
  DffAdapter adapter_;
  ClassifierHeads heads_;
};

}  // namespace dff
