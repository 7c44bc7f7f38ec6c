// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dff/data.hpp"
#include "dff/fusion.hpp"
#include "dff/optim.hpp"

namespace dff {

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t epochs = 50;
  std::size_t batch_size = 24;
  LossWeights loss;  // lambda0 = loss.bce, lambda1 = loss.ftc
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamConfig adam() const { return {lr, weight_decay, beta1, beta2, eps}; }

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    adam().validate();
    loss.validate();
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},       {"weight_decay", c.weight_decay}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
           {"lambda0", c.loss.bce}, {"lambda1", c.loss.ftc}, {"seed", c.seed}, {"beta1", c.beta1},
           {"beta2", c.beta2}, {"eps", c.eps}};
}

struct StepRecord {
  std::size_t step = 0;
  std::size_t batch = 0;
  double l_bce = 0.0;
  double l_ftc = 0.0;
  double total = 0.0;
  std::size_t correct_bin = 0;
  std::size_t correct_ftc = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l_bce = 0.0;
  double l_ftc = 0.0;
  double total = 0.0;
  double acc_bin = 0.0;
  double acc_ftc = 0.0;
  double seconds = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> warnings;
};

/// Index of the largest value, ties to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

inline std::vector<int> authenticity_labels(std::span<const ForgerySample> batch) {
  std::vector<int> y;
  y.reserve(batch.size());
  for (const ForgerySample& s : batch) y.push_back(s.y);
  return y;
}

inline std::vector<int> type_labels(std::span<const ForgerySample> batch) {
  std::vector<int> c;
  c.reserve(batch.size());
  for (const ForgerySample& s : batch) c.push_back(s.type_label);
  return c;
}

inline std::vector<Tensor> batch_images(std::span<const ForgerySample> batch) {
  std::vector<Tensor> images;
  images.reserve(batch.size());
  for (const ForgerySample& s : batch) images.push_back(s.image);
  return images;
}

class Trainer {
 public:
  Trainer(DffModel& model, TrainConfig config) : model_(model), config_(config), adam_(model.trainable_tensors(), config.adam()) {
    config_.validate();
  }

  const TrainConfig& config() const { return config_; }
  std::size_t steps() const { return steps_; }

  /// Two passes over the same images (task 0 then task 1), gradients of
  /// lambda0 * L_bce + lambda1 * L_ftc accumulated, one Adam update.
  StepRecord train_step(std::span<const ForgerySample> batch) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    const std::vector<Tensor> images = batch_images(batch);
    const std::vector<int> y = authenticity_labels(batch);
    const std::vector<int> c = type_labels(batch);
    adam_.zero_grad();

    StepRecord rec;
    rec.step = steps_;
    rec.batch = batch.size();

    Tape tape0;
    Tensor logit_bin = model_.authenticity_logits(tape0, images);
    Tensor l_bce = bce_with_logits(tape0, logit_bin, y);
    rec.l_bce = l_bce.item();

    const bool ftc_active = config_.loss.ftc > 0.0;
    Tape tape1(ftc_active ? Tape::Mode::kRecord : Tape::Mode::kInference);
    Tensor logit_ftc = model_.forgery_type_logits(tape1, images);
    Tensor l_ftc = cross_entropy(tape1, logit_ftc, c);
    rec.l_ftc = l_ftc.item();
    rec.total = total_loss(rec.l_bce, rec.l_ftc, config_.loss);

    if (!std::isfinite(rec.l_bce) || !std::isfinite(rec.l_ftc) || !std::isfinite(rec.total)) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "non-finite loss at step " << steps_ << ": l_bce=" << rec.l_bce << " l_ftc=" << rec.l_ftc << " total=" << rec.total;
      throw NumericError(msg.str());
    }

    if (config_.loss.bce > 0.0) tape0.backward(l_bce, config_.loss.bce);
    if (ftc_active) tape1.backward(l_ftc, config_.loss.ftc);
    adam_.step();
    ++steps_;

    const std::size_t C = model_.num_classes();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if ((logit_bin[i] > 0.0 ? 1 : 0) == y[i]) ++rec.correct_bin;
      std::span<const double> row = logit_ftc.values().subspan(i * C, C);
      if (static_cast<int>(argmax(row)) == c[i]) ++rec.correct_ftc;
    }
    return rec;
  }

  /// One epoch over `samples` in the (seed, epoch) shuffle order.
  EpochRecord run_epoch(std::span<const ForgerySample> samples, std::size_t epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Pcg32 rng = Pcg32::stream(config_.seed, Stream::kShuffle, epoch);
    rng.shuffle(std::span<std::size_t>(order));

    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::size_t correct_bin = 0, correct_ftc = 0;
    std::vector<ForgerySample> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += config_.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config_.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(samples[order[i]]);
      StepRecord s = train_step(batch);
      const double w = static_cast<double>(s.batch);
      rec.l_bce += s.l_bce * w;
      rec.l_ftc += s.l_ftc * w;
      rec.total += s.total * w;
      correct_bin += s.correct_bin;
      correct_ftc += s.correct_ftc;
    }
    const double n = static_cast<double>(samples.size());
    rec.l_bce /= n;
    rec.l_ftc /= n;
    rec.total /= n;
    rec.acc_bin = static_cast<double>(correct_bin) / n;
    rec.acc_ftc = static_cast<double>(correct_ftc) / n;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

 private:
  DffModel& model_;
  TrainConfig config_;
  Adam adam_;
  std::size_t steps_ = 0;
};

/// Moving average over the last `window` epoch totals; warns when it rises.
inline std::optional<std::string> loss_trend_warning(const std::vector<EpochRecord>& epochs, std::size_t window = 5) {
  if (epochs.size() < window + 1) return std::nullopt;
  auto mean_total = [&](std::size_t last) {
    double s = 0.0;
    for (std::size_t i = last + 1 - window; i <= last; ++i) s += epochs[i].total;
    return s / static_cast<double>(window);
  };
  const std::size_t last = epochs.size() - 1;
  const double now = mean_total(last), before = mean_total(last - 1);
  if (now <= before) return std::nullopt;
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %zu: %zu-epoch moving average of the training loss rose from %.6g to %.6g",
                epochs.back().epoch, window, before, now);
  return std::string(buf);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full training run. Writes the final checkpoint when `checkpoint` is given.
inline RunHistory train(const TrainConfig& config, std::span<const ForgerySample> samples, DffModel& model,
                        const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                        const EpochCallback& on_epoch = {}) {
  config.validate();
  if (samples.empty() && config.epochs > 0) throw ContractError("train: empty training set");
  Trainer trainer(model, config);
  RunHistory history;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    history.epochs.push_back(trainer.run_epoch(samples, e));
    if (auto w = loss_trend_warning(history.epochs)) history.warnings.push_back(*w);
    if (on_epoch) on_epoch(history.epochs.back());
  }
  if (checkpoint) model.save_checkpoint(*checkpoint);
  return history;
}

inline void write_history_csv(const std::filesystem::path& path, const RunHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch,l_bce,l_ftc,total,acc_bin,acc_ftc,seconds\n";
  char buf[256];
  for (const EpochRecord& r : history.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.epoch, r.l_bce, r.l_ftc, r.total, r.acc_bin,
                  r.acc_ftc, r.seconds);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace dff
