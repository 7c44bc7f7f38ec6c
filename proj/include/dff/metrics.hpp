// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dff/data.hpp"
#include "dff/fusion.hpp"
#include "dff/trainer.hpp"

namespace dff {

/// Scores (higher = more fake) aligned with binary labels.
struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;

  void validate() const {
    if (scores.size() != labels.size()) throw MetricError("scored set: scores and labels differ in length");
    std::size_t pos = 0;
    for (int y : labels) {
      if (y != 0 && y != 1) throw MetricError("scored set: labels must be 0 or 1");
      pos += static_cast<std::size_t>(y);
    }
    if (pos == 0 || pos == labels.size()) throw MetricError("scored set: need at least one positive and one negative");
    for (double s : scores)
      if (std::isnan(s)) throw MetricError("scored set: NaN score");
  }
};

/// Mann-Whitney AUC from midranks; tied scores count 1/2.
inline double auc(const ScoredSet& set) {
  set.validate();
  const std::size_t n = set.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && set.scores[order[j]] == set.scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (set.labels[order[k]] == 1) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const double p = static_cast<double>(n_pos), q = static_cast<double>(n - n_pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

struct RocPoint {
  double threshold;
  double fpr;
  double fnr;
};

/// Operating points for "fake iff score >= t", t from +inf down through the distinct scores.
inline std::vector<RocPoint> roc_points(const ScoredSet& set) {
  set.validate();
  std::vector<double> thresholds = set.scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double n_pos = 0, n_neg = 0;
  for (int y : set.labels) (y ? n_pos : n_neg) += 1.0;
  std::vector<RocPoint> points{{std::numeric_limits<double>::infinity(), 0.0, 1.0}};
  for (double t : thresholds) {
    double fp = 0, fn = 0;
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
      const bool flagged = set.scores[i] >= t;
      if (flagged && !set.labels[i]) fp += 1.0;
      if (!flagged && set.labels[i]) fn += 1.0;
    }
    points.push_back({t, fp / n_neg, fn / n_pos});
  }
  return points;
}

/// FPR where FPR and FNR cross, interpolated linearly between the two
/// adjacent thresholds that bracket the sign change of FNR - FPR.
inline double eer(const ScoredSet& set) {
  const std::vector<RocPoint> pts = roc_points(set);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double diff = pts[i].fnr - pts[i].fpr;
    if (diff > 0.0) continue;
    if (diff == 0.0 || i == 0) return pts[i].fpr;
    const RocPoint& p0 = pts[i - 1];
    const RocPoint& p1 = pts[i];
    const double a = (p0.fnr - p0.fpr) / ((p1.fpr - p0.fpr) - (p1.fnr - p0.fnr));
    return p0.fpr + a * (p1.fpr - p0.fpr);
  }
  return pts.back().fpr;  // unreachable: the last point has FNR = 0
}

/// Argmax accuracy over rows of C logits, ties to the lowest class index.
inline double type_accuracy(std::span<const Tensor> logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) throw MetricError("type_accuracy: logits and labels differ in length");
  if (logits.empty()) throw MetricError("type_accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (static_cast<int>(argmax(logits[i].values())) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(logits.size());
}

inline double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

struct Predictions {
  std::vector<double> bin_logits;
  std::vector<Tensor> type_logits;  // each [C]
  Tensor features;                  // n x d, f_bin
};

inline constexpr std::size_t kEvalBatch = 64;

/// Inference over `samples` in order.
inline Predictions predict(const DffModel& model, std::span<const ForgerySample> samples, bool keep_features = false) {
  Predictions out;
  const std::size_t d = model.backbone().config().embed_dim, C = model.num_classes();
  std::vector<double> feats;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalBatch) {
    const auto chunk = samples.subspan(begin, std::min(kEvalBatch, samples.size() - begin));
    const std::vector<Tensor> images = batch_images(chunk);
    Tape tape(Tape::Mode::kInference);
    Tensor f_bin = model.features(tape, images, Task::kAuthenticity);
    Tensor z = linear(tape, f_bin, model.heads().bce_weight, model.heads().bce_bias);
    Tensor zt = model.forgery_type_logits(tape, images);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      out.bin_logits.push_back(z[i]);
      auto row = zt.values().subspan(i * C, C);
      out.type_logits.push_back(Tensor::vector(std::vector<double>(row.begin(), row.end())));
    }
    if (keep_features) feats.insert(feats.end(), f_bin.values().begin(), f_bin.values().end());
  }
  if (keep_features) out.features = Tensor({samples.size(), d}, std::move(feats));
  return out;
}

struct EvalMetrics {
  double auc = 0.0;
  double eer = 0.0;
  double acc_bin = 0.0;
  double acc_ftc = 0.0;
  std::size_t n_samples = 0;
};

inline EvalMetrics score_predictions(const Predictions& p, std::span<const ForgerySample> samples) {
  ScoredSet set;
  std::vector<int> types;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    set.scores.push_back(sigmoid(p.bin_logits[i]));
    set.labels.push_back(samples[i].y);
    types.push_back(samples[i].type_label);
    if ((p.bin_logits[i] > 0.0 ? 1 : 0) == samples[i].y) ++correct;
  }
  EvalMetrics m;
  m.n_samples = samples.size();
  m.auc = auc(set);
  m.eer = eer(set);
  m.acc_bin = static_cast<double>(correct) / static_cast<double>(samples.size());
  m.acc_ftc = type_accuracy(p.type_logits, types);
  return m;
}

inline EvalMetrics evaluate(const DffModel& model, std::span<const ForgerySample> samples) {
  return score_predictions(predict(model, samples), samples);
}

/// AUC of real samples against fakes of a single family.
inline double family_auc(const Predictions& p, std::span<const ForgerySample> samples, Artifact family) {
  ScoredSet set;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].artifact != Artifact::kNone && samples[i].artifact != family) continue;
    set.scores.push_back(sigmoid(p.bin_logits[i]));
    set.labels.push_back(samples[i].y);
  }
  return auc(set);
}

inline void to_json(json& j, const EvalMetrics& m) {
  j = json{{"auc", m.auc}, {"eer", m.eer}, {"acc_bin", m.acc_bin}, {"acc_ftc", m.acc_ftc}, {"n_samples", m.n_samples}};
}

/// One row per sample: identity, artifact, y, type_label, f_bin components.
inline void export_features(const DffModel& model, std::span<const ForgerySample> samples, const std::filesystem::path& path) {
  const Predictions p = predict(model, samples, true);
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t d = model.backbone().config().embed_dim;
  out << "identity,artifact,y,type_label";
  for (std::size_t k = 0; k < d; ++k) out << ",f" << k;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ForgerySample& s = samples[i];
    out << s.identity << ',' << artifact_name(s.artifact) << ',' << s.y << ',' << s.type_label;
    for (std::size_t k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, ",%.17g", p.features.at(i, k));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

/// Routing is a function of the tables alone, so every sample sees the
/// same decision; frequencies are the decision repeated n_samples times.
inline json routing_stats(const DffModel& model, std::size_t n_samples) {
  const DffAdapter& adapter = model.adapter();
  const AdapterConfig& cfg = adapter.config();
  json entries = json::array();
  if (!cfg.enabled) return json{{"n_samples", n_samples}, {"entries", entries}};
  for (const InjectionSite& site : all_sites(model.backbone().config().depth)) {
    const SiteAdapter& sa = adapter.site(site);
    if (cfg.shared_head) {
      const auto gates = softmax_values(sa.router().shared_logits.values());
      entries.push_back({{"site", site.name()},
                         {"task", "shared"},
                         {"head", 0},
                         {"selected", json::array()},
                         {"gates", gates},
                         {"frequency", std::vector<std::size_t>(cfg.num_experts, n_samples)}});
    }
    for (Task task : {Task::kAuthenticity, Task::kForgeryType}) {
      for (std::size_t k = 1; k <= cfg.task_heads(); ++k) {
        const RoutingDecision d = sa.route_task(task, k);
        std::vector<std::size_t> freq(cfg.num_experts, 0);
        std::vector<double> mean_gate(cfg.num_experts, 0.0);
        for (std::size_t s = 0; s < d.selected.size(); ++s) {
          freq[d.selected[s]] = n_samples;
          mean_gate[d.selected[s]] = d.gates[s];
        }
        entries.push_back({{"site", site.name()},
                           {"task", task_index(task)},
                           {"head", cfg.shared_head ? k : k - 1},
                           {"selected", d.selected},
                           {"gates", mean_gate},
                           {"frequency", freq}});
      }
    }
  }
  return json{{"n_samples", n_samples}, {"entries", entries}};
}

}  // namespace dff
