// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dff/gradcheck.hpp"
#include "dff/metrics.hpp"
#include "dff/runspec.hpp"

namespace dff::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kSpecError = 2,
  kIoError = 3,
  kNumericAbort = 4,
  kDigestMismatch = 5,
  kVerificationFailed = 6,
};

struct Options {
  std::optional<std::filesystem::path> spec;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> corpus;  // directory written by `generate`
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;  // overrides train.seed
  bool export_features = false;
  std::string mode;
  bool inject_sign_flip = false;  // gradcheck negative control
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline RunSpec resolve_spec(const Options& opt) {
  RunSpec spec = opt.spec ? load_run_spec(*opt.spec) : RunSpec{};
  if (opt.seed) spec.train.seed = *opt.seed;
  if (opt.out) spec.out_dir = opt.out->string();
  if (opt.export_features) spec.export_features = true;
  spec.validate();
  return spec;
}

/// Pretty-printed with sorted keys and a trailing newline.
inline void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::shared_ptr<const Backbone> make_backbone(const RunSpec& spec) {
  return std::make_shared<const Backbone>(spec.backbone);
}

inline DffModel make_model(const RunSpec& spec, std::shared_ptr<const Backbone> backbone) {
  return DffModel(std::move(backbone), spec.adapter, spec.dataset.num_classes(), spec.train.seed);
}

namespace detail {

inline std::vector<ForgerySample> load_samples(const std::filesystem::path& corpus, const std::string& split,
                                               const RunSpec& spec) {
  LoadedSplit loaded = load_split(corpus / (split + ".bin"));
  if (loaded.num_classes != spec.dataset.num_classes()) {
    throw ConfigError("corpus " + corpus.string() + " has " + std::to_string(loaded.num_classes) + " classes, spec expects " +
                      std::to_string(spec.dataset.num_classes()));
  }
  if (!loaded.samples.empty() && loaded.samples.front().image.dim(1) != spec.backbone.image_size) {
    throw ConfigError("corpus image size does not match backbone.image_size");
  }
  return std::move(loaded.samples);
}

inline std::vector<ForgerySample> samples_for(const Options& opt, const RunSpec& spec, const std::string& split) {
  if (opt.corpus) return load_samples(*opt.corpus, split, spec);
  if (!spec.inline_generate) throw ConfigError("no --corpus given and inline_generate is false");
  Corpus c = generate_split(spec.dataset);
  return split == "train" ? std::move(c.train) : std::move(c.test);
}

}  // namespace detail

inline int cmd_generate(const Options& opt, Streams io) {
  const RunSpec spec = resolve_spec(opt);
  const std::filesystem::path dir = spec.out_dir;
  ensure_dir(dir);
  const Corpus c = generate_split(spec.dataset);
  save_split(dir / "train.bin", "train", spec.dataset, c.train);
  save_split(dir / "test.bin", "test", spec.dataset, c.test);
  save_manifest(dir / "train_manifest.csv", c.train);
  save_manifest(dir / "test_manifest.csv", c.test);
  io.out << "generated " << c.train.size() << " train / " << c.test.size() << " test samples in " << dir.string() << '\n';
  for (const auto& [label, n] : c.train_balance) io.out << "  train class " << label << ": " << n << '\n';
  return kOk;
}

inline int cmd_train(const Options& opt, Streams io) {
  const RunSpec spec = resolve_spec(opt);
  const std::filesystem::path dir = spec.out_dir;
  const std::vector<ForgerySample> train_set = detail::samples_for(opt, spec, "train");
  DffModel model = make_model(spec, make_backbone(spec));
  ensure_dir(dir);
  const std::string backbone_digest = model.backbone().digest();
  const RunHistory history = train(spec.train, train_set, model, dir / "checkpoint.bin", [&](const EpochRecord& r) {
    char line[200];
    std::snprintf(line, sizeof line, "epoch %3zu  total %.5f  bce %.5f  ftc %.5f  acc_bin %.3f  acc_ftc %.3f  %.1fs\n", r.epoch,
                  r.total, r.l_bce, r.l_ftc, r.acc_bin, r.acc_ftc, r.seconds);
    io.out << line << std::flush;
  });
  if (model.backbone().digest() != backbone_digest) throw ContractError("backbone weights changed during training");
  for (const std::string& w : history.warnings) io.err << "warning: " << w << '\n';
  write_history_csv(dir / "history.csv", history);
  write_json(dir / "config.json", resolved_json(spec));
  io.out << "trainable parameters " << model.trainable_count() << ", checkpoint " << (dir / "checkpoint.bin").string() << '\n';
  return kOk;
}

inline json metrics_json(const EvalMetrics& m, const Predictions& p, std::span<const ForgerySample> samples,
                         const std::string& config_digest) {
  json j = m;
  j["config_digest"] = config_digest;
  json fam = json::object();
  for (Artifact a : kArtifactFamilies) {
    const bool present = std::any_of(samples.begin(), samples.end(), [&](const ForgerySample& s) { return s.artifact == a; });
    if (present) fam[artifact_name(a)] = family_auc(p, samples, a);
  }
  j["family_auc"] = fam;
  return j;
}

inline int cmd_eval(const Options& opt, Streams io) {
  const RunSpec spec = resolve_spec(opt);
  const std::filesystem::path dir = spec.out_dir;
  DffModel model = make_model(spec, make_backbone(spec));
  const std::filesystem::path ckpt = opt.checkpoint.value_or(dir / "checkpoint.bin");
  try {
    model.load_checkpoint(ckpt);
  } catch (const DigestMismatch& e) {
    io.err << "config digest mismatch for " << ckpt.string() << "\n  spec:       " << e.expected()
           << "\n  checkpoint: " << e.found() << '\n';
    return kDigestMismatch;
  }
  const std::vector<ForgerySample> test_set = detail::samples_for(opt, spec, "test");
  const Predictions p = predict(model, test_set, spec.export_features);
  const EvalMetrics m = score_predictions(p, test_set);
  ensure_dir(dir);
  write_json(dir / "metrics.json", metrics_json(m, p, test_set, model.config_digest()));
  write_json(dir / "routing_stats.json", routing_stats(model, test_set.size()));
  if (spec.export_features) export_features(model, test_set, dir / "features.csv");
  char line[160];
  std::snprintf(line, sizeof line, "auc %.4f  eer %.4f  acc_bin %.4f  acc_ftc %.4f  n %zu\n", m.auc, m.eer, m.acc_bin, m.acc_ftc,
                m.n_samples);
  io.out << line;
  return kOk;
}

struct AblationRow {
  std::string config;
  AdapterConfig adapter;
  LossWeights loss;
};

/// Configurations compared by `ablate --mode`; empty for an unknown mode.
inline std::vector<AblationRow> ablation_rows(const std::string& mode, const RunSpec& spec) {
  const AblationRow full{"full", spec.adapter, spec.train.loss};
  std::vector<AblationRow> rows;
  if (mode == "no-setf") {
    AblationRow r{"no-setf", spec.adapter, spec.train.loss};
    r.loss.ftc = 0.0;
    r.adapter.shared_in_authenticity = false;
    rows = {full, r};
  } else if (mode == "no-famhr") {
    AblationRow r{"no-famhr", spec.adapter, spec.train.loss};
    r.adapter.head_adapters = r.adapter.shared_head ? 2 : 1;
    r.adapter.num_experts = 1;
    r.adapter.top_k = 1;
    rows = {full, r};
  } else if (mode == "lp") {
    AblationRow r{"lp", spec.adapter, spec.train.loss};
    r.adapter.enabled = false;
    rows = {full, r};
  } else if (mode == "plain-lora") {
    AblationRow r{"plain-lora", spec.adapter, spec.train.loss};
    r.adapter.shared_head = false;
    r.adapter.head_adapters = 1;
    r.adapter.num_experts = 1;
    r.adapter.top_k = 1;
    rows = {full, r};
  } else if (mode == "sweep-lambda") {
    for (double l1 : {0.0, 2.0, 10.0, 50.0}) {
      AblationRow r{"", spec.adapter, spec.train.loss};
      r.loss.ftc = l1;
      r.config = "lambda1=" + std::to_string(static_cast<int>(l1));
      rows.push_back(r);
    }
  } else if (mode == "sweep-heads") {
    for (std::size_t h : {2, 4, 8}) {
      AblationRow r{"heads=" + std::to_string(h), spec.adapter, spec.train.loss};
      r.adapter.head_adapters = h;
      rows.push_back(r);
    }
  } else if (mode == "sweep-experts") {
    for (std::size_t n : {1, 4, 6, 12}) {
      AblationRow r{"experts=" + std::to_string(n), spec.adapter, spec.train.loss};
      r.adapter.num_experts = n;
      rows.push_back(r);
    }
  }
  return rows;
}

inline const std::vector<std::string>& ablation_modes() {
  static const std::vector<std::string> modes{"no-setf",      "no-famhr",    "lp",           "plain-lora",
                                              "sweep-lambda", "sweep-heads", "sweep-experts"};
  return modes;
}

struct AblationResult {
  std::string config;
  double auc = 0.0;
  double eer = 0.0;
  double acc_ftc = 0.0;
  std::size_t trainable_params = 0;
};

/// Trains and scores one configuration. With a held-out family the AUC and
/// EER cover real test samples against that family only.
inline AblationResult run_ablation_row(const AblationRow& row, const RunSpec& spec, std::shared_ptr<const Backbone> backbone,
                                       const Corpus& corpus, const EpochCallback& on_epoch = {}) {
  TrainConfig tc = spec.train;
  tc.loss = row.loss;
  row.adapter.validate(spec.backbone.embed_dim);
  DffModel model(std::move(backbone), row.adapter, spec.dataset.num_classes(), tc.seed);
  train(tc, corpus.train, model, std::nullopt, on_epoch);
  const Predictions p = predict(model, corpus.test);
  const EvalMetrics m = score_predictions(p, corpus.test);
  AblationResult r{row.config, m.auc, m.eer, m.acc_ftc, model.trainable_count()};
  if (spec.dataset.holdout_artifact) {
    ScoredSet set;
    for (std::size_t i = 0; i < corpus.test.size(); ++i) {
      const ForgerySample& s = corpus.test[i];
      if (s.artifact != Artifact::kNone && s.artifact != *spec.dataset.holdout_artifact) continue;
      set.scores.push_back(sigmoid(p.bin_logits[i]));
      set.labels.push_back(s.y);
    }
    r.auc = auc(set);
    r.eer = eer(set);
  }
  return r;
}

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationResult>& rows) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "config,auc,eer,acc_ftc,trainable_params\n";
  char buf[256];
  for (const AblationResult& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%zu\n", r.config.c_str(), r.auc, r.eer, r.acc_ftc, r.trainable_params);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline int cmd_ablate(const Options& opt, Streams io) {
  const RunSpec spec = resolve_spec(opt);
  const std::vector<AblationRow> rows = ablation_rows(opt.mode, spec);
  if (rows.empty()) {
    io.err << "unknown ablation mode '" << opt.mode << "'; expected one of:";
    for (const std::string& m : ablation_modes()) io.err << ' ' << m;
    io.err << '\n';
    return kSpecError;
  }
  Corpus corpus;
  if (opt.corpus) {
    corpus.train = detail::load_samples(*opt.corpus, "train", spec);
    corpus.test = detail::load_samples(*opt.corpus, "test", spec);
  } else {
    corpus = generate_split(spec.dataset);
  }
  auto backbone = make_backbone(spec);
  std::vector<AblationResult> results;
  for (const AblationRow& row : rows) {
    results.push_back(run_ablation_row(row, spec, backbone, corpus));
    const AblationResult& r = results.back();
    char line[200];
    std::snprintf(line, sizeof line, "%-14s auc %.4f  eer %.4f  acc_ftc %.4f  params %zu\n", r.config.c_str(), r.auc, r.eer,
                  r.acc_ftc, r.trainable_params);
    io.out << line << std::flush;
  }
  const std::filesystem::path dir = spec.out_dir;
  ensure_dir(dir);
  write_ablation_csv(dir / "ablation.csv", results);
  return kOk;
}

struct GradCheckSetup {
  std::unique_ptr<DffModel> model;
  std::vector<NamedTensor> params;
  std::vector<Tensor> images;
  std::vector<int> y;
  std::vector<int> type_labels;
  LossWeights loss;
};

inline constexpr std::size_t kGradCheckCoordinates = 50;
inline constexpr double kGradCheckEps = 3e-4;
inline constexpr double kGradCheckTol = 1e-4;

/// Miniature model (d=16, L=2, h=4, N=6) with every trainable tensor
/// randomized and routing logits spread at least 0.05 apart.
inline GradCheckSetup make_gradcheck_setup(std::uint64_t seed, const LossWeights& loss) {
  BackboneConfig bc;
  bc.image_size = 8;
  bc.patch_size = 4;
  bc.embed_dim = 16;
  bc.depth = 2;
  bc.attn_heads = 2;
  bc.mlp_ratio = 2.0;
  bc.seed = seed;
  AdapterConfig ac;
  ac.rank = 8;
  ac.num_experts = 6;
  ac.head_adapters = 4;
  GradCheckSetup g;
  g.loss = loss;
  g.model = std::make_unique<DffModel>(std::make_shared<const Backbone>(bc), ac, kNumForgeryClasses, seed);
  g.params = g.model->trainable();

  Pcg32 rng = Pcg32::stream(seed, Stream::kGradcheck, 0);
  for (NamedTensor& nt : g.params) {
    auto v = nt.tensor.mutable_values();
    if (nt.name.find(".router.") != std::string::npos) {
      const std::size_t n = ac.num_experts;
      for (std::size_t row = 0; row < v.size() / n; ++row) {
        std::vector<std::size_t> rank(n);
        std::iota(rank.begin(), rank.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(rank));
        for (std::size_t j = 0; j < n; ++j) v[row * n + j] = 0.1 * static_cast<double>(rank[j]) + rng.uniform(0.0, 0.05);
      }
    } else {
      for (double& x : v) x = 0.3 * rng.normal();
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> px(3 * bc.image_size * bc.image_size);
    for (double& x : px) x = rng.uniform();
    g.images.push_back(Tensor({3, bc.image_size, bc.image_size}, std::move(px)));
  }
  g.y = {0, 1, 1};
  g.type_labels = {0, 2, 4};
  return g;
}

/// Total training loss of the setup as a gradient-checkable objective.
inline Objective gradcheck_objective(const GradCheckSetup& g) {
  auto build = [&g](Tape& t0, Tape& t1) {
    Tensor lb = bce_with_logits(t0, g.model->authenticity_logits(t0, g.images), g.y);
    Tensor lf = cross_entropy(t1, g.model->forgery_type_logits(t1, g.images), g.type_labels);
    return std::pair{lb, lf};
  };
  return Objective{
      [build, &g] {
        Tape t0(Tape::Mode::kInference), t1(Tape::Mode::kInference);
        auto [lb, lf] = build(t0, t1);
        return total_loss(lb.item(), lf.item(), g.loss);
      },
      [build, &g] {
        Tape t0, t1;
        auto [lb, lf] = build(t0, t1);
        t0.backward(lb, g.loss.bce);
        t1.backward(lf, g.loss.ftc);
      },
  };
}

/// 50 coordinates: 20 from expert matrices, 15 from routing tables, 15
/// from the classifier heads.
inline std::vector<Coordinate> gradcheck_coordinates(const std::vector<NamedTensor>& params, std::uint64_t seed) {
  std::vector<std::size_t> experts, routers, heads;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& n = params[i].name;
    if (n.rfind("head.", 0) == 0) {
      heads.push_back(i);
    } else if (n.find(".router.") != std::string::npos) {
      routers.push_back(i);
    } else {
      experts.push_back(i);
    }
  }
  Pcg32 rng = Pcg32::stream(seed, Stream::kGradcheck, 1);
  std::vector<Coordinate> coords;
  auto draw = [&](const std::vector<std::size_t>& pool, std::size_t count) {
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t t = pool[rng.below(static_cast<std::uint32_t>(pool.size()))];
      coords.push_back({t, rng.below(static_cast<std::uint32_t>(params[t].tensor.size()))});
    }
  };
  draw(experts, 20);
  draw(routers, 15);
  draw(heads, kGradCheckCoordinates - 35);
  return coords;
}

inline int cmd_gradcheck(const Options& opt, Streams io) {
  const RunSpec spec = resolve_spec(opt);
  GradCheckSetup g = make_gradcheck_setup(spec.train.seed, spec.train.loss);
  if (opt.inject_sign_flip) {
    g.model->adapter().set_negate_expert_backward(true);
    io.out << "negative control: expert backward sign flipped\n";
  }
  std::vector<Tensor> tensors;
  for (const NamedTensor& nt : g.params) tensors.push_back(nt.tensor);
  const std::vector<Coordinate> coords = gradcheck_coordinates(g.params, spec.train.seed);
  const GradCheckReport report = finite_diff_check(gradcheck_objective(g), tensors, kGradCheckEps, kGradCheckTol, coords);

  char line[256];
  for (const CoordinateCheck& c : report.coordinates) {
    std::snprintf(line, sizeof line, "  %-32s [%3zu]  analytic % .10e  numeric % .10e  rel %.3e\n",
                  g.params[c.where.tensor].name.c_str(), c.where.index, c.analytic, c.numeric, c.rel_error);
    io.out << line;
  }
  const CoordinateCheck& worst = report.coordinates.at(report.worst);
  std::snprintf(line, sizeof line, "coordinates %zu  max relative error %.3e  (tolerance %.0e)\nworst %s[%zu]\n",
                report.coordinates.size(), report.max_rel_error, kGradCheckTol, g.params[worst.where.tensor].name.c_str(),
                worst.where.index);
  io.out << line;
  if (!report.passed) {
    io.err << "gradient check FAILED\n";
    return kVerificationFailed;
  }
  io.out << "gradient check passed\n";
  return kOk;
}

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"generate", "train", "eval", "ablate", "gradcheck"};
  return names;
}

/// Runs one subcommand and maps library errors to the exit-code contract.
inline int dispatch(const std::string& command, const Options& opt, Streams io) {
  try {
    if (command == "generate") return cmd_generate(opt, io);
    if (command == "train") return cmd_train(opt, io);
    if (command == "eval") return cmd_eval(opt, io);
    if (command == "ablate") return cmd_ablate(opt, io);
    if (command == "gradcheck") return cmd_gradcheck(opt, io);
    io.err << "unknown command '" << command << "'\n";
    return kSpecError;
  } catch (const ConfigError& e) {
    io.err << "spec error: " << e.what() << '\n';
    return kSpecError;
  } catch (const IoError& e) {
    io.err << "io error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericError& e) {
    io.err << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const DigestMismatch& e) {
    io.err << "config digest mismatch\n  expected: " << e.expected() << "\n  found:    " << e.found() << '\n';
    return kDigestMismatch;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

inline int dispatch(const std::string& command, const Options& opt) { return dispatch(command, opt, {std::cout, std::cerr}); }

}  // namespace dff::cli
