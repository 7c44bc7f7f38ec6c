// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "dff/dff.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

using namespace dff;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path workdir;
  std::size_t reduced_epochs = 10;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// 1
Outcome gradient_correctness(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream out, err;
  const int rc = cli::dispatch("gradcheck", cli::Options{}, {out, err});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::string summary;
  std::istringstream lines(out.str());
  for (std::string line; std::getline(lines, line);)
    if (line.starts_with("coordinates")) summary = line;

  cli::Options flipped;
  flipped.inject_sign_flip = true;
  std::ostringstream sink;
  const int rc_flip = cli::dispatch("gradcheck", flipped, {sink, sink});
  return {rc == cli::kOk && secs < 60.0 && rc_flip == cli::kVerificationFailed,
          summary + fmt(", %.1f s, sign-flip control exit %d", secs, rc_flip)};
}

// 2
Outcome routing_invariants(const Context&) {
  Pcg32 rng(20260001);
  std::size_t tables = 0, failures = 0;
  std::string first_failure;
  auto fail = [&](const std::string& what) {
    if (failures++ == 0) first_failure = what;
  };
  for (int trial = 0; trial < 4000; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> z(n);
    for (double& v : z) v = 3.0 * rng.normal();
    if (trial % 4 == 1 && n > 1) z[rng.below(static_cast<std::uint32_t>(n))] = z[0];
    if (trial % 4 == 2) std::fill(z.begin(), z.end(), rng.normal());
    if (trial % 4 == 3)
      for (double& v : z) v = static_cast<double>(rng.below(3));
    ++tables;

    const RoutingDecision d = route(z, 3);
    if (d.selected.size() != std::min<std::size_t>(3, n)) fail(fmt("|S| = %zu for N = %zu", d.selected.size(), n));

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] != z[b] ? z[a] > z[b] : a < b; });
    order.resize(std::min<std::size_t>(3, n));
    if (d.selected != order) fail("selection differs from the descending-logit, lowest-index order");

    const double mx = *std::max_element(z.begin(), z.end());
    double denom = 0, sum = 0;
    for (std::size_t j : order) denom += std::exp(z[j] - mx);
    for (std::size_t k = 0; k < d.gates.size(); ++k) {
      sum += d.gates[k];
      if (std::abs(d.gates[k] - std::exp(z[order[k]] - mx) / denom) > 1e-12) fail("gate differs from renormalized softmax");
    }
    if (std::abs(sum - 1.0) > 1e-12) fail(fmt("gates sum to %.17g", sum));

    std::vector<double> shifted = z;
    const double c = 50.0 * rng.normal();
    for (double& v : shifted) v += c;
    const RoutingDecision ds = route(shifted, 3);
    bool ties_moved = false;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) ties_moved = ties_moved || ((z[i] == z[j]) != (shifted[i] == shifted[j]));
    if (!ties_moved) {
      if (ds.selected != d.selected) fail("selection changed under a constant shift");
      for (std::size_t k = 0; k < ds.gates.size(); ++k)
        if (std::abs(ds.gates[k] - d.gates[k]) > 1e-12) fail("gates changed under a constant shift");
    }
  }
  if (failures) return {false, fmt("%zu violations over %zu tables; first: ", failures, tables) + first_failure};
  return {true, fmt("%zu tables, N in [1, 12]", tables)};
}

// 3
Outcome zero_init_neutrality(const Context&) {
  auto backbone = std::make_shared<const Backbone>(BackboneConfig{});
  DffModel model(backbone, AdapterConfig{}, kNumForgeryClasses, 0);
  DatasetConfig dc;
  dc.num_identities = 4;
  const Corpus corpus = generate_split(dc);
  const std::vector<Tensor> images = batch_images(std::span(corpus.train).first(6));

  Tape t(Tape::Mode::kInference);
  const Tensor frozen = backbone->forward_cls(t, images, NullAdapter{}, Task::kAuthenticity);
  const Tensor f_bin = model.features(t, images, Task::kAuthenticity);
  const Tensor f_ftc = model.features(t, images, Task::kForgeryType);
  const auto same = [&](const Tensor& f) {
    return std::equal(f.values().begin(), f.values().end(), frozen.values().begin(), frozen.values().end());
  };
  const bool bitwise = same(f_bin) && same(f_ftc);

  double worst = 0.0;
  for (const Tensor& img : images) {
    worst = std::max(worst, std::abs(loss_bce(model.authenticity_logit(img), 1) - std::log(2.0)));
    const Tensor logits = model.forgery_type_logits(img);
    for (int c = 0; c < static_cast<int>(kNumForgeryClasses); ++c)
      worst = std::max(worst, std::abs(loss_ftc(logits.values(), c) - std::log(5.0)));
  }
  return {bitwise && worst <= 1e-12,
          fmt("features %s the frozen CLS on %zu images, max loss deviation %.1e", bitwise ? "equal" : "differ from",
              images.size(), worst)};
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& tensors) {
  std::vector<std::vector<double>> out;
  for (const NamedTensor& nt : tensors) out.emplace_back(nt.tensor.values().begin(), nt.tensor.values().end());
  return out;
}

// 4
Outcome freeze_contract(const Context&) {
  const RunSpec spec;
  auto backbone = std::make_shared<const Backbone>(spec.backbone);
  DffModel model(backbone, spec.adapter, kNumForgeryClasses, spec.train.seed);
  const Corpus corpus = generate_split(spec.dataset);
  const std::string digest = backbone->digest();
  const auto frozen_before = snapshot(backbone->named_tensors());
  const std::vector<NamedTensor> params = model.trainable();
  const auto before = snapshot(params);

  Trainer trainer(model, spec.train);
  const std::size_t b = spec.train.batch_size;
  const std::size_t batches = corpus.train.size() / b;
  for (std::size_t step = 0; step < 200; ++step) trainer.train_step(std::span(corpus.train).subspan((step % batches) * b, b));

  const bool digest_same = backbone->digest() == digest && snapshot(backbone->named_tensors()) == frozen_before;
  const auto after = snapshot(params);
  std::set<std::string> mutated, expected;
  std::size_t mutated_count = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    expected.insert(params[i].name);
    if (before[i] != after[i]) {
      mutated.insert(params[i].name);
      mutated_count += params[i].tensor.size();
    }
  }
  const std::size_t closed = count_trainable_params(spec.adapter, spec.backbone, kNumForgeryClasses);
  const bool sets_equal = mutated == expected && mutated_count == closed;
  return {digest_same && sets_equal && trainer.steps() == 200,
          fmt("%zu steps, backbone digest %s, %zu/%zu tensors mutated holding %zu values (closed form %zu)", trainer.steps(),
              digest_same ? "unchanged" : "CHANGED", mutated.size(), expected.size(), mutated_count, closed)};
}

// 5
Outcome parameter_efficiency(const Context&) {
  Pcg32 rng(20260005);
  std::size_t matched = 0, tried = 0;
  std::string mismatch;
  while (tried < 5) {
    BackboneConfig b;
    b.image_size = 16;
    b.patch_size = 4;
    b.embed_dim = 8 * (2 + rng.below(5));
    b.depth = 1 + rng.below(3);
    b.attn_heads = 2;
    b.seed = rng.next_u64();
    AdapterConfig a;
    a.head_adapters = std::size_t{1} << rng.below(3);
    a.rank = a.head_adapters * (1 + rng.below(4));
    a.num_experts = 1 + rng.below(8);
    a.top_k = 1 + rng.below(4);
    a.shared_head = a.head_adapters > 1 && rng.below(2) == 1;
    const std::size_t classes = 2 + rng.below(5);
    try {
      b.validate();
      a.validate(b.embed_dim);
    } catch (const ConfigError&) {
      continue;
    }
    ++tried;
    DffModel m(std::make_shared<const Backbone>(b), a, classes, rng.next_u64());
    std::size_t enumerated = 0;
    for (const NamedTensor& nt : m.trainable()) enumerated += nt.tensor.size();
    const std::size_t closed = count_trainable_params(a, b, classes);
    if (enumerated == closed) {
      ++matched;
    } else if (mismatch.empty()) {
      mismatch = fmt(" (d=%zu h=%zu r=%zu N=%zu: %zu vs %zu)", b.embed_dim, a.head_adapters, a.rank, a.num_experts, enumerated,
                     closed);
    }
  }
  const Backbone backbone{BackboneConfig{}};
  const std::size_t trainable = count_trainable_params(AdapterConfig{}, backbone.config(), kNumForgeryClasses);
  const double fraction = static_cast<double>(trainable) / static_cast<double>(trainable + backbone.parameter_count());
  return {matched == 5 && fraction < 0.15,
          fmt("closed form matched %zu/5 random configs%s; default %zu trainable of %zu total (%.2f%%)", matched, mismatch.c_str(),
              trainable, trainable + backbone.parameter_count(), 100.0 * fraction)};
}

// 6
Outcome intra_distribution(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunSpec spec;
  auto backbone = std::make_shared<const Backbone>(spec.backbone);
  const Corpus corpus = generate_split(spec.dataset);
  bool all = true;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainConfig tc = spec.train;
    tc.seed = seed;
    DffModel model(backbone, spec.adapter, kNumForgeryClasses, seed);
    const RunHistory h = train(tc, corpus.train, model);
    const EvalMetrics m = evaluate(model, corpus.test);
    const bool ok = m.auc >= 0.95 && m.acc_ftc >= 0.80;
    all = all && ok;
    const double ratio = h.epochs.size() >= 20 ? h.epochs[19].total / h.epochs[0].total : 0.0;
    detail += fmt("seed %llu auc %.4f acc_ftc %.4f (loss epoch20/epoch1 %.3f); ", static_cast<unsigned long long>(seed), m.auc,
                  m.acc_ftc, ratio);
    std::printf("    criterion 6 seed %llu: auc %.4f eer %.4f acc_bin %.4f acc_ftc %.4f train loss %.4f -> %.4f\n",
                static_cast<unsigned long long>(seed), m.auc, m.eer, m.acc_bin, m.acc_ftc, h.epochs.front().total,
                h.epochs.back().total);
    std::fflush(stdout);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {all && secs < 900.0, detail + fmt("%.0f s total", secs)};
}

// 7
Outcome cross_manipulation(const Context& ctx) {
  std::vector<double> aucs;
  std::string detail;
  for (Artifact family : kArtifactFamilies) {
    RunSpec spec;
    spec.dataset.holdout_artifact = family;
    spec.train.epochs = ctx.reduced_epochs;
    const Corpus corpus = generate_split(spec.dataset);
    auto backbone = std::make_shared<const Backbone>(spec.backbone);
    std::vector<double> fam;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      spec.train.seed = seed;
      fam.push_back(cli::run_ablation_row({"full", spec.adapter, spec.train.loss}, spec, backbone, corpus).auc);
      aucs.push_back(fam.back());
    }
    detail += fmt("%s %.3f; ", artifact_name(family), mean(fam));
    std::printf("    criterion 7 held out %s: auc %.4f %.4f %.4f\n", artifact_name(family), fam[0], fam[1], fam[2]);
    std::fflush(stdout);
  }
  const double m = mean(aucs);
  return {m >= 0.70, detail + fmt("mean %.4f over %zu runs, %zu epochs each", m, aucs.size(), ctx.reduced_epochs)};
}

// 8
Outcome multitask_ablation(const Context& ctx) {
  std::vector<double> full, single;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunSpec spec;
    const Artifact family = kArtifactFamilies[seed % kArtifactFamilies.size()];
    spec.dataset.holdout_artifact = family;
    spec.train.epochs = ctx.reduced_epochs;
    spec.train.seed = seed;
    const Corpus corpus = generate_split(spec.dataset);
    auto backbone = std::make_shared<const Backbone>(spec.backbone);
    cli::AblationRow ablated{"lambda1=0", spec.adapter, spec.train.loss};
    ablated.loss.ftc = 0.0;
    full.push_back(cli::run_ablation_row({"full", spec.adapter, spec.train.loss}, spec, backbone, corpus).auc);
    single.push_back(cli::run_ablation_row(ablated, spec, backbone, corpus).auc);
    std::printf("    criterion 8 seed %llu held out %s: full %.4f lambda1=0 %.4f\n", static_cast<unsigned long long>(seed),
                artifact_name(family), full.back(), single.back());
    std::fflush(stdout);
  }
  const double a = mean(full), b = mean(single);
  return {a >= b, fmt("mean held-out auc full %.4f vs lambda1=0 %.4f, gap %+.4f, %zu epochs each", a, b, a - b, ctx.reduced_epochs)};
}

// 9
Outcome metric_oracles(const Context&) {
  Pcg32 rng(20260009);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    ScoredSet s;
    const std::size_t n = 2 + rng.below(99);
    for (std::size_t i = 0; i < n; ++i) {
      s.scores.push_back(trial % 2 ? static_cast<double>(rng.below(6)) : rng.normal());
      s.labels.push_back(static_cast<int>(rng.below(2)));
    }
    s.labels[0] = 0;
    s.labels[1] = 1;
    worst = std::max(worst, std::abs(auc(s) - test::brute_force_auc(s)));
  }
  std::size_t sets = 0, exact = 0;
  for (int code = 0; code < 256; ++code) {
    for (int mask = 1; mask < 15; ++mask) {
      ScoredSet s;
      for (int i = 0; i < 4; ++i) {
        s.scores.push_back(static_cast<double>((code >> (2 * i)) & 3));
        s.labels.push_back((mask >> i) & 1);
      }
      ++sets;
      exact += eer(s) == test::sweep_eer(s);
    }
  }
  return {worst <= 1e-12 && exact == sets,
          fmt("auc max deviation %.1e over 200 instances; eer exact on %zu/%zu four-point sets", worst, exact, sets)};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DFF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// 10
Outcome determinism(const Context& ctx) {
  const fs::path root = ctx.workdir / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path spec = root / "spec.json";
  std::ofstream(spec) << json{{"train", {{"epochs", 2}}}}.dump(2);
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    const std::string common = " --spec " + spec.string() + " --out " + dir.string();
    const std::string corpus = " --corpus " + (dir / "corpus").string();
    if (run_cli("generate --spec " + spec.string() + " --out " + (dir / "corpus").string(), root / "log") != 0 ||
        run_cli("train" + common + corpus, root / "log") != 0 || run_cli("eval" + common + corpus, root / "log") != 0) {
      return {false, "pipeline run " + std::string(run) + " failed: " + read_file(root / "log")};
    }
  }
  const std::vector<fs::path> artifacts{"corpus/train.bin", "corpus/test.bin", "corpus/train_manifest.csv",
                                        "corpus/test_manifest.csv", "checkpoint.bin", "metrics.json", "routing_stats.json"};
  std::size_t identical = 0;
  std::string differing;
  for (const fs::path& f : artifacts) {
    const std::string a = read_file(root / "a" / f), b = read_file(root / "b" / f);
    if (!a.empty() && a == b) {
      ++identical;
    } else {
      differing += " " + f.string();
    }
  }
  return {identical == artifacts.size(),
          fmt("%zu/%zu artifacts byte-identical across two generate/train/eval runs", identical, artifacts.size()) +
              (differing.empty() ? "" : "; differ:" + differing)};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome(const Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DFF-Adapter acceptance suite"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  bool strict = false;
  Context ctx;
  app.add_option("--workdir", workdir, "scratch directory for pipeline runs");
  app.add_option("--only", only, "criterion ids to run (default: all)")->delimiter(',');
  app.add_option("--reduced-epochs", ctx.reduced_epochs, "epochs per run for the held-out family criteria");
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  ctx.workdir = workdir;
  fs::create_directories(ctx.workdir);
  std::ofstream report(ctx.workdir / "acceptance_report.txt", std::ios::trunc);

  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "routing invariants", routing_invariants},
      {3, "zero-init neutrality", zero_init_neutrality},
      {4, "freeze contract", freeze_contract},
      {5, "parameter efficiency", parameter_efficiency},
      {6, "intra-distribution detection", intra_distribution},
      {7, "cross-manipulation generalization", cross_manipulation},
      {8, "multi-task ablation direction", multitask_ablation},
      {9, "metric oracles", metric_oracles},
      {10, "determinism", determinism},
  };

  std::size_t failed = 0, ran = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::printf("criterion %2d  running  %s\n", c.id, c.title);
    std::fflush(stdout);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++ran;
    failed += !o.pass;
    const std::string line =
        fmt("criterion %2d  %s  %s: ", c.id, o.pass ? "PASS" : "FAIL", c.title) + o.detail + fmt(" [%.1f s]", secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    report << line << '\n' << std::flush;
  }
  std::printf("summary: %zu/%zu criteria passed\n", ran - failed, ran);
  report << fmt("summary: %zu/%zu criteria passed\n", ran - failed, ran);
  return strict && failed ? 1 : 0;
}
