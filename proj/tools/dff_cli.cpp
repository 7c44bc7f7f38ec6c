// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include "dff/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"DFF-Adapter desk-scale forgery detection"};
  app.require_subcommand(1);
  dff::cli::Options opt;
  std::string spec, checkpoint, corpus, out;
  std::uint64_t seed = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--spec", spec, "run spec JSON")->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory (overrides out_dir)");
    sub->add_option("--seed", seed, "training seed (overrides train.seed)");
  };

  CLI::App* generate = app.add_subcommand("generate", "write train/test corpora and manifests");
  add_common(generate);

  CLI::App* train = app.add_subcommand("train", "train adapters and classifiers; writes checkpoint, history, config");
  add_common(train);
  train->add_option("--corpus", corpus, "corpus directory from `generate`");

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default OUT/checkpoint.bin)");
  eval->add_option("--corpus", corpus, "corpus directory from `generate`");
  eval->add_flag("--export-features", opt.export_features, "also write features.csv");

  CLI::App* ablate = app.add_subcommand("ablate", "train and compare an ablation matrix");
  add_common(ablate);
  ablate->add_option("--corpus", corpus, "corpus directory from `generate`");
  ablate->add_option("--mode", opt.mode, "no-setf | no-famhr | lp | plain-lora | sweep-lambda | sweep-heads | sweep-experts")
      ->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the training loss gradient");
  add_common(gradcheck);
  gradcheck->add_flag("--inject-sign-flip", opt.inject_sign_flip, "negative control: corrupt the expert backward")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : dff::cli::kSpecError;
  }

  if (!spec.empty()) opt.spec = spec;
  if (!checkpoint.empty()) opt.checkpoint = checkpoint;
  if (!corpus.empty()) opt.corpus = corpus;
  if (!out.empty()) opt.out = out;
  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed") > 0) opt.seed = seed;
  return dff::cli::dispatch(chosen->get_name(), opt);
}
