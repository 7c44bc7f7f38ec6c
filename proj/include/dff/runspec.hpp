// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "dff/adapter.hpp"
#include "dff/backbone.hpp"
#include "dff/data.hpp"
#include "dff/trainer.hpp"

namespace dff {

/// Everything a command needs, as one JSON document:
///
///   { "backbone": {...}, "adapter": {...}, "dataset": {...}, "train": {...},
///     "out_dir": "runs/x", "inline_generate": true, "export_features": false }
///
/// Every key is optional; missing keys take their defaults. Unknown keys are
/// rejected.
struct RunSpec {
  BackboneConfig backbone;
  AdapterConfig adapter;
  DatasetConfig dataset;
  TrainConfig train;
  std::string out_dir = "dff_run";
  bool inline_generate = true;
  bool export_features = false;

  void validate() const {
    backbone.validate();
    adapter.validate(backbone.embed_dim);
    dataset.validate();
    train.validate();
    if (dataset.image_size != backbone.image_size) {
      throw ConfigError("dataset.image_size (" + std::to_string(dataset.image_size) + ") must equal backbone.image_size (" +
                        std::to_string(backbone.image_size) + ")");
    }
  }
};

namespace detail {

class SectionReader {
 public:
  SectionReader(const json& doc, std::string section) : doc_(doc), section_(std::move(section)) {
    if (!doc_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  void allow_only(std::initializer_list<const char*> keys) const {
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [key, value] : doc_.items()) {
      if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where());
    }
  }

  void read(const char* key, std::size_t& out) const {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void read(const char* key, std::uint64_t& out, int) const {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) const {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) const {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) const {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::optional<double>& out) const {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_number()) {
        out = v->get<double>();
      } else {
        throw ConfigError(where(key) + " must be a number or null");
      }
    }
  }
  void read(const char* key, std::optional<std::size_t>& out) const {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_number_unsigned()) {
        out = v->get<std::size_t>();
      } else {
        throw ConfigError(where(key) + " must be a nonnegative integer or null");
      }
    }
  }
  void read(const char* key, std::optional<Artifact>& out) const {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else if (v->is_string()) {
        out = parse_artifact(v->get<std::string>());
      } else {
        throw ConfigError(where(key) + " must be an artifact name or null");
      }
    }
  }

 private:
  const json* find(const char* key) const {
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }
  std::string where() const { return section_.empty() ? "run spec" : "section '" + section_ + "'"; }
  std::string where(const char* key) const { return (section_.empty() ? std::string() : section_ + ".") + key; }

  const json& doc_;
  std::string section_;
};

}  // namespace detail

/// Parse and validate; throws ConfigError on any schema violation.
inline RunSpec parse_run_spec(const json& doc) {
  RunSpec spec;
  detail::SectionReader top(doc, "");
  top.allow_only({"backbone", "adapter", "dataset", "train", "out_dir", "inline_generate", "export_features"});
  top.read("out_dir", spec.out_dir);
  top.read("inline_generate", spec.inline_generate);
  top.read("export_features", spec.export_features);

  if (doc.contains("backbone")) {
    detail::SectionReader r(doc.at("backbone"), "backbone");
    r.allow_only({"image_size", "patch_size", "embed_dim", "depth", "attn_heads", "mlp_ratio", "register_tokens", "seed"});
    BackboneConfig& b = spec.backbone;
    r.read("image_size", b.image_size);
    r.read("patch_size", b.patch_size);
    r.read("embed_dim", b.embed_dim);
    r.read("depth", b.depth);
    r.read("attn_heads", b.attn_heads);
    r.read("mlp_ratio", b.mlp_ratio);
    r.read("register_tokens", b.register_tokens);
    r.read("seed", b.seed, 0);
  }
  if (doc.contains("adapter")) {
    detail::SectionReader r(doc.at("adapter"), "adapter");
    r.allow_only({"rank", "alpha", "num_experts", "head_adapters", "top_k", "beta", "enabled", "shared_head",
                  "shared_in_authenticity"});
    AdapterConfig& a = spec.adapter;
    r.read("rank", a.rank);
    r.read("alpha", a.alpha);
    r.read("num_experts", a.num_experts);
    r.read("head_adapters", a.head_adapters);
    r.read("top_k", a.top_k);
    r.read("beta", a.beta);
    r.read("enabled", a.enabled);
    r.read("shared_head", a.shared_head);
    r.read("shared_in_authenticity", a.shared_in_authenticity);
  }
  // The dataset follows the backbone's image size unless set explicitly.
  spec.dataset.image_size = spec.backbone.image_size;
  if (doc.contains("dataset")) {
    detail::SectionReader r(doc.at("dataset"), "dataset");
    r.allow_only({"image_size", "num_identities", "samples_per_identity", "artifact_amplitude", "seed", "holdout_artifact",
                  "train_identity_fraction", "identity_cap"});
    DatasetConfig& d = spec.dataset;
    r.read("image_size", d.image_size);
    r.read("num_identities", d.num_identities);
    r.read("samples_per_identity", d.samples_per_identity);
    r.read("artifact_amplitude", d.artifact_amplitude);
    r.read("seed", d.seed, 0);
    r.read("holdout_artifact", d.holdout_artifact);
    r.read("train_identity_fraction", d.train_identity_fraction);
    r.read("identity_cap", d.identity_cap);
  }
  if (doc.contains("train")) {
    detail::SectionReader r(doc.at("train"), "train");
    r.allow_only({"lr", "weight_decay", "epochs", "batch_size", "lambda0", "lambda1", "seed", "beta1", "beta2", "eps"});
    TrainConfig& t = spec.train;
    r.read("lr", t.lr);
    r.read("weight_decay", t.weight_decay);
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("lambda0", t.loss.bce);
    r.read("lambda1", t.loss.ftc);
    r.read("seed", t.seed, 0);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("eps", t.eps);
  }
  spec.validate();
  return spec;
}

inline RunSpec parse_run_spec_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("run spec is not valid JSON: ") + e.what());
  }
  return parse_run_spec(doc);
}

inline RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run spec " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_spec_text(buf.str());
}

/// Fully materialized spec; parsing it back yields the same RunSpec.
inline json resolved_json(const RunSpec& spec) {
  return json{{"backbone", spec.backbone},
              {"adapter", spec.adapter},
              {"dataset", spec.dataset},
              {"train", spec.train},
              {"out_dir", spec.out_dir},
              {"inline_generate", spec.inline_generate},
              {"export_features", spec.export_features}};
}

}  // namespace dff
