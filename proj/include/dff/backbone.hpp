// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dff/ops.hpp"
#include "dff/rng.hpp"
#include "dff/serialize.hpp"
#include "dff/tensor.hpp"

namespace dff {

/// Which routing rows and classifier a forward pass uses.
enum class Task : std::uint8_t { kAuthenticity = 0, kForgeryType = 1 };

inline constexpr std::size_t kNumTasks = 2;

inline constexpr std::size_t task_index(Task t) { return static_cast<std::size_t>(t); }

struct BackboneConfig {
  static constexpr std::size_t kChannels = 3;

  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 128;
  std::size_t depth = 6;
  std::size_t attn_heads = 4;
  double mlp_ratio = 2.0;
  std::size_t register_tokens = 0;
  std::uint64_t seed = 0;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t num_tokens() const { return 1 + register_tokens + num_patches(); }
  std::size_t patch_dim() const { return kChannels * patch_size * patch_size; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim))); }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || embed_dim == 0 || depth == 0 || attn_heads == 0) {
      throw ConfigError("backbone: image_size, patch_size, embed_dim, depth and attn_heads must be >= 1");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("backbone: patch_size " + std::to_string(patch_size) + " does not divide image_size " +
                        std::to_string(image_size));
    }
    if (embed_dim % attn_heads != 0) {
      throw ConfigError("backbone: attn_heads " + std::to_string(attn_heads) + " does not divide embed_dim " +
                        std::to_string(embed_dim));
    }
    const double hidden = mlp_ratio * static_cast<double>(embed_dim);
    if (!(mlp_ratio > 0.0) || hidden < 1.0 || std::abs(hidden - std::round(hidden)) > 1e-9) {
      throw ConfigError("backbone: mlp_ratio * embed_dim must be a positive integer");
    }
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void to_json(json& j, const BackboneConfig& c) {
  j = json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
           {"depth", c.depth},           {"attn_heads", c.attn_heads}, {"mlp_ratio", c.mlp_ratio},
           {"register_tokens", c.register_tokens}, {"seed", c.seed}};
}

enum class SiteKind : std::uint8_t { kQuery = 0, kValue = 1, kDense = 2 };

inline constexpr std::size_t kSitesPerBlock = 3;

inline const char* site_kind_name(SiteKind kind) {
  switch (kind) {
    case SiteKind::kQuery: return "query";
    case SiteKind::kValue: return "value";
    case SiteKind::kDense: return "dense";
  }
  return "?";
}

/// Adapted projection: query, value, or the attention output ("dense") of one block.
struct InjectionSite {
  std::size_t block = 0;
  SiteKind kind = SiteKind::kQuery;

  std::size_t flat_index() const { return block * kSitesPerBlock + static_cast<std::size_t>(kind); }
  std::string name() const { return "block" + std::to_string(block) + "." + site_kind_name(kind); }
  friend bool operator==(const InjectionSite&, const InjectionSite&) = default;
};

inline std::vector<InjectionSite> all_sites(std::size_t depth) {
  std::vector<InjectionSite> sites;
  for (std::size_t b = 0; b < depth; ++b)
    for (SiteKind k : {SiteKind::kQuery, SiteKind::kValue, SiteKind::kDense}) sites.push_back({b, k});
  return sites;
}

/// Supplies the additive low-rank update for an injection site. An undefined
/// Tensor means "no update" (Delta == 0).
template <class P>
concept SiteDeltaProvider = requires(const P& p, Tape& tape, const Tensor& x, InjectionSite site, Task task) {
  { p.covers(site) } -> std::convertible_to<bool>;
  { p.delta(tape, x, site, task) } -> std::convertible_to<Tensor>;
};

struct NullAdapter {
  bool covers(InjectionSite) const { return true; }
  Tensor delta(Tape&, const Tensor&, InjectionSite, Task) const { return {}; }
};

struct BlockWeights {
  Tensor norm1_gain, norm1_bias;
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, dense_w, dense_b;
  Tensor norm2_gain, norm2_bias;
  Tensor mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;
};

/// Small pre-norm Vision Transformer with frozen random weights.
class Backbone {
 public:
  static constexpr double kInitStd = 0.02;
  static constexpr double kNormEps = 1e-6;

  explicit Backbone(BackboneConfig config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.embed_dim, hid = config_.mlp_hidden();
    patch_w_ = Tensor::zeros({config_.patch_dim(), d});
    patch_b_ = Tensor::zeros({d});
    cls_ = Tensor::zeros({d});
    if (config_.register_tokens > 0) registers_ = Tensor::zeros({config_.register_tokens, d});
    pos_ = Tensor::zeros({config_.num_tokens(), d});
    blocks_.resize(config_.depth);
    for (BlockWeights& b : blocks_) {
      b.norm1_gain = Tensor::full({d}, 1.0);
      b.norm1_bias = Tensor::zeros({d});
      b.query_w = Tensor::zeros({d, d});
      b.query_b = Tensor::zeros({d});
      b.key_w = Tensor::zeros({d, d});
      b.key_b = Tensor::zeros({d});
      b.value_w = Tensor::zeros({d, d});
      b.value_b = Tensor::zeros({d});
      b.dense_w = Tensor::zeros({d, d});
      b.dense_b = Tensor::zeros({d});
      b.norm2_gain = Tensor::full({d}, 1.0);
      b.norm2_bias = Tensor::zeros({d});
      b.mlp_in_w = Tensor::zeros({d, hid});
      b.mlp_in_b = Tensor::zeros({hid});
      b.mlp_out_w = Tensor::zeros({hid, d});
      b.mlp_out_b = Tensor::zeros({d});
    }
    norm_gain_ = Tensor::full({d}, 1.0);
    norm_bias_ = Tensor::zeros({d});

    Pcg32 rng = Pcg32::stream(config_.seed, Stream::kBackboneInit);
    for (NamedTensor& nt : named_tensors()) {
      if (nt.name.find("norm") != std::string::npos) continue;  // layer norms keep gain 1 / bias 0
      for (double& v : nt.tensor.mutable_values()) v = kInitStd * rng.normal();
    }
  }

  const BackboneConfig& config() const { return config_; }
  const BlockWeights& block(std::size_t i) const { return blocks_.at(i); }

  /// Handles to every weight, in a fixed order (also the file order).
  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out{{"patch_embed.weight", patch_w_}, {"patch_embed.bias", patch_b_}, {"cls_token", cls_}};
    if (registers_.defined()) out.push_back({"register_tokens", registers_});
    out.push_back({"pos_embed", pos_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const BlockWeights& b = blocks_[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.insert(out.end(), {{p + "norm1.weight", b.norm1_gain},      {p + "norm1.bias", b.norm1_bias},
                             {p + "attn.query.weight", b.query_w},   {p + "attn.query.bias", b.query_b},
                             {p + "attn.key.weight", b.key_w},       {p + "attn.key.bias", b.key_b},
                             {p + "attn.value.weight", b.value_w},   {p + "attn.value.bias", b.value_b},
                             {p + "attn.dense.weight", b.dense_w},   {p + "attn.dense.bias", b.dense_b},
                             {p + "norm2.weight", b.norm2_gain},     {p + "norm2.bias", b.norm2_bias},
                             {p + "mlp.fc1.weight", b.mlp_in_w},     {p + "mlp.fc1.bias", b.mlp_in_b},
                             {p + "mlp.fc2.weight", b.mlp_out_w},    {p + "mlp.fc2.bias", b.mlp_out_b}});
    }
    out.push_back({"norm.weight", norm_gain_});
    out.push_back({"norm.bias", norm_bias_});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const NamedTensor& nt : named_tensors()) n += nt.tensor.size();
    return n;
  }

  /// FNV-1a over all weight bytes in file order.
  std::string digest() const {
    Fnv1a h;
    for (const NamedTensor& nt : named_tensors()) {
      h.update(nt.name);
      h.update(nt.tensor.values());
    }
    return h.hex();
  }

  void save(const std::filesystem::path& path) const { save_tensors(path, named_tensors(), config_json()); }

  /// Replace the random weights with externally converted ones (same names and shapes).
  void load(const std::filesystem::path& path) {
    TensorFile file = load_tensors(path);
    std::vector<NamedTensor> targets = named_tensors();
    assign_tensors(file, targets, "backbone weights " + path.string());
  }

  json config_json() const { return config_; }

  /// Token embeddings for a batch of [3 x S x S] images, stacked to
  /// (batch * tokens) x d. Row 0 of each image is CLS, then registers, then
  /// patches in raster order. Constant: never recorded on a tape.
  Tensor patch_embed(std::span<const Tensor> images) const {
    const std::size_t s = config_.image_size, p = config_.patch_size, g = config_.patches_per_side();
    const std::size_t d = config_.embed_dim, tokens = config_.num_tokens(), np = config_.num_patches();
    const std::size_t first_patch = 1 + config_.register_tokens;
    Buffer patches(images.size() * np * config_.patch_dim());
    for (std::size_t b = 0; b < images.size(); ++b) {
      const Tensor& img = images[b];
      if (img.shape() != Shape{BackboneConfig::kChannels, s, s}) {
        throw DimensionError("patch_embed: expected image [3x" + std::to_string(s) + "x" + std::to_string(s) + "], got " +
                             to_string(img.shape()));
      }
      auto px = img.values();
      for (std::size_t py = 0; py < g; ++py) {
        for (std::size_t pxi = 0; pxi < g; ++pxi) {
          double* row = patches.data() + ((b * np) + py * g + pxi) * config_.patch_dim();
          for (std::size_t c = 0; c < BackboneConfig::kChannels; ++c)
            for (std::size_t i = 0; i < p; ++i)
              for (std::size_t j = 0; j < p; ++j)
                *row++ = px[(c * s + py * p + i) * s + pxi * p + j];
        }
      }
    }
    Tape constant(Tape::Mode::kInference);
    Tensor proj = linear(constant, Tensor({images.size() * np, config_.patch_dim()}, std::move(patches)), patch_w_, patch_b_);
    Buffer out(images.size() * tokens * d);
    for (std::size_t b = 0; b < images.size(); ++b) {
      for (std::size_t t = 0; t < tokens; ++t) {
        double* row = out.data() + (b * tokens + t) * d;
        const double* src;
        if (t == 0) {
          src = cls_.values().data();
        } else if (t < first_patch) {
          src = registers_.values().data() + (t - 1) * d;
        } else {
          src = proj.values().data() + (b * np + (t - first_patch)) * d;
        }
        const double* pos = pos_.values().data() + t * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = src[j] + pos[j];
      }
    }
    return Tensor({images.size() * tokens, d}, std::move(out));
  }

  Tensor patch_embed(const Tensor& image) const { return patch_embed(std::span<const Tensor>(&image, 1)); }

  /// One pre-norm block over `batch` stacked sequences. Query, value and
  /// dense (attention output) projections receive the provider's deltas,
  /// each computed from that projection's own input.
  template <SiteDeltaProvider P>
  Tensor block_forward(Tape& tape, const Tensor& x, std::size_t index, const P& adapter, Task task,
                       std::size_t batch) const {
    const BlockWeights& w = blocks_.at(index);
    auto project = [&](const Tensor& in, const Tensor& weight, const Tensor& bias, SiteKind kind) {
      Tensor out = linear(tape, in, weight, bias);
      InjectionSite site{index, kind};
      if (!adapter.covers(site)) throw ContractError("adapter provides no delta for site " + site.name());
      Tensor delta = adapter.delta(tape, in, site, task);
      return delta.defined() ? add(tape, out, delta) : out;
    };
    Tensor h = layer_norm(tape, x, w.norm1_gain, w.norm1_bias, kNormEps);
    Tensor q = project(h, w.query_w, w.query_b, SiteKind::kQuery);
    Tensor k = linear(tape, h, w.key_w, w.key_b);
    Tensor v = project(h, w.value_w, w.value_b, SiteKind::kValue);
    Tensor a = attention(tape, q, k, v, batch, config_.num_tokens(), config_.attn_heads);
    Tensor o = project(a, w.dense_w, w.dense_b, SiteKind::kDense);
    Tensor x1 = add(tape, x, o);
    Tensor h2 = layer_norm(tape, x1, w.norm2_gain, w.norm2_bias, kNormEps);
    Tensor m = linear(tape, gelu(tape, linear(tape, h2, w.mlp_in_w, w.mlp_in_b)), w.mlp_out_w, w.mlp_out_b);
    return add(tape, x1, m);
  }

  /// Final-normed CLS rows, batch x d.
  template <SiteDeltaProvider P>
  Tensor forward_cls(Tape& tape, std::span<const Tensor> images, const P& adapter, Task task) const {
    return forward_cls_from_tokens(tape, patch_embed(images), images.size(), adapter, task);
  }

  template <SiteDeltaProvider P>
  Tensor forward_cls_from_tokens(Tape& tape, const Tensor& tokens, std::size_t batch, const P& adapter, Task task) const {
    for (const InjectionSite& site : all_sites(config_.depth)) {
      if (!adapter.covers(site)) throw ContractError("adapter provides no delta for site " + site.name());
    }
    Tensor x = tokens;
    for (std::size_t i = 0; i < blocks_.size(); ++i) x = block_forward(tape, x, i, adapter, task, batch);
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * config_.num_tokens();
    // Normalizing only the CLS rows is equivalent to normalizing all tokens then selecting.
    return layer_norm(tape, gather_rows(tape, x, std::move(cls_rows)), norm_gain_, norm_bias_, kNormEps);
  }

  /// CLS feature [d] of a single image.
  template <SiteDeltaProvider P>
  Tensor forward(Tape& tape, const Tensor& image, const P& adapter, Task task) const {
    Tensor cls = forward_cls(tape, std::span<const Tensor>(&image, 1), adapter, task);
    return reshape(tape, cls, {config_.embed_dim});
  }

 private:
  BackboneConfig config_;
  Tensor patch_w_, patch_b_, cls_, registers_, pos_;
  std::vector<BlockWeights> blocks_;
  Tensor norm_gain_, norm_bias_;
};

}  // namespace dff
