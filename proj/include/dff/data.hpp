// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dff/error.hpp"
#include "dff/parallel.hpp"
#include "dff/rng.hpp"
#include "dff/serialize.hpp"
#include "dff/tensor.hpp"

namespace dff {

enum class Artifact : std::uint8_t {
  kNone = 0,
  kBlendBoundary = 1,
  kCheckerFrequency = 2,
  kColorShift = 3,
  kBlurPatch = 4,
};

inline constexpr std::array<Artifact, 4> kArtifactFamilies{Artifact::kBlendBoundary, Artifact::kCheckerFrequency,
                                                           Artifact::kColorShift, Artifact::kBlurPatch};

/// Real class plus one class per artifact family.
inline constexpr std::size_t kNumForgeryClasses = 1 + kArtifactFamilies.size();

inline const char* artifact_name(Artifact a) {
  switch (a) {
    case Artifact::kNone: return "none";
    case Artifact::kBlendBoundary: return "blend_boundary";
    case Artifact::kCheckerFrequency: return "checker_frequency";
    case Artifact::kColorShift: return "color_shift";
    case Artifact::kBlurPatch: return "blur_patch";
  }
  return "?";
}

inline Artifact parse_artifact(std::string_view name) {
  for (Artifact a : {Artifact::kNone, Artifact::kBlendBoundary, Artifact::kCheckerFrequency, Artifact::kColorShift,
                     Artifact::kBlurPatch}) {
    if (name == artifact_name(a)) return a;
  }
  throw ConfigError("unknown artifact '" + std::string(name) + "'");
}

/// Forgery-type class of an artifact; 0 is "real".
inline int type_label_of(Artifact a) { return static_cast<int>(a); }

struct ForgerySample {
  Tensor image;  // [3 x S x S], values in [0, 1]
  int y = 0;     // 1 = fake
  int type_label = 0;
  std::uint64_t identity = 0;
  Artifact artifact = Artifact::kNone;
};

struct DatasetConfig {
  std::size_t image_size = 32;
  std::size_t num_identities = 200;
  std::size_t samples_per_identity = 1;  // rounds; each emits one real + one per active family
  double artifact_amplitude = 1.0;
  std::uint64_t seed = 0;
  std::optional<Artifact> holdout_artifact;
  double train_identity_fraction = 0.8;
  std::optional<std::size_t> identity_cap;

  std::size_t num_classes() const { return kNumForgeryClasses; }

  std::size_t train_identity_count() const {
    auto n = static_cast<std::size_t>(std::llround(train_identity_fraction * static_cast<double>(num_identities)));
    return std::clamp<std::size_t>(n, 1, num_identities - 1);
  }

  void validate() const {
    if (image_size < 16) throw ConfigError("dataset: image_size must be >= 16");
    if (num_identities < 2) throw ConfigError("dataset: need at least 2 identities for a train/test partition");
    if (samples_per_identity < 1) throw ConfigError("dataset: samples_per_identity must be >= 1");
    if (!(artifact_amplitude > 0.0 && artifact_amplitude <= 1.0)) throw ConfigError("dataset: artifact_amplitude must lie in (0, 1]");
    if (!(train_identity_fraction > 0.0 && train_identity_fraction < 1.0)) {
      throw ConfigError("dataset: train_identity_fraction must lie in (0, 1)");
    }
    if (holdout_artifact && *holdout_artifact == Artifact::kNone) throw ConfigError("dataset: cannot hold out the real class");
    if (identity_cap && *identity_cap == 0) throw ConfigError("dataset: identity_cap must be >= 1");
  }
};

inline void to_json(json& j, const DatasetConfig& c) {
  j = json{{"image_size", c.image_size},
           {"num_identities", c.num_identities},
           {"samples_per_identity", c.samples_per_identity},
           {"artifact_amplitude", c.artifact_amplitude},
           {"seed", c.seed},
           {"holdout_artifact", c.holdout_artifact ? json(artifact_name(*c.holdout_artifact)) : json(nullptr)},
           {"train_identity_fraction", c.train_identity_fraction},
           {"identity_cap", c.identity_cap ? json(*c.identity_cap) : json(nullptr)}};
}

namespace detail {

inline double& pixel(std::vector<double>& v, std::size_t s, std::size_t c, std::size_t y, std::size_t x) {
  return v[(c * s + y) * s + x];
}

struct Region {
  std::size_t x0, y0, w, h;
  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; }
};

/// Rectangle with each side in [S/4, S/2].
inline Region draw_region(Pcg32& rng, std::size_t s) {
  const std::size_t lo = s / 4, span = s / 2 - s / 4 + 1;
  Region r{};
  r.w = lo + rng.below(static_cast<std::uint32_t>(span));
  r.h = lo + rng.below(static_cast<std::uint32_t>(span));
  r.x0 = rng.below(static_cast<std::uint32_t>(s - r.w + 1));
  r.y0 = rng.below(static_cast<std::uint32_t>(s - r.h + 1));
  return r;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace detail

/// Face-like base image of an identity: a per-channel background with a
/// low-frequency gradient and 3-6 Gaussian blobs, clamped to [0, 1].
inline Tensor generate_base(std::uint64_t identity, std::uint64_t seed, std::size_t s) {
  if (s < 16) throw ConfigError("generate_base: image size must be >= 16");
  Pcg32 rng = Pcg32::stream(seed, Stream::kBaseImage, identity);
  constexpr std::size_t C = 3;
  std::array<double, C> background{}, grad_x{}, grad_y{};
  for (std::size_t c = 0; c < C; ++c) {
    background[c] = rng.uniform(0.3, 0.7);
    grad_x[c] = rng.uniform(-0.25, 0.25);
    grad_y[c] = rng.uniform(-0.25, 0.25);
  }
  struct Blob {
    double cx, cy, sigma;
    std::array<double, C> amp;
  };
  const std::size_t nblobs = 3 + rng.below(4);
  std::vector<Blob> blobs(nblobs);
  const double sd = static_cast<double>(s);
  for (Blob& b : blobs) {
    b.cx = rng.uniform(0.25, 0.75) * sd;
    b.cy = rng.uniform(0.25, 0.75) * sd;
    b.sigma = rng.uniform(0.05, 0.16) * sd;
    for (double& a : b.amp) a = rng.uniform(-0.45, 0.45);
  }
  std::vector<double> v(C * s * s);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / sd - 0.5;
        const double fy = (static_cast<double>(y) + 0.5) / sd - 0.5;
        double val = background[c] + grad_x[c] * fx + grad_y[c] * fy;
        for (const Blob& b : blobs) {
          const double dx = static_cast<double>(x) + 0.5 - b.cx, dy = static_cast<double>(y) + 0.5 - b.cy;
          val += b.amp[c] * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        detail::pixel(v, s, c, y, x) = detail::clamp01(val);
      }
    }
  }
  return Tensor({C, s, s}, std::move(v));
}

/// Apply one artifact family to `base`. Region geometry and offsets come
/// from `rng`; blend_boundary pastes from `donor` (another identity's base).
inline Tensor apply_artifact(const Tensor& base, Artifact artifact, double amplitude, Pcg32& rng,
                             const Tensor* donor = nullptr) {
  if (artifact == Artifact::kNone) throw ContractError("apply_artifact: artifact must not be none");
  if (base.rank() != 3 || base.dim(0) != 3 || base.dim(1) != base.dim(2)) {
    throw DimensionError("apply_artifact: expected [3 x S x S], got " + to_string(base.shape()));
  }
  const std::size_t s = base.dim(1);
  std::vector<double> src(base.values().begin(), base.values().end());
  std::vector<double> out = src;
  const detail::Region r = detail::draw_region(rng, s);
  switch (artifact) {
    case Artifact::kBlendBoundary: {
      if (donor == nullptr || donor->shape() != base.shape()) throw ContractError("blend_boundary needs a donor image of the same shape");
      std::vector<double> other(donor->values().begin(), donor->values().end());
      constexpr double kRamp = 2.0;  // pixels of linear alpha ramp at the boundary
      for (std::size_t y = r.y0; y < r.y0 + r.h; ++y) {
        for (std::size_t x = r.x0; x < r.x0 + r.w; ++x) {
          const std::size_t edge = std::min({x - r.x0, r.x0 + r.w - 1 - x, y - r.y0, r.y0 + r.h - 1 - y});
          const double alpha = std::min(1.0, (static_cast<double>(edge) + 1.0) / (kRamp + 1.0));
          for (std::size_t c = 0; c < 3; ++c) {
            double& o = detail::pixel(out, s, c, y, x);
            o = detail::clamp01((1.0 - alpha) * detail::pixel(src, s, c, y, x) + alpha * detail::pixel(other, s, c, y, x));
          }
        }
      }
      break;
    }
    case Artifact::kCheckerFrequency: {
      const double a = amplitude * 0.1;
      for (std::size_t y = r.y0; y < r.y0 + r.h; ++y)
        for (std::size_t x = r.x0; x < r.x0 + r.w; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            double& o = detail::pixel(out, s, c, y, x);
            o = detail::clamp01(o + ((x + y) % 2 == 0 ? a : -a));
          }
      break;
    }
    case Artifact::kColorShift: {
      std::array<double, 3> offset{};
      for (double& o : offset) o = rng.uniform(-0.2, 0.2) * amplitude;
      for (std::size_t y = r.y0; y < r.y0 + r.h; ++y)
        for (std::size_t x = r.x0; x < r.x0 + r.w; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            double& o = detail::pixel(out, s, c, y, x);
            o = detail::clamp01(o + offset[c]);
          }
      break;
    }
    case Artifact::kBlurPatch: {
      constexpr std::ptrdiff_t kRadius = 2;
      const auto si = static_cast<std::ptrdiff_t>(s);
      for (std::size_t y = r.y0; y < r.y0 + r.h; ++y)
        for (std::size_t x = r.x0; x < r.x0 + r.w; ++x)
          for (std::size_t c = 0; c < 3; ++c) {
            double acc = 0.0;
            int count = 0;
            for (std::ptrdiff_t dy = -kRadius; dy <= kRadius; ++dy)
              for (std::ptrdiff_t dx = -kRadius; dx <= kRadius; ++dx) {
                const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
                if (yy < 0 || yy >= si || xx < 0 || xx >= si) continue;
                acc += detail::pixel(src, s, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                ++count;
              }
            detail::pixel(out, s, c, y, x) = detail::clamp01(acc / count);
          }
      break;
    }
    case Artifact::kNone: break;
  }
  return Tensor(base.shape(), std::move(out));
}

/// Donor identities live outside the corpus id range so pasted content is never a corpus face.
inline std::uint64_t donor_identity(std::uint64_t seed, std::uint64_t identity, std::size_t round) {
  Pcg32 rng = Pcg32::stream(seed, Stream::kDonor, identity, round);
  return (std::uint64_t{1} << 32) + rng.next_u32();
}

/// The fake sample of `identity` for `family` in the given round.
inline ForgerySample make_fake(const DatasetConfig& config, std::uint64_t identity, std::size_t round, Artifact family,
                               const Tensor& base) {
  Pcg32 rng = Pcg32::stream(config.seed, Stream::kArtifact, identity, round * 16 + static_cast<std::uint64_t>(family));
  Tensor donor;
  if (family == Artifact::kBlendBoundary) donor = generate_base(donor_identity(config.seed, identity, round), config.seed, config.image_size);
  Tensor image = apply_artifact(base, family, config.artifact_amplitude, rng, donor.defined() ? &donor : nullptr);
  return ForgerySample{std::move(image), 1, type_label_of(family), identity, family};
}

using ClassBalance = std::map<int, std::size_t>;  // type_label -> count

inline ClassBalance class_balance(const std::vector<ForgerySample>& samples) {
  ClassBalance b;
  for (const ForgerySample& s : samples) ++b[s.type_label];
  return b;
}

struct Corpus {
  std::vector<ForgerySample> train;
  std::vector<ForgerySample> test;
  ClassBalance train_balance;
  ClassBalance test_balance;
};

struct IdentityPartition {
  std::vector<std::uint64_t> train;
  std::vector<std::uint64_t> test;
};

inline IdentityPartition partition_identities(const DatasetConfig& config) {
  std::vector<std::uint64_t> ids(config.num_identities);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  Pcg32 rng = Pcg32::stream(config.seed, Stream::kSplit);
  rng.shuffle(std::span<std::uint64_t>(ids));
  const std::size_t n_train = config.train_identity_count();
  IdentityPartition p;
  p.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  p.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  if (config.identity_cap && p.train.size() > *config.identity_cap) p.train.resize(*config.identity_cap);
  std::sort(p.train.begin(), p.train.end());
  std::sort(p.test.begin(), p.test.end());
  return p;
}

/// Samples of the given identities: per identity and round, the real image
/// then one fake per family (skipping `excluded`).
inline std::vector<ForgerySample> generate_samples(const DatasetConfig& config, const std::vector<std::uint64_t>& identities,
                                                   std::optional<Artifact> excluded) {
  std::vector<Artifact> families;
  for (Artifact a : kArtifactFamilies)
    if (!excluded || *excluded != a) families.push_back(a);
  const std::size_t per_round = 1 + families.size();
  const std::size_t per_identity = per_round * config.samples_per_identity;
  std::vector<ForgerySample> out(identities.size() * per_identity);
  parallel_for(identities.size(), [&](std::size_t i) {
    const std::uint64_t id = identities[i];
    const Tensor base = generate_base(id, config.seed, config.image_size);
    for (std::size_t round = 0; round < config.samples_per_identity; ++round) {
      std::size_t slot = i * per_identity + round * per_round;
      out[slot++] = ForgerySample{base, 0, 0, id, Artifact::kNone};
      for (Artifact a : families) out[slot++] = make_fake(config, id, round, a, base);
    }
  });
  return out;
}

/// Identity-disjoint train/test corpus. A held-out family is absent from
/// train and present in test.
inline Corpus generate_split(const DatasetConfig& config) {
  config.validate();
  IdentityPartition ids = partition_identities(config);
  Corpus corpus;
  corpus.train = generate_samples(config, ids.train, config.holdout_artifact);
  corpus.test = generate_samples(config, ids.test, std::nullopt);
  corpus.train_balance = class_balance(corpus.train);
  corpus.test_balance = class_balance(corpus.test);
  return corpus;
}

// ---------------------------------------------------------------------------
// Corpus files: JSON header, then n packed images, then an n x 4 label table
// (identity, artifact, y, type_label), all little-endian float64.

inline void save_split(const std::filesystem::path& path, const std::string& split, const DatasetConfig& config,
                       const std::vector<ForgerySample>& samples) {
  const std::size_t s = config.image_size, per = 3 * s * s;
  json header{{"format", "dff-corpus"},
              {"version", 1},
              {"split", split},
              {"config", config},
              {"num_samples", samples.size()},
              {"num_classes", config.num_classes()},
              {"image_shape", {3, s, s}},
              {"label_columns", {"identity", "artifact", "y", "type_label"}}};
  std::vector<double> payload;
  payload.reserve(samples.size() * (per + 4));
  for (const ForgerySample& smp : samples) {
    if (smp.image.size() != per) throw DimensionError("save_split: image size does not match config");
    payload.insert(payload.end(), smp.image.values().begin(), smp.image.values().end());
  }
  for (const ForgerySample& smp : samples) {
    payload.push_back(static_cast<double>(smp.identity));
    payload.push_back(static_cast<double>(smp.artifact));
    payload.push_back(smp.y);
    payload.push_back(smp.type_label);
  }
  write_blob(path, header, payload);
}

struct LoadedSplit {
  json config;  // echo as written
  std::string split;
  std::size_t num_classes = 0;
  std::vector<ForgerySample> samples;
};

inline LoadedSplit load_split(const std::filesystem::path& path) {
  Blob blob = read_blob(path);
  if (blob.header.value("format", "") != "dff-corpus") throw IoError(path.string() + " is not a corpus file");
  LoadedSplit out;
  out.config = blob.header.at("config");
  out.split = blob.header.value("split", "");
  out.num_classes = blob.header.at("num_classes").get<std::size_t>();
  const auto shape = blob.header.at("image_shape").get<Shape>();
  const std::size_t n = blob.header.at("num_samples").get<std::size_t>();
  const std::size_t per = shape_size(shape);
  if (blob.payload.size() != n * (per + 4)) throw IoError("corpus payload size mismatch in " + path.string());
  out.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* label = blob.payload.data() + n * per + i * 4;
    std::vector<double> px(blob.payload.begin() + static_cast<std::ptrdiff_t>(i * per),
                           blob.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    out.samples.push_back(ForgerySample{Tensor(shape, std::move(px)), static_cast<int>(label[2]), static_cast<int>(label[3]),
                                        static_cast<std::uint64_t>(label[0]), static_cast<Artifact>(static_cast<int>(label[1]))});
  }
  return out;
}

inline void save_manifest(const std::filesystem::path& path, const std::vector<ForgerySample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "index,identity,artifact,y,type_label\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ForgerySample& s = samples[i];
    out << i << ',' << s.identity << ',' << artifact_name(s.artifact) << ',' << s.y << ',' << s.type_label << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace dff
