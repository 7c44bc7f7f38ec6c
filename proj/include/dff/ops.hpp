// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dff/tensor.hpp"

namespace dff {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

/// Wrap freshly computed values; record on the tape when any input needs a gradient.
template <class Backward>
Tensor emit(Tape& tape, const char* name, Shape shape, Buffer values, std::vector<Tensor> inputs,
            Backward&& backward) {
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  Tensor out(std::move(shape), std::move(values), needs && tape.recording());
  if (out.requires_grad()) tape.record(name, out, std::move(inputs), std::forward<Backward>(backward));
  return out;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

/// a[m x k] * b[k x n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Buffer out(m * n);
  detail::as_matrix(std::span<double>(out), m, n).noalias() =
      detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
  return detail::emit(tape, "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TapeNode& node) {
    auto dc = detail::as_matrix(node.output.grad(), m, n);
    Tensor& a = node.inputs[0];
    Tensor& b = node.inputs[1];
    if (a.requires_grad()) detail::as_matrix(a.mutable_grad(), m, k).noalias() += dc * detail::as_matrix(b.values(), k, n).transpose();
    if (b.requires_grad()) detail::as_matrix(b.mutable_grad(), k, n).noalias() += detail::as_matrix(a.values(), m, k).transpose() * dc;
  });
}

/// x[m x k] * w[k x n] + bias[n] (bias broadcast over rows; may be undefined).
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: inner extents differ, " + to_string(x.shape()) + " x " + to_string(w.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{n}) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " does not match output width " + std::to_string(n));
  }
  Buffer out(m * n);
  auto y = detail::as_matrix(std::span<double>(out), m, n);
  y.noalias() = detail::as_matrix(x.values(), m, k) * detail::as_matrix(w.values(), k, n);
  if (bias.defined()) y.rowwise() += detail::as_matrix(bias.values(), 1, n).row(0);
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::emit(tape, "linear", {m, n}, std::move(out), std::move(inputs), [m, k, n](TapeNode& node) {
    auto dy = detail::as_matrix(node.output.grad(), m, n);
    Tensor& x = node.inputs[0];
    Tensor& w = node.inputs[1];
    if (x.requires_grad()) detail::as_matrix(x.mutable_grad(), m, k).noalias() += dy * detail::as_matrix(w.values(), k, n).transpose();
    if (w.requires_grad()) detail::as_matrix(w.mutable_grad(), k, n).noalias() += detail::as_matrix(x.values(), m, k).transpose() * dy;
    if (node.inputs.size() > 2 && node.inputs[2].requires_grad()) {
      detail::as_matrix(node.inputs[2].mutable_grad(), 1, n) += dy.colwise().sum();
    }
  });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::emit(tape, "add", a.shape(), std::move(out), {a, b}, [](TapeNode& node) {
    auto g = node.output.grad();
    for (Tensor& in : node.inputs) {
      if (!in.requires_grad()) continue;
      auto d = in.mutable_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

/// Same values under a new shape.
inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Buffer out(x.values().begin(), x.values().end());
  return detail::emit(tape, "reshape", std::move(shape), std::move(out), {x}, [](TapeNode& node) {
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

/// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::emit(tape, "mul", a.shape(), std::move(out), {a, b}, [](TapeNode& node) {
    auto g = node.output.grad();
    Tensor& a = node.inputs[0];
    Tensor& b = node.inputs[1];
    if (a.requires_grad()) {
      auto d = a.mutable_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto d = b.mutable_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * a[i];
    }
  });
}

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * x[i];
  return detail::emit(tape, "scale", x.shape(), std::move(out), {x}, [factor](TapeNode& node) {
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
  });
}

/// x * s[index], differentiable in both x and the selected entry of s.
inline Tensor mul_scalar(Tape& tape, const Tensor& x, const Tensor& s, std::size_t index) {
  if (index >= s.size()) throw DimensionError("mul_scalar: index " + std::to_string(index) + " outside " + to_string(s.shape()));
  const double c = s[index];
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return detail::emit(tape, "mul_scalar", x.shape(), std::move(out), {x, s}, [index](TapeNode& node) {
    auto g = node.output.grad();
    Tensor& x = node.inputs[0];
    Tensor& s = node.inputs[1];
    if (x.requires_grad()) {
      const double c = s[index];
      auto d = x.mutable_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += c * g[i];
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
      s.mutable_grad()[index] += acc;
    }
  });
}

/// Sum of all entries, as a rank-0 tensor.
inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return detail::emit(tape, "sum", {}, {acc}, {x}, [](TapeNode& node) {
    const double g = node.output.grad()[0];
    for (double& d : node.inputs[0].mutable_grad()) d += g;
  });
}

/// Softmax along `axis`, max-subtracted.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Buffer out(x.size());
  auto in = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t s = 0; s < inner; ++s) {
      const std::size_t base = o * len * inner + s;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  return detail::emit(tape, "softmax", x.shape(), std::move(out), {x}, [outer, inner, len](TapeNode& node) {
    auto y = node.output.values();
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t s = 0; s < inner; ++s) {
        const std::size_t base = o * len * inner + s;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = base + j * inner;
          d[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

/// Row-wise layer normalization with affine gain/bias.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match width " + std::to_string(d));
  }
  Buffer out(x.size());
  Buffer xhat(x.size());
  Buffer inv_std(rows);
  auto in = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return detail::emit(
      tape, "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TapeNode& node) {
        auto g = node.output.grad();
        Tensor& x = node.inputs[0];
        Tensor& gain = node.inputs[1];
        Tensor& bias = node.inputs[2];
        if (gain.requires_grad()) {
          auto dg = gain.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (bias.requires_grad()) {
          auto db = bias.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
        }
        if (x.requires_grad()) {
          auto dx = x.mutable_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gain[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[r * d + j];
            }
            mean_gh *= inv_d;
            mean_ghx *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gain[j];
              dx[r * d + j] += inv_std[r] * (gh - mean_gh - xhat[r * d + j] * mean_ghx);
            }
          }
        }
      });
}

/// tanh-approximation GELU.
inline Tensor gelu(Tape& tape, const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Eigen::ArrayXd> v(x.values().data(), n);
  Buffer out(x.size());
  Buffer th(x.size());
  Eigen::Map<Eigen::ArrayXd> t(th.data(), n);
  // tanh(u) = 1 - 2 / (1 + exp(2u))
  t = 1.0 - 2.0 / (1.0 + (2.0 * kC * (v + kA * v * v * v)).exp());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = 0.5 * v * (1.0 + t);
  return detail::emit(tape, "gelu", x.shape(), std::move(out), {x}, [th = std::move(th)](TapeNode& node) {
    auto g = node.output.grad();
    Tensor& x = node.inputs[0];
    auto d = x.mutable_grad();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = x[i];
      const double t = th[i];
      const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_columns(Tape& tape, const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_columns");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (begin >= end || end > cols) {
    throw DimensionError("slice_columns: [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                         to_string(x.shape()));
  }
  const std::size_t w = end - begin;
  Buffer out(rows * w);
  auto in = x.values();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(in.data() + r * cols + begin, w, out.data() + r * w);
  return detail::emit(tape, "slice_columns", {rows, w}, std::move(out), {x}, [rows, cols, begin, w](TapeNode& node) {
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) d[r * cols + begin + j] += g[r * w + j];
  });
}

/// Split the channel (column) axis into h equal slices; slice k holds
/// channels [k*d/h, (k+1)*d/h).
inline std::vector<Tensor> channel_split(Tape& tape, const Tensor& x, std::size_t h) {
  detail::require_rank(x, 2, "channel_split");
  const std::size_t d = x.dim(1);
  if (h == 0 || d % h != 0) {
    throw ConfigError("channel_split: " + std::to_string(h) + " heads do not divide width " + std::to_string(d));
  }
  const std::size_t w = d / h;
  std::vector<Tensor> parts;
  parts.reserve(h);
  for (std::size_t k = 0; k < h; ++k) parts.push_back(slice_columns(tape, x, k * w, (k + 1) * w));
  return parts;
}

/// Concatenate matrices with equal row counts along the column axis.
inline Tensor concat_columns(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_columns: nothing to concatenate");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_columns");
    if (p.dim(0) != rows) throw DimensionError("concat_columns: row counts differ");
    cols += p.dim(1);
  }
  Buffer out(rows * cols);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.dim(1);
    auto in = p.values();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(in.data() + r * w, w, out.data() + r * cols + offset);
    offset += w;
  }
  return detail::emit(tape, "concat_columns", {rows, cols}, std::move(out), parts, [rows, cols](TapeNode& node) {
    auto g = node.output.grad();
    std::size_t offset = 0;
    for (Tensor& p : node.inputs) {
      const std::size_t w = p.dim(1);
      if (p.requires_grad()) {
        auto d = p.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) d[r * w + j] += g[r * cols + offset + j];
      }
      offset += w;
    }
  });
}

/// Entries of a flat tensor at `indices`, as a vector.
inline Tensor gather(Tape& tape, const Tensor& x, std::vector<std::size_t> indices) {
  Buffer out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw DimensionError("gather: index out of range");
    out[i] = x[indices[i]];
  }
  const std::size_t n = indices.size();
  return detail::emit(tape, "gather", {n}, std::move(out), {x}, [indices = std::move(indices)](TapeNode& node) {
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t i = 0; i < indices.size(); ++i) d[indices[i]] += g[i];
  });
}

/// Rows of a matrix at `rows`.
inline Tensor gather_rows(Tape& tape, const Tensor& x, std::vector<std::size_t> rows) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t cols = x.dim(1);
  Buffer out(rows.size() * cols);
  auto in = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.dim(0)) throw DimensionError("gather_rows: row out of range");
    std::copy_n(in.data() + rows[i] * cols, cols, out.data() + i * cols);
  }
  const std::size_t n = rows.size();
  return detail::emit(tape, "gather_rows", {n, cols}, std::move(out), {x}, [rows = std::move(rows), cols](TapeNode& node) {
    auto g = node.output.grad();
    auto d = node.inputs[0].mutable_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) d[rows[i] * cols + j] += g[i * cols + j];
  });
}

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences of `tokens` rows each. q, k, v are (batch*tokens) x d.
inline Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                        std::size_t tokens, std::size_t heads) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  detail::require_rank(q, 2, "attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * tokens) throw DimensionError("attention: rows != batch * tokens");
  if (heads == 0 || d % heads != 0) throw ConfigError("attention: heads must divide width");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  using Stride = Eigen::OuterStride<>;
  using ConstBlock = Eigen::Map<const detail::RowMatrix, 0, Stride>;
  using Block = Eigen::Map<detail::RowMatrix, 0, Stride>;
  const auto T = static_cast<Eigen::Index>(tokens), W = static_cast<Eigen::Index>(dh);
  const Stride stride(static_cast<Eigen::Index>(d));
  Buffer probs(batch * heads * tokens * tokens);
  Buffer out(q.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = b * tokens * d + h * dh;
      ConstBlock Q(q.values().data() + base, T, W, stride);
      ConstBlock K(k.values().data() + base, T, W, stride);
      ConstBlock V(v.values().data() + base, T, W, stride);
      detail::MutMap P(probs.data() + (b * heads + h) * tokens * tokens, T, T);
      P.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
      Block(out.data() + base, T, W, stride).noalias() = P * V;
    }
  }
  return detail::emit(
      tape, "attention", q.shape(), std::move(out), {q, k, v},
      [batch, tokens, heads, d, dh, inv_sqrt, probs = std::move(probs)](TapeNode& node) {
        using Stride = Eigen::OuterStride<>;
        using ConstBlock = Eigen::Map<const detail::RowMatrix, 0, Stride>;
        using Block = Eigen::Map<detail::RowMatrix, 0, Stride>;
        const auto T = static_cast<Eigen::Index>(tokens), W = static_cast<Eigen::Index>(dh);
        const Stride stride(static_cast<Eigen::Index>(d));
        Tensor& q = node.inputs[0];
        Tensor& k = node.inputs[1];
        Tensor& v = node.inputs[2];
        double* dQ = q.requires_grad() ? q.mutable_grad().data() : nullptr;
        double* dK = k.requires_grad() ? k.mutable_grad().data() : nullptr;
        double* dV = v.requires_grad() ? v.mutable_grad().data() : nullptr;
        detail::RowMatrix dS(T, T);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = b * tokens * d + h * dh;
            ConstBlock G(node.output.grad().data() + base, T, W, stride);
            ConstBlock Q(q.values().data() + base, T, W, stride);
            ConstBlock K(k.values().data() + base, T, W, stride);
            ConstBlock V(v.values().data() + base, T, W, stride);
            detail::ConstMap P(probs.data() + (b * heads + h) * tokens * tokens, T, T);
            if (dV) Block(dV + base, T, W, stride).noalias() += P.transpose() * G;
            if (!dQ && !dK) continue;
            dS.noalias() = G * V.transpose();
            for (Eigen::Index i = 0; i < T; ++i) {
              const double dot = dS.row(i).dot(P.row(i));
              dS.row(i) = P.row(i).cwiseProduct((dS.row(i).array() - dot).matrix()) * inv_sqrt;
            }
            if (dQ) Block(dQ + base, T, W, stride).noalias() += dS * K;
            if (dK) Block(dK + base, T, W, stride).noalias() += dS.transpose() * Q;
          }
        }
      });
}

/// (x * down) * up: one LoRA expert applied to row features. With
/// `negate_backward` the recorded backward rule is sign-flipped; it exists
/// only as a negative control for gradient verification.
inline Tensor low_rank_product(Tape& tape, const Tensor& x, const Tensor& down, const Tensor& up,
                               bool negate_backward = false) {
  detail::require_rank(x, 2, "low_rank_product");
  detail::require_rank(down, 2, "low_rank_product");
  detail::require_rank(up, 2, "low_rank_product");
  const std::size_t m = x.dim(0), din = x.dim(1), r = down.dim(1), dout = up.dim(1);
  if (down.dim(0) != din || up.dim(0) != r) {
    throw DimensionError("low_rank_product: " + to_string(x.shape()) + " x " + to_string(down.shape()) + " x " +
                         to_string(up.shape()));
  }
  Buffer mid(m * r);
  detail::as_matrix(std::span<double>(mid), m, r).noalias() =
      detail::as_matrix(x.values(), m, din) * detail::as_matrix(down.values(), din, r);
  Buffer out(m * dout);
  detail::as_matrix(std::span<double>(out), m, dout).noalias() =
      detail::as_matrix(std::span<const double>(mid), m, r) * detail::as_matrix(up.values(), r, dout);
  const double sign = negate_backward ? -1.0 : 1.0;
  return detail::emit(tape, "low_rank_product", {m, dout}, std::move(out), {x, down, up},
                      [m, din, r, dout, sign, mid = std::move(mid)](TapeNode& node) {
                        auto dy = detail::as_matrix(node.output.grad(), m, dout);
                        Tensor& x = node.inputs[0];
                        Tensor& down = node.inputs[1];
                        Tensor& up = node.inputs[2];
                        auto upm = detail::as_matrix(up.values(), r, dout);
                        if (up.requires_grad()) {
                          detail::as_matrix(up.mutable_grad(), r, dout).noalias() +=
                              sign * (detail::as_matrix(std::span<const double>(mid), m, r).transpose() * dy);
                        }
                        if (!x.requires_grad() && !down.requires_grad()) return;
                        detail::RowMatrix dmid = sign * (dy * upm.transpose());
                        if (down.requires_grad()) {
                          detail::as_matrix(down.mutable_grad(), din, r).noalias() +=
                              detail::as_matrix(x.values(), m, din).transpose() * dmid;
                        }
                        if (x.requires_grad()) {
                          detail::as_matrix(x.mutable_grad(), m, din).noalias() +=
                              dmid * detail::as_matrix(down.values(), din, r).transpose();
                        }
                      });
}

/// down[p x r] * up[r x q]; with `negate_backward` the gradient rule is
/// sign-flipped (forward unchanged), a negative control for gradient checks.
inline Tensor expert_weight(Tape& tape, const Tensor& down, const Tensor& up, bool negate_backward = false) {
  detail::require_rank(down, 2, "expert_weight");
  detail::require_rank(up, 2, "expert_weight");
  const std::size_t p = down.dim(0), r = down.dim(1), q = up.dim(1);
  if (up.dim(0) != r) throw DimensionError("expert_weight: " + to_string(down.shape()) + " x " + to_string(up.shape()));
  Buffer out(p * q);
  detail::as_matrix(std::span<double>(out), p, q).noalias() =
      detail::as_matrix(down.values(), p, r) * detail::as_matrix(up.values(), r, q);
  const double sign = negate_backward ? -1.0 : 1.0;
  return detail::emit(tape, "expert_weight", {p, q}, std::move(out), {down, up}, [p, r, q, sign](TapeNode& node) {
    auto g = detail::as_matrix(node.output.grad(), p, q);
    Tensor& down = node.inputs[0];
    Tensor& up = node.inputs[1];
    if (down.requires_grad()) {
      detail::as_matrix(down.mutable_grad(), p, r).noalias() += sign * (g * detail::as_matrix(up.values(), r, q).transpose());
    }
    if (up.requires_grad()) {
      detail::as_matrix(up.mutable_grad(), r, q).noalias() += sign * (detail::as_matrix(down.values(), p, r).transpose() * g);
    }
  });
}

/// x[m x d] times the block-diagonal matrix diag(blocks[0], ..., blocks[h-1]),
/// each block square of width d/h. Undefined blocks are zero.
inline Tensor block_diag_matmul(Tape& tape, const Tensor& x, const std::vector<Tensor>& blocks) {
  detail::require_rank(x, 2, "block_diag_matmul");
  const std::size_t m = x.dim(0), d = x.dim(1), h = blocks.size();
  if (h == 0 || d % h != 0) throw ConfigError("block_diag_matmul: " + std::to_string(h) + " blocks do not divide width " + std::to_string(d));
  const std::size_t w = d / h;
  for (const Tensor& b : blocks) {
    if (b.defined() && b.shape() != Shape{w, w}) {
      throw DimensionError("block_diag_matmul: block " + to_string(b.shape()) + " for slice width " + std::to_string(w));
    }
  }
  Buffer out(m * d, 0.0);
  using Stride = Eigen::OuterStride<>;
  using ConstStrided = Eigen::Map<const detail::RowMatrix, 0, Stride>;
  using Strided = Eigen::Map<detail::RowMatrix, 0, Stride>;
  const auto mi = static_cast<Eigen::Index>(m), wi = static_cast<Eigen::Index>(w);
  const Stride stride(static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < h; ++k) {
    if (!blocks[k].defined()) continue;
    Strided(out.data() + k * w, mi, wi, stride).noalias() =
        ConstStrided(x.values().data() + k * w, mi, wi, stride) * detail::as_matrix(blocks[k].values(), w, w);
  }
  std::vector<Tensor> inputs{x};
  inputs.insert(inputs.end(), blocks.begin(), blocks.end());
  return detail::emit(tape, "block_diag_matmul", {m, d}, std::move(out), std::move(inputs), [m, d, h, w](TapeNode& node) {
    using Stride = Eigen::OuterStride<>;
    using ConstStrided = Eigen::Map<const detail::RowMatrix, 0, Stride>;
    using Strided = Eigen::Map<detail::RowMatrix, 0, Stride>;
    const auto mi = static_cast<Eigen::Index>(m), wi = static_cast<Eigen::Index>(w);
    const Stride stride(static_cast<Eigen::Index>(d));
    const double* g = node.output.grad().data();
    Tensor& x = node.inputs[0];
    for (std::size_t k = 0; k < h; ++k) {
      Tensor& b = node.inputs[1 + k];
      if (!b.defined()) continue;
      ConstStrided gk(g + k * w, mi, wi, stride);
      if (b.requires_grad()) {
        detail::as_matrix(b.mutable_grad(), w, w).noalias() +=
            ConstStrided(x.values().data() + k * w, mi, wi, stride).transpose() * gk;
      }
      if (x.requires_grad()) {
        Strided(x.mutable_grad().data() + k * w, mi, wi, stride).noalias() +=
            gk * detail::as_matrix(b.values(), w, w).transpose();
      }
    }
  });
}

/// Mean binary cross-entropy on logits, stable form
/// max(z,0) - z*y + log(1 + exp(-|z|)).
inline Tensor bce_with_logits(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  if (logits.size() != labels.size() || labels.empty()) throw DimensionError("bce_with_logits: logits/labels length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw LabelError("bce_with_logits: label must be 0 or 1");
    const double z = logits[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const double n = static_cast<double>(labels.size());
  std::vector<int> y(labels.begin(), labels.end());
  return detail::emit(tape, "bce_with_logits", {}, {total / n}, {logits}, [y = std::move(y), n](TapeNode& node) {
    const double g = node.output.grad()[0] / n;
    Tensor& logits = node.inputs[0];
    auto d = logits.mutable_grad();
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double z = logits[i];
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      d[i] += g * (p - y[i]);
    }
  });
}

/// Mean softmax cross-entropy over rows of logits [n x C], log-sum-exp form.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n || n == 0) throw DimensionError("cross_entropy: logits/labels length mismatch");
  Buffer probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw LabelError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    const double* row = logits.values().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - mx);
    const double lse = mx + std::log(se);
    total += lse - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
  }
  std::vector<int> y(labels.begin(), labels.end());
  const double nn = static_cast<double>(n);
  return detail::emit(tape, "cross_entropy", {}, {total / nn}, {logits},
                      [y = std::move(y), probs = std::move(probs), c, nn](TapeNode& node) {
                        const double g = node.output.grad()[0] / nn;
                        auto d = node.inputs[0].mutable_grad();
                        for (std::size_t i = 0; i < y.size(); ++i) {
                          for (std::size_t j = 0; j < c; ++j) {
                            d[i * c + j] += g * (probs[i * c + j] - (static_cast<int>(j) == y[i] ? 1.0 : 0.0));
                          }
                        }
                      });
}

}  // namespace dff
