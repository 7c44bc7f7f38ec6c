// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dff/dff.hpp"

namespace dff::test {

inline Tensor random_tensor(Shape shape, Pcg32& rng, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Central differences of f over every entry of p.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& p, double eps = 1e-6) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    double& slot = p.mutable_values()[i];
    const double saved = slot;
    slot = saved + eps;
    const double up = f();
    slot = saved - eps;
    const double down = f();
    slot = saved;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Checks every input gradient of `op` against central differences of
// sum(op(inputs) * R) for a fixed random R.
inline void expect_gradients_match(const std::function<Tensor(Tape&)>& op, std::vector<Tensor> inputs, std::uint64_t seed,
                                   double tol = 1e-6) {
  Pcg32 rng(seed);
  Tensor probe;
  {
    Tape t(Tape::Mode::kInference);
    probe = op(t);
  }
  const Tensor weights = random_tensor(probe.shape(), rng, 1.0, false);
  auto value = [&] {
    Tape t(Tape::Mode::kInference);
    const Tensor out = op(t);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
  };
  for (Tensor& in : inputs) in.zero_grad();
  Tape tape;
  Tensor loss = sum(tape, mul(tape, op(tape), weights));
  tape.backward(loss);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& in = inputs[k];
    const std::vector<double> numeric = numeric_grad(value, in);
    std::vector<double> analytic(in.size(), 0.0);
    if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());
    double scale = 1.0;
    for (double g : numeric) scale = std::max(scale, std::abs(g));
    EXPECT_LT(max_abs_diff(analytic, numeric) / scale, tol) << "input " << k;
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Fresh scratch directory under the test binary's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path dir = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dff::test
