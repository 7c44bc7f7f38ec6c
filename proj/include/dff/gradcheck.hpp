// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dff/tensor.hpp"

namespace dff {

/// A flat coordinate inside one of the checked parameter tensors.
struct Coordinate {
  std::size_t tensor = 0;
  std::size_t index = 0;
};

struct CoordinateCheck {
  Coordinate where;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<CoordinateCheck> coordinates;
  double max_rel_error = 0.0;
  std::size_t worst = 0;  // index into coordinates
  bool passed = true;
};

/// Scalar objective split into a value-only evaluation and a gradient pass
/// that accumulates d(value)/d(param) into the parameters' grad buffers.
struct Objective {
  std::function<double()> value;
  std::function<void()> accumulate_gradient;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Central differences vs the tape gradient over `coords` (all coordinates
/// of all params when empty).
inline GradCheckReport finite_diff_check(const Objective& f, std::span<Tensor> params, double eps, double tol,
                                         std::vector<Coordinate> coords = {}) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  if (coords.empty()) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) coords.push_back({t, i});
  }
  for (Tensor& p : params) p.zero_grad();
  f.accumulate_gradient();

  GradCheckReport report;
  report.coordinates.reserve(coords.size());
  for (const Coordinate& c : coords) {
    Tensor& p = params[c.tensor];
    const double analytic = p.has_grad() ? p.grad()[c.index] : 0.0;
    double& slot = p.mutable_values()[c.index];
    const double saved = slot;
    slot = saved + eps;
    const double up = f.value();
    slot = saved - eps;
    const double down = f.value();
    slot = saved;
    const double numeric = (up - down) / (2.0 * eps);
    CoordinateCheck check{c, analytic, numeric, relative_error(analytic, numeric)};
    if (report.coordinates.empty() || check.rel_error > report.max_rel_error) {
      report.max_rel_error = check.rel_error;
      report.worst = report.coordinates.size();
    }
    report.coordinates.push_back(check);
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

/// Convenience form: `loss` builds a scalar on the given tape.
inline GradCheckReport finite_diff_check(const std::function<Tensor(Tape&)>& loss, std::span<Tensor> params,
                                         double eps, double tol, std::vector<Coordinate> coords = {}) {
  Objective f{
      [&] {
        Tape tape(Tape::Mode::kInference);
        return loss(tape).item();
      },
      [&] {
        Tape tape;
        Tensor l = loss(tape);
        tape.backward(l);
      },
  };
  return finite_diff_check(f, params, eps, tol, std::move(coords));
}

}  // namespace dff
