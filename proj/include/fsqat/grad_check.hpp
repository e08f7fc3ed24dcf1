#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "fsqat/autodiff.hpp"

namespace fsqat {

struct NamedMatrix {
  std::string name;
  Matrix value;
};

/// Builds a scalar loss on `tape` from leaves created in the order of the
/// checked point. The builder must be a pure function of the leaf values.
using LossBuilder = std::function<Var(Tape& tape, std::span<const Var> leaves)>;

struct GradCheckOptions {
  // Ridders' extrapolation is run from each initial step, shrinking by
  // step_shrink for up to `extrapolation_depth` rounds; the estimate with the
  // smallest error bound is kept.
  std::vector<double> steps = {1e-2, 1e-3};
  double step_shrink = 1.4;
  std::size_t extrapolation_depth = 10;
  double tolerance = 1e-6;
  // Gradients smaller than this are compared on an absolute scale of this size.
  double magnitude_floor = 1e-4;
  // Test hook: mutate analytic gradients before comparison.
  std::function<void(std::string_view block, Matrix& grad)> tamper;
};

struct GradCheckBlock {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
  std::vector<std::string> problems;

  const GradCheckBlock* worst() const {
    const GradCheckBlock* w = nullptr;
    for (const auto& b : blocks)
      if (!w || b.max_rel_error > w->max_rel_error || !b.finite) w = &b;
    return w;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline double eval_loss(const LossBuilder& f, const std::vector<NamedMatrix>& point) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(point.size());
  for (const auto& p : point) leaves.push_back(tape.leaf(p.value));
  Var loss = f(tape, leaves);
  const Matrix& v = tape.value(loss);
  if (v.rows != 1 || v.cols != 1) throw ShapeError("grad_check: loss must be 1x1, got " + v.shape());
  return v.data[0];
}

/// Ridders' polynomial extrapolation of central differences towards h = 0;
/// returns the tableau entry with the smallest error estimate and that estimate.
template <typename Central>
std::pair<double, double> ridders(Central&& central, double h, double shrink, std::size_t depth) {
  const double shrink2 = shrink * shrink;
  std::vector<std::vector<double>> a(depth, std::vector<double>(depth));
  a[0][0] = central(h);
  double best = a[0][0];
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < depth; ++i) {
    h /= shrink;
    a[0][i] = central(h);
    double fac = shrink2;
    for (std::size_t j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= shrink2;
      const double err = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (err <= best_err) {
        best_err = err;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= 2.0 * best_err) break;
  }
  return {best, best_err};
}

}  // namespace detail

/// Compares reverse-mode gradients against finite differences at `point`.
inline GradCheckReport grad_check(const LossBuilder& f, std::vector<NamedMatrix> point, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;

  std::vector<Matrix> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : point) leaves.push_back(tape.leaf(p.value));
    Var loss = f(tape, leaves);
    if (!std::isfinite(tape.value(loss).data.at(0))) {
      report.passed = false;
      report.problems.push_back("loss is not finite at the checked point");
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < point.size(); ++i) {
      analytic.push_back(tape.grad(leaves[i]));
      if (opt.tamper) opt.tamper(point[i].name, analytic.back());
    }
  }

  for (std::size_t b = 0; b < point.size(); ++b) {
    GradCheckBlock blk;
    blk.name = point[b].name;
    Matrix& x = point[b].value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x.data[i];
      bool finite = true;
      auto central = [&](double h) {
        x.data[i] = orig + h;
        const double up = detail::eval_loss(f, point);
        x.data[i] = orig - h;
        const double down = detail::eval_loss(f, point);
        x.data[i] = orig;
        finite = finite && std::isfinite(up) && std::isfinite(down);
        return (up - down) / (2.0 * h);
      };
      double numeric = 0.0;
      double bound = std::numeric_limits<double>::infinity();
      for (double h : opt.steps) {
        const auto [est, err] = detail::ridders(central, h, opt.step_shrink, opt.extrapolation_depth);
        if (err < bound) {
          numeric = est;
          bound = err;
        }
      }
      const double a = analytic[b].data[i];
      if (!finite || !std::isfinite(a)) {
        if (blk.finite)
          report.problems.push_back(blk.name + "[" + std::to_string(i) + "]: non-finite evaluation");
        blk.finite = false;
        blk.worst_index = i;
        continue;
      }
      const double err = relative_error(a, numeric, opt.magnitude_floor);
      if (i == 0 || err > blk.max_rel_error) {
        blk.max_rel_error = err;
        blk.worst_index = i;
        blk.analytic = a;
        blk.numeric = numeric;
      }
    }
    if (!blk.finite) {
      report.passed = false;
      blk.max_rel_error = std::numeric_limits<double>::infinity();
    }
    report.max_rel_error = std::max(report.max_rel_error, blk.max_rel_error);
    report.blocks.push_back(std::move(blk));
  }
  if (!(report.max_rel_error < opt.tolerance)) report.passed = false;
  return report;
}

}  // namespace fsqat
