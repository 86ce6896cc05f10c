#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "egnlq/tensor.hpp"

// Finite-difference gradient checking. Runs in 64-bit mode: the checked
// function is evaluated on double tensors, the analytic gradient comes from
// the recorded backward pass, and central differences (h = 1e-5) probe a
// sample of coordinates of each input.

namespace egnlq {

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::vector<double> per_input_error;
  bool finite = true;

  bool ok(double tol) const { return finite && max_rel_error <= tol; }
};

// fn maps inputs to a single output tensor; the check reduces it to a scalar
// with fixed random weights so every output coordinate participates.
inline GradCheckReport grad_check(
    const std::string& name,
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, int probes_per_input = 16,
    std::uint64_t seed = 0x9e3779b97f4a7c15ULL) {
  constexpr double kStep = 1e-5;
  GradCheckReport report;
  report.op = name;
  report.per_input_error.assign(inputs.size(), 0.0);

  std::mt19937_64 rng(seed);

  Tensor<double> out0 = fn(inputs);
  if (!out0.all_finite()) {
    report.finite = false;
    return report;
  }
  std::vector<double> weights(out0.numel());
  std::uniform_real_distribution<double> wd(0.25, 1.0);
  for (auto& w : weights) w = wd(rng);

  auto reduce = [&](const Tensor<double>& o) {
    double s = 0;
    for (std::size_t i = 0; i < o.numel(); ++i) s += weights[i] * o.values()[i];
    return s;
  };

  // analytic pass
  for (auto& in : inputs) in.zero_grad();
  Tensor<double> out = fn(inputs);
  Tensor<double> loss = Tensor<double>::scalar(0.0);
  {
    // scalar reduction with the fixed weights, recorded on the tape
    loss = Tensor<double>::scalar(reduce(out));
    std::vector<double> w = weights;
    loss.set_node({out}, [w](Tensor<double>& l) {
      auto& po = l.node()->parents[0];
      if (!po.requires_grad()) return;
      for (std::size_t i = 0; i < po.numel(); ++i) po.grad()[i] += l.grad()[0] * w[i];
    });
  }
  loss.backward();

  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    auto& in = inputs[ii];
    if (!in.requires_grad()) continue;
    const std::size_t n = in.numel();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const int probes = std::min<std::size_t>(probes_per_input, n);
    std::vector<std::size_t> coords;
    if (static_cast<std::size_t>(probes) == n) {
      for (std::size_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int p = 0; p < probes; ++p) coords.push_back(pick(rng));
    }
    for (std::size_t c : coords) {
      NoGradGuard ng;
      const double orig = in.values()[c];
      in.values()[c] = orig + kStep;
      const double f_plus = reduce(fn(inputs));
      in.values()[c] = orig - kStep;
      const double f_minus = reduce(fn(inputs));
      in.values()[c] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        report.finite = false;
        return report;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * kStep);
      const double analytic = in.grad()[c];
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      report.per_input_error[ii] = std::max(report.per_input_error[ii], rel);
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  return report;
}

}  // namespace egnlq
