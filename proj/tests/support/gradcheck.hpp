#pragma once

// Test-only gradient oracle: central finite differences over a flat
// parameter vector, compared against one tape backward sweep. Kept
// independent of the backward rules it checks; only the forward pass is
// shared, which is what a derivative check differentiates.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "autransfer/rng.hpp"
#include "autransfer/tensor.hpp"

namespace testsupport {

struct BuiltOp {
  std::vector<autransfer::Tensor> inputs;  // leaves, built from the flat vector in order
  autransfer::Tensor output;
};

using Builder = std::function<BuiltOp(autransfer::Tape&, std::span<const double>)>;

inline std::vector<double> central_differences(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double step) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = f(x);
    x[i] = saved - step;
    const double lo = f(x);
    x[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

// relative error with an absolute floor of 1, so near-zero pairs do not
// blow the ratio up
inline bool close_rel(double analytic, double numeric, double tol) {
  const double scale = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) <= tol * scale;
}

struct GradCheckResult {
  bool ok = true;
  double max_rel_error = 0.0;
  std::string failure;
};

// One randomized check: draw a flat point and a projection, compare the
// backward-sweep gradient of <projection, output> against central
// differences coordinate by coordinate.
inline GradCheckResult check_gradient_once(const Builder& builder, std::size_t flat_size,
                                           autransfer::Rng& rng, double tol = 1e-4,
                                           double lo = -2.0, double hi = 2.0,
                                           double kink_guard = 0.0, double step = 1e-5) {
  std::vector<double> flat(flat_size);
  for (double& v : flat) {
    do {
      v = rng.uniform(lo, hi);
    } while (kink_guard > 0.0 && std::fabs(v) < kink_guard);
  }

  autransfer::Tape probe_tape;
  BuiltOp probe = builder(probe_tape, flat);
  std::vector<double> coeffs(probe.output.size());
  for (double& c : coeffs) c = rng.uniform(-1.0, 1.0);

  const auto value_of = [&](const std::vector<double>& point) {
    autransfer::Tape tape;
    BuiltOp built = builder(tape, point);
    auto out = built.output.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += coeffs[i] * out[i];
    return acc;
  };

  const std::vector<double> numeric = central_differences(value_of, flat, step);

  autransfer::Tape tape;
  BuiltOp built = builder(tape, flat);
  autransfer::Tensor coeff_tensor(built.output.shape(), coeffs);
  autransfer::Tensor loss = autransfer::sum(tape, autransfer::mul(tape, built.output, coeff_tensor));
  autransfer::backward(tape, loss);

  std::vector<double> analytic;
  analytic.reserve(flat_size);
  for (auto& input : built.inputs) {
    auto g = input.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < flat_size; ++i) {
    const double scale = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric[i])});
    const double rel = std::fabs(analytic[i] - numeric[i]) / scale;
    result.max_rel_error = std::max(result.max_rel_error, rel);
    if (rel > tol) {
      result.ok = false;
      result.failure = "coordinate " + std::to_string(i) + ": analytic " +
                       std::to_string(analytic[i]) + " vs numeric " + std::to_string(numeric[i]);
      return result;
    }
  }
  return result;
}

inline GradCheckResult check_gradient(const Builder& builder, std::size_t flat_size, int points,
                                      std::uint64_t seed, double tol = 1e-4, double lo = -2.0,
                                      double hi = 2.0, double kink_guard = 0.0) {
  autransfer::Rng rng(seed);
  GradCheckResult worst;
  for (int p = 0; p < points; ++p) {
    GradCheckResult r = check_gradient_once(builder, flat_size, rng, tol, lo, hi, kink_guard);
    worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
    if (!r.ok) {
      worst.ok = false;
      worst.failure = "point " + std::to_string(p) + ", " + r.failure;
      return worst;
    }
  }
  return worst;
}

}  // namespace testsupport
