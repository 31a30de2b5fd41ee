#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "lgaf/tensor.hpp"

namespace lgaf {

struct GradCheckOptions {
  double eps = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded sample of this many per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// Inputs the function deliberately stops gradients through. Their analytic
  /// gradient must be exactly zero; they are reported but excluded from
  /// max_rel_error.
  std::vector<bool> expect_detached;
};

struct InputGradReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool detached = false;
  /// For detached inputs: analytic gradient is zero and the numeric one is not.
  bool detach_confirmed = false;
  double max_abs_numeric = 0.0;
  double max_abs_analytic = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<InputGradReport> inputs;
};

/// Compares the analytic gradient of a scalar-valued fn with central
/// differences (f(x+eps) - f(x-eps)) / (2 eps), perturbing the leaf tensors in
/// `inputs` in place. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           std::vector<Tensor<double>> inputs,
                           const GradCheckOptions& options = {});

}  // namespace lgaf
