#include "lgaf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lgaf/rng.hpp"

namespace lgaf {

GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           std::vector<Tensor<double>> inputs, const GradCheckOptions& options) {
  if (!options.expect_detached.empty() && options.expect_detached.size() != inputs.size()) {
    throw std::invalid_argument("grad_check: expect_detached must be empty or match inputs");
  }
  for (auto& t : inputs) {
    if (!t.is_leaf()) throw std::invalid_argument("grad_check: inputs must be leaf tensors");
    t.set_requires_grad(true);
    t.zero_grad();
  }

  Tensor<double> loss = fn();
  if (loss.numel() != 1) {
    throw ShapeError("grad_check: function must be scalar-valued, got shape " + shape_str(loss.shape()));
  }
  if (loss.requires_grad()) backward(loss);

  GradCheckReport report;
  RngStream rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& x = inputs[i];
    const auto n = static_cast<std::size_t>(x.numel());
    std::vector<double> analytic(n, 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input > 0 && options.max_coords_per_input < n) {
      // Partial Fisher-Yates shuffle for a seeded sample.
      for (std::size_t k = 0; k < options.max_coords_per_input; ++k) {
        std::size_t j = k + rng.below(n - k);
        std::swap(coords[k], coords[j]);
      }
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }

    InputGradReport r;
    r.detached = !options.expect_detached.empty() && options.expect_detached[i];
    auto data = x.mutable_data();
    for (std::size_t c : coords) {
      const double saved = data[c];
      double fp, fm;
      {
        NoGradGuard guard;
        data[c] = saved + options.eps;
        fp = fn().item();
        data[c] = saved - options.eps;
        fm = fn().item();
      }
      data[c] = saved;
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double a = analytic[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
      r.max_abs_numeric = std::max(r.max_abs_numeric, std::abs(numeric));
      r.max_abs_analytic = std::max(r.max_abs_analytic, std::abs(a));
      ++r.coords_checked;
    }
    if (r.detached) {
      bool all_zero = std::all_of(analytic.begin(), analytic.end(), [](double v) { return v == 0.0; });
      r.detach_confirmed = all_zero && r.max_abs_numeric > 0.0;
    } else {
      report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    }
    report.inputs.push_back(r);
  }
  return report;
}

}  // namespace lgaf
