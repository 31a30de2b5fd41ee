#pragma once

#include <set>
#include <string>
#include <vector>

namespace lgaf {

struct GradSuiteOptions {
  int seeds = 5;
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per parameter tensor in the pipeline checks.
  std::size_t pipeline_coords = 6;
  bool pipeline = true;
};

struct GradSuiteEntry {
  std::string name;
  bool pipeline = false;
  double max_rel_error = 0.0;
  int seeds = 0;
  bool passed = false;
  /// Ops recorded in the checked graphs.
  std::set<std::string> graph_ops;
};

struct GradSuiteReport {
  double tolerance = 0.0;
  std::vector<GradSuiteEntry> entries;

  bool passed() const;
  std::vector<std::string> failures() const;
};

/// Every op that records a backward node, in suite order.
const std::vector<std::string>& differentiable_ops();

/// Finite-difference check (float64) of each differentiable op on random
/// inputs over `seeds` seeds, then of the full backbone -> MHMS/GFE -> fusion
/// -> margin pipeline with the fusion weights frozen.
GradSuiteReport run_gradcheck_suite(const GradSuiteOptions& options = {});

}  // namespace lgaf
