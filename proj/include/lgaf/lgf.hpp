#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lgaf/tensor.hpp"

namespace lgaf {

enum class Branch { local, global };

/// Running norm statistics of one branch.
struct BranchStats {
  double mean = 0.0;
  double stddev = 1.0;
  std::int64_t updates = 0;
};

/// EMA statistics used to turn feature norms into fusion weights. A fresh state
/// has mean 0 and stddev 1 for both branches.
struct FusionState {
  BranchStats local;
  BranchStats global;
  double alpha = 0.01;
  double h = 0.333;
  double eps = 1e-6;
  Mode mode = Mode::train;
  /// Training batches fused so far.
  std::int64_t step = 0;

  BranchStats& stats(Branch b) { return b == Branch::local ? local : global; }
  const BranchStats& stats(Branch b) const { return b == Branch::local ? local : global; }
};

/// Per-sample quantities of one fusion pass. The norm-derived vectors are
/// plain constants; only the feature tensors carry graph history.
template <typename T>
struct EmbeddingBundle {
  Tensor<T> f_local;
  Tensor<T> f_global;
  std::vector<double> z_local;
  std::vector<double> z_global;
  std::vector<double> zhat_local;
  std::vector<double> zhat_global;
  std::vector<double> gamma_local;
  std::vector<double> gamma_global;
  Tensor<T> kappa;
};

/// Per-row L2 norm of f, returned as constants (no gradient).
template <typename T>
std::vector<double> feature_quality(const Tensor<T>& f);

/// clip(h (z - mu) / (sigma + eps), -1, 1) + 1.
double normalize_quality(double z, double mu, double sigma, double h, double eps);
std::vector<double> normalize_quality(std::span<const double> z, double mu, double sigma, double h, double eps);

/// Mean and population standard deviation.
std::pair<double, double> batch_statistics(std::span<const double> z);

/// mu <- alpha * batch_mu + (1 - alpha) * mu, same for sigma. Throws
/// std::logic_error in eval mode.
void update_ema(FusionState& state, double batch_mu, double batch_sigma, Branch branch);

/// gamma_j = zhat_j / (zhat_l + zhat_g), or (0.5, 0.5) when the denominator is
/// below eps.
std::pair<std::vector<double>, std::vector<double>> fusion_attention(std::span<const double> zhat_local,
                                                                     std::span<const double> zhat_global,
                                                                     double eps);

/// kappa_i = gamma_l[i] f_local_i + gamma_g[i] f_global_i, gammas constant.
template <typename T>
Tensor<T> fuse(const Tensor<T>& f_local, const Tensor<T>& f_global, std::span<const double> gamma_local,
               std::span<const double> gamma_global);

/// Full fusion pass. Train mode normalizes with the current batch statistics
/// and then folds them into the EMA; eval mode uses the EMA and leaves the
/// state unchanged. kappa is not normalized.
template <typename T>
EmbeddingBundle<T> lgf_forward(const Tensor<T>& f_local, const Tensor<T>& f_global, FusionState& state);

}  // namespace lgaf
