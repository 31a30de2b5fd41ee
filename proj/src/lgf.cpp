#include "lgaf/lgf.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "lgaf/ops.hpp"

namespace lgaf {

template <typename T>
std::vector<double> feature_quality(const Tensor<T>& f) {
  if (f.rank() != 2) throw ShapeError("feature_quality: expected [N,D], got " + shape_str(f.shape()));
  const auto n = f.dim(0), d = f.dim(1);
  auto x = f.data();
  std::vector<double> z(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double v = x[static_cast<std::size_t>(i * d + j)];
      s += v * v;
    }
    z[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  return z;
}

double normalize_quality(double z, double mu, double sigma, double h, double eps) {
  if (sigma < 0.0) throw std::invalid_argument("normalize_quality: sigma must be >= 0");
  return std::clamp(h * (z - mu) / (sigma + eps), -1.0, 1.0) + 1.0;
}

std::vector<double> normalize_quality(std::span<const double> z, double mu, double sigma, double h, double eps) {
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = normalize_quality(z[i], mu, sigma, h, eps);
  return out;
}

std::pair<double, double> batch_statistics(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("batch_statistics: empty batch");
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= static_cast<double>(z.size());
  return {mean, std::sqrt(var)};
}

void update_ema(FusionState& state, double batch_mu, double batch_sigma, Branch branch) {
  if (state.mode != Mode::train) throw std::logic_error("update_ema: fusion state is in eval mode");
  BranchStats& s = state.stats(branch);
  s.mean = state.alpha * batch_mu + (1.0 - state.alpha) * s.mean;
  s.stddev = state.alpha * batch_sigma + (1.0 - state.alpha) * s.stddev;
  ++s.updates;
}

std::pair<std::vector<double>, std::vector<double>> fusion_attention(std::span<const double> zhat_local,
                                                                     std::span<const double> zhat_global,
                                                                     double eps) {
  if (zhat_local.size() != zhat_global.size()) {
    throw ShapeError("fusion_attention: " + std::to_string(zhat_local.size()) + " local vs " +
                     std::to_string(zhat_global.size()) + " global qualities");
  }
  std::vector<double> gl(zhat_local.size()), gg(zhat_local.size());
  for (std::size_t i = 0; i < zhat_local.size(); ++i) {
    const double denom = zhat_local[i] + zhat_global[i];
    if (denom < eps) {
      gl[i] = gg[i] = 0.5;
    } else {
      gl[i] = zhat_local[i] / denom;
      gg[i] = 1.0 - gl[i];
    }
  }
  return {std::move(gl), std::move(gg)};
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& f_local, const Tensor<T>& f_global, std::span<const double> gamma_local,
               std::span<const double> gamma_global) {
  if (f_local.shape() != f_global.shape()) {
    throw ShapeError("fuse: f_local " + shape_str(f_local.shape()) + " vs f_global " + shape_str(f_global.shape()));
  }
  const auto n = static_cast<std::size_t>(f_local.dim(0));
  if (gamma_local.size() != n || gamma_global.size() != n) {
    throw ShapeError("fuse: dim 0 is " + std::to_string(n) + " but gamma has " + std::to_string(gamma_local.size()) +
                     "/" + std::to_string(gamma_global.size()) + " entries");
  }
  std::vector<T> gl(gamma_local.begin(), gamma_local.end());
  std::vector<T> gg(gamma_global.begin(), gamma_global.end());
  Shape s{static_cast<std::int64_t>(n)};
  return add(row_scale(f_local, Tensor<T>(s, std::move(gl))), row_scale(f_global, Tensor<T>(s, std::move(gg))));
}

template <typename T>
EmbeddingBundle<T> lgf_forward(const Tensor<T>& f_local, const Tensor<T>& f_global, FusionState& state) {
  if (f_local.shape() != f_global.shape()) {
    throw ShapeError("lgf: f_local " + shape_str(f_local.shape()) + " vs f_global " + shape_str(f_global.shape()));
  }
  EmbeddingBundle<T> b;
  b.f_local = f_local;
  b.f_global = f_global;
  b.z_local = feature_quality(f_local);
  b.z_global = feature_quality(f_global);
  if (state.mode == Mode::train) {
    if (b.z_local.size() < 2) throw std::invalid_argument("lgf: train mode needs a batch of at least 2");
    auto [mu_l, sd_l] = batch_statistics(b.z_local);
    auto [mu_g, sd_g] = batch_statistics(b.z_global);
    b.zhat_local = normalize_quality(b.z_local, mu_l, sd_l, state.h, state.eps);
    b.zhat_global = normalize_quality(b.z_global, mu_g, sd_g, state.h, state.eps);
    update_ema(state, mu_l, sd_l, Branch::local);
    update_ema(state, mu_g, sd_g, Branch::global);
    ++state.step;
  } else {
    b.zhat_local = normalize_quality(b.z_local, state.local.mean, state.local.stddev, state.h, state.eps);
    b.zhat_global = normalize_quality(b.z_global, state.global.mean, state.global.stddev, state.h, state.eps);
  }
  std::tie(b.gamma_local, b.gamma_global) = fusion_attention(b.zhat_local, b.zhat_global, state.eps);
  b.kappa = fuse(f_local, f_global, b.gamma_local, b.gamma_global);
  return b;
}

#define LGAF_INSTANTIATE(T)                                                                              \
  template std::vector<double> feature_quality(const Tensor<T>&);                                        \
  template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&, std::span<const double>,                   \
                          std::span<const double>);                                                      \
  template EmbeddingBundle<T> lgf_forward(const Tensor<T>&, const Tensor<T>&, FusionState&);

LGAF_INSTANTIATE(float)
LGAF_INSTANTIATE(double)

}  // namespace lgaf
