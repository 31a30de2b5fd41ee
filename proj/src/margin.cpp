#include "lgaf/margin.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "lgaf/ops.hpp"

namespace lgaf {

using detail::Storage;

MarginKind parse_margin_kind(const std::string& name) {
  if (name == "none") return MarginKind::none;
  if (name == "cosface") return MarginKind::cosface;
  if (name == "arcface") return MarginKind::arcface;
  throw std::invalid_argument("unknown margin kind '" + name + "' (expected none, cosface or arcface)");
}

std::string to_string(MarginKind kind) {
  switch (kind) {
    case MarginKind::none: return "none";
    case MarginKind::cosface: return "cosface";
    case MarginKind::arcface: return "arcface";
  }
  return "none";
}

double default_margin(MarginKind kind) {
  switch (kind) {
    case MarginKind::cosface: return 0.4;
    case MarginKind::arcface: return 0.5;
    case MarginKind::none: return 0.0;
  }
  return 0.0;
}

namespace {

// cos(theta + m) - (cos(theta) - m sin m) as a function of theta.
double branch_gap(double theta, double m) { return std::cos(theta + m) - std::cos(theta) + m * std::sin(m); }

double clamp_cos(double c) { return std::min(1.0, std::max(-1.0, c)); }

}  // namespace

double arcface_threshold(double m) {
  const double pi = std::numbers::pi;
  const double standard = std::cos(pi - m);
  if (m <= 0.0 || m >= pi / 2) return standard;
  // The gap is negative at (pi - m)/2, its minimum, and positive at pi - m.
  double lo = (pi - m) / 2, hi = pi - m;
  if (!(branch_gap(lo, m) < 0.0 && branch_gap(hi, m) > 0.0)) return standard;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (branch_gap(mid, m) < 0.0) lo = mid; else hi = mid;
  }
  return std::cos(0.5 * (lo + hi));
}

double arcface_target_logit(double cos_theta, double s, double m) {
  thread_local double cached_m = std::numeric_limits<double>::quiet_NaN();
  thread_local double cached_threshold = 0.0;
  if (!(m == cached_m)) {
    cached_threshold = arcface_threshold(m);
    cached_m = m;
  }
  const double c = clamp_cos(cos_theta);
  if (c > cached_threshold) {
    const double sin_theta = std::sqrt(std::max(0.0, 1.0 - c * c));
    return s * (c * std::cos(m) - sin_theta * std::sin(m));
  }
  return s * (c - m * std::sin(m));
}

template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& kappa, const Tensor<T>& weight) {
  if (kappa.rank() != 2 || weight.rank() != 2 || kappa.dim(1) != weight.dim(0)) {
    throw ShapeError("cosine_logits: kappa " + shape_str(kappa.shape()) + " vs weight " +
                     shape_str(weight.shape()) + " (dim 1 of kappa must equal dim 0 of weight)");
  }
  return matmul(l2_normalize(kappa, 1), l2_normalize(weight, 0));
}

namespace {

void check_labels(const Shape& shape, std::span<const int> labels, const char* op) {
  if (shape.size() != 2 || static_cast<std::int64_t>(labels.size()) != shape[0]) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(shape));
  }
  for (int y : labels) {
    if (y < 0 || y >= shape[1]) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(shape[1]) + ")");
    }
  }
}

// Applies value(c) / slope(c) to the target entries and s * c elsewhere.
template <typename T, typename Value, typename Slope>
Tensor<T> target_transform(const char* op, const Tensor<T>& cos_theta, std::span<const int> labels, double s,
                           Value value, Slope slope) {
  check_labels(cos_theta.shape(), labels, op);
  const auto n = cos_theta.dim(0), k = cos_theta.dim(1);
  auto c = cos_theta.data();
  std::vector<T> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = static_cast<T>(s * static_cast<double>(c[i]));
  std::vector<int> y(labels.begin(), labels.end());
  for (std::int64_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i * k + y[static_cast<std::size_t>(i)]);
    out[idx] = static_cast<T>(s * value(static_cast<double>(c[idx])));
  }
  return detail::make_result<T>(op, cos_theta.shape(), std::move(out), {cos_theta},
                                [cos_theta, y, s, k, slope](const Storage<T>& o) {
                                  T* g = detail::grad_target(cos_theta);
                                  if (!g) return;
                                  auto c = cos_theta.data();
                                  std::vector<T> local(o.grad.size());
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    local[i] = static_cast<T>(s) * o.grad[i];
                                  for (std::size_t i = 0; i < y.size(); ++i) {
                                    const auto idx = i * static_cast<std::size_t>(k) +
                                                     static_cast<std::size_t>(y[i]);
                                    local[idx] = static_cast<T>(s * slope(static_cast<double>(c[idx])) *
                                                                static_cast<double>(o.grad[idx]));
                                  }
                                  for (std::size_t i = 0; i < local.size(); ++i) g[i] += local[i];
                                });
}

}  // namespace

template <typename T>
Tensor<T> cosface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m) {
  return target_transform<T>(
      "cosface_logits", cos_theta, labels, s, [m](double c) { return c - m; }, [](double) { return 1.0; });
}

template <typename T>
Tensor<T> arcface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m) {
  const double threshold = arcface_threshold(m);
  const double cm = std::cos(m), sm = std::sin(m);
  auto value = [=](double raw) {
    const double c = clamp_cos(raw);
    if (c > threshold) return c * cm - std::sqrt(std::max(0.0, 1.0 - c * c)) * sm;
    return c - m * sm;
  };
  auto slope = [=](double raw) {
    const double c = clamp_cos(raw);
    if (c > threshold) return cm + sm * c / std::sqrt(std::max(1e-6, 1.0 - c * c));
    return 1.0;
  };
  return target_transform<T>("arcface_logits", cos_theta, labels, s, value, slope);
}

template <typename T>
Tensor<T> margin_logits(const Tensor<T>& cos_theta, std::span<const int> labels, const MarginConfig& config) {
  switch (config.kind) {
    case MarginKind::cosface: return cosface_logits(cos_theta, labels, config.scale, config.margin);
    case MarginKind::arcface: return arcface_logits(cos_theta, labels, config.scale, config.margin);
    case MarginKind::none: break;
  }
  return cosface_logits(cos_theta, labels, config.scale, 0.0);
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

#define LGAF_INSTANTIATE(T)                                                                            \
  template Tensor<T> cosine_logits(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> cosface_logits(const Tensor<T>&, std::span<const int>, double, double);           \
  template Tensor<T> arcface_logits(const Tensor<T>&, std::span<const int>, double, double);           \
  template Tensor<T> margin_logits(const Tensor<T>&, std::span<const int>, const MarginConfig&);       \
  template Tensor<T> classification_loss(const Tensor<T>&, std::span<const int>);

LGAF_INSTANTIATE(float)
LGAF_INSTANTIATE(double)

}  // namespace lgaf
