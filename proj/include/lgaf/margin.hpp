#pragma once

#include <span>
#include <string>
#include <vector>

#include "lgaf/parameter.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"

namespace lgaf {

enum class MarginKind { none, cosface, arcface };

MarginKind parse_margin_kind(const std::string& name);
std::string to_string(MarginKind kind);
/// 0.4 for cosface, 0.5 for arcface, 0 for none.
double default_margin(MarginKind kind);

struct MarginConfig {
  MarginKind kind = MarginKind::cosface;
  double scale = 64.0;
  double margin = 0.4;
};

/// Value of cos(theta) below which the ArcFace target logit switches from
/// cos(theta + m) to the linear fallback cos(theta) - m sin(m). The switch is
/// placed where the two branches intersect so the logit is continuous and
/// monotone in cos(theta).
double arcface_threshold(double m);

/// s * arcface target value for a single cosine, without autograd.
double arcface_target_logit(double cos_theta, double s, double m);

/// cos_theta [N,C] = rows of kappa normalized times columns of weight normalized.
template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& kappa, const Tensor<T>& weight);

/// Target entries s (cos - m), others s cos.
template <typename T>
Tensor<T> cosface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m);

/// Target entries s cos(theta + m) above arcface_threshold(m) and
/// s (cos - m sin m) below it; others s cos.
template <typename T>
Tensor<T> arcface_logits(const Tensor<T>& cos_theta, std::span<const int> labels, double s, double m);

template <typename T>
Tensor<T> margin_logits(const Tensor<T>& cos_theta, std::span<const int> labels, const MarginConfig& config);

/// Mean softmax cross-entropy over the (margin) logits.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const int> labels);

/// Class-weight matrix W [D, n_classes], unit-Gaussian initialized, used in
/// column-normalized form.
template <typename T>
struct MarginHead {
  MarginConfig config;
  Tensor<T> weight;

  MarginHead() = default;
  MarginHead(const MarginConfig& cfg, int embedding_dim, int n_classes, const RngStream& rng)
      : config(cfg), weight(unit_normal<T>(rng, "margin.weight", {embedding_dim, n_classes})) {}

  int classes() const { return static_cast<int>(weight.dim(1)); }

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params) const {
    params.push_back({prefix + ".weight", weight});
  }
};

}  // namespace lgaf
