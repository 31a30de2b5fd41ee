#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lgaf/ops.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"

namespace lgaf {

/// A named, trainable leaf tensor. Names are hierarchical ("mhms.head0.proj.weight")
/// and serve as checkpoint keys.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Non-trainable state that is still checkpointed (batch-norm running stats).
struct Buffer {
  std::string name;
  BatchNormState* state;
};

/// Zero-mean Gaussian with stddev sqrt(2 / fan_in), drawn from a substream
/// keyed by the parameter name so initialization does not depend on the
/// order in which modules are built.
template <typename T>
Tensor<T> he_normal(const RngStream& rng, const std::string& name, Shape shape, std::int64_t fan_in) {
  RngStream stream = rng.substream(name);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(stream.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> unit_normal(const RngStream& rng, const std::string& name, Shape shape) {
  RngStream stream = rng.substream(name);
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(stream.normal());
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones_param(Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}

/// Affine batch-norm parameters plus running statistics.
template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState state;

  BatchNormParams() = default;
  explicit BatchNormParams(std::int64_t features)
      : gamma(ones_param<T>({features})),
        beta(zeros_param<T>({features})),
        state(static_cast<std::size_t>(features)) {}

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params,
               std::vector<Buffer>& buffers) {
    params.push_back({prefix + ".gamma", gamma});
    params.push_back({prefix + ".beta", beta});
    buffers.push_back({prefix, &state});
  }
};

/// Convolution weight [K,C,k,k] and bias [K].
template <typename T>
struct ConvParams {
  Tensor<T> weight;
  Tensor<T> bias;

  ConvParams() = default;
  ConvParams(const RngStream& rng, const std::string& name, std::int64_t in, std::int64_t out,
             std::int64_t kernel)
      : weight(he_normal<T>(rng, name + ".weight", {out, in, kernel, kernel}, in * kernel * kernel)),
        bias(zeros_param<T>({out})) {}

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params) const {
    params.push_back({prefix + ".weight", weight});
    params.push_back({prefix + ".bias", bias});
  }
};

/// Fully connected weight [D,E] and bias [E].
template <typename T>
struct LinearParams {
  Tensor<T> weight;
  Tensor<T> bias;

  LinearParams() = default;
  LinearParams(const RngStream& rng, const std::string& name, std::int64_t in, std::int64_t out)
      : weight(he_normal<T>(rng, name + ".weight", {in, out}, in)), bias(zeros_param<T>({out})) {}

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params) const {
    params.push_back({prefix + ".weight", weight});
    params.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
std::int64_t count_scalars(const std::vector<Parameter<T>>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace lgaf
