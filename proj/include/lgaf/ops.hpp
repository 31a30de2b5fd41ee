#pragma once

#include <span>
#include <vector>

#include "lgaf/tensor.hpp"

namespace lgaf {

/// 2-D convolution, input [N,C,H,W], weight [K,C,k,k], bias [K] (may be
/// undefined). Output [N,K,H',W'] with H' = (H + 2*padding - k)/stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

/// a [N,D] times b [D,E].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// y = x W + b with x [N,D], W [D,E], b [E] (b may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// [N,C,H,W] -> [N,C], mean over the spatial positions.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

enum class Activation { relu, sigmoid };

/// Elementwise. relu'(0) is taken as 0.
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Activation::relu);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return activation(x, Activation::sigmoid);
}

/// Per-row Euclidean norm, [N,D] -> [N]. The gradient at a zero row is 0.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x);

/// Unit-normalizes the rows (axis 1) or columns (axis 0) of a 2-D tensor.
/// A zero row/column is rejected.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis = 1);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> xs, int axis);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  return concat(std::span<const Tensor<T>>(xs), axis);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Sum of all entries, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Mean of all entries, shape [1].
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// [N, ...] -> [N, prod(...)].
template <typename T>
Tensor<T> flatten(const Tensor<T>& x);

/// fmap [N,C,H,W] times a single-channel map [N,1,H,W] broadcast over C.
template <typename T>
Tensor<T> spatial_gate(const Tensor<T>& fmap, const Tensor<T>& gate);

/// fmap [N,C,H,W] times per-channel factors [N,C] broadcast over H,W.
template <typename T>
Tensor<T> channel_gate(const Tensor<T>& fmap, const Tensor<T>& gate);

/// x [N,D] with row i multiplied by s[i], s [N].
template <typename T>
Tensor<T> row_scale(const Tensor<T>& x, const Tensor<T>& s);

/// Running statistics of a batch-norm layer, one entry per feature/channel.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t features = 0)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

/// Batch normalization over [N,D] (features on axis 1) with affine gamma/beta
/// of size D. Train mode normalizes with the biased batch variance and
/// updates the running statistics (unbiased variance); eval mode uses the
/// running statistics and leaves the state untouched.
template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState& state, Mode mode);

/// Per-channel batch normalization over [N,C,H,W].
template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState& state, Mode mode);

/// Mean negative log-softmax of the target class, logits [N,K].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace lgaf
