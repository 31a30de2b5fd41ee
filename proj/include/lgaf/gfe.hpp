#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lgaf/parameter.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"

namespace lgaf {

/// Global branch: flatten the feature map and project it to D with one fully
/// connected layer (+ optional batch norm). No activation, no normalization.
template <typename T>
class GlobalHead {
 public:
  GlobalHead() = default;
  GlobalHead(int feature_channels, int feature_height, int feature_width, int embedding_dim,
             bool batch_norm, const RngStream& rng);

  /// fmap [N,c_f,h_f,w_f] -> f_global [N,D].
  Tensor<T> forward(const Tensor<T>& fmap, Mode mode);

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params, std::vector<Buffer>& buffers);

  LinearParams<T>& projection() { return projection_; }
  int embedding_dim() const { return embedding_dim_; }

 private:
  Shape feature_shape_;
  int embedding_dim_ = 0;
  LinearParams<T> projection_;
  std::optional<BatchNormParams<T>> bn_;
};

extern template class GlobalHead<float>;
extern template class GlobalHead<double>;

}  // namespace lgaf
