#include "lgaf/gfe.hpp"

#include "lgaf/ops.hpp"

namespace lgaf {

template <typename T>
GlobalHead<T>::GlobalHead(int feature_channels, int feature_height, int feature_width, int embedding_dim,
                          bool batch_norm, const RngStream& rng)
    : feature_shape_{feature_channels, feature_height, feature_width}, embedding_dim_(embedding_dim) {
  if (embedding_dim < 1) throw std::invalid_argument("gfe: embedding_dim must be >= 1");
  projection_ = LinearParams<T>(rng, "gfe.proj", static_cast<std::int64_t>(feature_channels) * feature_height *
                                                     feature_width,
                                embedding_dim);
  if (batch_norm) bn_.emplace(embedding_dim);
}

template <typename T>
Tensor<T> GlobalHead<T>::forward(const Tensor<T>& fmap, Mode mode) {
  if (fmap.rank() != 4) throw ShapeError("gfe: fmap must be [N,C,H,W], got " + shape_str(fmap.shape()));
  for (int i = 0; i < 3; ++i) {
    if (fmap.dim(i + 1) != feature_shape_[static_cast<std::size_t>(i)]) {
      throw ShapeError("gfe: fmap dim " + std::to_string(i + 1) + " is " + std::to_string(fmap.dim(i + 1)) +
                       ", expected " + std::to_string(feature_shape_[static_cast<std::size_t>(i)]));
    }
  }
  Tensor<T> y = linear(flatten(fmap), projection_.weight, projection_.bias);
  if (bn_) y = batch_norm_1d(y, bn_->gamma, bn_->beta, bn_->state, mode);
  return y;
}

template <typename T>
void GlobalHead<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& params,
                            std::vector<Buffer>& buffers) {
  projection_.collect(prefix + ".proj", params);
  if (bn_) bn_->collect(prefix + ".bn", params, buffers);
}

template class GlobalHead<float>;
template class GlobalHead<double>;

}  // namespace lgaf
