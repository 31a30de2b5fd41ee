#include "lgaf/backbone.hpp"

#include <stdexcept>

#include "lgaf/ops.hpp"

namespace lgaf {

void BackboneConfig::validate() const {
  if (input_channels < 1) throw std::invalid_argument("backbone: input_channels must be >= 1");
  if (input_height < 1 || input_width < 1) throw std::invalid_argument("backbone: input size must be positive");
  if (channel_widths.empty()) throw std::invalid_argument("backbone: channel_widths must not be empty");
  for (int w : channel_widths) {
    if (w < 1) throw std::invalid_argument("backbone: channel widths must be positive");
  }
  if (blocks_per_stage < 1) {
    throw std::invalid_argument("backbone: blocks_per_stage must be >= 1, got " +
                                std::to_string(blocks_per_stage));
  }
  auto shape = output_shape();
  if (shape[1] < 4 || shape[2] < 4) {
    throw std::invalid_argument("backbone: final feature map " + std::to_string(shape[1]) + "x" +
                                std::to_string(shape[2]) + " is smaller than 4x4");
  }
}

std::array<int, 3> BackboneConfig::output_shape() const {
  int h = input_height;
  int w = input_width;
  for (std::size_t s = 0; s < channel_widths.size(); ++s) {
    h = halved(h);
    w = halved(w);
  }
  return {channel_widths.empty() ? 0 : channel_widths.back(), h, w};
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, const RngStream& rng) : config_(config) {
  config_.validate();
  const bool bn = config_.batch_norm;
  const int stem_width = config_.channel_widths.front();
  stem_ = ConvParams<T>(rng, "backbone.stem", config_.input_channels, stem_width, 3);
  int in = stem_width;
  for (std::size_t s = 0; s < config_.channel_widths.size(); ++s) {
    const int out = config_.channel_widths[s];
    std::vector<Block> blocks;
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string name = "backbone.stage" + std::to_string(s) + ".block" + std::to_string(b);
      Block block;
      block.stride = b == 0 ? 2 : 1;
      block.conv1 = ConvParams<T>(rng, name + ".conv1", in, out, 3);
      block.conv2 = ConvParams<T>(rng, name + ".conv2", out, out, 3);
      if (block.stride != 1 || in != out) block.projection = ConvParams<T>(rng, name + ".proj", in, out, 1);
      if (bn) {
        block.bn1.emplace(in);
        block.bn2.emplace(out);
      }
      blocks.push_back(std::move(block));
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
  if (bn) final_bn_.emplace(in);
}

template <typename T>
Tensor<T> Backbone<T>::preact(const Tensor<T>& x, std::optional<BatchNormParams<T>>& bn, Mode mode) {
  if (!bn) return relu(x);
  return relu(batch_norm_2d(x, bn->gamma, bn->beta, bn->state, mode));
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& images, Mode mode) {
  if (images.rank() != 4) {
    throw ShapeError("backbone: images must be [N,C,H,W], got " + shape_str(images.shape()));
  }
  if (images.dim(1) != config_.input_channels) {
    throw ShapeError("backbone: image dim 1 (channels) is " + std::to_string(images.dim(1)) +
                     ", expected " + std::to_string(config_.input_channels));
  }
  if (images.dim(2) != config_.input_height || images.dim(3) != config_.input_width) {
    throw ShapeError("backbone: image size " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)) + " does not match configured " +
                     std::to_string(config_.input_height) + "x" + std::to_string(config_.input_width));
  }
  Tensor<T> x = conv2d(images, stem_.weight, stem_.bias, 1, 1);
  for (auto& stage : stages_) {
    for (auto& block : stage) {
      Tensor<T> a = preact(x, block.bn1, mode);
      Tensor<T> h = conv2d(a, block.conv1.weight, block.conv1.bias, block.stride, 1);
      h = conv2d(preact(h, block.bn2, mode), block.conv2.weight, block.conv2.bias, 1, 1);
      Tensor<T> shortcut =
          block.projection ? conv2d(a, block.projection->weight, block.projection->bias, block.stride, 0) : x;
      x = add(h, shortcut);
    }
  }
  return preact(x, final_bn_, mode);
}

template <typename T>
void Backbone<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& params,
                          std::vector<Buffer>& buffers) {
  stem_.collect(prefix + ".stem", params);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      auto& block = stages_[s][b];
      const std::string name = prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
      if (block.bn1) block.bn1->collect(name + ".bn1", params, buffers);
      block.conv1.collect(name + ".conv1", params);
      if (block.bn2) block.bn2->collect(name + ".bn2", params, buffers);
      block.conv2.collect(name + ".conv2", params);
      if (block.projection) block.projection->collect(name + ".proj", params);
    }
  }
  if (final_bn_) final_bn_->collect(prefix + ".final_bn", params, buffers);
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace lgaf
