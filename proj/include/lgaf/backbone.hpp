#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "lgaf/parameter.hpp"
#include "lgaf/rng.hpp"
#include "lgaf/tensor.hpp"

namespace lgaf {

struct BackboneConfig {
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;
  std::vector<int> channel_widths{16, 32, 64};
  int blocks_per_stage = 2;
  /// Per-channel batch norm before every activation. Off by default.
  bool batch_norm = false;

  /// Throws std::invalid_argument on a degenerate config, including one whose
  /// final feature map would be smaller than 4x4.
  void validate() const;
  /// {c_f, h_f, w_f} of the output feature map.
  std::array<int, 3> output_shape() const;
};

/// Spatial size after one stride-2, 3x3, padding-1 convolution.
constexpr int halved(int size) { return (size - 1) / 2 + 1; }

/// Pre-activation residual network: a 3x3 stem at full resolution, then one
/// stage per channel width. The first block of each stage downsamples with a
/// stride-2 convolution and a 1x1 projection shortcut; the output is passed
/// through a final activation.
template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& config, const RngStream& rng);

  const BackboneConfig& config() const { return config_; }

  /// images [N, C, H, W] -> feature map [N, c_f, h_f, w_f].
  Tensor<T> forward(const Tensor<T>& images, Mode mode);

  void collect(const std::string& prefix, std::vector<Parameter<T>>& params,
               std::vector<Buffer>& buffers);

 private:
  struct Block {
    int stride = 1;
    ConvParams<T> conv1;
    ConvParams<T> conv2;
    std::optional<ConvParams<T>> projection;
    std::optional<BatchNormParams<T>> bn1;
    std::optional<BatchNormParams<T>> bn2;
  };

  Tensor<T> preact(const Tensor<T>& x, std::optional<BatchNormParams<T>>& bn, Mode mode);

  BackboneConfig config_;
  ConvParams<T> stem_;
  std::vector<std::vector<Block>> stages_;
  std::optional<BatchNormParams<T>> final_bn_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace lgaf
