#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lgaf/tensor.hpp"

namespace lgaf {

/// CHW float image with values nominally in [0,1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float value = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, value) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t size() const { return data.size(); }
  double mean() const;
  bool operator==(const Image&) const = default;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int n_classes = 0;

  std::size_t size() const { return images.size(); }
};

/// Stacks images[indices] into [N,C,H,W]. All images must share one shape.
template <typename T>
Tensor<T> stack_images(std::span<const Image> images);
template <typename T>
Tensor<T> stack_images(const std::vector<Image>& images, std::span<const std::size_t> indices);

/// Bilinear resampling to (height, width) with pixel-center alignment.
Image resize_bilinear(const Image& image, int height, int width);

/// Binary PPM (P6, 8-bit) for 3-channel images, PGM (P5) for 1-channel.
void write_pnm(const Image& image, const std::filesystem::path& path);
Image read_pnm(const std::filesystem::path& path);

}  // namespace lgaf
