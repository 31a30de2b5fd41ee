#include "lgaf/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace lgaf {

double Image::mean() const {
  double s = 0.0;
  for (float v : data) s += v;
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

namespace {

void check_same_shape(const Image& a, const Image& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    throw ShapeError("stack_images: image shapes differ (" + std::to_string(a.channels) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                     std::to_string(b.width) + ")");
  }
}

}  // namespace

template <typename T>
Tensor<T> stack_images(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("stack_images: no images");
  const Image& first = images.front();
  std::vector<T> data;
  data.reserve(images.size() * first.size());
  for (const auto& im : images) {
    check_same_shape(first, im);
    data.insert(data.end(), im.data.begin(), im.data.end());
  }
  return Tensor<T>({static_cast<std::int64_t>(images.size()), first.channels, first.height, first.width},
                   std::move(data));
}

template <typename T>
Tensor<T> stack_images(const std::vector<Image>& images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: no images");
  const Image& first = images.at(indices.front());
  std::vector<T> data;
  data.reserve(indices.size() * first.size());
  for (std::size_t i : indices) {
    const Image& im = images.at(i);
    check_same_shape(first, im);
    data.insert(data.end(), im.data.begin(), im.data.end());
  }
  return Tensor<T>({static_cast<std::int64_t>(indices.size()), first.channels, first.height, first.width},
                   std::move(data));
}

template Tensor<float> stack_images(std::span<const Image>);
template Tensor<double> stack_images(std::span<const Image>);
template Tensor<float> stack_images(const std::vector<Image>&, std::span<const std::size_t>);
template Tensor<double> stack_images(const std::vector<Image>&, std::span<const std::size_t>);

Image resize_bilinear(const Image& image, int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("resize_bilinear: target size must be positive");
  Image out(image.channels, height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const double bottom = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(wy == 0.0 ? top : top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

void write_pnm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 1 && image.channels != 3) {
    throw std::invalid_argument("write_pnm: only 1- or 3-channel images are supported");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.size());
  std::size_t k = 0;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        bytes[k++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read image " + path.string());
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if ((magic != "P6" && magic != "P5") || width < 1 || height < 1 || maxval != 255) {
    throw std::runtime_error(path.string() + ": not an 8-bit binary PPM/PGM");
  }
  in.get();
  const int channels = magic == "P6" ? 3 : 1;
  Image image(channels, height, width);
  std::vector<unsigned char> bytes(image.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error(path.string() + ": truncated pixel data");
  }
  std::size_t k = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) image.at(c, y, x) = static_cast<float>(bytes[k++] / 255.0);
  return image;
}

}  // namespace lgaf
