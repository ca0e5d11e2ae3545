#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace robustlat {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(height) * width * channels;
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

// Interleaved HWC float image, nominal pixel range [0, 1].
struct Image {
  ImageShape shape;
  std::vector<float> pixels;

  Image() = default;
  explicit Image(ImageShape s) : shape(s), pixels(s.size(), 0.0f) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Throws std::invalid_argument unless every image has the same shape.
ImageShape common_shape(std::span<const Image> images);

}  // namespace robustlat
