#include "robustlat/image.hpp"

#include <stdexcept>

namespace robustlat {

ImageShape common_shape(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("empty image set");
  const ImageShape s = images.front().shape;
  for (const Image& im : images) {
    if (im.shape != s) throw std::invalid_argument("images do not share height/width/channels");
    if (im.pixels.size() != s.size()) throw std::invalid_argument("image pixel buffer size mismatch");
  }
  return s;
}

}  // namespace robustlat
