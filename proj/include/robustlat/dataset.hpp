#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "robustlat/image.hpp"
#include "robustlat/json_util.hpp"

namespace robustlat {

inline constexpr int kDatasetManifestVersion = 1;
inline constexpr int kShapeFamilies = 8;

struct SyntheticSpec {
  int side = 32;
  int channels = 3;
  int num_classes = 8;
  int per_class = 64;
  std::uint64_t seed = 0;
  double scale_min = 0.25;  // shape size as a fraction of the side
  double scale_max = 0.45;
  double hue_jitter = 0.06;
  double noise = 0.04;  // uniform background noise amplitude

  std::size_t total() const noexcept { return static_cast<std::size_t>(num_classes) * per_class; }
  void validate() const;
};

struct LabeledImages {
  std::vector<Image> images;
  std::vector<int> labels;
};

// Class c draws from shape family c % 8 (disc, rectangle, horizontal
// stripes, vertical stripes, gradient, checkerboard, ring, diagonal
// stripes) with a class hue; each image varies position, scale, hue and
// background noise from its own derived stream.
LabeledImages generate(const SyntheticSpec& spec);

// Rounds each pixel to its 8-bit value (what a PNG round trip preserves).
Image quantize_8bit(const Image& image);

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

// Writes class_{c}_idx_{i}.png files plus manifest.json listing order,
// labels and git-style content hashes. Returns the manifest.
Json save_images(const std::filesystem::path& dir, const LabeledImages& set, const SyntheticSpec& spec);

// Loads in manifest order; fails naming the path when the manifest is missing
// or a file is absent, unreadable, or does not match its recorded hash.
LabeledImages load_images(const std::filesystem::path& dir);

void to_json(Json& j, const SyntheticSpec& s);
void from_json(const Json& j, SyntheticSpec& s);

}  // namespace robustlat
