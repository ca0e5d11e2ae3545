#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace robustlat {

inline constexpr std::uint32_t kCodebookFormatVersion = 1;
inline constexpr std::uint32_t kTokenGridFormatVersion = 1;

// K codewords of dimension D, stored row-major. Values are kept in double but
// written to disk as float32; training keeps them float-representable.
class Codebook {
 public:
  Codebook(std::size_t num_codes, std::size_t dim, std::vector<double> vectors);

  std::size_t num_codes() const noexcept { return num_codes_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<const double> row(std::size_t k) const noexcept {
    return {vectors_.data() + k * dim_, dim_};
  }
  std::span<const double> data() const noexcept { return vectors_; }
  std::span<double> mutable_data() noexcept { return vectors_; }

  // Rows that exactly equal some lower-indexed row (collapsed codewords).
  std::size_t duplicate_count() const;

  void save(const std::filesystem::path& path) const;
  static Codebook load(const std::filesystem::path& path);

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  std::size_t num_codes_;
  std::size_t dim_;
  std::vector<double> vectors_;
};

struct LatentGrid {
  int height = 0;
  int width = 0;
  int dim = 0;
  std::vector<double> values;  // (h, w, d) row-major

  LatentGrid() = default;
  LatentGrid(int h, int w, int d)
      : height(h), width(w), dim(d), values(static_cast<std::size_t>(h) * w * d, 0.0) {}

  std::size_t cells() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::span<double> cell(std::size_t i) noexcept { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }
  std::span<const double> cell(std::size_t i) const noexcept {
    return {values.data() + i * dim, static_cast<std::size_t>(dim)};
  }
};

struct TokenGrid {
  int height = 0;
  int width = 0;
  std::uint32_t num_codes = 0;
  std::vector<std::uint32_t> indices;  // (h, w) row-major

  TokenGrid() = default;
  TokenGrid(int h, int w, std::uint32_t k)
      : height(h), width(w), num_codes(k), indices(static_cast<std::size_t>(h) * w, 0u) {}

  std::size_t cells() const noexcept { return indices.size(); }

  void save(const std::filesystem::path& path) const;
  static TokenGrid load(const std::filesystem::path& path);

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Row k lists the delta_max codewords closest to e_k (self excluded), ordered
// by ascending squared distance with ties going to the smaller index.
struct NeighborTable {
  std::size_t num_codes = 0;
  std::size_t delta_max = 0;
  std::vector<std::uint32_t> neighbors;
  std::vector<double> distances;  // squared distances matching `neighbors`

  std::span<const std::uint32_t> row(std::size_t k) const noexcept {
    return {neighbors.data() + k * delta_max, delta_max};
  }
  std::span<const double> row_distances(std::size_t k) const noexcept {
    return {distances.data() + k * delta_max, delta_max};
  }
};

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept;

// Exhaustive nearest codeword: (index, squared distance), smallest index on ties.
std::pair<std::uint32_t, double> nearest_codeword(const Codebook& cb, std::span<const double> z);

TokenGrid quantize(const LatentGrid& latent, const Codebook& cb);
LatentGrid dequantize(const TokenGrid& tokens, const Codebook& cb);
NeighborTable build_neighbor_table(const Codebook& cb, std::size_t delta_max);

}  // namespace robustlat
