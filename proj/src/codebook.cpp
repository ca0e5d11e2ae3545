#include "robustlat/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>

#include "robustlat/binary_io.hpp"
#include "robustlat/error.hpp"

namespace robustlat {

Codebook::Codebook(std::size_t num_codes, std::size_t dim, std::vector<double> vectors)
    : num_codes_(num_codes), dim_(dim), vectors_(std::move(vectors)) {
  if (num_codes_ < 2) throw std::invalid_argument("codebook needs at least 2 codewords");
  if (dim_ < 1) throw std::invalid_argument("codebook dimension must be positive");
  if (vectors_.size() != num_codes_ * dim_)
    throw std::invalid_argument("codebook data size " + std::to_string(vectors_.size()) +
                                " != K*D = " + std::to_string(num_codes_ * dim_));
  for (double v : vectors_)
    if (!std::isfinite(v)) throw std::invalid_argument("codebook contains a non-finite entry");
}

std::size_t Codebook::duplicate_count() const {
  std::size_t dups = 0;
  for (std::size_t k = 1; k < num_codes_; ++k) {
    for (std::size_t j = 0; j < k; ++j) {
      if (std::equal(row(k).begin(), row(k).end(), row(j).begin())) {
        ++dups;
        break;
      }
    }
  }
  return dups;
}

void Codebook::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  binio::write_magic(os, "RTOK");
  binio::write_u32(os, kCodebookFormatVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(num_codes_));
  binio::write_u32(os, static_cast<std::uint32_t>(dim_));
  for (double v : vectors_) binio::write_f32(os, static_cast<float>(v));
  if (!os) throw InputError("write failed: " + path.string());
}

Codebook Codebook::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const std::string what = path.string();
  if (!is) throw InputError("cannot open codebook file " + what);
  binio::expect_magic(is, "RTOK", what);
  const std::uint32_t version = binio::read_u32(is, what);
  if (version != kCodebookFormatVersion)
    throw InputError(what + ": unsupported codebook version " + std::to_string(version));
  const std::uint32_t k = binio::read_u32(is, what);
  const std::uint32_t d = binio::read_u32(is, what);
  std::vector<double> v(static_cast<std::size_t>(k) * d);
  for (double& x : v) x = binio::read_f32(is, what);
  try {
    return Codebook(k, d, std::move(v));
  } catch (const std::invalid_argument& e) {
    throw InputError(what + ": " + e.what());
  }
}

void TokenGrid::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  binio::write_magic(os, "RTKG");
  binio::write_u32(os, kTokenGridFormatVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(height));
  binio::write_u32(os, static_cast<std::uint32_t>(width));
  binio::write_u32(os, num_codes);
  for (std::uint32_t idx : indices) binio::write_u32(os, idx);
  if (!os) throw InputError("write failed: " + path.string());
}

TokenGrid TokenGrid::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  const std::string what = path.string();
  if (!is) throw InputError("cannot open token grid file " + what);
  binio::expect_magic(is, "RTKG", what);
  const std::uint32_t version = binio::read_u32(is, what);
  if (version != kTokenGridFormatVersion)
    throw InputError(what + ": unsupported token grid version " + std::to_string(version));
  const std::uint32_t h = binio::read_u32(is, what);
  const std::uint32_t w = binio::read_u32(is, what);
  const std::uint32_t k = binio::read_u32(is, what);
  if (h == 0 || w == 0) throw InputError(what + ": empty token grid");
  TokenGrid grid(static_cast<int>(h), static_cast<int>(w), k);
  for (std::uint32_t& idx : grid.indices) {
    idx = binio::read_u32(is, what);
    if (idx >= k) throw InputError(what + ": token index " + std::to_string(idx) + " >= K");
  }
  return grid;
}

double squared_distance(std::span<const double> a, std::span<const double> b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::pair<std::uint32_t, double> nearest_codeword(const Codebook& cb, std::span<const double> z) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cb.num_codes(); ++k) {
    const double d = squared_distance(z, cb.row(k));
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return {best, best_d};
}

TokenGrid quantize(const LatentGrid& latent, const Codebook& cb) {
  if (static_cast<std::size_t>(latent.dim) != cb.dim())
    throw std::invalid_argument("quantize: latent dimension " + std::to_string(latent.dim) +
                                " does not match codebook dimension " + std::to_string(cb.dim()));
  if (latent.height < 1 || latent.width < 1 || latent.values.size() != latent.cells() * latent.dim)
    throw std::invalid_argument("quantize: malformed latent grid");
  for (double v : latent.values)
    if (!std::isfinite(v)) throw std::invalid_argument("quantize: non-finite latent value");

  TokenGrid out(latent.height, latent.width, static_cast<std::uint32_t>(cb.num_codes()));
  for (std::size_t i = 0; i < latent.cells(); ++i) out.indices[i] = nearest_codeword(cb, latent.cell(i)).first;
  return out;
}

LatentGrid dequantize(const TokenGrid& tokens, const Codebook& cb) {
  if (tokens.num_codes != cb.num_codes())
    throw std::invalid_argument("dequantize: token grid K=" + std::to_string(tokens.num_codes) +
                                " but codebook K=" + std::to_string(cb.num_codes()));
  LatentGrid out(tokens.height, tokens.width, static_cast<int>(cb.dim()));
  for (std::size_t i = 0; i < tokens.cells(); ++i) {
    const std::uint32_t k = tokens.indices[i];
    if (k >= cb.num_codes())
      throw InputError("corrupt token grid: index " + std::to_string(k) + " >= K=" +
                       std::to_string(cb.num_codes()));
    const auto src = cb.row(k);
    std::copy(src.begin(), src.end(), out.cell(i).begin());
  }
  return out;
}

NeighborTable build_neighbor_table(const Codebook& cb, std::size_t delta_max) {
  const std::size_t k_total = cb.num_codes();
  if (delta_max < 1 || delta_max >= k_total)
    throw std::invalid_argument("neighbor depth " + std::to_string(delta_max) + " must lie in [1, K-1] = [1, " +
                                std::to_string(k_total - 1) + "]");
  NeighborTable nt;
  nt.num_codes = k_total;
  nt.delta_max = delta_max;
  nt.neighbors.resize(k_total * delta_max);
  nt.distances.resize(k_total * delta_max);

  std::vector<std::pair<double, std::uint32_t>> cand;
  cand.reserve(k_total - 1);
  for (std::size_t k = 0; k < k_total; ++k) {
    cand.clear();
    for (std::size_t j = 0; j < k_total; ++j)
      if (j != k) cand.emplace_back(squared_distance(cb.row(k), cb.row(j)), static_cast<std::uint32_t>(j));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(delta_max), cand.end());
    for (std::size_t r = 0; r < delta_max; ++r) {
      nt.distances[k * delta_max + r] = cand[r].first;
      nt.neighbors[k * delta_max + r] = cand[r].second;
    }
  }
  return nt;
}

}  // namespace robustlat
