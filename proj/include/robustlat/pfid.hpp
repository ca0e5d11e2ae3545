#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "robustlat/codebook.hpp"
#include "robustlat/metrics.hpp"
#include "robustlat/tokenizer.hpp"

namespace robustlat {

struct PfidConfig {
  std::vector<double> alphas{0.9, 0.8, 0.7, 0.6, 0.5};
  std::vector<int> deltas{200, 280, 360};
  double beta = 1.0;
  int k_ref = 16384;
  FeatureExtractorSpec extractor;
  std::uint64_t eval_seed = 0;
  std::size_t sample_count = 0;  // 0: every image

  void validate() const;
};

struct PfidRow {
  double alpha = 0.0;
  int delta_nominal = 0;
  int delta_scaled = 0;
  double beta = 1.0;
  double fid = 0.0;
  std::size_t tokens_replaced = 0;
};

struct PfidReport {
  std::vector<PfidRow> per_setting;  // alpha-major, delta-minor
  double pfid = 0.0;
  double rfid = 0.0;
  PfidConfig config;
};

// max(1, min(K-1, round(delta_nominal * K / k_ref))).
int scale_delta(int delta_nominal, std::size_t num_codes, int k_ref);

// Neighbour-table depth needed to evaluate `cfg` on a K-word codebook.
std::size_t required_neighbor_depth(const PfidConfig& cfg, std::size_t num_codes);

std::vector<Image> reconstruct_all(const Tokenizer& tokenizer, std::span<const Image> images);

double compute_rfid(const Tokenizer& tokenizer, std::span<const Image> images, const FeatureExtractorSpec& extractor);

// Setting i (alpha-major order) perturbs every image with beta = 1 using
// perturb_batch(seed = eval_seed, batch_counter = i).
PfidReport compute_pfid(const Tokenizer& tokenizer, std::span<const Image> images, const PfidConfig& cfg,
                        const NeighborTable& nt, int threads = 1);

void write_pfid_csv(const std::filesystem::path& path, const PfidReport& report);

void to_json(Json& j, const PfidConfig& c);
void from_json(const Json& j, PfidConfig& c);
void to_json(Json& j, const PfidReport& r);

}  // namespace robustlat
