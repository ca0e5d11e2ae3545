#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "robustlat/codebook.hpp"
#include "robustlat/json_util.hpp"
#include "robustlat/rng.hpp"

namespace robustlat {

enum class ReplacementSampling { uniform, distance_weighted };

// alpha: fraction of tokens replaced in a perturbed image.
// beta:  fraction of images in a batch that are perturbed.
// delta: size of the nearest-neighbour candidate set for a replacement.
struct PerturbationSpec {
  double alpha = 0.0;
  double beta = 0.0;
  int delta = 1;
  std::uint64_t seed = 0;
  ReplacementSampling sampling = ReplacementSampling::uniform;

  void validate() const;
  friend bool operator==(const PerturbationSpec&, const PerturbationSpec&) = default;
};

enum class AnnealShape { linear, cosine, constant };

struct AnnealSchedule {
  PerturbationSpec initial;
  double final_scale = 1.0;
  std::int64_t total_steps = 1;
  AnnealShape shape = AnnealShape::constant;
  bool anneal_alpha = true;
  bool anneal_delta = true;

  void validate() const;
};

struct Replacement {
  std::size_t image = 0;
  int h = 0;
  int w = 0;
  std::uint32_t old_index = 0;
  std::uint32_t new_index = 0;
};

struct PerturbationReport {
  std::size_t images_perturbed = 0;
  std::size_t tokens_replaced = 0;
  bool logging = false;
  std::vector<Replacement> replacement_log;

  void merge(const PerturbationReport& other);
};

struct PerturbedGrid {
  TokenGrid tokens;
  PerturbationReport report;
};

struct PerturbedBatch {
  std::vector<TokenGrid> tokens;
  PerturbationReport report;
  std::vector<std::size_t> selected;  // positions that went through perturb_grid, ascending
};

// Round-half-up of a non-negative real (used for P = round(alpha*H*W) and
// the number of selected images round(beta*B)).
std::size_t round_half_up(double x);

// Replaces exactly round(alpha*H*W) distinct positions, each by a draw from
// the first `delta` entries of its neighbour row. `image_index` tags log rows.
PerturbedGrid perturb_grid(const TokenGrid& tokens, const PerturbationSpec& spec, const NeighborTable& nt,
                           Philox& stream, bool log = false, std::size_t image_index = 0);

// Perturbs round(beta*B) images chosen without replacement. The selection and
// the per-image streams depend only on (spec.seed, batch_counter, position).
PerturbedBatch perturb_batch(std::span<const TokenGrid> batch, const PerturbationSpec& spec,
                             const NeighborTable& nt, std::uint64_t batch_counter, bool log = false);

PerturbationSpec anneal_at(const AnnealSchedule& sched, std::int64_t step);

void write_replacement_csv(const std::filesystem::path& path, const PerturbationReport& report);

void to_json(Json& j, const PerturbationSpec& s);
void from_json(const Json& j, PerturbationSpec& s);
void to_json(Json& j, const AnnealSchedule& s);
void from_json(const Json& j, AnnealSchedule& s);

const char* to_string(AnnealShape shape);
AnnealShape anneal_shape_from_string(const std::string& name);

}  // namespace robustlat
