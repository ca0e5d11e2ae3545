#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "robustlat/codebook.hpp"
#include "robustlat/perturbation.hpp"
#include "robustlat/tokenizer.hpp"

namespace robustlat {

struct ThresholdView {
  std::size_t threshold = 0;
  std::vector<std::uint32_t> tokens;  // indices with count >= threshold
};

struct UsageHistogram {
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  std::vector<ThresholdView> thresholds;
};

UsageHistogram usage_histogram(std::span<const TokenGrid> grids, std::size_t num_codes,
                               std::span<const std::size_t> thresholds = {});

// Gini coefficient of a non-negative histogram: 0 for uniform usage, tending
// to 1 when a few codewords take every token.
double gini_coefficient(std::span<const std::size_t> counts);

struct LipschitzReport {
  std::size_t samples = 0;
  std::size_t skipped_zero_delta = 0;
  std::vector<double> ratios;
  double max = 0.0;
  double mean = 0.0;
  double p95 = 0.0;
};

// ratio = ||decode(perturbed) - decode(clean)|| / ||dequant(perturbed) - dequant(clean)||
// over `samples` draws; image s % n and stream (spec.seed, s) for draw s.
LipschitzReport empirical_lipschitz(const Tokenizer& tokenizer, const NeighborTable& nt, const PerturbationSpec& spec,
                                    std::span<const Image> images, std::size_t samples);

struct KMeansResult {
  Eigen::MatrixXd centroids;  // k x d
  std::vector<std::size_t> assignment;
  double sse = 0.0;
  std::vector<double> sse_trace;  // after each assignment step of the winning run
  int iterations = 0;
};

// Lloyd iterations from fixed initial centroids; an emptied cluster moves to
// the point currently farthest from its centroid.
KMeansResult lloyd(const Eigen::MatrixXd& points, Eigen::MatrixXd centroids, int max_iters);

// Best of `restarts` k-means++ seeded Lloyd runs, ordered by (sse, restart).
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, int restarts, int max_iters, std::uint64_t seed,
                    int threads = 1);

struct ElbowRow {
  int k = 0;
  double sse = 0.0;
  double delta_sse = 0.0;  // sse(k) - sse(previous k); 0 on the first row
};

// Each k also runs one candidate seeded from the previous k's best centroids
// plus farthest-point splits, so sse never increases along `ks`.
std::vector<ElbowRow> elbow_curve(const Eigen::MatrixXd& points, std::span<const int> ks, int restarts,
                                  std::uint64_t seed, int max_iters = 100, int threads = 1);

// Top-2 principal-component coordinates of the codewords (K x 2). Each
// component's largest-magnitude loading is made positive.
Eigen::MatrixXd project_2d(const Codebook& cb);

void write_usage_csv(const std::filesystem::path& path, const UsageHistogram& hist);
void write_elbow_csv(const std::filesystem::path& path, std::span<const ElbowRow> rows);
void write_projection_csv(const std::filesystem::path& path, const Eigen::MatrixXd& coords,
                          std::span<const std::size_t> counts);

}  // namespace robustlat
