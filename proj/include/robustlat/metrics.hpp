#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

#include <Eigen/Dense>

#include "robustlat/image.hpp"
#include "robustlat/json_util.hpp"

namespace robustlat {

inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr int kProjectionSide = 16;

enum class ExtractorKind { random_projection, external_features };

struct FeatureExtractorSpec {
  ExtractorKind kind = ExtractorKind::random_projection;
  int out_dim = 64;
  std::uint64_t seed = 0;
  std::filesystem::path source_path;  // external_features only

  void validate() const;
};

// Gaussian moments of a feature set: unbiased covariance (divisor n-1).
struct FeatureStats {
  std::size_t n = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Rows are images. random_projection: box-downsample to 16x16, flatten,
// centre at 0.5, apply a seeded affine map to out_dim values, then tanh.
Eigen::MatrixXd extract_features(std::span<const Image> images, const FeatureExtractorSpec& spec);

FeatureStats fit_stats(const Eigen::MatrixXd& features);

// Symmetric PSD square root via eigendecomposition; eigenvalues below
// 1e-8 * lambda_max are clamped to zero.
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& a);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

double fid_between(std::span<const Image> images_a, std::span<const Image> images_b,
                   const FeatureExtractorSpec& extractor);
// Per-set extractors, for externally computed features held in two files.
double fid_between(std::span<const Image> images_a, const FeatureExtractorSpec& extractor_a,
                   std::span<const Image> images_b, const FeatureExtractorSpec& extractor_b);

// "RFEA" feature file: magic, version, n, d (u32 LE) then n*d float32 LE, row-major.
void write_feature_file(const std::filesystem::path& path, const Eigen::MatrixXd& features);
Eigen::MatrixXd read_feature_file(const std::filesystem::path& path);

void to_json(Json& j, const FeatureExtractorSpec& s);
void from_json(const Json& j, FeatureExtractorSpec& s);

}  // namespace robustlat
