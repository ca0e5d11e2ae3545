#include "robustlat/metrics.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "robustlat/binary_io.hpp"
#include "robustlat/error.hpp"
#include "robustlat/rng.hpp"

namespace robustlat {

namespace {

constexpr std::uint64_t kProjectionStream = 0x50524F4Aull;  // "PROJ"

// Area average when shrinking; nearest sample when the image is smaller.
Eigen::VectorXd downsample(const Image& im) {
  const int side = kProjectionSide;
  const int c_total = im.shape.channels;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(side * side * c_total);
  if (im.shape.height >= side && im.shape.width >= side) {
    Eigen::VectorXd count = Eigen::VectorXd::Zero(side * side);
    for (int y = 0; y < im.shape.height; ++y) {
      const int oy = y * side / im.shape.height;
      for (int x = 0; x < im.shape.width; ++x) {
        const int ox = x * side / im.shape.width;
        count[oy * side + ox] += 1.0;
        for (int c = 0; c < c_total; ++c) out[(oy * side + ox) * c_total + c] += im.at(y, x, c);
      }
    }
    for (int i = 0; i < side * side; ++i)
      for (int c = 0; c < c_total; ++c) out[i * c_total + c] /= count[i];
  } else {
    for (int oy = 0; oy < side; ++oy)
      for (int ox = 0; ox < side; ++ox)
        for (int c = 0; c < c_total; ++c)
          out[(oy * side + ox) * c_total + c] =
              im.at(oy * im.shape.height / side, ox * im.shape.width / side, c);
  }
  return out;
}

void check_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace

void FeatureExtractorSpec::validate() const {
  if (kind == ExtractorKind::random_projection && out_dim < 2)
    throw std::invalid_argument("feature extractor out_dim must be >= 2");
  if (kind == ExtractorKind::external_features && source_path.empty())
    throw std::invalid_argument("external_features extractor needs a source path");
}

Eigen::MatrixXd extract_features(std::span<const Image> images, const FeatureExtractorSpec& spec) {
  spec.validate();
  const ImageShape shape = common_shape(images);
  const auto n = static_cast<Eigen::Index>(images.size());

  if (spec.kind == ExtractorKind::external_features) {
    Eigen::MatrixXd f = read_feature_file(spec.source_path);
    if (f.rows() != n)
      throw InputError(spec.source_path.string() + ": feature file has " + std::to_string(f.rows()) +
                       " rows but " + std::to_string(n) + " images were given");
    return f;
  }

  const Eigen::Index in_dim = kProjectionSide * kProjectionSide * shape.channels;
  const Eigen::Index d = spec.out_dim;
  Philox rng(spec.seed, {kProjectionStream, static_cast<std::uint64_t>(d),
                         static_cast<std::uint64_t>(shape.height), static_cast<std::uint64_t>(shape.width),
                         static_cast<std::uint64_t>(shape.channels)});
  const double gain = 2.0 / std::sqrt(static_cast<double>(in_dim));
  Eigen::MatrixXd weights(d, in_dim);
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index c = 0; c < in_dim; ++c) weights(r, c) = gain * rng.normal();
  Eigen::VectorXd bias(d);
  for (Eigen::Index r = 0; r < d; ++r) bias[r] = 2.0 * rng.uniform01() - 1.0;

  Eigen::MatrixXd features(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd x = downsample(images[static_cast<std::size_t>(i)]).array() - 0.5;
    features.row(i) = (weights * x + bias).array().tanh().transpose();
  }
  return features;
}

FeatureStats fit_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw std::invalid_argument("fit_stats: need at least 2 samples for a covariance");
  check_finite(features, "fit_stats");
  FeatureStats s;
  s.n = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  const Eigen::MatrixXd m = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (m + m.transpose());
  return s;
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("matrix_sqrt_psd: matrix is not square");
  check_finite(a, "matrix_sqrt_psd");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw std::invalid_argument("matrix_sqrt_psd: matrix is not symmetric");

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (a + a.transpose()));
  if (eig.info() != Eigen::Success) throw NumericalError("matrix_sqrt_psd: eigendecomposition failed");
  Eigen::VectorXd lambda = eig.eigenvalues();
  const double lmax = std::max(0.0, lambda.maxCoeff());
  if (lambda.minCoeff() < -1e-6 * std::max(1.0, lmax))
    throw std::invalid_argument("matrix_sqrt_psd: matrix has a significantly negative eigenvalue");
  const double floor = 1e-8 * lmax;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda[i] = lambda[i] > floor ? std::sqrt(lambda[i]) : 0.0;
  const Eigen::MatrixXd& q = eig.eigenvectors();
  Eigen::MatrixXd s = q * lambda.asDiagonal() * q.transpose();
  return 0.5 * (s + s.transpose());
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows())
    throw std::invalid_argument("frechet_distance: feature dimensions differ");
  const double mean_term = (a.mean - b.mean).squaredNorm();
  auto cross_trace = [](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const Eigen::MatrixXd root = matrix_sqrt_psd(x);
    const Eigen::MatrixXd inner = root * y * root;
    return matrix_sqrt_psd(0.5 * (inner + inner.transpose())).trace();
  };
  // Both orderings agree analytically; averaging them makes the result
  // exactly symmetric in floating point.
  const double cross = 0.5 * (cross_trace(a.cov, b.cov) + cross_trace(b.cov, a.cov));
  const double d = mean_term + (a.cov.trace() + b.cov.trace()) - 2.0 * cross;
  return d > 0.0 ? d : 0.0;
}

double fid_between(std::span<const Image> images_a, std::span<const Image> images_b,
                   const FeatureExtractorSpec& extractor) {
  return fid_between(images_a, extractor, images_b, extractor);
}

double fid_between(std::span<const Image> images_a, const FeatureExtractorSpec& extractor_a,
                   std::span<const Image> images_b, const FeatureExtractorSpec& extractor_b) {
  if (images_a.size() < 2 || images_b.size() < 2) throw std::invalid_argument("fid_between: need n >= 2 per set");
  return frechet_distance(fit_stats(extract_features(images_a, extractor_a)),
                          fit_stats(extract_features(images_b, extractor_b)));
}

void write_feature_file(const std::filesystem::path& path, const Eigen::MatrixXd& features) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  binio::write_magic(os, "RFEA");
  binio::write_u32(os, kFeatureFormatVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(features.rows()));
  binio::write_u32(os, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    for (Eigen::Index j = 0; j < features.cols(); ++j) binio::write_f32(os, static_cast<float>(features(i, j)));
  if (!os) throw InputError("write failed: " + path.string());
}

Eigen::MatrixXd read_feature_file(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open feature file " + what);
  binio::expect_magic(is, "RFEA", what);
  const std::uint32_t version = binio::read_u32(is, what);
  if (version != kFeatureFormatVersion)
    throw InputError(what + ": unsupported feature file version " + std::to_string(version));
  const std::uint32_t n = binio::read_u32(is, what);
  const std::uint32_t d = binio::read_u32(is, what);
  Eigen::MatrixXd f(n, d);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) f(i, j) = binio::read_f32(is, what);
  if (!f.allFinite()) throw InputError(what + ": non-finite feature values");
  return f;
}

void to_json(Json& j, const FeatureExtractorSpec& s) {
  if (s.kind == ExtractorKind::random_projection) {
    j = Json{{"kind", "random_projection"}, {"out_dim", s.out_dim}, {"seed", s.seed}};
  } else {
    j = Json{{"kind", "external_features"}, {"source_path", s.source_path.string()}};
  }
}

void from_json(const Json& j, FeatureExtractorSpec& s) {
  const std::string ctx = "extractor";
  require_known_keys(j, {"kind", "out_dim", "seed", "source_path"}, ctx);
  const auto kind = get_or<std::string>(j, "kind", "random_projection", ctx);
  if (kind == "random_projection") {
    s.kind = ExtractorKind::random_projection;
  } else if (kind == "external_features") {
    s.kind = ExtractorKind::external_features;
  } else {
    throw ConfigError(ctx + ": unknown kind \"" + kind + "\"");
  }
  s.out_dim = get_or<int>(j, "out_dim", s.out_dim, ctx);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed, ctx);
  s.source_path = get_or<std::string>(j, "source_path", s.source_path.string(), ctx);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

}  // namespace robustlat
