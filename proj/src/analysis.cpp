#include "robustlat/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "robustlat/error.hpp"
#include "robustlat/parallel.hpp"
#include "robustlat/rng.hpp"

namespace robustlat {

namespace {

constexpr std::uint64_t kLipschitzStream = 0x4C495053ull;  // "LIPS"
constexpr std::uint64_t kKMeansStream = 0x4B4D4E53ull;     // "KMNS"

std::vector<double> flatten(const LatentGrid& g) { return g.values; }

double l2_diff(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

// Squared distance from each point to its nearest centroid; smallest index wins ties.
double assign(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids, std::vector<std::size_t>& assignment,
              std::vector<double>* dist_out = nullptr) {
  const Eigen::Index n = points.rows(), k = centroids.rows();
  double sse = 0.0;
  if (dist_out) dist_out->assign(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (Eigen::Index c = 0; c < k; ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<std::size_t>(c);
      }
    }
    assignment[static_cast<std::size_t>(i)] = arg;
    if (dist_out) (*dist_out)[static_cast<std::size_t>(i)] = best;
    sse += best;
  }
  return sse;
}

Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& points, int k, Philox& rng) {
  const Eigen::Index n = points.rows();
  Eigen::MatrixXd c(k, points.cols());
  c.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_below(static_cast<std::uint64_t>(n))));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = (points.row(i) - c.row(0)).squaredNorm();
  for (int j = 1; j < k; ++j) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = 0;
    if (total <= 0.0) {
      pick = static_cast<Eigen::Index>(rng.uniform_below(static_cast<std::uint64_t>(n)));
    } else {
      const double u = rng.uniform01() * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc > u) {
          pick = i;
          break;
        }
      }
    }
    c.row(j) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (points.row(i) - c.row(j)).squaredNorm());
  }
  return c;
}

}  // namespace

UsageHistogram usage_histogram(std::span<const TokenGrid> grids, std::size_t num_codes,
                               std::span<const std::size_t> thresholds) {
  UsageHistogram h;
  h.counts.assign(num_codes, 0);
  for (const TokenGrid& g : grids) {
    for (std::uint32_t k : g.indices) {
      if (k >= num_codes)
        throw std::out_of_range("usage_histogram: token index " + std::to_string(k) + " >= K=" + std::to_string(num_codes));
      ++h.counts[k];
      ++h.total;
    }
  }
  for (std::size_t t : thresholds) {
    ThresholdView v{t, {}};
    for (std::size_t k = 0; k < num_codes; ++k)
      if (h.counts[k] >= t) v.tokens.push_back(static_cast<std::uint32_t>(k));
    h.thresholds.push_back(std::move(v));
  }
  return h;
}

double gini_coefficient(std::span<const std::size_t> counts) {
  if (counts.empty()) return 0.0;
  std::vector<double> x(counts.begin(), counts.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double total = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    total += x[i];
    weighted += (2.0 * static_cast<double>(i + 1) - n - 1.0) * x[i];
  }
  return total > 0.0 ? weighted / (n * total) : 0.0;
}

LipschitzReport empirical_lipschitz(const Tokenizer& tokenizer, const NeighborTable& nt, const PerturbationSpec& spec,
                                    std::span<const Image> images, std::size_t samples) {
  if (samples < 1) throw std::invalid_argument("empirical_lipschitz: samples must be >= 1");
  if (!(spec.alpha > 0.0)) throw std::invalid_argument("empirical_lipschitz: alpha must be > 0");
  if (images.empty()) throw std::invalid_argument("empirical_lipschitz: no images");
  const Codebook& cb = tokenizer.codebook();

  LipschitzReport r;
  r.samples = samples;
  for (std::size_t s = 0; s < samples; ++s) {
    const TokenGrid clean = tokenizer.tokenize(images[s % images.size()]);
    Philox stream(spec.seed, {kLipschitzStream, s});
    const PerturbedGrid pert = perturb_grid(clean, spec, nt, stream);
    const std::vector<double> a = flatten(dequantize(clean, cb));
    const std::vector<double> b = flatten(dequantize(pert.tokens, cb));
    double latent_norm = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) latent_norm += (b[i] - a[i]) * (b[i] - a[i]);
    latent_norm = std::sqrt(latent_norm);
    if (latent_norm == 0.0) {
      ++r.skipped_zero_delta;
      continue;
    }
    const Image out_a = tokenizer.decode_tokens(clean);
    const Image out_b = tokenizer.decode_tokens(pert.tokens);
    r.ratios.push_back(l2_diff(out_b.pixels, out_a.pixels) / latent_norm);
  }
  if (r.ratios.empty())
    throw NumericalError("empirical_lipschitz: every draw left the latent unchanged (degenerate codebook)");
  std::vector<double> sorted = r.ratios;
  std::sort(sorted.begin(), sorted.end());
  r.max = sorted.back();
  r.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size())));
  r.p95 = sorted[std::max<std::size_t>(rank, 1) - 1];
  return r;
}

KMeansResult lloyd(const Eigen::MatrixXd& points, Eigen::MatrixXd centroids, int max_iters) {
  const Eigen::Index n = points.rows(), k = centroids.rows();
  KMeansResult r;
  r.assignment.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist;
  double sse = assign(points, centroids, r.assignment, &dist);
  r.sse_trace.push_back(sse);
  for (int it = 0; it < max_iters; ++it) {
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(r.assignment[static_cast<std::size_t>(i)])) += points.row(i);
      ++counts[r.assignment[static_cast<std::size_t>(i)]];
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      } else {
        const auto far = std::distance(dist.begin(), std::max_element(dist.begin(), dist.end()));
        centroids.row(c) = points.row(far);
        dist[static_cast<std::size_t>(far)] = 0.0;
      }
    }
    const std::vector<std::size_t> previous = r.assignment;
    sse = assign(points, centroids, r.assignment, &dist);
    r.sse_trace.push_back(sse);
    r.iterations = it + 1;
    if (r.assignment == previous) break;
  }
  r.centroids = std::move(centroids);
  r.sse = sse;
  return r;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, int restarts, int max_iters, std::uint64_t seed, int threads) {
  if (k < 1 || k > points.rows())
    throw std::invalid_argument("kmeans: k=" + std::to_string(k) + " must lie in [1, n=" + std::to_string(points.rows()) + "]");
  if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be >= 1");
  if (!points.allFinite()) throw std::invalid_argument("kmeans: non-finite points");
  std::vector<KMeansResult> runs(static_cast<std::size_t>(restarts));
  parallel_for(runs.size(), threads, [&](std::size_t r) {
    Philox rng(seed, {kKMeansStream, static_cast<std::uint64_t>(k), r});
    runs[r] = lloyd(points, kmeanspp_init(points, k, rng), max_iters);
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].sse < runs[best].sse) best = r;
  return std::move(runs[best]);
}

std::vector<ElbowRow> elbow_curve(const Eigen::MatrixXd& points, std::span<const int> ks, int restarts,
                                  std::uint64_t seed, int max_iters, int threads) {
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (ks[i] <= ks[i - 1]) throw std::invalid_argument("elbow_curve: ks must be strictly ascending");
  std::vector<ElbowRow> rows;
  KMeansResult previous;
  bool have_previous = false;
  for (int k : ks) {
    KMeansResult best = kmeans(points, k, restarts, max_iters, seed, threads);
    if (have_previous) {
      // Inherit the previous optimum and split off farthest points.
      Eigen::MatrixXd init(k, points.cols());
      const auto k_prev = previous.centroids.rows();
      init.topRows(k_prev) = previous.centroids;
      std::vector<std::size_t> assignment(static_cast<std::size_t>(points.rows()));
      std::vector<double> dist;
      for (Eigen::Index j = k_prev; j < k; ++j) {
        assign(points, init.topRows(j), assignment, &dist);
        init.row(j) = points.row(std::distance(dist.begin(), std::max_element(dist.begin(), dist.end())));
      }
      KMeansResult inherited = lloyd(points, std::move(init), max_iters);
      if (inherited.sse <= best.sse) best = std::move(inherited);
    }
    rows.push_back({k, best.sse, rows.empty() ? 0.0 : best.sse - rows.back().sse});
    previous = std::move(best);
    have_previous = true;
  }
  return rows;
}

Eigen::MatrixXd project_2d(const Codebook& cb) {
  const auto k = static_cast<Eigen::Index>(cb.num_codes());
  const auto d = static_cast<Eigen::Index>(cb.dim());
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> raw(cb.data().data(), k, d);
  const Eigen::MatrixXd centered = raw.rowwise() - raw.colwise().mean();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered.transpose() * centered);
  Eigen::MatrixXd components = Eigen::MatrixXd::Zero(d, 2);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, d); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    components.col(c) = v;
  }
  return centered * components;
}

void write_usage_csv(const std::filesystem::path& path, const UsageHistogram& hist) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os << "k,count\n";
  for (std::size_t k = 0; k < hist.counts.size(); ++k) os << k << ',' << hist.counts[k] << '\n';
}

void write_elbow_csv(const std::filesystem::path& path, std::span<const ElbowRow> rows) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "k,sse,delta\n";
  for (const ElbowRow& r : rows) os << r.k << ',' << r.sse << ',' << r.delta_sse << '\n';
}

void write_projection_csv(const std::filesystem::path& path, const Eigen::MatrixXd& coords,
                          std::span<const std::size_t> counts) {
  if (static_cast<std::size_t>(coords.rows()) != counts.size())
    throw std::invalid_argument("projection rows and usage counts differ");
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "k,x,y,count\n";
  for (Eigen::Index k = 0; k < coords.rows(); ++k)
    os << k << ',' << coords(k, 0) << ',' << coords(k, 1) << ',' << counts[static_cast<std::size_t>(k)] << '\n';
}

}  // namespace robustlat
