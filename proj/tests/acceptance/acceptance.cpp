// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Usage: acceptance [ablation-config.json]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include "../oracles.hpp"
#include "robustlat/analysis.hpp"
#include "robustlat/dataset.hpp"
#include "robustlat/harness.hpp"
#include "robustlat/hashing.hpp"
#include "robustlat/metrics.hpp"
#include "robustlat/parallel.hpp"
#include "robustlat/perturbation.hpp"
#include "robustlat/pfid.hpp"
#include "robustlat/toytok.hpp"

using namespace robustlat;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and limits.
constexpr double kFrechetTol = 1e-9;
constexpr double kSqrtRelTol = 1e-6;
constexpr double kPfidOracleTol = 1e-9;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradAbsFloor = 1e-6;
constexpr double kFrechetSeconds = 1.0;
constexpr double kSqrtSeconds = 5.0;
constexpr double kPerturbSeconds = 10.0;
constexpr double kPfidSeconds = 120.0;
constexpr double kGradSeconds = 30.0;
constexpr double kKmeansSeconds = 30.0;
constexpr double kAblationCpuSeconds = 20.0 * 60.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail << std::endl;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

FeatureStats random_stats(int d, std::mt19937_64& gen) {
  std::normal_distribution<double> normal;
  FeatureStats s;
  s.n = 100;
  s.mean = Eigen::VectorXd(d);
  for (int i = 0; i < d; ++i) s.mean(i) = normal(gen);
  std::uniform_int_distribution<int> rank(1, d);
  s.cov = oracle::random_psd(d, rank(gen), gen) / static_cast<double>(d);
  return s;
}

Outcome frechet_closed_form() {
  const auto t0 = std::chrono::steady_clock::now();
  FeatureStats a{1, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 1.0)};
  FeatureStats b{1, Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 4.0)};
  const double ab = frechet_distance(a, b);
  const double aa = frechet_distance(a, a);
  std::mt19937_64 gen(101);
  std::uniform_int_distribution<int> dim(1, 64);
  double worst_sym = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int d = dim(gen);
    const FeatureStats x = random_stats(d, gen), y = random_stats(d, gen);
    worst_sym = std::max(worst_sym, std::abs(frechet_distance(x, y) - frechet_distance(y, x)));
  }
  const double secs = seconds_since(t0);
  const bool ok = std::abs(ab - 2.0) <= kFrechetTol && std::abs(aa) <= kFrechetTol && worst_sym <= kFrechetTol &&
                  secs < kFrechetSeconds;
  return {ok, "d(N(0,1),N(1,4))=" + num(ab) + " self=" + num(aa) + " max asymmetry=" + num(worst_sym) + " in " +
                  num(secs) + "s"};
}

Outcome matrix_sqrt() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(202);
  std::uniform_int_distribution<int> dim(1, 64);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int d = dim(gen);
    std::uniform_int_distribution<int> rank(1, d);
    const Eigen::MatrixXd a = oracle::random_psd(d, rank(gen), gen);
    const Eigen::MatrixXd s = matrix_sqrt_psd(a);
    worst = std::max(worst, (s * s - a).norm() / std::max(1.0, a.norm()));
  }
  const double secs = seconds_since(t0);
  return {worst <= kSqrtRelTol && secs < kSqrtSeconds,
          "max ||SS-A||/max(1,||A||)=" + num(worst) + " over 100 matrices in " + num(secs) + "s"};
}

Outcome perturbation_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  const Codebook cb = oracle::random_codebook(64, 4, 303);
  const NeighborTable nt = build_neighbor_table(cb, 63);
  std::vector<std::vector<std::uint32_t>> top[64];
  const int deltas[] = {1, 3, 8, 20, 63};
  for (std::size_t k = 0; k < 64; ++k)
    for (int d : deltas) top[k].push_back(oracle::top_delta_set(cb, k, static_cast<std::size_t>(d)));
  std::mt19937_64 gen(303);
  std::size_t count_errors = 0, outside = 0, replacements = 0;
  for (int i = 0; i < 1000; ++i) {
    const double alpha = 0.1 * (i % 10 + 1);
    const int di = (i / 10) % 5;
    TokenGrid t(8, 8, 64);
    for (auto& x : t.indices) x = static_cast<std::uint32_t>(gen() % 64);
    Philox stream(static_cast<std::uint64_t>(i), {7});
    const PerturbedGrid p = perturb_grid(t, {alpha, 1.0, deltas[di], 0}, nt, stream);
    std::size_t changed = 0;
    for (std::size_t c = 0; c < 64; ++c) {
      if (p.tokens.indices[c] == t.indices[c]) continue;
      ++changed;
      const auto& set = top[t.indices[c]][static_cast<std::size_t>(di)];
      if (std::find(set.begin(), set.end(), p.tokens.indices[c]) == set.end()) ++outside;
    }
    replacements += changed;
    if (changed != static_cast<std::size_t>(std::floor(alpha * 64 + 0.5))) ++count_errors;
  }
  const double secs = seconds_since(t0);
  return {count_errors == 0 && outside == 0 && secs < kPerturbSeconds,
          std::to_string(count_errors) + " count mismatches, " + std::to_string(outside) + "/" +
              std::to_string(replacements) + " replacements outside top-delta, " + num(secs) + "s"};
}

double reexecute_setting(const Tokenizer& tok, std::span<const Image> images, const PfidConfig& cfg, double alpha,
                         int delta, std::size_t setting) {
  std::vector<TokenGrid> grids;
  for (const Image& im : images) grids.push_back(quantize(tok.encode(im), tok.codebook()));
  const NeighborTable nt = build_neighbor_table(tok.codebook(), static_cast<std::size_t>(delta));
  const PerturbedBatch pb = perturb_batch(grids, {alpha, 1.0, delta, cfg.eval_seed}, nt, setting);
  std::vector<Image> recon;
  for (const TokenGrid& t : pb.tokens) recon.push_back(tok.decode(dequantize(t, tok.codebook())));
  return oracle::fid_from_features(extract_features(recon, cfg.extractor), extract_features(images, cfg.extractor));
}

Outcome pfid_protocol() {
  SyntheticSpec spec;  // default 512-image corpus
  spec.seed = 404;
  LabeledImages set = generate(spec);
  for (Image& im : set.images) im = quantize_8bit(im);
  ToyArch arch;
  ToyTokenizer tok = ToyTokenizer::random_init(arch, 404);
  init_codebook_from_data(tok, set.images, 404);
  PfidConfig cfg;
  cfg.eval_seed = 405;
  cfg.extractor.seed = 406;

  const auto t0 = std::chrono::steady_clock::now();
  const NeighborTable nt = build_neighbor_table(tok.codebook(), required_neighbor_depth(cfg, tok.codebook().num_codes()));
  const PfidReport r = compute_pfid(tok, set.images, cfg, nt, default_thread_count());
  const double secs = seconds_since(t0);

  bool beta_ok = true;
  for (const PfidRow& row : r.per_setting) beta_ok = beta_ok && row.beta == 1.0;
  double oracle_sum = 0.0;
  std::size_t i = 0;
  for (double a : cfg.alphas)
    for (int d : cfg.deltas) {
      oracle_sum += reexecute_setting(tok, set.images, cfg, a, scale_delta(d, tok.codebook().num_codes(), cfg.k_ref), i);
      ++i;
    }
  const double oracle_mean = oracle_sum / static_cast<double>(i);
  const double diff = std::abs(r.pfid - oracle_mean);
  return {r.per_setting.size() == 15 && beta_ok && diff <= kPfidOracleTol && secs < kPfidSeconds,
          std::to_string(r.per_setting.size()) + " rows, beta=1 " + (beta_ok ? "everywhere" : "VIOLATED") +
              ", |pfid-oracle|=" + num(diff) + ", " + num(secs) + "s for 512 images"};
}

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  ToyArch a;
  a.image_side = 2;
  a.channels = 1;
  a.patch = 2;
  a.latent_dim = 2;
  a.hidden = 3;
  a.codebook_size = 4;
  std::size_t checked = 0, bad = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ToyTokenizer tok = ToyTokenizer::random_init(a, seed);
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::normal_distribution<double> normal(0.0, 0.5);
    std::vector<Image> images(2, Image(a.image_shape()));
    for (Image& im : images)
      for (float& p : im.pixels) p = u(gen);
    for (double& v : tok.mutable_codebook().mutable_data()) v = normal(gen);
    const BatchForward fwd = forward_encode(tok, images);
    std::vector<std::uint32_t> used = fwd.clean_indices;
    used[0] = (used[0] + 1) % 4;  // perturbed decoder input on one patch
    const LossWeights lw{1.0, 1.0, 0.25};
    GradientResult gr = backward(tok, fwd, used, lw);
    const oracle::Surrogate f(tok, images, used, lw);
    std::vector<std::span<double>> analytic, params;
    visit_gradients(gr.grads, [&](const char*, std::span<double> s) { analytic.push_back(s); });
    ToyTokenizer probe = tok;
    probe.visit_tensors([&](const char*, std::span<double> s) { params.push_back(s); });
    const double h = 1e-6;
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) {
        const double base = params[t][i];
        params[t][i] = base + h;
        const double up = f(probe);
        params[t][i] = base - h;
        const double down = f(probe);
        params[t][i] = base;
        const double fd = (up - down) / (2 * h);
        const double err = std::abs(analytic[t][i] - fd);
        worst = std::max(worst, err / std::max(kGradAbsFloor / kGradRelTol, std::abs(fd)));
        if (err > std::max(kGradAbsFloor, kGradRelTol * std::abs(fd))) ++bad;
        ++checked;
      }
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < kGradSeconds, std::to_string(bad) + "/" + std::to_string(checked) +
                                               " parameters outside tolerance, worst scaled error " + num(worst) +
                                               ", " + num(secs) + "s"};
}

Outcome annealing_endpoints() {
  AnnealSchedule s;
  s.initial = {1.0, 0.1, 100, 0};
  s.final_scale = 0.5;
  s.total_steps = 1000;
  s.shape = AnnealShape::linear;
  const PerturbationSpec p0 = anneal_at(s, 0), pm = anneal_at(s, 500), pe = anneal_at(s, 1000);
  const bool ok = p0.alpha == 1.0 && p0.delta == 100 && pm.alpha == 0.75 && pm.delta == 75 && pe.alpha == 0.5 &&
                  pe.delta == 50;
  return {ok, "step 0 (" + num(p0.alpha) + "," + std::to_string(p0.delta) + "), midpoint (" + num(pm.alpha) + "," +
                  std::to_string(pm.delta) + "), end (" + num(pe.alpha) + "," + std::to_string(pe.delta) + ")"};
}

Outcome kmeans_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  const int ks[] = {2, 4, 8, 16, 32};
  std::mt19937_64 gen(505);
  bool monotone = true;
  for (int trial = 0; trial < 4; ++trial) {
    Eigen::MatrixXd pts(400, 8);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = trial % 2 ? unif(gen) : normal(gen);
    const auto rows = elbow_curve(pts, ks, 8, static_cast<std::uint64_t>(trial));
    for (std::size_t i = 1; i < rows.size(); ++i) monotone = monotone && rows[i].sse <= rows[i - 1].sse;
  }
  Eigen::MatrixXd few(32, 3);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < few.size(); ++i) few.data()[i] = normal(gen);
  const int kn[] = {32};
  const double sse_n = elbow_curve(few, kn, 8, 1).front().sse;

  // Six planted clusters at the vertices of a scaled simplex-like layout.
  Eigen::MatrixXd planted(6 * 50, 4);
  std::normal_distribution<double> jitter(0.0, 0.5);
  for (int c = 0; c < 6; ++c)
    for (int i = 0; i < 50; ++i)
      for (int d = 0; d < 4; ++d)
        planted(c * 50 + i, d) = (d == c % 4 ? 10.0 : 0.0) + (c >= 4 && d == (c + 1) % 4 ? 10.0 : 0.0) + jitter(gen);
  const int pk[] = {2, 3, 4, 5, 6, 7, 8, 10, 12};
  const auto rows = elbow_curve(planted, pk, 8, 3);
  std::size_t best = 1;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].delta_sse < rows[best].delta_sse) best = i;
  const double secs = seconds_since(t0);
  return {monotone && sse_n == 0.0 && rows[best].k <= 6 && secs < kKmeansSeconds,
          std::string("monotone=") + (monotone ? "yes" : "no") + ", sse(k=n)=" + num(sse_n) +
              ", largest drop at k=" + std::to_string(rows[best].k) + ", " + num(secs) + "s"};
}

struct Cell {
  double rfid, pfid, gini;
};

std::map<std::string, std::map<std::uint64_t, Cell>> read_cells(const fs::path& run_dir) {
  const Json j = Json::parse(read_file(run_dir / "ablation.json"));
  std::map<std::string, std::map<std::uint64_t, Cell>> out;
  for (const Json& c : j["cells"]) {
    if (c["status"] != "ok") continue;
    out[c["variant"].get<std::string>()][c["seed"].get<std::uint64_t>()] =
        Cell{c["rfid"].get<double>(), c["pfid"].get<double>(), c["gini"].get<double>()};
  }
  return out;
}

double mean_of(const std::map<std::uint64_t, Cell>& cells, double Cell::*field) {
  double s = 0.0;
  for (const auto& [seed, c] : cells) s += c.*field;
  return s / static_cast<double>(cells.size());
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config_path = argc > 1 ? fs::path(argv[1]) : fs::path(ROBUSTLAT_ACCEPTANCE_CONFIG);

  report(1, "Frechet closed form", frechet_closed_form);
  report(2, "PSD matrix square root", matrix_sqrt);
  report(3, "perturbation exactness", perturbation_exactness);
  report(4, "pFID protocol", pfid_protocol);
  report(5, "gradient check", gradient_check);
  report(6, "annealing endpoints", annealing_endpoints);

  // 7, 8, 9 share one ablation grid; 11 repeats it.
  std::optional<std::map<std::string, std::map<std::uint64_t, Cell>>> cells;
  std::string grid_error;
  double cpu_seconds = 0.0;
  Json outputs_a, outputs_b;
  oracle::TempDir scratch("acceptance");
  try {
    ExperimentConfig cfg = load_config(config_path);
    cfg.data_dir = scratch.path() / "data";
    cfg.output_dir = scratch.path() / "run_a";
    RunOptions opt;
    opt.threads = default_thread_count();
    cmd_gen_data(cfg, opt);
    const std::clock_t c0 = std::clock();
    const RunResult a = cmd_ablate(cfg, opt);
    cpu_seconds = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
    cells = read_cells(a.run_dir);
    outputs_a = a.manifest["outputs"];
    cfg.output_dir = scratch.path() / "run_b";
    const RunResult b = cmd_ablate(cfg, opt);
    outputs_b = b.manifest["outputs"];
  } catch (const std::exception& e) {
    grid_error = e.what();
  }

  auto need = [&](std::initializer_list<const char*> names) {
    if (!cells) throw std::runtime_error("ablation grid failed: " + grid_error);
    for (const char* n : names)
      if (!cells->count(n) || cells->at(n).size() < 3)
        throw std::runtime_error(std::string("variant \"") + n + "\" has fewer than 3 completed seeds");
  };

  report(7, "perturbation proportion (beta 0.5 vs 0.1, rFID)", [&]() -> Outcome {
    need({"beta0.1", "beta0.5"});
    const double hi = mean_of(cells->at("beta0.5"), &Cell::rfid), lo = mean_of(cells->at("beta0.1"), &Cell::rfid);
    return {hi > lo && cpu_seconds < kAblationCpuSeconds,
            "mean rFID beta=0.5 " + num(hi) + " vs beta=0.1 " + num(lo) + ", grid CPU " + num(cpu_seconds) + "s"};
  });

  report(8, "annealing (final_scale 0.5 vs 0, pFID)", [&]() -> Outcome {
    need({"beta0.1", "anneal_none"});
    const double half = mean_of(cells->at("beta0.1"), &Cell::pfid), none = mean_of(cells->at("anneal_none"), &Cell::pfid);
    return {half < none, "mean pFID final_scale=0.5 " + num(half) + " vs final_scale=0 " + num(none)};
  });

  report(9, "perturbation training vs baseline", [&]() -> Outcome {
    need({"beta0.1", "baseline"});
    int wins = 0, pairs = 0;
    std::string per_seed;
    for (const auto& [seed, p] : cells->at("beta0.1")) {
      if (!cells->at("baseline").count(seed)) continue;
      const Cell& b = cells->at("baseline").at(seed);
      const bool a_ok = p.pfid < b.pfid && p.rfid <= 2.0 * b.rfid;
      const bool b_ok = p.gini > b.gini;
      wins += a_ok && b_ok;
      ++pairs;
      per_seed += " seed" + std::to_string(seed) + "(pfid " + (a_ok ? "ok" : "no") + ", gini " + (b_ok ? "ok" : "no") + ")";
    }
    return {pairs >= 3 && wins >= 2, std::to_string(wins) + "/" + std::to_string(pairs) + " seed pairs satisfy both;" +
                                         per_seed};
  });

  report(10, "k-means elbow", kmeans_properties);

  report(11, "determinism of ablate", [&]() -> Outcome {
    if (!cells) throw std::runtime_error("ablation grid failed: " + grid_error);
    const bool same = !outputs_a.empty() && outputs_a == outputs_b;
    return {same, std::to_string(outputs_a.size()) + " output files, trees " + (same ? "identical" : "DIFFER")};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
