#include "robustlat/pfid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "robustlat/error.hpp"
#include "robustlat/parallel.hpp"
#include "robustlat/perturbation.hpp"

namespace robustlat {

namespace {

std::span<const Image> evaluation_subset(std::span<const Image> images, std::size_t sample_count) {
  if (sample_count == 0 || sample_count >= images.size()) return images;
  return images.first(sample_count);
}

void require_generative_extractor(const FeatureExtractorSpec& spec) {
  if (spec.kind != ExtractorKind::random_projection)
    throw std::invalid_argument("rFID/pFID need an extractor that can embed reconstructions (random_projection)");
}

}  // namespace

void PfidConfig::validate() const {
  if (beta != 1.0) throw std::invalid_argument("pFID requires beta == 1 (every image perturbed)");
  if (alphas.empty() || deltas.empty()) throw std::invalid_argument("pFID grid must be non-empty");
  for (double a : alphas)
    if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("pFID alphas must lie in (0, 1]");
  for (int d : deltas)
    if (d < 1) throw std::invalid_argument("pFID deltas must be positive");
  if (k_ref < 2) throw std::invalid_argument("pFID k_ref must be >= 2");
  extractor.validate();
}

int scale_delta(int delta_nominal, std::size_t num_codes, int k_ref) {
  const double scaled = static_cast<double>(delta_nominal) * static_cast<double>(num_codes) / k_ref;
  const auto rounded = static_cast<std::int64_t>(round_half_up(scaled));
  const auto upper = static_cast<std::int64_t>(num_codes) - 1;
  return static_cast<int>(std::max<std::int64_t>(1, std::min(upper, rounded)));
}

std::size_t required_neighbor_depth(const PfidConfig& cfg, std::size_t num_codes) {
  std::size_t depth = 1;
  for (int d : cfg.deltas) depth = std::max<std::size_t>(depth, scale_delta(d, num_codes, cfg.k_ref));
  return depth;
}

std::vector<Image> reconstruct_all(const Tokenizer& tokenizer, std::span<const Image> images) {
  std::vector<Image> out;
  out.reserve(images.size());
  for (const Image& im : images) out.push_back(tokenizer.reconstruct(im));
  return out;
}

double compute_rfid(const Tokenizer& tokenizer, std::span<const Image> images, const FeatureExtractorSpec& extractor) {
  require_generative_extractor(extractor);
  if (images.size() < 2) throw std::invalid_argument("rFID needs at least 2 images");
  const std::vector<Image> recon = reconstruct_all(tokenizer, images);
  return fid_between(recon, images, extractor);
}

PfidReport compute_pfid(const Tokenizer& tokenizer, std::span<const Image> images_all, const PfidConfig& cfg,
                        const NeighborTable& nt, int threads) {
  cfg.validate();
  require_generative_extractor(cfg.extractor);
  const std::span<const Image> images = evaluation_subset(images_all, cfg.sample_count);
  if (images.size() < 2) throw std::invalid_argument("pFID needs at least 2 images");
  const std::size_t k = tokenizer.codebook().num_codes();
  if (nt.num_codes != k) throw std::invalid_argument("neighbour table K does not match the tokenizer codebook");
  const std::size_t need = required_neighbor_depth(cfg, k);
  if (nt.delta_max < need)
    throw std::invalid_argument("neighbour table depth " + std::to_string(nt.delta_max) +
                                " is shallower than the largest scaled delta " + std::to_string(need));

  PfidReport report;
  report.config = cfg;
  const FeatureStats reference = fit_stats(extract_features(images, cfg.extractor));

  std::vector<TokenGrid> clean;
  clean.reserve(images.size());
  for (const Image& im : images) clean.push_back(tokenizer.tokenize(im));
  {
    std::vector<Image> recon;
    recon.reserve(clean.size());
    for (const TokenGrid& t : clean) recon.push_back(tokenizer.decode_tokens(t));
    report.rfid = frechet_distance(fit_stats(extract_features(recon, cfg.extractor)), reference);
  }

  for (double a : cfg.alphas)
    for (int d : cfg.deltas) report.per_setting.push_back({a, d, scale_delta(d, k, cfg.k_ref), 1.0, 0.0, 0});

  parallel_for(report.per_setting.size(), threads, [&](std::size_t i) {
    PfidRow& row = report.per_setting[i];
    PerturbationSpec spec;
    spec.alpha = row.alpha;
    spec.beta = 1.0;
    spec.delta = row.delta_scaled;
    spec.seed = cfg.eval_seed;
    const PerturbedBatch perturbed = perturb_batch(clean, spec, nt, i);
    std::vector<Image> recon;
    recon.reserve(perturbed.tokens.size());
    for (const TokenGrid& t : perturbed.tokens) recon.push_back(tokenizer.decode_tokens(t));
    row.fid = frechet_distance(fit_stats(extract_features(recon, cfg.extractor)), reference);
    row.tokens_replaced = perturbed.report.tokens_replaced;
  });

  double sum = 0.0;
  for (const PfidRow& row : report.per_setting) sum += row.fid;
  report.pfid = sum / static_cast<double>(report.per_setting.size());
  return report;
}

void write_pfid_csv(const std::filesystem::path& path, const PfidReport& report) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "alpha,beta,delta_nominal,delta_scaled,fid,tokens_replaced\n";
  for (const PfidRow& r : report.per_setting)
    os << r.alpha << ',' << r.beta << ',' << r.delta_nominal << ',' << r.delta_scaled << ',' << r.fid << ','
       << r.tokens_replaced << '\n';
}

void to_json(Json& j, const PfidConfig& c) {
  j = Json{{"alphas", c.alphas}, {"deltas", c.deltas},           {"beta", c.beta},
           {"k_ref", c.k_ref},   {"extractor", c.extractor},     {"eval_seed", c.eval_seed},
           {"sample_count", c.sample_count}};
}

void from_json(const Json& j, PfidConfig& c) {
  const std::string ctx = "pfid";
  require_known_keys(j, {"alphas", "deltas", "beta", "k_ref", "extractor", "eval_seed", "sample_count"}, ctx);
  c.alphas = get_or<std::vector<double>>(j, "alphas", c.alphas, ctx);
  c.deltas = get_or<std::vector<int>>(j, "deltas", c.deltas, ctx);
  c.beta = get_or<double>(j, "beta", c.beta, ctx);
  c.k_ref = get_or<int>(j, "k_ref", c.k_ref, ctx);
  if (j.contains("extractor")) c.extractor = j.at("extractor").get<FeatureExtractorSpec>();
  c.eval_seed = get_or<std::uint64_t>(j, "eval_seed", c.eval_seed, ctx);
  c.sample_count = get_or<std::size_t>(j, "sample_count", c.sample_count, ctx);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

void to_json(Json& j, const PfidReport& r) {
  Json rows = Json::array();
  for (const PfidRow& row : r.per_setting)
    rows.push_back({{"alpha", row.alpha},
                    {"beta", row.beta},
                    {"delta_nominal", row.delta_nominal},
                    {"delta_scaled", row.delta_scaled},
                    {"fid", row.fid},
                    {"tokens_replaced", row.tokens_replaced}});
  j = Json{{"per_setting", rows}, {"pfid", r.pfid}, {"rfid", r.rfid}, {"config", r.config}};
}

}  // namespace robustlat
