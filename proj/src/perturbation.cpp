#include "robustlat/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include "robustlat/error.hpp"

namespace robustlat {

namespace {

constexpr std::uint64_t kSelectionStream = 0x53454C45ull;  // "SELE"
constexpr std::uint64_t kImageStream = 0x494D4147ull;      // "IMAG"

std::uint32_t draw_replacement(const NeighborTable& nt, std::uint32_t old_index, int delta,
                               ReplacementSampling sampling, Philox& rng) {
  const auto row = nt.row(old_index).first(static_cast<std::size_t>(delta));
  if (sampling == ReplacementSampling::uniform || delta == 1)
    return row[static_cast<std::size_t>(rng.uniform_below(static_cast<std::uint64_t>(delta)))];

  // Weight exp(-d / mean d) over the candidate set; falls back to uniform
  // when every candidate sits at distance zero.
  const auto dist = nt.row_distances(old_index).first(static_cast<std::size_t>(delta));
  double mean = 0.0;
  for (double d : dist) mean += d;
  mean /= delta;
  if (mean <= 0.0) return row[static_cast<std::size_t>(rng.uniform_below(static_cast<std::uint64_t>(delta)))];
  std::vector<double> cdf(dist.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) cdf[i] = acc += std::exp(-dist[i] / mean);
  const double u = rng.uniform01() * acc;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return row[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), dist.size() - 1)];
}

}  // namespace

void PerturbationSpec::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("perturbation alpha must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("perturbation beta must lie in [0, 1]");
  if (delta < 1) throw std::invalid_argument("perturbation delta must be >= 1");
}

void AnnealSchedule::validate() const {
  initial.validate();
  if (!(final_scale >= 0.0 && final_scale <= 1.0)) throw std::invalid_argument("final_scale must lie in [0, 1]");
  if (total_steps < 1) throw std::invalid_argument("total_steps must be positive");
}

void PerturbationReport::merge(const PerturbationReport& other) {
  images_perturbed += other.images_perturbed;
  tokens_replaced += other.tokens_replaced;
  if (logging || other.logging) {
    logging = true;
    replacement_log.insert(replacement_log.end(), other.replacement_log.begin(), other.replacement_log.end());
  }
}

std::size_t round_half_up(double x) {
  if (!(x >= 0.0)) return 0;
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

PerturbedGrid perturb_grid(const TokenGrid& tokens, const PerturbationSpec& spec, const NeighborTable& nt,
                           Philox& stream, bool log, std::size_t image_index) {
  spec.validate();
  if (static_cast<std::size_t>(spec.delta) > nt.delta_max)
    throw std::invalid_argument("perturbation delta " + std::to_string(spec.delta) +
                                " exceeds neighbour table depth " + std::to_string(nt.delta_max));
  if (tokens.num_codes != nt.num_codes)
    throw std::invalid_argument("token grid K does not match neighbour table K");

  PerturbedGrid out{tokens, {}};
  out.report.logging = log;
  const std::size_t cells = tokens.cells();
  const std::size_t count = std::min(cells, round_half_up(spec.alpha * static_cast<double>(cells)));
  if (count == 0) return out;

  std::vector<std::size_t> positions(count);
  sample_without_replacement(stream, cells, count, positions);
  for (std::size_t pos : positions) {
    const std::uint32_t old_index = tokens.indices[pos];
    if (old_index >= nt.num_codes) throw InputError("corrupt token grid: index out of range");
    const std::uint32_t new_index = draw_replacement(nt, old_index, spec.delta, spec.sampling, stream);
    out.tokens.indices[pos] = new_index;
    if (log) {
      out.report.replacement_log.push_back({image_index, static_cast<int>(pos / tokens.width),
                                            static_cast<int>(pos % tokens.width), old_index, new_index});
    }
  }
  out.report.tokens_replaced = count;
  out.report.images_perturbed = 1;
  return out;
}

PerturbedBatch perturb_batch(std::span<const TokenGrid> batch, const PerturbationSpec& spec,
                             const NeighborTable& nt, std::uint64_t batch_counter, bool log) {
  spec.validate();
  PerturbedBatch out;
  out.report.logging = log;
  if (batch.empty()) return out;
  for (const TokenGrid& g : batch)
    if (g.num_codes != batch.front().num_codes) throw std::invalid_argument("batch grids do not share K");

  out.tokens.assign(batch.begin(), batch.end());
  const std::size_t n = batch.size();
  const std::size_t n_sel = std::min(n, round_half_up(spec.beta * static_cast<double>(n)));
  if (n_sel == 0) return out;

  out.selected.resize(n_sel);
  Philox select(spec.seed, {kSelectionStream, batch_counter});
  sample_without_replacement(select, n, n_sel, out.selected);
  std::sort(out.selected.begin(), out.selected.end());

  for (std::size_t pos : out.selected) {
    Philox stream(spec.seed, {kImageStream, batch_counter, pos});
    PerturbedGrid pg = perturb_grid(batch[pos], spec, nt, stream, log, pos);
    out.tokens[pos] = std::move(pg.tokens);
    out.report.merge(pg.report);
  }
  return out;
}

PerturbationSpec anneal_at(const AnnealSchedule& sched, std::int64_t step) {
  const double t = sched.total_steps <= 0
                       ? 1.0
                       : std::clamp(static_cast<double>(std::max<std::int64_t>(step, 0)) /
                                        static_cast<double>(sched.total_steps),
                                    0.0, 1.0);
  double f = 0.0;
  switch (sched.shape) {
    case AnnealShape::linear: f = t; break;
    case AnnealShape::cosine: f = 0.5 * (1.0 - std::cos(std::numbers::pi * t)); break;
    case AnnealShape::constant: f = 0.0; break;
  }
  const double factor = 1.0 - (1.0 - sched.final_scale) * f;
  PerturbationSpec live = sched.initial;
  if (sched.anneal_alpha) live.alpha = std::clamp(sched.initial.alpha * factor, 0.0, 1.0);
  if (sched.anneal_delta)
    live.delta = std::max<int>(1, static_cast<int>(round_half_up(sched.initial.delta * factor)));
  return live;
}

void write_replacement_csv(const std::filesystem::path& path, const PerturbationReport& report) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os << "image,h,w,old,new\n";
  for (const Replacement& r : report.replacement_log)
    os << r.image << ',' << r.h << ',' << r.w << ',' << r.old_index << ',' << r.new_index << '\n';
}

const char* to_string(AnnealShape shape) {
  switch (shape) {
    case AnnealShape::linear: return "linear";
    case AnnealShape::cosine: return "cosine";
    case AnnealShape::constant: return "constant";
  }
  return "constant";
}

AnnealShape anneal_shape_from_string(const std::string& name) {
  if (name == "linear") return AnnealShape::linear;
  if (name == "cosine") return AnnealShape::cosine;
  if (name == "constant") return AnnealShape::constant;
  throw ConfigError("unknown anneal shape \"" + name + "\" (expected linear, cosine or constant)");
}

namespace {

const char* sampling_name(ReplacementSampling s) {
  return s == ReplacementSampling::uniform ? "uniform" : "distance_weighted";
}

ReplacementSampling sampling_from_string(const std::string& name) {
  if (name == "uniform") return ReplacementSampling::uniform;
  if (name == "distance_weighted") return ReplacementSampling::distance_weighted;
  throw ConfigError("unknown replacement sampling \"" + name + "\"");
}

void read_spec_fields(const Json& j, PerturbationSpec& s, const std::string& ctx) {
  s.alpha = get_or<double>(j, "alpha", s.alpha, ctx);
  s.beta = get_or<double>(j, "beta", s.beta, ctx);
  s.delta = get_or<int>(j, "delta", s.delta, ctx);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed, ctx);
  s.sampling = sampling_from_string(get_or<std::string>(j, "sampling", sampling_name(s.sampling), ctx));
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

}  // namespace

void to_json(Json& j, const PerturbationSpec& s) {
  j = Json{{"alpha", s.alpha}, {"beta", s.beta}, {"delta", s.delta}, {"seed", s.seed},
           {"sampling", sampling_name(s.sampling)}};
}

void from_json(const Json& j, PerturbationSpec& s) {
  require_known_keys(j, {"alpha", "beta", "delta", "seed", "sampling"}, "perturbation");
  read_spec_fields(j, s, "perturbation");
}

void to_json(Json& j, const AnnealSchedule& s) {
  to_json(j, s.initial);
  j["final_scale"] = s.final_scale;
  j["total_steps"] = s.total_steps;
  j["shape"] = to_string(s.shape);
  j["anneal_alpha"] = s.anneal_alpha;
  j["anneal_delta"] = s.anneal_delta;
}

void from_json(const Json& j, AnnealSchedule& s) {
  const std::string ctx = "perturbation";
  require_known_keys(j,
                     {"alpha", "beta", "delta", "seed", "sampling", "final_scale", "total_steps", "shape",
                      "anneal_alpha", "anneal_delta"},
                     ctx);
  read_spec_fields(j, s.initial, ctx);
  s.final_scale = get_or<double>(j, "final_scale", s.final_scale, ctx);
  s.total_steps = get_or<std::int64_t>(j, "total_steps", s.total_steps, ctx);
  s.shape = anneal_shape_from_string(get_or<std::string>(j, "shape", to_string(s.shape), ctx));
  s.anneal_alpha = get_or<bool>(j, "anneal_alpha", s.anneal_alpha, ctx);
  s.anneal_delta = get_or<bool>(j, "anneal_delta", s.anneal_delta, ctx);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

}  // namespace robustlat
