#include "robustlat/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "robustlat/analysis.hpp"
#include "robustlat/error.hpp"
#include "robustlat/hashing.hpp"
#include "robustlat/parallel.hpp"
#include "robustlat/rng.hpp"
#include "robustlat/svg.hpp"

namespace robustlat {

namespace fs = std::filesystem;

namespace {

// Sub-seed tags under the root seed.
enum SeedTag : std::uint64_t {
  kTagDataset = 1,
  kTagTrain = 2,
  kTagPerturbation = 3,
  kTagEval = 4,
  kTagExtractor = 5,
  kTagAnalysis = 6,
};

template <typename Fn>
auto as_config_error(const std::string& ctx, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  } catch (const Json::exception& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

TrainSettings parse_train(const Json& j, std::uint64_t root) {
  const std::string ctx = "train";
  require_known_keys(j,
                     {"steps", "batch_size", "learning_rate", "codebook_lr_scale", "lambda_rec", "lambda_vq",
                      "commitment_weight", "eval_every", "dead_code_steps", "checkpoint_every", "seed",
                      "perturbation"},
                     ctx);
  TrainSettings s;
  TrainConfig& c = s.config;
  c.steps = get_or<std::int64_t>(j, "steps", c.steps, ctx);
  c.batch_size = get_or<std::size_t>(j, "batch_size", c.batch_size, ctx);
  c.learning_rate = get_or<double>(j, "learning_rate", c.learning_rate, ctx);
  c.codebook_lr_scale = get_or<double>(j, "codebook_lr_scale", c.codebook_lr_scale, ctx);
  c.loss.lambda_rec = get_or<double>(j, "lambda_rec", c.loss.lambda_rec, ctx);
  c.loss.lambda_vq = get_or<double>(j, "lambda_vq", c.loss.lambda_vq, ctx);
  c.loss.commitment_weight = get_or<double>(j, "commitment_weight", c.loss.commitment_weight, ctx);
  c.eval_every = get_or<std::int64_t>(j, "eval_every", c.eval_every, ctx);
  c.dead_code_steps = get_or<std::int64_t>(j, "dead_code_steps", c.dead_code_steps, ctx);
  s.checkpoint_every = get_or<std::int64_t>(j, "checkpoint_every", s.checkpoint_every, ctx);
  c.seed = get_or<std::uint64_t>(j, "seed", derive_key(root, {kTagTrain}), ctx);
  if (s.checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");

  Json pj = j.value("perturbation", Json::object());
  if (!pj.is_object()) throw ConfigError("train.perturbation: expected a JSON object");
  s.scale_delta = get_or<bool>(pj, "scale_delta", s.scale_delta, "train.perturbation");
  pj.erase("scale_delta");
  if (!pj.contains("seed")) pj["seed"] = derive_key(root, {kTagPerturbation});
  if (!pj.contains("total_steps")) pj["total_steps"] = std::max<std::int64_t>(1, c.steps);
  c.perturbation = pj.get<AnnealSchedule>();
  as_config_error(ctx, [&] {
    c.validate();
    return 0;
  });
  return s;
}

AnalysisOptions parse_analysis(const Json& j, std::uint64_t root) {
  const std::string ctx = "analysis";
  require_known_keys(j,
                     {"usage_thresholds", "elbow_ks", "kmeans_restarts", "kmeans_max_iters", "kmeans_max_points",
                      "lipschitz_samples", "lipschitz_alpha", "lipschitz_delta", "svg", "seed"},
                     ctx);
  AnalysisOptions a;
  a.usage_thresholds = get_or(j, "usage_thresholds", a.usage_thresholds, ctx);
  a.elbow_ks = get_or(j, "elbow_ks", a.elbow_ks, ctx);
  a.kmeans_restarts = get_or(j, "kmeans_restarts", a.kmeans_restarts, ctx);
  a.kmeans_max_iters = get_or(j, "kmeans_max_iters", a.kmeans_max_iters, ctx);
  a.kmeans_max_points = get_or(j, "kmeans_max_points", a.kmeans_max_points, ctx);
  a.lipschitz_samples = get_or(j, "lipschitz_samples", a.lipschitz_samples, ctx);
  a.lipschitz_alpha = get_or(j, "lipschitz_alpha", a.lipschitz_alpha, ctx);
  a.lipschitz_delta = get_or(j, "lipschitz_delta", a.lipschitz_delta, ctx);
  a.svg = get_or(j, "svg", a.svg, ctx);
  a.seed = get_or<std::uint64_t>(j, "seed", derive_key(root, {kTagAnalysis}), ctx);
  if (a.elbow_ks.empty() || std::any_of(a.elbow_ks.begin(), a.elbow_ks.end(), [](int k) { return k < 1; }))
    throw ConfigError("analysis.elbow_ks must be a non-empty list of positive integers");
  if (!std::is_sorted(a.elbow_ks.begin(), a.elbow_ks.end()) ||
      std::adjacent_find(a.elbow_ks.begin(), a.elbow_ks.end()) != a.elbow_ks.end())
    throw ConfigError("analysis.elbow_ks must be strictly increasing");
  if (a.kmeans_restarts < 1 || a.kmeans_max_iters < 1 || a.kmeans_max_points < 1)
    throw ConfigError("analysis: k-means restarts, iterations and max points must be positive");
  if (!(a.lipschitz_alpha > 0.0 && a.lipschitz_alpha <= 1.0))
    throw ConfigError("analysis.lipschitz_alpha must lie in (0, 1]");
  if (a.lipschitz_delta < 1) throw ConfigError("analysis.lipschitz_delta must be positive");
  return a;
}

AblationSpec parse_ablation(const Json& j) {
  const std::string ctx = "ablation";
  require_known_keys(j, {"variants", "seeds"}, ctx);
  AblationSpec a;
  a.seeds = get_or(j, "seeds", a.seeds, ctx);
  if (a.seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  if (std::set<std::uint64_t>(a.seeds.begin(), a.seeds.end()).size() != a.seeds.size())
    throw ConfigError("ablation.seeds must be distinct");
  std::set<std::string> names;
  for (const Json& vj : j.value("variants", Json::array())) {
    const std::string vctx = "ablation.variants[]";
    require_known_keys(vj, {"name", "alpha", "beta", "delta", "final_scale", "shape", "learning_rate"}, vctx);
    AblationVariant v;
    v.name = get_required<std::string>(vj, "name", vctx);
    if (v.name.empty() || v.name.find_first_of("/\\ ,") != std::string::npos)
      throw ConfigError(vctx + ": name must be non-empty without separators, spaces or commas");
    if (!names.insert(v.name).second) throw ConfigError(vctx + ": duplicate name \"" + v.name + "\"");
    if (vj.contains("alpha")) v.alpha = get_required<double>(vj, "alpha", vctx);
    if (vj.contains("beta")) v.beta = get_required<double>(vj, "beta", vctx);
    if (vj.contains("delta")) v.delta = get_required<int>(vj, "delta", vctx);
    if (vj.contains("final_scale")) v.final_scale = get_required<double>(vj, "final_scale", vctx);
    if (vj.contains("shape")) v.shape = get_required<std::string>(vj, "shape", vctx);
    if (vj.contains("learning_rate")) v.learning_rate = get_required<double>(vj, "learning_rate", vctx);
    a.variants.push_back(std::move(v));
  }
  return a;
}

ExperimentConfig apply_variant(const ExperimentConfig& base, const AblationVariant& v) {
  ExperimentConfig cfg = base;
  AnnealSchedule& s = cfg.train.config.perturbation;
  if (v.alpha) s.initial.alpha = *v.alpha;
  if (v.beta) s.initial.beta = *v.beta;
  if (v.delta) s.initial.delta = *v.delta;
  if (v.final_scale) s.final_scale = *v.final_scale;
  if (v.shape) s.shape = anneal_shape_from_string(*v.shape);
  if (v.learning_rate) cfg.train.config.learning_rate = *v.learning_rate;
  return cfg;
}

ExperimentConfig cell_config(const ExperimentConfig& base, const AblationVariant& v, std::uint64_t seed) {
  ExperimentConfig cfg = apply_variant(base, v);
  cfg.train.config.seed = derive_key(base.seed, {kTagTrain, seed});
  cfg.train.config.perturbation.initial.seed = derive_key(base.seed, {kTagPerturbation, seed});
  return cfg;
}

void check_consistency(const ExperimentConfig& cfg) {
  if (cfg.dataset.side != cfg.tokenizer.image_side || cfg.dataset.channels != cfg.tokenizer.channels)
    throw ConfigError("dataset side/channels must match tokenizer image_side/channels");
  if (cfg.pfid.extractor.kind != ExtractorKind::random_projection)
    throw ConfigError("pfid.extractor must be random_projection: reconstructions have no external features");
  const auto k = static_cast<std::size_t>(cfg.tokenizer.codebook_size);
  const TrainConfig tc = effective_train_config(cfg);
  if (static_cast<std::size_t>(tc.perturbation.initial.delta) >= k)
    throw ConfigError("train.perturbation.delta (after scaling) must be below codebook_size");
  for (const AblationVariant& v : cfg.ablation.variants) {
    as_config_error("ablation variant \"" + v.name + "\"", [&] {
      const TrainConfig vc = effective_train_config(apply_variant(cfg, v));
      vc.validate();
      if (static_cast<std::size_t>(vc.perturbation.initial.delta) >= k)
        throw std::invalid_argument("delta (after scaling) must be below codebook_size");
      return 0;
    });
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw InputError("write failed: " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

std::string short_hash(const std::string& h) { return h.substr(0, 12); }

// Outputs are assembled in a staging directory and renamed into place only
// after the command succeeds.
class RunDir {
 public:
  RunDir(const fs::path& output_dir, const std::string& name) : final_(output_dir / name) {
    staging_ = output_dir / (name + ".partial");
    if (fs::exists(final_)) {
      if (!fs::exists(final_ / "run_manifest.json"))
        throw InputError("refusing to replace " + final_.string() + ": not a run directory");
      fs::remove_all(final_);
    }
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
  ~RunDir() {
    if (!committed_ && !keep_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  const fs::path& path() const noexcept { return staging_; }
  const fs::path& final_path() const noexcept { return final_; }
  void keep_on_failure() noexcept { keep_ = true; }
  void commit() {
    fs::rename(staging_, final_);
    committed_ = true;
  }

 private:
  fs::path final_, staging_;
  bool committed_ = false;
  bool keep_ = false;
};

Json hash_tree(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::vector<std::pair<std::string, std::string>> rows;
  for (const fs::path& p : files) rows.emplace_back(fs::relative(p, root).generic_string(), git_blob_hash_file(p));
  std::sort(rows.begin(), rows.end());
  Json out = Json::object();
  for (const auto& [rel, h] : rows) out[rel] = h;
  return out;
}

Json seed_registry(const ExperimentConfig& cfg) {
  return Json{{"root", cfg.seed},
              {"dataset", cfg.dataset.seed},
              {"train", cfg.train.config.seed},
              {"perturbation", cfg.train.config.perturbation.initial.seed},
              {"eval", cfg.pfid.eval_seed},
              {"extractor", cfg.pfid.extractor.seed},
              {"analysis", cfg.analysis.seed}};
}

Json finish_run(RunDir& dir, const std::string& command, const ExperimentConfig& cfg, const Json& inputs,
                std::chrono::steady_clock::time_point start) {
  Json manifest{{"tool_version", kToolVersion},
                {"command", command},
                {"config_hash", config_hash(cfg)},
                {"config", config_to_json(cfg)},
                {"inputs", inputs},
                {"outputs", hash_tree(dir.path())},
                {"seeds", seed_registry(cfg)}};
  manifest["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(dir.path() / "run_manifest.json", manifest);
  dir.commit();
  return manifest;
}

struct Corpus {
  std::vector<Image> images;
  std::vector<int> labels;
  std::string manifest_hash;
};

Corpus load_corpus(const ExperimentConfig& cfg) {
  const fs::path manifest_path = cfg.data_dir / "manifest.json";
  LabeledImages set = load_images(cfg.data_dir);
  const Json manifest = Json::parse(read_file(manifest_path));
  if (!manifest.contains("spec") || manifest["spec"] != Json(cfg.dataset))
    throw InputError("corpus at " + cfg.data_dir.string() +
                     " was generated from a different dataset spec; run gen-data with this config");
  if (set.images.empty()) throw InputError("corpus at " + cfg.data_dir.string() + " is empty");
  if (set.images.front().shape != cfg.tokenizer.image_shape())
    throw InputError("corpus image shape does not match the tokenizer");
  return {std::move(set.images), std::move(set.labels), git_blob_hash_file(manifest_path)};
}

Checkpoint load_checked_checkpoint(const ExperimentConfig& cfg, const fs::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (Json(ck.params.arch()) != Json(cfg.tokenizer))
    throw InputError("checkpoint " + path.string() + " architecture does not match the config tokenizer");
  return ck;
}

const fs::path& require_checkpoint(const RunOptions& opt, const char* command) {
  if (!opt.checkpoint) throw ConfigError(std::string(command) + " requires --checkpoint");
  if (!fs::exists(*opt.checkpoint)) throw InputError("checkpoint not found: " + opt.checkpoint->string());
  return *opt.checkpoint;
}

std::string run_name(const std::string& command, const ExperimentConfig& cfg, const std::string& extra = {}) {
  return command + "-" + short_hash(git_blob_hash(config_hash(cfg) + extra));
}

PfidReport evaluate(const ToyTokenizer& tok, std::span<const Image> images, const PfidConfig& pcfg, int threads) {
  const NeighborTable nt = build_neighbor_table(tok.codebook(), required_neighbor_depth(pcfg, tok.codebook().num_codes()));
  return compute_pfid(tok, images, pcfg, nt, threads);
}

void merge_reports(TrainReport& into, const TrainReport& part) {
  into.curve.insert(into.curve.end(), part.curve.begin(), part.curve.end());
  if (into.perturbed_tokens_per_epoch.size() < part.perturbed_tokens_per_epoch.size())
    into.perturbed_tokens_per_epoch.resize(part.perturbed_tokens_per_epoch.size(), 0);
  for (std::size_t i = 0; i < part.perturbed_tokens_per_epoch.size(); ++i)
    into.perturbed_tokens_per_epoch[i] += part.perturbed_tokens_per_epoch[i];
  into.images_perturbed += part.images_perturbed;
  into.tokens_replaced += part.tokens_replaced;
  into.codewords_reseeded += part.codewords_reseeded;
  into.usage_counts = part.usage_counts;
  into.wall_clock_seconds += part.wall_clock_seconds;
}

void write_loss_csv(const fs::path& path, const TrainReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "step,reconstruction,vq,total\n";
  for (const CurvePoint& p : r.curve) os << p.step << ',' << p.reconstruction << ',' << p.vq << ',' << p.total << '\n';
  write_text(path, os.str());
}

struct TrainOutcome {
  TrainResult result;
  PfidReport eval;
};

// Trains (optionally resuming), evaluates and writes checkpoint, report and
// curves into `dir`. NaN aborts leave diagnostic.json behind and rethrow.
TrainOutcome run_training(const ExperimentConfig& cfg, std::span<const Image> images, std::optional<Checkpoint> resume,
                          const fs::path& dir, int threads) {
  const TrainConfig tc = effective_train_config(cfg);
  ToyTokenizer params = resume ? resume->params : ToyTokenizer::random_init(cfg.tokenizer, tc.seed);
  TrainState state = resume ? resume->state : TrainState{};
  if (!resume) init_codebook_from_data(params, images, tc.seed);

  TrainReport report;
  try {
    const std::int64_t every = cfg.train.checkpoint_every;
    do {
      TrainConfig segment = tc;
      if (every > 0) segment.steps = std::min(tc.steps, (state.step / every + 1) * every);
      TrainResult part = train(images, std::move(params), segment, std::move(state));
      params = std::move(part.params);
      state = std::move(part.state);
      merge_reports(report, part.report);
      if (every > 0 && state.step < tc.steps) {
        fs::create_directories(dir / "checkpoints");
        save_checkpoint(dir / "checkpoints" / ("step_" + std::to_string(state.step) + ".rtck"), params, state);
      }
    } while (state.step < tc.steps);
    if (report.usage_counts.empty()) report.usage_counts = token_usage(params, images);
  } catch (const NumericalError& e) {
    write_json(dir / "diagnostic.json", Json{{"error", e.what()}, {"completed_steps", state.step}});
    throw;
  }

  save_checkpoint(dir / "checkpoint.rtck", params, state);
  params.codebook().save(dir / "codebook.rtok");
  PfidReport eval = evaluate(params, images, cfg.pfid, threads);
  report.final_rfid = eval.rfid;
  report.final_pfid = eval.pfid;
  Json rj = report;
  rj["gini"] = gini_coefficient(report.usage_counts);
  rj["steps"] = state.step;
  write_json(dir / "train_report.json", rj);
  write_loss_csv(dir / "loss.csv", report);
  write_pfid_csv(dir / "pfid.csv", eval);
  write_json(dir / "eval.json", eval);
  return {TrainResult{std::move(params), std::move(state), std::move(report)}, std::move(eval)};
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ExperimentConfig parse_config(const Json& j, std::optional<std::uint64_t> root_seed_override) {
  require_known_keys(j, {"version", "seed", "dataset", "tokenizer", "train", "pfid", "analysis", "ablation", "paths"},
                     "config");
  const int version = get_required<int>(j, "version", "config");
  if (version != kConfigVersion)
    throw ConfigError("config: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  ExperimentConfig cfg;
  cfg.seed = root_seed_override ? *root_seed_override : get_or<std::uint64_t>(j, "seed", 0, "config");
  const std::uint64_t root = cfg.seed;

  Json dj = j.value("dataset", Json::object());
  if (dj.is_object() && !dj.contains("seed")) dj["seed"] = derive_key(root, {kTagDataset});
  cfg.dataset = dj.get<SyntheticSpec>();
  if (j.contains("tokenizer")) cfg.tokenizer = j.at("tokenizer").get<ToyArch>();
  cfg.train = parse_train(j.value("train", Json::object()), root);

  Json pj = j.value("pfid", Json::object());
  if (pj.is_object()) {
    if (!pj.contains("eval_seed")) pj["eval_seed"] = derive_key(root, {kTagEval});
    Json ej = pj.value("extractor", Json::object());
    if (ej.is_object() && !ej.contains("seed")) ej["seed"] = derive_key(root, {kTagExtractor});
    pj["extractor"] = ej;
  }
  cfg.pfid = pj.get<PfidConfig>();
  cfg.analysis = parse_analysis(j.value("analysis", Json::object()), root);
  cfg.ablation = parse_ablation(j.value("ablation", Json::object()));

  const Json paths = j.value("paths", Json::object());
  require_known_keys(paths, {"data_dir", "output_dir"}, "paths");
  cfg.data_dir = get_or<std::string>(paths, "data_dir", cfg.data_dir.string(), "paths");
  cfg.output_dir = get_or<std::string>(paths, "output_dir", cfg.output_dir.string(), "paths");
  check_consistency(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> root_seed_override) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig cfg = parse_config(j, root_seed_override);
  // Relative paths resolve against the config file's directory.
  const fs::path base = path.parent_path();
  if (cfg.data_dir.is_relative()) cfg.data_dir = base / cfg.data_dir;
  if (cfg.output_dir.is_relative()) cfg.output_dir = base / cfg.output_dir;
  return cfg;
}

Json config_to_json(const ExperimentConfig& cfg) {
  const TrainConfig& tc = cfg.train.config;
  Json perturbation = tc.perturbation;
  perturbation["scale_delta"] = cfg.train.scale_delta;
  Json variants = Json::array();
  for (const AblationVariant& v : cfg.ablation.variants) {
    Json vj{{"name", v.name}};
    if (v.alpha) vj["alpha"] = *v.alpha;
    if (v.beta) vj["beta"] = *v.beta;
    if (v.delta) vj["delta"] = *v.delta;
    if (v.final_scale) vj["final_scale"] = *v.final_scale;
    if (v.shape) vj["shape"] = *v.shape;
    if (v.learning_rate) vj["learning_rate"] = *v.learning_rate;
    variants.push_back(vj);
  }
  const AnalysisOptions& a = cfg.analysis;
  return Json{
      {"version", kConfigVersion},
      {"seed", cfg.seed},
      {"dataset", cfg.dataset},
      {"tokenizer", cfg.tokenizer},
      {"train",
       {{"steps", tc.steps},
        {"batch_size", tc.batch_size},
        {"learning_rate", tc.learning_rate},
        {"codebook_lr_scale", tc.codebook_lr_scale},
        {"lambda_rec", tc.loss.lambda_rec},
        {"lambda_vq", tc.loss.lambda_vq},
        {"commitment_weight", tc.loss.commitment_weight},
        {"eval_every", tc.eval_every},
        {"dead_code_steps", tc.dead_code_steps},
        {"checkpoint_every", cfg.train.checkpoint_every},
        {"seed", tc.seed},
        {"perturbation", perturbation}}},
      {"pfid", cfg.pfid},
      {"analysis",
       {{"usage_thresholds", a.usage_thresholds},
        {"elbow_ks", a.elbow_ks},
        {"kmeans_restarts", a.kmeans_restarts},
        {"kmeans_max_iters", a.kmeans_max_iters},
        {"kmeans_max_points", a.kmeans_max_points},
        {"lipschitz_samples", a.lipschitz_samples},
        {"lipschitz_alpha", a.lipschitz_alpha},
        {"lipschitz_delta", a.lipschitz_delta},
        {"svg", a.svg},
        {"seed", a.seed}}},
      {"ablation", {{"variants", variants}, {"seeds", cfg.ablation.seeds}}},
      {"paths", {{"data_dir", cfg.data_dir.generic_string()}, {"output_dir", cfg.output_dir.generic_string()}}}};
}

std::string config_hash(const ExperimentConfig& cfg) {
  // Locations are excluded so the same experiment hashes equally wherever it runs.
  Json j = config_to_json(cfg);
  j.erase("paths");
  return git_blob_hash(j.dump());
}

TrainConfig effective_train_config(const ExperimentConfig& cfg) {
  TrainConfig tc = cfg.train.config;
  if (cfg.train.scale_delta) {
    tc.perturbation.initial.delta = scale_delta(tc.perturbation.initial.delta,
                                                static_cast<std::size_t>(cfg.tokenizer.codebook_size), cfg.pfid.k_ref);
  }
  return tc;
}

RunResult cmd_gen_data(const ExperimentConfig& cfg, const RunOptions&) {
  const auto start = std::chrono::steady_clock::now();
  RunDir dir(cfg.output_dir, run_name("gen-data", cfg));
  const LabeledImages set = generate(cfg.dataset);
  fs::create_directories(cfg.data_dir);
  for (const auto& entry : fs::directory_iterator(cfg.data_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("class_", 0) == 0 && entry.path().extension() == ".png")
      fs::remove(entry.path());
  }
  save_images(cfg.data_dir, set, cfg.dataset);
  write_json(dir.path() / "corpus_hashes.json", hash_tree(cfg.data_dir));
  Json manifest = finish_run(dir, "gen-data", cfg, Json::object(), start);
  return {dir.final_path(), std::move(manifest)};
}

RunResult cmd_train(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const Corpus corpus = load_corpus(cfg);
  Json inputs{{"corpus_manifest", corpus.manifest_hash}};
  std::optional<Checkpoint> resume;
  std::string extra;
  if (opt.checkpoint) {
    resume = load_checked_checkpoint(cfg, require_checkpoint(opt, "train"));
    inputs["checkpoint"] = git_blob_hash_file(*opt.checkpoint);
    extra = inputs["checkpoint"].get<std::string>();
    if (resume->state.step > cfg.train.config.steps)
      throw InputError("checkpoint step " + std::to_string(resume->state.step) + " is beyond train.steps");
  }
  RunDir dir(cfg.output_dir, run_name("train", cfg, corpus.manifest_hash + extra));
  try {
    run_training(cfg, corpus.images, std::move(resume), dir.path(), opt.threads);
  } catch (const NumericalError&) {
    dir.keep_on_failure();
    throw;
  }
  Json manifest = finish_run(dir, "train", cfg, inputs, start);
  return {dir.final_path(), std::move(manifest)};
}

RunResult cmd_eval(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const fs::path& ck_path = require_checkpoint(opt, "eval");
  const Checkpoint ck = load_checked_checkpoint(cfg, ck_path);
  const Corpus corpus = load_corpus(cfg);
  const Json inputs{{"corpus_manifest", corpus.manifest_hash}, {"checkpoint", git_blob_hash_file(ck_path)}};
  RunDir dir(cfg.output_dir, run_name("eval", cfg, corpus.manifest_hash + inputs["checkpoint"].get<std::string>()));
  const PfidReport eval = evaluate(ck.params, corpus.images, cfg.pfid, opt.threads);
  write_json(dir.path() / "eval.json", eval);
  write_pfid_csv(dir.path() / "pfid.csv", eval);
  Json manifest = finish_run(dir, "eval", cfg, inputs, start);
  return {dir.final_path(), std::move(manifest)};
}

RunResult cmd_ablate(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const Corpus corpus = load_corpus(cfg);
  const Json inputs{{"corpus_manifest", corpus.manifest_hash}};
  RunDir dir(cfg.output_dir, run_name("ablate", cfg, corpus.manifest_hash));

  std::vector<AblationVariant> variants = cfg.ablation.variants;
  if (variants.empty()) {
    AblationVariant configured;
    configured.name = "configured";
    variants.push_back(configured);
  }
  struct Cell {
    std::string variant;
    std::uint64_t seed = 0;
    std::string status = "ok";
    double rfid = std::numeric_limits<double>::quiet_NaN();
    double pfid = std::numeric_limits<double>::quiet_NaN();
    double gini = std::numeric_limits<double>::quiet_NaN();
  };
  std::vector<Cell> cells;
  for (const AblationVariant& v : variants)
    for (std::uint64_t s : cfg.ablation.seeds) cells.push_back({v.name, s});

  const int cell_threads = std::max(1, opt.threads);
  parallel_for(cells.size(), cell_threads, [&](std::size_t i) {
    Cell& cell = cells[i];
    const AblationVariant& v = variants[i / cfg.ablation.seeds.size()];
    const fs::path cell_dir = dir.path() / "cells" / (cell.variant + "_seed" + std::to_string(cell.seed));
    fs::create_directories(cell_dir);
    try {
      const TrainOutcome out = run_training(cell_config(cfg, v, cell.seed), corpus.images, {}, cell_dir, 1);
      cell.rfid = out.eval.rfid;
      cell.pfid = out.eval.pfid;
      cell.gini = gini_coefficient(out.result.report.usage_counts);
    } catch (const std::exception& e) {
      cell.status = "failed";
      write_text(cell_dir / "error.txt", std::string(e.what()) + "\n");
    }
  });

  std::ostringstream table;
  table << "variant,seed,status,rfid,pfid,gini\n";
  Json rows = Json::array();
  for (const Cell& c : cells) {
    table << c.variant << ',' << c.seed << ',' << c.status << ',' << fmt(c.rfid) << ',' << fmt(c.pfid) << ','
          << fmt(c.gini) << '\n';
    rows.push_back({{"variant", c.variant}, {"seed", c.seed}, {"status", c.status}, {"rfid", c.rfid},
                    {"pfid", c.pfid}, {"gini", c.gini}});
  }
  write_text(dir.path() / "ablation.csv", table.str());

  std::ostringstream means;
  means << "variant,completed,rfid_mean,pfid_mean,gini_mean\n";
  Json mean_rows = Json::array();
  for (const AblationVariant& v : variants) {
    double r = 0, p = 0, g = 0;
    std::size_t n = 0;
    for (const Cell& c : cells) {
      if (c.variant != v.name || c.status != "ok") continue;
      r += c.rfid;
      p += c.pfid;
      g += c.gini;
      ++n;
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double inv = n ? 1.0 / static_cast<double>(n) : nan;
    means << v.name << ',' << n << ',' << fmt(r * inv) << ',' << fmt(p * inv) << ',' << fmt(g * inv) << '\n';
    mean_rows.push_back({{"variant", v.name}, {"completed", n}, {"rfid_mean", r * inv}, {"pfid_mean", p * inv},
                         {"gini_mean", g * inv}});
  }
  write_text(dir.path() / "ablation_means.csv", means.str());
  write_json(dir.path() / "ablation.json", Json{{"cells", rows}, {"means", mean_rows}});
  Json manifest = finish_run(dir, "ablate", cfg, inputs, start);
  return {dir.final_path(), std::move(manifest)};
}

RunResult cmd_analyze(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const fs::path& ck_path = require_checkpoint(opt, "analyze");
  const Checkpoint ck = load_checked_checkpoint(cfg, ck_path);
  const Corpus corpus = load_corpus(cfg);
  const ToyTokenizer& tok = ck.params;
  const AnalysisOptions& a = cfg.analysis;
  const std::size_t k = tok.codebook().num_codes();
  const Json inputs{{"corpus_manifest", corpus.manifest_hash}, {"checkpoint", git_blob_hash_file(ck_path)}};

  // Everything is computed before the run directory exists.
  std::vector<TokenGrid> grids(corpus.images.size());
  std::vector<LatentGrid> latents(corpus.images.size());
  parallel_for(corpus.images.size(), opt.threads, [&](std::size_t i) {
    latents[i] = tok.encode(corpus.images[i]);
    grids[i] = quantize(latents[i], tok.codebook());
  });
  const UsageHistogram hist = usage_histogram(grids, k, a.usage_thresholds);
  const double gini = gini_coefficient(hist.counts);

  const std::size_t dim = static_cast<std::size_t>(tok.arch().latent_dim);
  const std::size_t cells = latents.front().cells();
  const std::size_t total = cells * latents.size();
  const std::size_t keep = std::min(total, a.kmeans_max_points);
  std::vector<std::size_t> picks(keep);
  if (keep == total) {
    std::iota(picks.begin(), picks.end(), 0);
  } else {
    Philox rng(a.seed, {0});
    sample_without_replacement(rng, total, keep, picks);
    std::sort(picks.begin(), picks.end());
  }
  Eigen::MatrixXd points(static_cast<Eigen::Index>(keep), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < keep; ++r) {
    const auto cell = latents[picks[r] / cells].cell(picks[r] % cells);
    for (std::size_t d = 0; d < dim; ++d) points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = cell[d];
  }
  std::vector<int> ks;
  for (int kk : a.elbow_ks)
    if (static_cast<std::size_t>(kk) <= keep) ks.push_back(kk);
  const auto elbow = elbow_curve(points, ks, a.kmeans_restarts, derive_key(a.seed, {1}), a.kmeans_max_iters,
                                 opt.threads);

  const Eigen::MatrixXd coords = project_2d(tok.codebook());

  PerturbationSpec lip_spec;
  lip_spec.alpha = a.lipschitz_alpha;
  lip_spec.beta = 1.0;
  lip_spec.delta = scale_delta(a.lipschitz_delta, k, cfg.pfid.k_ref);
  lip_spec.seed = derive_key(a.seed, {2});
  const NeighborTable nt = build_neighbor_table(tok.codebook(), static_cast<std::size_t>(lip_spec.delta));
  const LipschitzReport lip = empirical_lipschitz(tok, nt, lip_spec, corpus.images, a.lipschitz_samples);

  RunDir dir(cfg.output_dir, run_name("analyze", cfg, corpus.manifest_hash + inputs["checkpoint"].get<std::string>()));
  write_usage_csv(dir.path() / "usage.csv", hist);
  write_elbow_csv(dir.path() / "elbow.csv", elbow);
  write_projection_csv(dir.path() / "projection.csv", coords, hist.counts);

  Json thresholds = Json::array();
  for (const ThresholdView& t : hist.thresholds)
    thresholds.push_back({{"threshold", t.threshold}, {"codewords", t.tokens.size()}});
  Json elbow_rows = Json::array();
  for (const ElbowRow& r : elbow) elbow_rows.push_back({{"k", r.k}, {"sse", r.sse}, {"delta", r.delta_sse}});
  write_json(dir.path() / "analysis.json",
             Json{{"gini", gini},
                  {"tokens", hist.total},
                  {"used_codewords", std::count_if(hist.counts.begin(), hist.counts.end(), [](auto c) { return c > 0; })},
                  {"duplicate_codewords", tok.codebook().duplicate_count()},
                  {"usage_thresholds", thresholds},
                  {"elbow", elbow_rows},
                  {"elbow_points", keep},
                  {"lipschitz",
                   {{"alpha", lip_spec.alpha},
                    {"delta", lip_spec.delta},
                    {"samples", lip.samples},
                    {"skipped_zero_delta", lip.skipped_zero_delta},
                    {"max", lip.max},
                    {"mean", lip.mean},
                    {"p95", lip.p95}}}});

  if (a.svg) {
    std::vector<double> xs, ys;
    for (const ElbowRow& r : elbow) {
      xs.push_back(r.k);
      ys.push_back(r.sse);
    }
    write_line_svg(dir.path() / "elbow.svg", "k-means SSE vs k", xs, ys);
    std::vector<double> px(k), py(k), w(k);
    for (std::size_t i = 0; i < k; ++i) {
      px[i] = coords(static_cast<Eigen::Index>(i), 0);
      py[i] = coords(static_cast<Eigen::Index>(i), 1);
      w[i] = static_cast<double>(hist.counts[i]);
    }
    write_scatter_svg(dir.path() / "projection.svg", "codebook PCA (size: usage)", px, py, w);
  }
  Json manifest = finish_run(dir, "analyze", cfg, inputs, start);
  return {dir.final_path(), std::move(manifest)};
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const InputError*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const std::invalid_argument*>(&e) || dynamic_cast<const std::out_of_range*>(&e)) return 3;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  return 1;
}

}  // namespace robustlat
