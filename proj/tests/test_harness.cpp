#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "robustlat/error.hpp"
#include "robustlat/hashing.hpp"
#include "robustlat/harness.hpp"

using namespace robustlat;
namespace fs = std::filesystem;

namespace {

Json small_config_json(std::int64_t steps = 40) {
  return Json::parse(R"({
    "version": 1,
    "seed": 21,
    "dataset": {"side": 16, "num_classes": 4, "per_class": 2},
    "tokenizer": {"image_side": 16, "patch": 4, "latent_dim": 4, "hidden": 16, "codebook_size": 32},
    "train": {"steps": )" + std::to_string(steps) + R"(, "batch_size": 4, "eval_every": 10,
              "perturbation": {"alpha": 0.5, "beta": 0.5, "delta": 200, "final_scale": 0.5, "shape": "linear"}},
    "pfid": {"k_ref": 1024, "extractor": {"out_dim": 16}},
    "analysis": {"elbow_ks": [2, 4, 8], "kmeans_restarts": 2, "lipschitz_samples": 8, "svg": true},
    "ablation": {"seeds": [1]}
  })");
}

ExperimentConfig small_config(const fs::path& root, std::int64_t steps = 40) {
  ExperimentConfig cfg = parse_config(small_config_json(steps));
  cfg.data_dir = root / "data";
  cfg.output_dir = root / "runs";
  return cfg;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

bool has_partial(const fs::path& dir) {
  if (!fs::exists(dir)) return false;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".partial") return true;
  return false;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config parsing: defaults, derived seeds, strictness") {
  const ExperimentConfig cfg = parse_config(small_config_json());
  CHECK(cfg.seed == 21);
  CHECK(cfg.dataset.seed == derive_key(21, {1}));
  CHECK(cfg.train.config.seed == derive_key(21, {2}));
  CHECK(cfg.train.config.perturbation.initial.seed == derive_key(21, {3}));
  CHECK(cfg.pfid.eval_seed == derive_key(21, {4}));
  CHECK(cfg.pfid.extractor.seed == derive_key(21, {5}));
  CHECK(cfg.analysis.seed == derive_key(21, {6}));
  CHECK(cfg.train.config.perturbation.total_steps == 40);
  CHECK(effective_train_config(cfg).perturbation.initial.delta == 6);  // 200 * 32 / 1024

  const ExperimentConfig over = parse_config(small_config_json(), 99);
  CHECK(over.seed == 99);
  CHECK(over.train.config.seed == derive_key(99, {2}));
  CHECK(config_hash(over) != config_hash(cfg));

  // The hash ignores locations.
  ExperimentConfig moved = cfg;
  moved.output_dir = "/elsewhere";
  CHECK(config_hash(moved) == config_hash(cfg));
  CHECK(parse_config(config_to_json(cfg)).seed == cfg.seed);
  CHECK(config_hash(parse_config(config_to_json(cfg))) == config_hash(cfg));

  auto rejects = [](const std::function<void(Json&)>& edit) {
    Json j = small_config_json();
    edit(j);
    CHECK_THROWS_AS(parse_config(j), ConfigError);
  };
  rejects([](Json& j) { j["tokenizr"] = Json::object(); });
  rejects([](Json& j) { j["train"]["stpes"] = 3; });
  rejects([](Json& j) { j["train"]["perturbation"]["alfa"] = 0.1; });
  rejects([](Json& j) { j["version"] = 2; });
  rejects([](Json& j) { j.erase("version"); });
  rejects([](Json& j) { j["train"]["steps"] = "many"; });
  rejects([](Json& j) { j["train"]["learning_rate"] = -1.0; });
  rejects([](Json& j) { j["train"]["perturbation"]["beta"] = 1.5; });
  rejects([](Json& j) { j["dataset"]["side"] = 32; });
  rejects([](Json& j) { j["pfid"]["extractor"]["kind"] = "external_features"; });
  rejects([](Json& j) { j["analysis"]["elbow_ks"] = {4, 2}; });
  rejects([](Json& j) { j["ablation"]["seeds"] = {1, 1}; });
  rejects([](Json& j) { j["ablation"]["variants"] = {{{"name", "a"}}, {{"name", "a"}}}; });
  rejects([](Json& j) { j["ablation"]["variants"] = {{{"name", "a/b"}}}; });
  rejects([](Json& j) { j["ablation"]["variants"] = {{{"name", "a"}, {"shape", "zigzag"}}}; });
  rejects([](Json& j) { j["paths"] = {{"data", "x"}}; });
  rejects([](Json& j) {
    j["train"]["perturbation"]["delta"] = 40;
    j["train"]["perturbation"]["scale_delta"] = false;
  });
  // Scaled deltas clamp to K - 1 instead of failing.
  Json clamp = small_config_json();
  clamp["train"]["perturbation"]["delta"] = 4000;
  CHECK(effective_train_config(parse_config(clamp)).perturbation.initial.delta == 31);
}

TEST_CASE("load_config resolves relative paths and reports bad files as config errors") {
  oracle::TempDir dir("cfg");
  Json j = small_config_json();
  j["paths"] = {{"data_dir", "d"}, {"output_dir", "o"}};
  std::ofstream(dir.path() / "c.json") << j.dump();
  const ExperimentConfig cfg = load_config(dir.path() / "c.json");
  CHECK(cfg.data_dir == dir.path() / "d");
  CHECK(cfg.output_dir == dir.path() / "o");
  std::ofstream(dir.path() / "bad.json") << "{ not json";
  CHECK_THROWS_AS(load_config(dir.path() / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir.path() / "missing.json"), ConfigError);
}

TEST_CASE("gen-data writes the corpus reproducibly") {
  oracle::TempDir dir("gen");
  const ExperimentConfig cfg = small_config(dir.path());
  const RunResult a = cmd_gen_data(cfg);
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(cfg.data_dir)) pngs += e.path().extension() == ".png";
  CHECK(pngs == 8);
  const std::string first = read_file(a.run_dir / "corpus_hashes.json");
  const RunResult b = cmd_gen_data(cfg);
  CHECK(b.run_dir == a.run_dir);
  CHECK(read_file(b.run_dir / "corpus_hashes.json") == first);
  for (const char* key : {"tool_version", "command", "config_hash", "config", "inputs", "outputs", "seeds",
                          "wall_clock_seconds"})
    CHECK(a.manifest.contains(key));
  CHECK(a.manifest["outputs"].contains("corpus_hashes.json"));

  // A corrupted image is reported by name when the corpus is used.
  std::ofstream(cfg.data_dir / "class_2_idx_1.png", std::ios::binary) << "garbage";
  try {
    cmd_train(cfg);
    FAIL("expected an input error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("class_2_idx_1.png") != std::string::npos);
  }
  CHECK_FALSE(has_partial(cfg.output_dir));

  // A corpus from another spec is refused.
  cmd_gen_data(cfg);
  ExperimentConfig other = cfg;
  other.dataset.per_class = 3;
  CHECK_THROWS_AS(cmd_train(other), InputError);
}

TEST_CASE("train: zero steps reproduces the initialisation; outputs are complete") {
  oracle::TempDir dir("train0");
  ExperimentConfig cfg = small_config(dir.path(), 0);
  cmd_gen_data(cfg);
  const RunResult r = cmd_train(cfg);
  for (const char* f : {"checkpoint.rtck", "codebook.rtok", "train_report.json", "loss.csv", "pfid.csv", "eval.json",
                        "run_manifest.json"})
    CHECK(fs::exists(r.run_dir / f));
  const Checkpoint ck = load_checkpoint(r.run_dir / "checkpoint.rtck");
  ToyTokenizer init = ToyTokenizer::random_init(cfg.tokenizer, cfg.train.config.seed);
  const LabeledImages corpus = load_images(cfg.data_dir);
  init_codebook_from_data(init, corpus.images, cfg.train.config.seed);
  CHECK(ck.params == init);
  CHECK(ck.state.step == 0);
  CHECK(csv_lines(r.run_dir / "loss.csv").size() == 1);
  CHECK(Codebook::load(r.run_dir / "codebook.rtok") == init.codebook());
}

TEST_CASE("train: resuming from an intermediate checkpoint is bit-exact") {
  oracle::TempDir dir("resume");
  ExperimentConfig cfg = small_config(dir.path(), 30);
  cmd_gen_data(cfg);
  const RunResult full = cmd_train(cfg);

  ExperimentConfig seg = cfg;
  seg.train.checkpoint_every = 10;
  const RunResult segmented = cmd_train(seg);
  CHECK(fs::exists(segmented.run_dir / "checkpoints" / "step_10.rtck"));
  CHECK(fs::exists(segmented.run_dir / "checkpoints" / "step_20.rtck"));
  CHECK(read_file(segmented.run_dir / "checkpoint.rtck") == read_file(full.run_dir / "checkpoint.rtck"));
  CHECK(read_file(segmented.run_dir / "loss.csv") == read_file(full.run_dir / "loss.csv"));

  RunOptions opt;
  opt.checkpoint = segmented.run_dir / "checkpoints" / "step_20.rtck";
  const RunResult resumed = cmd_train(cfg, opt);
  CHECK(resumed.run_dir != full.run_dir);
  CHECK(read_file(resumed.run_dir / "checkpoint.rtck") == read_file(full.run_dir / "checkpoint.rtck"));
  CHECK(resumed.manifest["inputs"].contains("checkpoint"));

  ExperimentConfig wrong = cfg;
  wrong.tokenizer.hidden = 8;
  CHECK_THROWS_AS(cmd_train(wrong, opt), InputError);
}

TEST_CASE("baseline and perturbed configs both train; eval is repeatable") {
  oracle::TempDir dir("evalrep");
  ExperimentConfig robust = small_config(dir.path(), 20);
  cmd_gen_data(robust);
  ExperimentConfig baseline = robust;
  baseline.train.config.perturbation.initial.beta = 0.0;
  const RunResult rb = cmd_train(baseline);
  const RunResult rr = cmd_train(robust);
  CHECK(rb.run_dir != rr.run_dir);
  const Json report = Json::parse(read_file(rr.run_dir / "train_report.json"));
  CHECK(report["tokens_replaced"].get<std::size_t>() > 0);
  CHECK(Json::parse(read_file(rb.run_dir / "train_report.json"))["tokens_replaced"] == 0);

  RunOptions opt;
  opt.checkpoint = rr.run_dir / "checkpoint.rtck";
  const RunResult e1 = cmd_eval(robust, opt);
  const std::string csv1 = read_file(e1.run_dir / "pfid.csv");
  const std::string json1 = read_file(e1.run_dir / "eval.json");
  const RunResult e2 = cmd_eval(robust, opt);
  CHECK(read_file(e2.run_dir / "pfid.csv") == csv1);
  CHECK(read_file(e2.run_dir / "eval.json") == json1);
  CHECK(e1.manifest["outputs"] == e2.manifest["outputs"]);

  const auto lines = csv_lines(e1.run_dir / "pfid.csv");
  REQUIRE(lines.size() == 16);
  const Json ev = Json::parse(json1);
  double mean = 0.0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream row(lines[i]);
    std::string field;
    for (int c = 0; c < 5; ++c) std::getline(row, field, ',');  // alpha,beta,delta_nominal,delta_scaled,fid
    mean += std::stod(field);
  }
  CHECK(ev["pfid"].get<double>() == doctest::Approx(mean / 15.0).epsilon(1e-12));
  CHECK(ev["pfid"] == Json::parse(read_file(rr.run_dir / "eval.json"))["pfid"]);

  CHECK_THROWS_AS(cmd_eval(robust, RunOptions{}), ConfigError);
  RunOptions missing;
  missing.checkpoint = dir.path() / "none.rtck";
  CHECK_THROWS_AS(cmd_eval(robust, missing), InputError);
}

TEST_CASE("ablate: single cell, and a failing cell is recorded while others complete") {
  oracle::TempDir dir("ablate");
  Json j = small_config_json(20);
  j["ablation"]["variants"] = {{{"name", "base"}, {"beta", 0.0}},
                               {{"name", "diverge"}, {"learning_rate", 1e9}},
                               {{"name", "robust"}, {"beta", 0.5}}};
  ExperimentConfig cfg = parse_config(j);
  cfg.data_dir = dir.path() / "data";
  cfg.output_dir = dir.path() / "runs";
  cmd_gen_data(cfg);
  const RunResult r = cmd_ablate(cfg);
  const auto rows = csv_lines(r.run_dir / "ablation.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "variant,seed,status,rfid,pfid,gini");
  CHECK(rows[1].rfind("base,1,ok,", 0) == 0);
  CHECK(rows[2].rfind("diverge,1,failed,", 0) == 0);
  CHECK(rows[3].rfind("robust,1,ok,", 0) == 0);
  CHECK(fs::exists(r.run_dir / "cells" / "diverge_seed1" / "error.txt"));
  CHECK(fs::exists(r.run_dir / "cells" / "diverge_seed1" / "diagnostic.json"));
  CHECK(fs::exists(r.run_dir / "cells" / "robust_seed1" / "checkpoint.rtck"));
  const auto means = csv_lines(r.run_dir / "ablation_means.csv");
  CHECK(means[2].rfind("diverge,0,", 0) == 0);
  CHECK(means[3].rfind("robust,1,", 0) == 0);

  // No variants: one "configured" cell per seed.
  ExperimentConfig plain = small_config(dir.path(), 10);
  plain.output_dir = dir.path() / "runs_plain";
  const RunResult p = cmd_ablate(plain);
  const auto prow = csv_lines(p.run_dir / "ablation.csv");
  REQUIRE(prow.size() == 2);
  CHECK(prow[1].rfind("configured,1,ok,", 0) == 0);
}

TEST_CASE("analyze writes every report; an empty corpus fails without leftovers") {
  oracle::TempDir dir("analyze");
  ExperimentConfig cfg = small_config(dir.path(), 20);
  cmd_gen_data(cfg);
  const RunResult t = cmd_train(cfg);
  RunOptions opt;
  opt.checkpoint = t.run_dir / "checkpoint.rtck";
  const RunResult a = cmd_analyze(cfg, opt);
  for (const char* f : {"usage.csv", "elbow.csv", "projection.csv", "analysis.json", "elbow.svg", "projection.svg"})
    CHECK(fs::exists(a.run_dir / f));
  const Json aj = Json::parse(read_file(a.run_dir / "analysis.json"));
  CHECK(aj["tokens"] == 8 * 16);
  CHECK(aj["elbow"].size() == 3);
  CHECK(csv_lines(a.run_dir / "usage.csv").size() == 33);
  const Json report = Json::parse(read_file(t.run_dir / "train_report.json"));
  CHECK(aj["gini"].get<double>() == doctest::Approx(report["gini"].get<double>()));

  // Empty manifest list.
  Json m = Json::parse(read_file(cfg.data_dir / "manifest.json"));
  m["files"] = Json::array();
  std::ofstream(cfg.data_dir / "manifest.json") << m.dump();
  ExperimentConfig empty = cfg;
  empty.output_dir = dir.path() / "empty_runs";
  CHECK_THROWS_AS(cmd_analyze(empty, opt), InputError);
  const bool leftovers = fs::exists(empty.output_dir) && !fs::is_empty(empty.output_dir);
  CHECK_FALSE(leftovers);
}

TEST_CASE("exit codes map the error taxonomy") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(InputError("x")) == 3);
  CHECK(exit_code_for(NumericalError("x")) == 4);
  CHECK(exit_code_for(std::invalid_argument("x")) == 3);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("command line exit codes") {
  oracle::TempDir dir("cli");
  const std::string cli = ROBUSTLAT_CLI_PATH;
  auto run = [&](const std::string& args) {
    const int status = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  Json j = small_config_json(5);
  j["paths"] = {{"data_dir", "data"}, {"output_dir", "runs"}};
  std::ofstream(dir.path() / "ok.json") << j.dump();
  j["bogus"] = 1;
  std::ofstream(dir.path() / "bad.json") << j.dump();
  const std::string ok = (dir.path() / "ok.json").string(), bad = (dir.path() / "bad.json").string();

  CHECK(run("--version") == 0);
  CHECK(run("") == 2);
  CHECK(run("train") == 2);
  CHECK(run("train --config " + bad) == 2);
  CHECK(run("train --config " + ok) == 3);  // no corpus yet
  CHECK(run("gen-data --config " + ok) == 0);
  CHECK(run("train --config " + ok) == 0);
  CHECK(run("eval --config " + ok) == 2);  // --checkpoint required
  CHECK(run("eval --config " + ok + " --checkpoint " + (dir.path() / "nope.rtck").string()) == 3);

  Json nan = small_config_json(50);
  nan["train"]["learning_rate"] = 1e9;
  nan["paths"] = {{"data_dir", "data"}, {"output_dir", "runs"}};
  std::ofstream(dir.path() / "nan.json") << nan.dump();
  CHECK(run("train --config " + (dir.path() / "nan.json").string()) == 4);
  // The failed run keeps its staging directory with a diagnostic.
  bool diag = false;
  for (const auto& e : fs::directory_iterator(dir.path() / "runs"))
    if (e.path().extension() == ".partial") diag = diag || fs::exists(e.path() / "diagnostic.json");
  CHECK(diag);
}

}
