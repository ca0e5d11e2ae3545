#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "robustlat/error.hpp"
#include "robustlat/perturbation.hpp"

using namespace robustlat;

namespace {

TokenGrid random_grid(int h, int w, std::uint32_t k, std::mt19937_64& gen) {
  TokenGrid t(h, w, k);
  for (auto& v : t.indices) v = static_cast<std::uint32_t>(gen() % k);
  return t;
}

bool in_set(const std::vector<std::uint32_t>& s, std::uint32_t v) { return std::find(s.begin(), s.end(), v) != s.end(); }

}  // namespace

TEST_SUITE("perturbation") {

TEST_CASE("alpha zero is the identity") {
  std::mt19937_64 gen(1);
  const Codebook cb = oracle::random_codebook(16, 3, 1);
  const NeighborTable nt = build_neighbor_table(cb, 4);
  const TokenGrid t = random_grid(4, 4, 16, gen);
  Philox rng(1);
  const PerturbedGrid out = perturb_grid(t, {0.0, 1.0, 4, 1}, nt, rng);
  CHECK(out.tokens == t);
  CHECK(out.report.tokens_replaced == 0);
}

TEST_CASE("quarter rate on a 4x4 grid replaces exactly four tokens inside the top-delta set") {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Codebook cb = oracle::random_codebook(16, 4, gen());
    const NeighborTable nt = build_neighbor_table(cb, 5);
    const TokenGrid t = random_grid(4, 4, 16, gen);
    Philox rng(gen());
    const PerturbedGrid out = perturb_grid(t, {0.25, 1.0, 3, 0}, nt, rng, true);
    CHECK(out.report.tokens_replaced == 4);
    REQUIRE(out.report.replacement_log.size() == 4);
    std::size_t changed_positions = 0;
    for (const Replacement& r : out.report.replacement_log) {
      CHECK(in_set(oracle::top_delta_set(cb, r.old_index, 3), r.new_index));
      CHECK(out.tokens.indices[static_cast<std::size_t>(r.h * 4 + r.w)] == r.new_index);
      ++changed_positions;
    }
    std::size_t differing = 0;
    for (std::size_t i = 0; i < 16; ++i) differing += out.tokens.indices[i] != t.indices[i];
    CHECK(differing == 4);
  }
}

TEST_CASE("training regime alpha 1, delta 100 replaces every token within its 100 nearest") {
  std::mt19937_64 gen(3);
  const Codebook cb = oracle::random_codebook(256, 8, 3);
  const NeighborTable nt = build_neighbor_table(cb, 100);
  const TokenGrid t = random_grid(8, 8, 256, gen);
  Philox rng(3);
  const PerturbedGrid out = perturb_grid(t, {1.0, 1.0, 100, 3}, nt, rng, true);
  CHECK(out.report.tokens_replaced == 64);
  for (const Replacement& r : out.report.replacement_log) {
    CHECK(r.new_index != r.old_index);
    CHECK(in_set(oracle::top_delta_set(cb, r.old_index, 100), r.new_index));
  }
}

TEST_CASE("token count follows round-half-up of alpha * H * W") {
  std::mt19937_64 gen(4);
  const Codebook cb = oracle::random_codebook(64, 4, 4);
  const NeighborTable nt = build_neighbor_table(cb, 8);
  const TokenGrid t = random_grid(8, 8, 64, gen);
  for (int a = 1; a <= 10; ++a) {
    const double alpha = a / 10.0;
    Philox rng(a);
    CHECK(perturb_grid(t, {alpha, 1.0, 8, 0}, nt, rng).report.tokens_replaced == round_half_up(alpha * 64));
  }
  CHECK(round_half_up(0.5) == 1);
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(2.4999) == 2);
  CHECK(round_half_up(0.1 * 64) == 6);
}

TEST_CASE("delta beyond the table depth and K mismatch are rejected") {
  const Codebook cb = oracle::random_codebook(16, 2, 5);
  const NeighborTable nt = build_neighbor_table(cb, 4);
  Philox rng(1);
  CHECK_THROWS_AS(perturb_grid(TokenGrid(2, 2, 16), {0.5, 1.0, 5, 0}, nt, rng), std::invalid_argument);
  CHECK_THROWS_AS(perturb_grid(TokenGrid(2, 2, 15), {0.5, 1.0, 2, 0}, nt, rng), std::invalid_argument);
  CHECK_THROWS_AS(perturb_grid(TokenGrid(2, 2, 16), {1.5, 1.0, 2, 0}, nt, rng), std::invalid_argument);
}

TEST_CASE("input grid is left untouched") {
  std::mt19937_64 gen(6);
  const Codebook cb = oracle::random_codebook(16, 2, 6);
  const NeighborTable nt = build_neighbor_table(cb, 4);
  const TokenGrid t = random_grid(4, 4, 16, gen);
  const TokenGrid copy = t;
  Philox rng(2);
  (void)perturb_grid(t, {1.0, 1.0, 4, 0}, nt, rng);
  CHECK(t == copy);
}

TEST_CASE("batch selection: beta one, beta zero, empty batch") {
  std::mt19937_64 gen(7);
  const Codebook cb = oracle::random_codebook(32, 3, 7);
  const NeighborTable nt = build_neighbor_table(cb, 4);
  std::vector<TokenGrid> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(random_grid(4, 4, 32, gen));

  const PerturbedBatch all = perturb_batch(batch, {0.5, 1.0, 4, 9}, nt, 0);
  CHECK(all.report.images_perturbed == 6);
  CHECK(all.report.tokens_replaced == 6 * 8);

  const PerturbedBatch none = perturb_batch(batch, {0.5, 0.0, 4, 9}, nt, 0);
  CHECK(none.tokens == batch);
  CHECK(none.report.images_perturbed == 0);

  const PerturbedBatch empty = perturb_batch({}, {0.5, 1.0, 4, 9}, nt, 0);
  CHECK(empty.tokens.empty());
  CHECK(empty.report.tokens_replaced == 0);
}

TEST_CASE("beta 0.1 on ten images selects one, each with frequency 0.1 +- 0.01") {
  std::mt19937_64 gen(8);
  const Codebook cb = oracle::random_codebook(16, 2, 8);
  const NeighborTable nt = build_neighbor_table(cb, 2);
  std::vector<TokenGrid> batch;
  for (int i = 0; i < 10; ++i) batch.push_back(random_grid(2, 2, 16, gen));
  std::vector<int> hits(10, 0);
  const int trials = 10000;
  for (int b = 0; b < trials; ++b) {
    const PerturbedBatch out = perturb_batch(batch, {0.5, 0.1, 2, 12345}, nt, static_cast<std::uint64_t>(b));
    REQUIRE(out.selected.size() == 1);
    REQUIRE(out.report.images_perturbed == 1);
    ++hits[out.selected[0]];
  }
  for (int h : hits) CHECK(std::abs(static_cast<double>(h) / trials - 0.1) <= 0.01);
}

TEST_CASE("batch perturbation is a pure function of seed, counter and position") {
  std::mt19937_64 gen(9);
  const Codebook cb = oracle::random_codebook(32, 3, 9);
  const NeighborTable nt = build_neighbor_table(cb, 6);
  std::vector<TokenGrid> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(random_grid(4, 4, 32, gen));
  const PerturbationSpec spec{0.7, 0.5, 6, 77};
  const PerturbedBatch a = perturb_batch(batch, spec, nt, 3, true);
  const PerturbedBatch b = perturb_batch(batch, spec, nt, 3, true);
  CHECK(a.tokens == b.tokens);
  CHECK(a.selected == b.selected);
  const PerturbedBatch c = perturb_batch(batch, spec, nt, 4);
  CHECK(c.tokens != a.tokens);

  // A selected image's outcome equals a direct perturb_grid call on the documented stream.
  const std::size_t pos = a.selected[0];
  Philox stream(spec.seed, {0x494D4147ull, 3, pos});
  CHECK(perturb_grid(batch[pos], spec, nt, stream).tokens == a.tokens[pos]);
}

TEST_CASE("distance-weighted sampling stays inside the candidate set") {
  std::mt19937_64 gen(10);
  const Codebook cb = oracle::random_codebook(64, 4, 10);
  const NeighborTable nt = build_neighbor_table(cb, 10);
  PerturbationSpec spec{1.0, 1.0, 10, 5, ReplacementSampling::distance_weighted};
  for (int trial = 0; trial < 20; ++trial) {
    Philox rng(trial);
    const PerturbedGrid out = perturb_grid(random_grid(4, 4, 64, gen), spec, nt, rng, true);
    for (const Replacement& r : out.report.replacement_log)
      CHECK(in_set(oracle::top_delta_set(cb, r.old_index, 10), r.new_index));
  }
}

TEST_CASE("annealing endpoints and midpoint") {
  AnnealSchedule s;
  s.initial = {1.0, 0.1, 100, 0};
  s.final_scale = 0.5;
  s.total_steps = 1000;
  s.shape = AnnealShape::linear;
  const auto at0 = anneal_at(s, 0), mid = anneal_at(s, 500), end = anneal_at(s, 1000), past = anneal_at(s, 5000);
  CHECK(at0.alpha == 1.0);
  CHECK(at0.delta == 100);
  CHECK(mid.alpha == 0.75);
  CHECK(mid.delta == 75);
  CHECK(end.alpha == 0.5);
  CHECK(end.delta == 50);
  CHECK(past == end);
  CHECK(mid.beta == 0.1);

  s.final_scale = 0.0;
  CHECK(anneal_at(s, 1000).alpha == 0.0);
  CHECK(anneal_at(s, 1000).delta == 1);

  s.anneal_delta = false;
  CHECK(anneal_at(s, 1000).delta == 100);
  s.shape = AnnealShape::constant;
  CHECK(anneal_at(s, 700) == s.initial);
}

TEST_CASE("linear and cosine schedules are non-increasing") {
  for (AnnealShape shape : {AnnealShape::linear, AnnealShape::cosine}) {
    AnnealSchedule s;
    s.initial = {0.9, 0.1, 37, 0};
    s.final_scale = 0.3;
    s.total_steps = 97;
    s.shape = shape;
    double prev_alpha = 2.0;
    int prev_delta = 1000;
    for (int step = 0; step <= 120; ++step) {
      const auto live = anneal_at(s, step);
      CHECK(live.alpha <= prev_alpha);
      CHECK(live.delta <= prev_delta);
      CHECK(live.alpha >= 0.0);
      prev_alpha = live.alpha;
      prev_delta = live.delta;
    }
  }
  AnnealSchedule c;
  c.initial = {1.0, 0.1, 100, 0};
  c.final_scale = 0.5;
  c.total_steps = 100;
  c.shape = AnnealShape::cosine;
  CHECK(anneal_at(c, 50).alpha == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("json round trip and unknown keys") {
  AnnealSchedule s;
  s.initial = {0.8, 0.2, 12, 99, ReplacementSampling::distance_weighted};
  s.final_scale = 0.25;
  s.total_steps = 40;
  s.shape = AnnealShape::cosine;
  s.anneal_alpha = false;
  const Json j = s;
  const AnnealSchedule back = j.get<AnnealSchedule>();
  CHECK(back.initial == s.initial);
  CHECK(back.final_scale == s.final_scale);
  CHECK(back.total_steps == 40);
  CHECK(back.shape == AnnealShape::cosine);
  CHECK_FALSE(back.anneal_alpha);

  Json bad = j;
  bad["alpah"] = 0.5;
  CHECK_THROWS_AS(bad.get<AnnealSchedule>(), ConfigError);
  Json out_of_range = j;
  out_of_range["beta"] = 1.5;
  CHECK_THROWS_AS(out_of_range.get<AnnealSchedule>(), ConfigError);
  CHECK_THROWS_AS(anneal_shape_from_string("exp"), ConfigError);
}

TEST_CASE("replacement log exports as csv") {
  oracle::TempDir dir("replacements");
  std::mt19937_64 gen(11);
  const Codebook cb = oracle::random_codebook(16, 2, 11);
  const NeighborTable nt = build_neighbor_table(cb, 3);
  std::vector<TokenGrid> batch{random_grid(3, 3, 16, gen), random_grid(3, 3, 16, gen)};
  const PerturbedBatch out = perturb_batch(batch, {0.5, 1.0, 3, 1}, nt, 0, true);
  write_replacement_csv(dir.path() / "log.csv", out.report);
  std::ifstream is(dir.path() / "log.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "image,h,w,old,new");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<long> v;
    while (std::getline(ss, field, ',')) v.push_back(std::stol(field));
    REQUIRE(v.size() == 5);
    CHECK(batch[static_cast<std::size_t>(v[0])].indices[static_cast<std::size_t>(v[1] * 3 + v[2])] == v[3]);
    CHECK(out.tokens[static_cast<std::size_t>(v[0])].indices[static_cast<std::size_t>(v[1] * 3 + v[2])] == v[4]);
    ++rows;
  }
  CHECK(rows == out.report.tokens_replaced);
}

}
