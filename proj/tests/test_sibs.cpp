#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <set>

#include "mgsparse/sibs.hpp"

using namespace mgsparse;

namespace {

ActivationTrace trace_from_rows(const std::vector<std::vector<float>>& rows) {
  ActivationTrace t;
  t.samples = rows.size();
  t.f = rows[0].size();
  t.mode = TraceMode::full;
  for (const auto& r : rows) t.values.insert(t.values.end(), r.begin(), r.end());
  return t;
}

std::set<std::uint32_t> as_set(const std::vector<std::uint32_t>& v) {
  return {v.begin(), v.end()};
}

// O(samples * f^2) reference for implication mining.
std::vector<std::set<std::size_t>> brute_force_sets(const ActivationTrace& t) {
  std::vector<std::set<std::size_t>> out(t.f);
  for (std::size_t i = 0; i < t.f; ++i) {
    std::size_t support = 0;
    for (std::size_t s = 0; s < t.samples; ++s)
      if (!t.nonzero(s, i)) ++support;
    if (support == 0) continue;
    for (std::size_t j = 0; j < t.f; ++j) {
      if (j == i) continue;
      bool holds = true;
      for (std::size_t s = 0; s < t.samples; ++s)
        if (!t.nonzero(s, i) && t.nonzero(s, j)) {
          holds = false;
          break;
        }
      if (holds) out[i].insert(j);
    }
  }
  return out;
}

ActivationTrace random_trace(std::size_t samples, std::size_t f, double zero_prob,
                             std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> rows(samples, std::vector<float>(f));
  for (auto& r : rows)
    for (float& v : r) v = rng.bernoulli(zero_prob) ? 0.0f : std::abs(rng.normal()) + 0.1f;
  return trace_from_rows(rows);
}

// exhaustive maximum coverage for tiny instances
std::size_t optimal_coverage(const ImplicationSets& imp, std::size_t budget) {
  std::size_t best = 0;
  std::vector<std::size_t> pick;
  // enumerate all subsets of size <= budget via bitmask (f <= 12 keeps this cheap)
  for (std::uint32_t mask = 0; mask < (1u << imp.f); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) > budget) continue;
    detail::NeuronBits covered(imp.f);
    for (std::size_t i = 0; i < imp.f; ++i)
      if (mask & (1u << i)) covered.or_with(imp.s[i]);
    best = std::max(best, covered.count());
  }
  return best;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

bool bit_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("mine_implications on the worked 3x4 example") {
  ActivationTrace t = trace_from_rows({{0, 0, 1, 0}, {1, 0, 1, 0}, {0, 0, 0, 0}});
  ImplicationSets imp = mine_implications(t);
  CHECK(as_set(imp.implied_set(0)) == std::set<std::uint32_t>{1, 3});
  CHECK(as_set(imp.implied_set(1)) == std::set<std::uint32_t>{3});
  CHECK(as_set(imp.implied_set(2)) == std::set<std::uint32_t>{0, 1, 3});
  CHECK(as_set(imp.implied_set(3)) == std::set<std::uint32_t>{1});
  CHECK(imp.support == std::vector<std::size_t>{2, 3, 1, 3});
}

TEST_CASE("mine_implications degenerate traces") {
  ActivationTrace dead = trace_from_rows({{0, 0, 0}, {0, 0, 0}});
  ImplicationSets imp = mine_implications(dead);
  for (std::size_t i = 0; i < 3; ++i) {
    std::set<std::uint32_t> expect;
    for (std::uint32_t j = 0; j < 3; ++j)
      if (j != i) expect.insert(j);
    CHECK(as_set(imp.implied_set(i)) == expect);
  }

  ActivationTrace alive = trace_from_rows({{1, 2}, {3, 4}});
  imp = mine_implications(alive);
  CHECK(imp.support == std::vector<std::size_t>{0, 0});
  CHECK(imp.implied_set(0).empty());
  CHECK(imp.implied_set(1).empty());
}

TEST_CASE("dead neurons are implied by every supported neuron") {
  // neuron 2 is always zero; neurons 0 and 1 flip
  ActivationTrace t = trace_from_rows({{0, 1, 0}, {1, 0, 0}, {0, 0, 0}});
  ImplicationSets imp = mine_implications(t);
  for (std::size_t i = 0; i < t.f; ++i) {
    if (imp.support[i] == 0 || i == 2) continue;
    CHECK(imp.implies(i, 2));
  }
}

TEST_CASE("mine_implications matches the brute-force oracle") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    ActivationTrace t = random_trace(64, 32, 0.6, seed);
    ImplicationSets imp = mine_implications(t);
    auto oracle = brute_force_sets(t);
    for (std::size_t i = 0; i < t.f; ++i) {
      std::set<std::uint32_t> got = as_set(imp.implied_set(i));
      std::set<std::uint32_t> want(oracle[i].begin(), oracle[i].end());
      REQUIRE(got == want);
    }
  }
}

TEST_CASE("greedy_cover on the worked example") {
  ActivationTrace t = trace_from_rows({{0, 0, 1, 0}, {1, 0, 1, 0}, {0, 0, 0, 0}});
  ImplicationSets imp = mine_implications(t);
  IndicatorTable table = greedy_cover(imp, 1);
  CHECK(table.indicators == std::vector<std::uint32_t>{2});
  CHECK(table.covered_count == 3);
  CHECK(table.amplification == 3.0);
}

TEST_CASE("greedy_cover with empty sets and bad budgets") {
  ActivationTrace alive = trace_from_rows({{1, 2, 3}, {4, 5, 6}});
  ImplicationSets imp = mine_implications(alive);
  IndicatorTable table = greedy_cover(imp, 3);
  CHECK(table.indicators.empty());
  CHECK(table.covered_count == 0);
  CHECK(table.amplification == 0.0);

  CHECK_THROWS_AS(greedy_cover(imp, 0), error);
  CHECK_THROWS_AS(greedy_cover(imp, 4), error);
}

TEST_CASE("greedy_cover coverage is monotone in budget") {
  ActivationTrace t = random_trace(48, 24, 0.7, 9);
  ImplicationSets imp = mine_implications(t);
  std::size_t prev = 0;
  for (std::size_t budget = 1; budget <= t.f; ++budget) {
    IndicatorTable table = greedy_cover(imp, budget);
    REQUIRE(table.covered_count >= prev);
    prev = table.covered_count;
  }
}

TEST_CASE("greedy_cover equals exhaustive optimum on tiny instances") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    ActivationTrace t = random_trace(40, 10, 0.55, seed);
    ImplicationSets imp = mine_implications(t);
    for (std::size_t budget : {1u, 2u, 3u}) {
      IndicatorTable table = greedy_cover(imp, budget);
      REQUIRE(table.covered_count == optimal_coverage(imp, budget));
    }
  }
}

TEST_CASE("sibs_forward with an empty table is dense") {
  BaseModel m = init_base(8, 16, 1, 21, 1.0f);
  IndicatorTable empty;
  empty.f = 16;
  Rng rng(4);
  Vector x(8);
  for (float& v : x) v = rng.normal();
  SibsResult r = sibs_forward(m.layers[0], empty, x);
  FFResult dense = ff_forward(m.layers[0], x);
  CHECK(bit_equal(r.out, dense.out));
  CHECK(r.skipped == 0);
  CHECK(r.computed == 16);
}

TEST_CASE("sibs_forward is lossless on the profiling set") {
  DatasetSpec spec;
  spec.d = 8;
  spec.teacher_f = 16;
  SynthDataset data = generate_dataset(spec, 120, 31);
  BaseModel m = init_base(8, 32, 1, 23, 1.4f);

  auto traces = collect_traces(m, data, {0});
  ImplicationSets imp = mine_implications(traces[0]);
  std::uint64_t total_skipped = 0;
  for (std::size_t budget : {2u, 6u, 12u}) {
    IndicatorTable table = greedy_cover(imp, budget);
    for (std::size_t s = 0; s < data.size(); ++s) {
      SibsResult r = sibs_forward(m.layers[0], table, data.xs[s]);
      FFResult dense = ff_forward(m.layers[0], data.xs[s]);
      REQUIRE(bit_equal(r.out, dense.out));
      total_skipped += r.skipped;
    }
  }
  CHECK(total_skipped > 0);  // the test is vacuous if nothing was ever skipped
}

TEST_CASE("sibs_forward rejects mismatched tables") {
  BaseModel m = init_base(8, 16, 1, 2, 1.0f);
  IndicatorTable table;
  table.f = 8;  // wrong layer width
  Vector x(8, 0.0f);
  CHECK_THROWS_AS(sibs_forward(m.layers[0], table, x), error);
}

TEST_CASE("indicator table round trip") {
  ActivationTrace t = random_trace(32, 24, 0.7, 40);
  ImplicationSets imp = mine_implications(t);
  IndicatorTable table = greedy_cover(imp, 5);
  table.layer = 3;

  std::string path = temp_path("mgsparse_table_test.mgsi");
  save_indicator_table(table, path);
  IndicatorTable loaded = load_indicator_table(path);
  CHECK(loaded.layer == 3);
  CHECK(loaded.f == table.f);
  CHECK(loaded.indicators == table.indicators);
  CHECK(loaded.implied == table.implied);
  CHECK(loaded.covered_count == table.covered_count);
  CHECK(loaded.amplification == table.amplification);
  std::filesystem::remove(path);
}
