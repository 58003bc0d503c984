#pragma once

#include <bit>
#include <string>
#include <vector>

#include "mgsparse/model.hpp"
#include "mgsparse/profiler.hpp"

namespace mgsparse {

namespace detail {

// Fixed-width bitset over neuron indices.
struct NeuronBits {
  std::size_t nbits = 0;
  std::vector<std::uint64_t> words;

  explicit NeuronBits(std::size_t n, bool ones = false)
      : nbits(n), words((n + 63) / 64, ones ? ~0ull : 0ull) {
    if (ones) trim();
  }

  void trim() {
    std::size_t rem = nbits & 63;
    if (rem && !words.empty()) words.back() &= (1ull << rem) - 1ull;
  }

  bool test(std::size_t i) const { return (words[i >> 6] >> (i & 63)) & 1ull; }
  void set(std::size_t i) { words[i >> 6] |= 1ull << (i & 63); }
  void clear(std::size_t i) { words[i >> 6] &= ~(1ull << (i & 63)); }

  void and_with(const NeuronBits& other) {
    for (std::size_t w = 0; w < words.size(); ++w) words[w] &= other.words[w];
  }

  void or_with(const NeuronBits& other) {
    for (std::size_t w = 0; w < words.size(); ++w) words[w] |= other.words[w];
  }

  std::size_t count() const {
    std::size_t c = 0;
    for (std::uint64_t w : words) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }

  std::size_t count_andnot(const NeuronBits& minus) const {
    std::size_t c = 0;
    for (std::size_t w = 0; w < words.size(); ++w)
      c += static_cast<std::size_t>(std::popcount(words[w] & ~minus.words[w]));
    return c;
  }
};

}  // namespace detail

// s[i] = { j != i : activation(i) == 0 implies activation(j) == 0 on every
// profiling sample }. support[i] counts the samples where neuron i was zero;
// neurons that are never zero get an empty set (a vacuous implication would
// be unsound at inference).
struct ImplicationSets {
  std::size_t layer = 0;
  std::size_t f = 0;
  std::vector<detail::NeuronBits> s;
  std::vector<std::size_t> support;

  bool implies(std::size_t i, std::size_t j) const { return s[i].test(j); }

  std::vector<std::uint32_t> implied_set(std::size_t i) const {
    std::vector<std::uint32_t> out;
    for (std::size_t j = 0; j < f; ++j)
      if (s[i].test(j)) out.push_back(static_cast<std::uint32_t>(j));
    return out;
  }
};

// Zero means exactly 0.0f; post-ReLU values make that test exact.
inline ImplicationSets mine_implications(const ActivationTrace& trace) {
  require(trace.samples >= 1, errc::bad_argument, "mine_implications: empty trace");
  std::size_t f = trace.f;
  ImplicationSets imp;
  imp.layer = trace.layer;
  imp.f = f;
  imp.s.assign(f, detail::NeuronBits(f, true));
  imp.support.assign(f, 0);

  detail::NeuronBits zeroset(f);
  for (std::size_t smp = 0; smp < trace.samples; ++smp) {
    std::fill(zeroset.words.begin(), zeroset.words.end(), 0ull);
    for (std::size_t i = 0; i < f; ++i)
      if (!trace.nonzero(smp, i)) zeroset.set(i);
    for (std::size_t i = 0; i < f; ++i) {
      if (!zeroset.test(i)) continue;
      ++imp.support[i];
      imp.s[i].and_with(zeroset);
    }
  }
  for (std::size_t i = 0; i < f; ++i) {
    if (imp.support[i] == 0)
      std::fill(imp.s[i].words.begin(), imp.s[i].words.end(), 0ull);
    else
      imp.s[i].clear(i);
  }
  return imp;
}

// Chosen indicator neurons and their implied-zero sets for one layer.
struct IndicatorTable {
  std::size_t layer = 0;
  std::size_t f = 0;
  std::vector<std::uint32_t> indicators;
  std::vector<std::vector<std::uint32_t>> implied;  // sorted, parallel to indicators
  std::size_t covered_count = 0;
  double amplification = 0.0;  // covered_count / |indicators|
};

inline void recompute_coverage(IndicatorTable& table) {
  detail::NeuronBits covered(table.f);
  for (const auto& set : table.implied)
    for (std::uint32_t j : set) covered.set(j);
  table.covered_count = covered.count();
  table.amplification = table.indicators.empty()
                            ? 0.0
                            : static_cast<double>(table.covered_count) /
                                  static_cast<double>(table.indicators.size());
}

// Greedy maximum coverage: repeatedly take the neuron whose implied set adds
// the most uncovered indices (ties to the lower index), stopping at the
// budget or when nothing adds coverage.
inline IndicatorTable greedy_cover(const ImplicationSets& imp, std::size_t budget) {
  require(budget >= 1 && budget <= imp.f, errc::bad_argument,
          "greedy_cover: budget must be in [1, f]");
  IndicatorTable table;
  table.layer = imp.layer;
  table.f = imp.f;
  detail::NeuronBits covered(imp.f);
  std::vector<bool> chosen(imp.f, false);

  while (table.indicators.size() < budget) {
    std::size_t best = imp.f;
    std::size_t best_gain = 0;
    for (std::size_t i = 0; i < imp.f; ++i) {
      if (chosen[i]) continue;
      std::size_t gain = imp.s[i].count_andnot(covered);
      if (gain > best_gain) {
        best_gain = gain;
        best = i;
      }
    }
    if (best == imp.f || best_gain == 0) break;
    chosen[best] = true;
    table.indicators.push_back(static_cast<std::uint32_t>(best));
    table.implied.push_back(imp.implied_set(best));
    covered.or_with(imp.s[best]);
  }
  table.covered_count = covered.count();
  table.amplification = table.indicators.empty()
                            ? 0.0
                            : static_cast<double>(table.covered_count) /
                                  static_cast<double>(table.indicators.size());
  return table;
}

struct SibsResult {
  Vector out;
  std::size_t skipped = 0;   // neurons masked without being computed
  std::size_t computed = 0;  // indicators + phase-3 neurons; skipped + computed == f
};

// Two-phase masked inference. Phase 1 computes the indicator rows; phase 2
// marks the implied sets of zero-valued indicators as skipped; phase 3
// computes the remaining rows; the second layer prunes the skipped columns.
// Indicators are always computed, even when another indicator covers them.
inline SibsResult sibs_forward(const FFBlock& block, const IndicatorTable& table,
                               const Vector& x) {
  require(table.f == block.f, errc::dim_mismatch,
          "sibs_forward: table f " + std::to_string(table.f) + " != block f " +
              std::to_string(block.f));
  require(x.size() == block.d, errc::dim_mismatch, "sibs_forward: x.len != d");

  std::vector<bool> indicator_mask(block.f, false);
  for (std::uint32_t i : table.indicators) {
    require(i < block.f, errc::bad_argument, "sibs_forward: indicator out of range");
    indicator_mask[i] = true;
  }

  Vector pre1 = masked_matvec(block.w1, x, indicator_mask);
  Vector hidden(block.f, 0.0f);
  for (std::uint32_t i : table.indicators) hidden[i] = relu(pre1[i] + block.b1[i]);

  std::vector<bool> skip(block.f, false);
  for (std::size_t k = 0; k < table.indicators.size(); ++k) {
    if (hidden[table.indicators[k]] != 0.0f) continue;
    for (std::uint32_t j : table.implied[k]) skip[j] = true;
  }

  std::vector<bool> phase3_mask(block.f, false);
  std::size_t skipped = 0;
  for (std::size_t j = 0; j < block.f; ++j) {
    if (indicator_mask[j]) continue;
    if (skip[j])
      ++skipped;
    else
      phase3_mask[j] = true;
  }

  Vector pre3 = masked_matvec(block.w1, x, phase3_mask);
  std::vector<bool> computed_mask(block.f, false);
  for (std::size_t j = 0; j < block.f; ++j) {
    if (phase3_mask[j]) hidden[j] = relu(pre3[j] + block.b1[j]);
    computed_mask[j] = indicator_mask[j] || phase3_mask[j];
  }

  Vector out = column_pruned_matvec(block.w2, hidden, computed_mask);
  add_inplace(out, block.b2);
  return {std::move(out), skipped, block.f - skipped};
}

// ---- indicator table file format ----
// "MGSI" | version u32 | layer u32 | f u32 | indicator count u32 |
// per indicator: index u32, implied-set size u32, sorted indices u32

inline constexpr std::uint32_t kIndicatorVersion = 1;

inline void save_indicator_table(const IndicatorTable& t, const std::string& path) {
  auto os = open_out(path);
  write_magic(os, "MGSI");
  write_u32(os, kIndicatorVersion);
  write_u32(os, static_cast<std::uint32_t>(t.layer));
  write_u32(os, static_cast<std::uint32_t>(t.f));
  write_u32(os, static_cast<std::uint32_t>(t.indicators.size()));
  for (std::size_t k = 0; k < t.indicators.size(); ++k) {
    write_u32(os, t.indicators[k]);
    write_u32(os, static_cast<std::uint32_t>(t.implied[k].size()));
    for (std::uint32_t j : t.implied[k]) write_u32(os, j);
  }
  require(bool(os), errc::io_failure, "write failed: " + path);
}

inline IndicatorTable load_indicator_table(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "MGSI", "indicator table " + path);
  expect_version(is, kIndicatorVersion, "indicator table");
  IndicatorTable t;
  t.layer = read_u32(is, "layer");
  t.f = read_u32(is, "f");
  require(t.f > 0 && t.f <= kMaxWeightFloats, errc::dim_overflow, "indicator table f out of range");
  std::uint32_t count = read_u32(is, "indicator count");
  require(count <= t.f, errc::dim_overflow, "more indicators than neurons");
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t idx = read_u32(is, "indicator index");
    require(idx < t.f, errc::dim_overflow, "indicator index out of range");
    std::uint32_t size = read_u32(is, "implied-set size");
    require(size <= t.f, errc::dim_overflow, "implied set larger than layer");
    std::vector<std::uint32_t> set(size);
    for (std::uint32_t& j : set) {
      j = read_u32(is, "implied index");
      require(j < t.f, errc::dim_overflow, "implied index out of range");
    }
    t.indicators.push_back(idx);
    t.implied.push_back(std::move(set));
  }
  recompute_coverage(t);
  return t;
}

}  // namespace mgsparse
