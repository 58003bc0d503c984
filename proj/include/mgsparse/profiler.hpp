#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mgsparse/toytrain.hpp"

namespace mgsparse {

// Post-ReLU activation records for one layer over a dataset. Full mode keeps
// the values; bitmap mode keeps only the nonzero pattern, which is all that
// implication mining and gate labels need and is 32x smaller.

enum class TraceMode : std::uint32_t { full = 0, bitmap = 1 };

struct ActivationTrace {
  std::size_t layer = 0;
  std::size_t samples = 0;
  std::size_t f = 0;
  TraceMode mode = TraceMode::full;
  std::vector<float> values;       // full mode: samples * f
  std::vector<std::uint8_t> bits;  // bitmap mode: packed, bit s*f+i

  bool nonzero(std::size_t s, std::size_t i) const {
    if (mode == TraceMode::full) return values[s * f + i] != 0.0f;
    std::size_t bit = s * f + i;
    return (bits[bit >> 3] >> (bit & 7)) & 1u;
  }

  float value(std::size_t s, std::size_t i) const { return values[s * f + i]; }
};

inline std::vector<ActivationTrace> collect_traces(const BaseModel& m, const SynthDataset& data,
                                                   const std::vector<std::size_t>& layer_set,
                                                   TraceMode mode = TraceMode::full,
                                                   unsigned threads = 1) {
  require(data.size() >= 1, errc::bad_argument, "collect_traces: empty dataset");
  for (std::size_t l : layer_set)
    require(l < m.layer_count(), errc::bad_argument,
            "collect_traces: layer " + std::to_string(l) + " out of range");

  std::size_t n = data.size();
  std::vector<ActivationTrace> traces(layer_set.size());
  for (std::size_t k = 0; k < layer_set.size(); ++k) {
    ActivationTrace& t = traces[k];
    t.layer = layer_set[k];
    t.samples = n;
    t.f = m.f;
    t.mode = mode;
    if (mode == TraceMode::full)
      t.values.assign(n * m.f, 0.0f);
    else
      t.bits.assign((n * m.f + 7) / 8, 0);
  }

  // Per-sample slots; bitmap bytes are only safe to share when f is a
  // multiple of 8, otherwise adjacent samples straddle a byte.
  bool parallel_ok = (m.f % 8 == 0) || mode == TraceMode::full;
  parallel_for(n, parallel_ok ? threads : 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t s = lo; s < hi; ++s) {
      ForwardTrace ft = model_forward(m, data.xs[s]);
      for (std::size_t k = 0; k < layer_set.size(); ++k) {
        ActivationTrace& t = traces[k];
        const Vector& h = ft.hiddens[layer_set[k]];
        if (mode == TraceMode::full) {
          std::copy(h.begin(), h.end(), t.values.begin() + s * m.f);
        } else {
          for (std::size_t i = 0; i < m.f; ++i)
            if (h[i] != 0.0f) {
              std::size_t bit = s * m.f + i;
              t.bits[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
            }
        }
      }
    }
  });
  return traces;
}

struct SparsityProfile {
  std::vector<double> zero_fraction;  // per neuron
  double mean_sparsity = 0.0;
  std::vector<std::size_t> dead_neurons;  // zero_fraction == 1
};

inline SparsityProfile sparsity_stats(const ActivationTrace& trace) {
  require(trace.samples >= 1, errc::bad_argument, "sparsity_stats: empty trace");
  SparsityProfile p;
  p.zero_fraction.assign(trace.f, 0.0);
  for (std::size_t i = 0; i < trace.f; ++i) {
    std::size_t zeros = 0;
    for (std::size_t s = 0; s < trace.samples; ++s)
      if (!trace.nonzero(s, i)) ++zeros;
    p.zero_fraction[i] = static_cast<double>(zeros) / static_cast<double>(trace.samples);
    if (zeros == trace.samples) p.dead_neurons.push_back(i);
  }
  p.mean_sparsity =
      std::accumulate(p.zero_fraction.begin(), p.zero_fraction.end(), 0.0) /
      static_cast<double>(trace.f);
  return p;
}

// ---- masking studies ----

namespace detail {

// Forward pass with a per-layer hidden-vector transform applied between the
// ReLU and the second linear layer.
template <typename MaskFn>
double masked_quality(const BaseModel& m, const SynthDataset& data, MaskFn&& mask_hidden) {
  double total = 0.0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    Vector cur = data.xs[s];
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
      const FFBlock& b = m.layers[l];
      Vector pre = matvec(b.w1, cur);
      add_inplace(pre, b.b1);
      Vector hidden = relu(pre);
      mask_hidden(s, l, hidden);
      Vector out = matvec(b.w2, hidden);
      add_inplace(out, b.b2);
      add_inplace(cur, out);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < m.d; ++i) {
      double diff = static_cast<double>(cur[i]) - data.ys[s][i];
      acc += diff * diff;
    }
    total += acc / static_cast<double>(m.d);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace detail

// Fresh Bernoulli(keep_fraction) mask per neuron per layer per sample, no
// rescaling: this is inference-time masking of a frozen model, not dropout.
inline double random_mask_eval(const BaseModel& m, const SynthDataset& data, double keep_fraction,
                               std::uint64_t seed) {
  require(keep_fraction >= 0.0 && keep_fraction <= 1.0, errc::bad_argument,
          "random_mask_eval: keep_fraction must be in [0,1]");
  Rng rng(seed);
  return detail::masked_quality(m, data, [&](std::size_t, std::size_t, Vector& hidden) {
    for (float& h : hidden)
      if (!rng.bernoulli(keep_fraction)) h = 0.0f;
  });
}

// Keeps the k largest activations per layer (ties broken toward the lower
// index), zeroes the rest.
inline double topk_mask_eval(const BaseModel& m, const SynthDataset& data, std::size_t k) {
  require(k <= m.f, errc::bad_argument, "topk_mask_eval: k > f");
  std::vector<std::size_t> idx(m.f);
  return detail::masked_quality(m, data, [&](std::size_t, std::size_t, Vector& hidden) {
    if (k == hidden.size()) return;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::size_t a, std::size_t b) {
      if (hidden[a] != hidden[b]) return hidden[a] > hidden[b];
      return a < b;
    });
    Vector kept(hidden.size(), 0.0f);
    for (std::size_t j = 0; j < k; ++j) kept[idx[j]] = hidden[idx[j]];
    hidden = std::move(kept);
  });
}

// ---- trace file format ----
// "MGST" | version u32 | layer u32 | samples u32 | f u32 | mode u32 | payload
// (full: LE f32 values; bitmap: packed bits, little-endian bit order)

inline constexpr std::uint32_t kTraceVersion = 1;

inline void save_trace(const ActivationTrace& t, const std::string& path) {
  auto os = open_out(path);
  write_magic(os, "MGST");
  write_u32(os, kTraceVersion);
  write_u32(os, static_cast<std::uint32_t>(t.layer));
  write_u32(os, static_cast<std::uint32_t>(t.samples));
  write_u32(os, static_cast<std::uint32_t>(t.f));
  write_u32(os, static_cast<std::uint32_t>(t.mode));
  if (t.mode == TraceMode::full) {
    write_f32_array(os, t.values);
  } else {
    os.write(reinterpret_cast<const char*>(t.bits.data()),
             static_cast<std::streamsize>(t.bits.size()));
  }
  require(bool(os), errc::io_failure, "write failed: " + path);
}

inline ActivationTrace load_trace(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "MGST", "trace " + path);
  expect_version(is, kTraceVersion, "trace");
  ActivationTrace t;
  t.layer = read_u32(is, "layer");
  t.samples = read_u32(is, "samples");
  t.f = read_u32(is, "f");
  std::uint32_t mode = read_u32(is, "mode");
  require(mode <= 1, errc::bad_version, "trace has unknown mode flag");
  t.mode = static_cast<TraceMode>(mode);
  require(t.samples > 0 && t.f > 0, errc::dim_overflow, "trace has zero dimension");
  require(static_cast<std::uint64_t>(t.samples) * t.f <= (kMaxWeightFloats << 3),
          errc::dim_overflow, "trace exceeds size limit");
  if (t.mode == TraceMode::full) {
    t.values.assign(t.samples * t.f, 0.0f);
    read_f32_array(is, t.values, "trace values");
  } else {
    t.bits.assign((t.samples * t.f + 7) / 8, 0);
    is.read(reinterpret_cast<char*>(t.bits.data()), static_cast<std::streamsize>(t.bits.size()));
    if (static_cast<std::size_t>(is.gcount()) != t.bits.size())
      fail(errc::truncated_file, "truncated trace bitmap in " + path);
  }
  return t;
}

}  // namespace mgsparse
