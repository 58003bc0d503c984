#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mgsparse/profiler.hpp"

namespace mgsparse {

// A micro-gate: one linear layer + sigmoid over the FF block's input, one
// output per contiguous group of group_size hidden neurons. Scores below the
// threshold mask the whole group; threshold 0 disables gating.
struct MicroGate {
  std::size_t layer = 0;
  std::size_t g = 0;
  std::size_t group_size = 0;
  Matrix wg;  // g x d
  Vector bg;  // g
  float threshold = 0.5f;
};

inline std::size_t gate_width(double gate_ratio, std::size_t f) {
  auto g = static_cast<std::size_t>(std::ceil(gate_ratio * static_cast<double>(f)));
  require(g >= 1 && g <= f, errc::bad_argument, "gate ratio yields invalid gate width");
  require(f % g == 0, errc::bad_argument,
          "gate width " + std::to_string(g) + " does not divide f " + std::to_string(f));
  return g;
}

// Ground-truth group activity: 1 iff the Euclidean norm of the group's
// activations is > 0, which for post-ReLU values means any element > 0.
struct GateLabels {
  std::size_t samples = 0;
  std::size_t g = 0;
  std::vector<std::uint8_t> active;  // samples * g

  bool get(std::size_t s, std::size_t k) const { return active[s * g + k] != 0; }
};

inline GateLabels make_labels(const ActivationTrace& trace, std::size_t group_size) {
  require(group_size >= 1, errc::bad_argument, "make_labels: group_size must be >= 1");
  require(trace.f % group_size == 0, errc::bad_argument,
          "make_labels: f " + std::to_string(trace.f) + " not divisible by group_size " +
              std::to_string(group_size));
  GateLabels labels;
  labels.samples = trace.samples;
  labels.g = trace.f / group_size;
  labels.active.assign(trace.samples * labels.g, 0);
  for (std::size_t s = 0; s < trace.samples; ++s)
    for (std::size_t k = 0; k < labels.g; ++k) {
      std::uint8_t any = 0;
      for (std::size_t i = k * group_size; i < (k + 1) * group_size; ++i)
        if (trace.nonzero(s, i)) {
          any = 1;
          break;
        }
      labels.active[s * labels.g + k] = any;
    }
  return labels;
}

inline Vector gate_forward(const MicroGate& gate, const Vector& x) {
  require(x.size() == gate.wg.cols, errc::dim_mismatch, "gate_forward: x.len != d");
  Vector logits = matvec(gate.wg, x);
  add_inplace(logits, gate.bg);
  return sigmoid(logits);
}

struct MgsResult {
  Vector out;
  std::size_t active_groups = 0;
  std::size_t active_neurons = 0;
};

// Thresholded sparse FF pass given precomputed scores. A group is active iff
// its score >= threshold; masked rows cost zero MACs and stay exactly 0, and
// the second layer prunes the masked columns. Split out from mgs_forward so
// oracle-gate experiments can substitute true labels for scores.
inline MgsResult mgs_apply(const FFBlock& block, const MicroGate& gate, const Vector& x,
                           const Vector& scores) {
  require(gate.g * gate.group_size == block.f, errc::dim_mismatch,
          "mgs_apply: gate geometry does not match block");
  require(scores.size() == gate.g, errc::dim_mismatch, "mgs_apply: scores.len != g");
  require(x.size() == block.d, errc::dim_mismatch, "mgs_apply: x.len != d");

  std::vector<bool> row_mask(block.f, false);
  std::size_t active_groups = 0;
  for (std::size_t k = 0; k < gate.g; ++k) {
    if (scores[k] < gate.threshold) continue;
    ++active_groups;
    for (std::size_t i = k * gate.group_size; i < (k + 1) * gate.group_size; ++i)
      row_mask[i] = true;
  }

  Vector hidden = masked_matvec(block.w1, x, row_mask);
  for (std::size_t i = 0; i < block.f; ++i)
    if (row_mask[i]) hidden[i] = relu(hidden[i] + block.b1[i]);

  Vector out = column_pruned_matvec(block.w2, hidden, row_mask);
  add_inplace(out, block.b2);
  return {std::move(out), active_groups, active_groups * gate.group_size};
}

inline MgsResult mgs_forward(const FFBlock& block, const MicroGate& gate, const Vector& x) {
  return mgs_apply(block, gate, x, gate_forward(gate, x));
}

// ---- gate training ----

struct GateTrainConfig {
  std::size_t epochs = 5;
  float learning_rate = 0.1f;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double gate_ratio = 0.125;
  float threshold = 0.5f;
};

struct GateTrainResult {
  MicroGate gate;
  std::vector<double> epoch_loss;  // mean BCE per epoch
  double train_accuracy = 0.0;     // at the 0.5 decision point, final weights
};

// Multi-label logistic regression on the frozen base: inputs are the
// residual stream entering the layer, labels the true group activity.
// The base model is never written to.
inline GateTrainResult train_gate(const BaseModel& base, std::size_t layer,
                                  const SynthDataset& data, const GateTrainConfig& cfg) {
  require(layer < base.layer_count(), errc::bad_argument, "train_gate: layer out of range");
  require(data.size() >= 1, errc::bad_argument, "train_gate: empty dataset");
  require(cfg.epochs >= 1, errc::bad_argument, "train_gate: epochs must be >= 1");

  std::size_t g = gate_width(cfg.gate_ratio, base.f);
  std::size_t group_size = base.f / g;
  std::size_t n = data.size();

  // One pass over the frozen base: cache the layer's inputs and its
  // activation pattern, then derive the labels.
  std::vector<Vector> inputs(n);
  ActivationTrace trace;
  trace.layer = layer;
  trace.samples = n;
  trace.f = base.f;
  trace.mode = TraceMode::bitmap;
  trace.bits.assign((n * base.f + 7) / 8, 0);
  for (std::size_t s = 0; s < n; ++s) {
    ForwardTrace ft = model_forward(base, data.xs[s]);
    inputs[s] = std::move(ft.inputs[layer]);
    const Vector& h = ft.hiddens[layer];
    for (std::size_t i = 0; i < base.f; ++i)
      if (h[i] != 0.0f) {
        std::size_t bit = s * base.f + i;
        trace.bits[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
      }
  }
  GateLabels labels = make_labels(trace, group_size);

  MicroGate gate;
  gate.layer = layer;
  gate.g = g;
  gate.group_size = group_size;
  gate.wg = Matrix(g, base.d);
  gate.bg.assign(g, 0.0f);
  gate.threshold = cfg.threshold;

  std::size_t batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);
  Rng order_rng(cfg.seed ^ 0x6A7Eull);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  Matrix gw(g, base.d);
  Vector gb(g, 0.0f);
  GateTrainResult result;
  result.epoch_loss.reserve(cfg.epochs);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::size_t end = std::min(start + batch, n);
      std::fill(gw.data.begin(), gw.data.end(), 0.0f);
      std::fill(gb.begin(), gb.end(), 0.0f);
      for (std::size_t idx = start; idx < end; ++idx) {
        std::size_t s = order[idx];
        const Vector& x = inputs[s];
        Vector logits = matvec(gate.wg, x);
        add_inplace(logits, gate.bg);
        Vector p = sigmoid(logits);
        for (std::size_t k = 0; k < g; ++k) {
          float y = labels.get(s, k) ? 1.0f : 0.0f;
          epoch_loss -= y * std::log(static_cast<double>(p[k])) +
                        (1.0 - y) * std::log(1.0 - static_cast<double>(p[k]));
          // closed-form BCE gradient per logit
          float delta = (p[k] - y) / static_cast<float>(g);
          gb[k] += delta;
          float* grow = &gw.data[k * base.d];
          for (std::size_t j = 0; j < base.d; ++j) grow[j] += delta * x[j];
        }
      }
      float step = cfg.learning_rate / static_cast<float>(end - start);
      for (std::size_t i = 0; i < gate.wg.data.size(); ++i) gate.wg.data[i] -= step * gw.data[i];
      for (std::size_t k = 0; k < g; ++k) gate.bg[k] -= step * gb[k];
    }
    epoch_loss /= static_cast<double>(n) * static_cast<double>(g);
    if (std::isnan(epoch_loss))
      fail(errc::nan_loss, "train_gate: NaN loss at epoch " + std::to_string(epoch));
    result.epoch_loss.push_back(epoch_loss);
  }

  std::size_t correct = 0;
  for (std::size_t s = 0; s < n; ++s) {
    Vector p = gate_forward(gate, inputs[s]);
    for (std::size_t k = 0; k < g; ++k)
      if ((p[k] >= 0.5f) == labels.get(s, k)) ++correct;
  }
  result.train_accuracy = static_cast<double>(correct) / (static_cast<double>(n) * g);
  result.gate = std::move(gate);
  return result;
}

// ---- evaluation ----

// One row of the per-layer evaluation table. Accuracy is always measured at
// the 0.5 decision point so the column stays comparable across threshold
// configurations; sparsity is the fraction of hidden neurons the gate
// actually masked.
struct LayerEvalRow {
  std::string label;  // "0".."L-1", "vanilla", "all"
  int layer = -1;
  double accuracy = 0.0;
  double quality = 0.0;  // MSE against the synthetic targets
  double sparsity = 0.0;
  std::string threshold_label;
};

namespace detail {

// Runs the residual stack with gating enabled on the layers whose entry in
// `gate_on` is true; accumulates masked-neuron counts per gated layer and
// squared error against the target.
struct GatedRunStats {
  double sq_err = 0.0;
  std::vector<std::uint64_t> masked_per_layer;
};

inline GatedRunStats gated_run(const BaseModel& m, const std::vector<MicroGate>& gates,
                               const std::vector<bool>& gate_on, const Vector& x,
                               const Vector& y) {
  GatedRunStats stats;
  stats.masked_per_layer.assign(m.layer_count(), 0);
  Vector cur = x;
  for (std::size_t l = 0; l < m.layer_count(); ++l) {
    if (gate_on[l]) {
      MgsResult r = mgs_forward(m.layers[l], gates[l], cur);
      stats.masked_per_layer[l] = m.f - r.active_neurons;
      add_inplace(cur, r.out);
    } else {
      FFResult r = ff_forward(m.layers[l], cur);
      add_inplace(cur, r.out);
    }
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < m.d; ++i) {
    double diff = static_cast<double>(cur[i]) - y[i];
    acc += diff * diff;
  }
  stats.sq_err = acc / static_cast<double>(m.d);
  return stats;
}

}  // namespace detail

inline std::string threshold_to_label(float t) { return fmt_f32(t); }

// One row per layer with only that layer gated (a per-layer ablation), then
// a vanilla row, then an "all" row with every gate active.
inline std::vector<LayerEvalRow> evaluate_gated(const BaseModel& base,
                                                const std::vector<MicroGate>& gates,
                                                const SynthDataset& data) {
  require(gates.size() == base.layer_count(), errc::bad_argument,
          "evaluate_gated: need one gate per layer");
  require(data.size() >= 1, errc::bad_argument, "evaluate_gated: empty dataset");
  std::size_t n = data.size();
  std::size_t layer_count = base.layer_count();

  // Dense pass once: vanilla quality, plus labels and 0.5-point accuracy per
  // layer (gate inputs on the ungated stream).
  double vanilla_q = 0.0;
  std::vector<std::uint64_t> correct(layer_count, 0);
  for (std::size_t s = 0; s < n; ++s) {
    ForwardTrace ft = model_forward(base, data.xs[s]);
    for (std::size_t l = 0; l < layer_count; ++l) {
      const MicroGate& gate = gates[l];
      Vector p = gate_forward(gate, ft.inputs[l]);
      const Vector& h = ft.hiddens[l];
      for (std::size_t k = 0; k < gate.g; ++k) {
        bool active = false;
        for (std::size_t i = k * gate.group_size; i < (k + 1) * gate.group_size; ++i)
          if (h[i] != 0.0f) {
            active = true;
            break;
          }
        if ((p[k] >= 0.5f) == active) ++correct[l];
      }
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < base.d; ++i) {
      double diff = static_cast<double>(ft.final[i]) - data.ys[s][i];
      acc += diff * diff;
    }
    vanilla_q += acc / static_cast<double>(base.d);
  }
  vanilla_q /= static_cast<double>(n);

  std::vector<LayerEvalRow> rows;
  std::vector<bool> gate_on(layer_count, false);
  for (std::size_t l = 0; l < layer_count; ++l) {
    std::fill(gate_on.begin(), gate_on.end(), false);
    gate_on[l] = true;
    double q = 0.0;
    std::uint64_t masked = 0;
    for (std::size_t s = 0; s < n; ++s) {
      auto stats = detail::gated_run(base, gates, gate_on, data.xs[s], data.ys[s]);
      q += stats.sq_err;
      masked += stats.masked_per_layer[l];
    }
    LayerEvalRow row;
    row.label = std::to_string(l);
    row.layer = static_cast<int>(l);
    row.accuracy = static_cast<double>(correct[l]) / (static_cast<double>(n) * gates[l].g);
    row.quality = q / static_cast<double>(n);
    row.sparsity = static_cast<double>(masked) / (static_cast<double>(n) * base.f);
    row.threshold_label = threshold_to_label(gates[l].threshold);
    rows.push_back(std::move(row));
  }

  LayerEvalRow vanilla;
  vanilla.label = "vanilla";
  vanilla.quality = vanilla_q;
  vanilla.threshold_label = "0";
  rows.push_back(std::move(vanilla));

  std::fill(gate_on.begin(), gate_on.end(), true);
  double q_all = 0.0;
  std::uint64_t masked_all = 0;
  for (std::size_t s = 0; s < n; ++s) {
    auto stats = detail::gated_run(base, gates, gate_on, data.xs[s], data.ys[s]);
    q_all += stats.sq_err;
    for (std::uint64_t c : stats.masked_per_layer) masked_all += c;
  }
  LayerEvalRow all;
  all.label = "all";
  all.quality = q_all / static_cast<double>(n);
  all.sparsity =
      static_cast<double>(masked_all) / (static_cast<double>(n) * base.f * layer_count);
  double acc_sum = 0.0;
  for (std::size_t l = 0; l < layer_count; ++l)
    acc_sum += static_cast<double>(correct[l]) / (static_cast<double>(n) * gates[l].g);
  all.accuracy = acc_sum / static_cast<double>(layer_count);
  bool uniform = true;
  for (const MicroGate& gate : gates)
    if (gate.threshold != gates[0].threshold) uniform = false;
  all.threshold_label = uniform ? threshold_to_label(gates[0].threshold) : "dynamic";
  rows.push_back(std::move(all));
  return rows;
}

// ---- threshold tuning ----

// The discrete grid tune_thresholds searches.
inline const std::vector<float>& threshold_grid() {
  static const std::vector<float> grid = {0.0f, 0.1f, 0.25f, 0.5f};
  return grid;
}

namespace detail {

struct AllConfigPoint {
  double quality = 0.0;
  double sparsity = 0.0;
};

inline AllConfigPoint all_config_point(const BaseModel& base, const std::vector<MicroGate>& gates,
                                       const SynthDataset& data) {
  std::vector<bool> on(base.layer_count(), true);
  double q = 0.0;
  std::uint64_t masked = 0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    auto stats = gated_run(base, gates, on, data.xs[s], data.ys[s]);
    q += stats.sq_err;
    for (std::uint64_t c : stats.masked_per_layer) masked += c;
  }
  AllConfigPoint pt;
  pt.quality = q / static_cast<double>(data.size());
  pt.sparsity = static_cast<double>(masked) /
                (static_cast<double>(data.size()) * base.f * base.layer_count());
  return pt;
}

}  // namespace detail

// Greedy coordinate descent over the threshold grid, starting from all-0.5:
// while the quality degradation vs vanilla exceeds the budget, lower the
// threshold of the layer whose one-step relaxation buys the most quality per
// unit sparsity lost (ties to the lower layer). Mutates the gates' thresholds
// and returns them.
inline std::vector<float> tune_thresholds(const BaseModel& base, std::vector<MicroGate>& gates,
                                          const SynthDataset& data, double quality_budget) {
  require(quality_budget >= 0.0, errc::bad_argument, "tune_thresholds: budget must be >= 0");
  require(gates.size() == base.layer_count(), errc::bad_argument,
          "tune_thresholds: need one gate per layer");
  const std::vector<float>& grid = threshold_grid();
  for (MicroGate& gate : gates) gate.threshold = grid.back();

  double vanilla_q = base_quality(base, data);
  auto cur = detail::all_config_point(base, gates, data);

  while (cur.quality - vanilla_q > quality_budget) {
    std::size_t best_layer = gates.size();
    double best_score = -1.0;
    detail::AllConfigPoint best_pt;
    for (std::size_t l = 0; l < gates.size(); ++l) {
      float t = gates[l].threshold;
      if (t <= grid.front()) continue;
      std::size_t gi = 0;
      while (grid[gi] != t) ++gi;
      gates[l].threshold = grid[gi - 1];
      auto pt = detail::all_config_point(base, gates, data);
      gates[l].threshold = t;
      double gained = cur.quality - pt.quality;
      double lost = cur.sparsity - pt.sparsity;
      double score = gained / (lost + 1e-12);
      if (score > best_score) {
        best_score = score;
        best_layer = l;
        best_pt = pt;
      }
    }
    if (best_layer == gates.size()) break;  // everything already at 0
    std::size_t gi = 0;
    while (grid[gi] != gates[best_layer].threshold) ++gi;
    gates[best_layer].threshold = grid[gi - 1];
    cur = best_pt;
  }

  std::vector<float> thresholds;
  thresholds.reserve(gates.size());
  for (const MicroGate& gate : gates) thresholds.push_back(gate.threshold);
  return thresholds;
}

// ---- gate file format ----
// "MGSG" | version u32 | layer u32 | d u32 | f u32 | g u32 | threshold f32 |
// wg row-major | bg (LE f32)

inline constexpr std::uint32_t kGateVersion = 1;

inline void save_gate(const MicroGate& gate, const std::string& path) {
  auto os = open_out(path);
  write_magic(os, "MGSG");
  write_u32(os, kGateVersion);
  write_u32(os, static_cast<std::uint32_t>(gate.layer));
  write_u32(os, static_cast<std::uint32_t>(gate.wg.cols));
  write_u32(os, static_cast<std::uint32_t>(gate.g * gate.group_size));
  write_u32(os, static_cast<std::uint32_t>(gate.g));
  write_f32(os, gate.threshold);
  write_f32_array(os, gate.wg.data);
  write_f32_array(os, gate.bg);
  require(bool(os), errc::io_failure, "write failed: " + path);
}

inline MicroGate load_gate(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "MGSG", "gate " + path);
  expect_version(is, kGateVersion, "gate");
  MicroGate gate;
  gate.layer = read_u32(is, "layer");
  std::uint32_t d = read_u32(is, "d");
  std::uint32_t f = read_u32(is, "f");
  gate.g = read_u32(is, "g");
  require(d > 0 && f > 0 && gate.g > 0, errc::dim_overflow, "gate has zero dimension");
  require(gate.g <= f && f % gate.g == 0, errc::dim_overflow, "gate width does not divide f");
  require(static_cast<std::uint64_t>(gate.g) * d <= kMaxWeightFloats, errc::dim_overflow,
          "gate exceeds size limit");
  gate.group_size = f / gate.g;
  gate.threshold = read_f32(is, "threshold");
  gate.wg = Matrix(gate.g, d);
  read_f32_array(is, gate.wg.data, "wg");
  gate.bg.assign(gate.g, 0.0f);
  read_f32_array(is, gate.bg, "bg");
  return gate;
}

}  // namespace mgsparse
