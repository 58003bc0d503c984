#pragma once

#include <string>
#include <vector>

#include "mgsparse/mgs.hpp"
#include "mgsparse/sibs.hpp"

namespace mgsparse {

// MAC cost model (1 MAC = 2 FLOPs; conversion happens only in report text).
// Bias adds and activations are aux ops and excluded throughout.

inline std::uint64_t dense_ff_macs(std::size_t d, std::size_t f) {
  require(d >= 1 && f >= 1, errc::bad_argument, "dense_ff_macs: dims must be positive");
  return 2ull * d * f;
}

// Gate pass + both linear layers restricted to the active neurons. Affine in
// active_neurons with slope 2d.
inline std::uint64_t mgs_macs(std::size_t d, std::size_t f, std::size_t g,
                              std::size_t active_neurons) {
  require(active_neurons <= f, errc::bad_argument, "mgs_macs: active_neurons > f");
  return static_cast<std::uint64_t>(g) * d + 2ull * active_neurons * d;
}

// Indicator phase + remaining computed rows + pruned second layer.
// computed_neurons counts every non-skipped neuron, indicators included.
inline std::uint64_t sibs_macs(std::size_t d, std::size_t f, std::size_t indicators,
                               std::size_t computed_neurons) {
  require(indicators <= computed_neurons && computed_neurons <= f, errc::bad_argument,
          "sibs_macs: need indicators <= computed_neurons <= f");
  return static_cast<std::uint64_t>(indicators) * d +
         static_cast<std::uint64_t>(computed_neurons - indicators) * d +
         static_cast<std::uint64_t>(computed_neurons) * d;
}

// One line of a FLOPs report; layer == -1 is the whole-model total.
// The integer fields are exact so downstream checks can stay in integer
// arithmetic; the fractions are derived views.
struct FlopsRow {
  std::string config;
  int layer = -1;
  std::uint64_t dense_macs = 0;
  std::uint64_t gate_macs = 0;
  std::uint64_t layer1_macs = 0;
  std::uint64_t layer2_macs = 0;
  std::uint64_t indicator_macs = 0;
  std::uint64_t masked_neurons = 0;  // over all evaluated samples
  std::uint64_t neuron_slots = 0;    // samples * f
  double saved_fraction = 0.0;
  double measured_sparsity = 0.0;

  std::uint64_t method_macs() const { return gate_macs + layer1_macs + layer2_macs; }
};

struct FlopsReport {
  std::vector<FlopsRow> per_layer;
  FlopsRow total;
};

namespace detail {

inline void finalize_row(FlopsRow& row) {
  row.saved_fraction =
      1.0 - static_cast<double>(row.method_macs()) / static_cast<double>(row.dense_macs);
  row.measured_sparsity =
      static_cast<double>(row.masked_neurons) / static_cast<double>(row.neuron_slots);
}

inline FlopsReport finalize_report(std::vector<FlopsRow> rows, const std::string& config) {
  FlopsReport report;
  report.total.config = config;
  report.total.layer = -1;
  for (FlopsRow& row : rows) {
    finalize_row(row);
    report.total.dense_macs += row.dense_macs;
    report.total.gate_macs += row.gate_macs;
    report.total.layer1_macs += row.layer1_macs;
    report.total.layer2_macs += row.layer2_macs;
    report.total.indicator_macs += row.indicator_macs;
    report.total.masked_neurons += row.masked_neurons;
    report.total.neuron_slots += row.neuron_slots;
  }
  finalize_row(report.total);
  report.per_layer = std::move(rows);
  return report;
}

[[noreturn]] inline void accounting_bug(const std::string& config, std::size_t layer,
                                        std::size_t sample, std::uint64_t analytic,
                                        std::uint64_t instrumented) {
  fail(errc::accounting_mismatch,
       "FLOPs accounting bug in config '" + config + "' layer " + std::to_string(layer) +
           " sample " + std::to_string(sample) + ": analytic " + std::to_string(analytic) +
           " != instrumented " + std::to_string(instrumented));
}

}  // namespace detail

// Dense baseline. The instrumented counter must reproduce 2df per layer per
// sample exactly, otherwise the accounting model has drifted from the code.
inline FlopsReport measure_vanilla(const BaseModel& base, const SynthDataset& data) {
  require(data.size() >= 1, errc::bad_argument, "measure_vanilla: empty dataset");
  std::vector<FlopsRow> rows(base.layer_count());
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    rows[l].config = "vanilla";
    rows[l].layer = static_cast<int>(l);
  }
  std::uint64_t per_layer_dense = dense_ff_macs(base.d, base.f);
  for (std::size_t s = 0; s < data.size(); ++s) {
    Vector cur = data.xs[s];
    for (std::size_t l = 0; l < base.layer_count(); ++l) {
      reset_macs();
      FFResult r = ff_forward(base.layers[l], cur);
      if (macs() != per_layer_dense)
        detail::accounting_bug("vanilla", l, s, per_layer_dense, macs());
      add_inplace(cur, r.out);
      rows[l].dense_macs += per_layer_dense;
      rows[l].layer1_macs += static_cast<std::uint64_t>(base.f) * base.d;
      rows[l].layer2_macs += static_cast<std::uint64_t>(base.f) * base.d;
      rows[l].neuron_slots += base.f;
    }
  }
  return detail::finalize_report(std::move(rows), "vanilla");
}

inline FlopsReport measure_mgs(const BaseModel& base, const std::vector<MicroGate>& gates,
                               const SynthDataset& data, const std::string& config = "mgs") {
  require(gates.size() == base.layer_count(), errc::bad_argument,
          "measure_mgs: need one gate per layer");
  require(data.size() >= 1, errc::bad_argument, "measure_mgs: empty dataset");
  std::vector<FlopsRow> rows(base.layer_count());
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    rows[l].config = config;
    rows[l].layer = static_cast<int>(l);
  }
  std::uint64_t per_layer_dense = dense_ff_macs(base.d, base.f);
  for (std::size_t s = 0; s < data.size(); ++s) {
    Vector cur = data.xs[s];
    for (std::size_t l = 0; l < base.layer_count(); ++l) {
      const MicroGate& gate = gates[l];
      reset_macs();
      MgsResult r = mgs_forward(base.layers[l], gate, cur);
      std::uint64_t analytic = mgs_macs(base.d, base.f, gate.g, r.active_neurons);
      if (macs() != analytic) detail::accounting_bug(config, l, s, analytic, macs());
      add_inplace(cur, r.out);
      rows[l].dense_macs += per_layer_dense;
      rows[l].gate_macs += static_cast<std::uint64_t>(gate.g) * base.d;
      rows[l].layer1_macs += static_cast<std::uint64_t>(r.active_neurons) * base.d;
      rows[l].layer2_macs += static_cast<std::uint64_t>(r.active_neurons) * base.d;
      rows[l].masked_neurons += base.f - r.active_neurons;
      rows[l].neuron_slots += base.f;
    }
  }
  return detail::finalize_report(std::move(rows), config);
}

inline FlopsReport measure_sibs(const BaseModel& base, const std::vector<IndicatorTable>& tables,
                                const SynthDataset& data, const std::string& config = "sibs") {
  require(tables.size() == base.layer_count(), errc::bad_argument,
          "measure_sibs: need one table per layer");
  require(data.size() >= 1, errc::bad_argument, "measure_sibs: empty dataset");
  std::vector<FlopsRow> rows(base.layer_count());
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    rows[l].config = config;
    rows[l].layer = static_cast<int>(l);
  }
  std::uint64_t per_layer_dense = dense_ff_macs(base.d, base.f);
  for (std::size_t s = 0; s < data.size(); ++s) {
    Vector cur = data.xs[s];
    for (std::size_t l = 0; l < base.layer_count(); ++l) {
      const IndicatorTable& table = tables[l];
      reset_macs();
      SibsResult r = sibs_forward(base.layers[l], table, cur);
      std::uint64_t analytic = sibs_macs(base.d, base.f, table.indicators.size(), r.computed);
      if (macs() != analytic) detail::accounting_bug(config, l, s, analytic, macs());
      add_inplace(cur, r.out);
      rows[l].dense_macs += per_layer_dense;
      rows[l].indicator_macs += static_cast<std::uint64_t>(table.indicators.size()) * base.d;
      rows[l].layer1_macs += static_cast<std::uint64_t>(r.computed) * base.d;
      rows[l].layer2_macs += static_cast<std::uint64_t>(r.computed) * base.d;
      rows[l].masked_neurons += r.skipped;
      rows[l].neuron_slots += base.f;
    }
  }
  return detail::finalize_report(std::move(rows), config);
}

}  // namespace mgsparse
