#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "mgsparse/flops.hpp"

namespace mgsparse {

// ---- run configuration ----
// Plain-text key-value file ("key = value", '#' comments). Command-line
// flags override file values; the effective config is echoed into the
// output directory so every run is reproducible from its artifacts.

struct RunConfig {
  // model
  std::size_t d = 64;
  std::size_t f = 256;
  std::size_t layers = 6;
  // data
  std::size_t n_train = 2000;
  std::size_t n_eval = 1000;
  std::size_t components = 8;
  double spread = 3.0;
  std::size_t teacher_layers = 2;
  std::size_t teacher_f = 128;
  // base training
  std::size_t epochs = 10;
  double lr = 0.05;
  std::size_t batch_size = 32;
  double bias_shift = 1.65;
  // method
  std::string method = "mgs";  // profile | sibs | mgs | tune | all
  std::string budgets = "4,16,32";
  double gate_ratio = 0.125;
  std::size_t gate_epochs = 5;
  double gate_lr = 0.1;
  std::size_t gate_batch = 32;
  std::string thresholds = "0.5";
  double quality_budget = 0.05;
  std::string mask_levels = "0.5,0.7,0.9";
  std::string trace_mode = "bitmap";  // bitmap | full
  // run
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::string out_dir = "out";

  void set(const std::string& key, const std::string& value);
  void validate() const;
  void save(const std::string& path) const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_num(const std::string& value, const std::string& key) {
  std::istringstream ss(value);
  T out;
  ss >> out;
  if (ss.fail()) fail(errc::bad_config, key + ": cannot parse value '" + value + "'");
  std::string rest;
  ss >> rest;
  if (!rest.empty()) fail(errc::bad_config, key + ": trailing junk in value '" + value + "'");
  return out;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "d") d = detail::parse_num<std::size_t>(value, key);
  else if (key == "f") f = detail::parse_num<std::size_t>(value, key);
  else if (key == "layers") layers = detail::parse_num<std::size_t>(value, key);
  else if (key == "n_train") n_train = detail::parse_num<std::size_t>(value, key);
  else if (key == "n_eval") n_eval = detail::parse_num<std::size_t>(value, key);
  else if (key == "components") components = detail::parse_num<std::size_t>(value, key);
  else if (key == "spread") spread = detail::parse_num<double>(value, key);
  else if (key == "teacher_layers") teacher_layers = detail::parse_num<std::size_t>(value, key);
  else if (key == "teacher_f") teacher_f = detail::parse_num<std::size_t>(value, key);
  else if (key == "epochs") epochs = detail::parse_num<std::size_t>(value, key);
  else if (key == "lr") lr = detail::parse_num<double>(value, key);
  else if (key == "batch_size") batch_size = detail::parse_num<std::size_t>(value, key);
  else if (key == "bias_shift") bias_shift = detail::parse_num<double>(value, key);
  else if (key == "method") method = value;
  else if (key == "budgets") budgets = value;
  else if (key == "gate_ratio") gate_ratio = detail::parse_num<double>(value, key);
  else if (key == "gate_epochs") gate_epochs = detail::parse_num<std::size_t>(value, key);
  else if (key == "gate_lr") gate_lr = detail::parse_num<double>(value, key);
  else if (key == "gate_batch") gate_batch = detail::parse_num<std::size_t>(value, key);
  else if (key == "thresholds") thresholds = value;
  else if (key == "quality_budget") quality_budget = detail::parse_num<double>(value, key);
  else if (key == "mask_levels") mask_levels = value;
  else if (key == "trace_mode") trace_mode = value;
  else if (key == "seed") seed = detail::parse_num<std::uint64_t>(value, key);
  else if (key == "threads") threads = detail::parse_num<unsigned>(value, key);
  else if (key == "out_dir") out_dir = value;
  else fail(errc::bad_config, "unknown config key '" + key + "'");
}

inline RunConfig load_config(const std::string& path) {
  auto is = open_in(path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail(errc::bad_config, path + ":" + std::to_string(lineno) + ": expected key = value");
    cfg.set(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return cfg;
}

inline void RunConfig::validate() const {
  require(d >= 1 && f >= 1, errc::bad_config, "config: d and f must be positive");
  require(layers >= 1, errc::bad_config, "config: layers must be >= 1");
  require(n_train >= 1 && n_eval >= 1, errc::bad_config, "config: dataset sizes must be >= 1");
  require(epochs >= 1 && gate_epochs >= 1, errc::bad_config, "config: epochs must be >= 1");
  require(lr > 0.0 && gate_lr > 0.0, errc::bad_config, "config: learning rates must be > 0");
  require(bias_shift >= 0.0, errc::bad_config, "config: bias_shift must be >= 0");
  require(quality_budget >= 0.0, errc::bad_config, "config: quality_budget must be >= 0");
  require(method == "profile" || method == "sibs" || method == "mgs" || method == "tune" ||
              method == "all",
          errc::bad_config, "config: unknown method '" + method + "'");
  require(trace_mode == "bitmap" || trace_mode == "full", errc::bad_config,
          "config: trace_mode must be bitmap or full");
  gate_width(gate_ratio, f);  // throws if the ratio does not divide f
}

inline void RunConfig::save(const std::string& path) const {
  auto os = open_out(path);
  os << "# effective run configuration\n";
  os << "d = " << d << "\nf = " << f << "\nlayers = " << layers << "\n";
  os << "n_train = " << n_train << "\nn_eval = " << n_eval << "\n";
  os << "components = " << components << "\nspread = " << fmt_f64(spread) << "\n";
  os << "teacher_layers = " << teacher_layers << "\nteacher_f = " << teacher_f << "\n";
  os << "epochs = " << epochs << "\nlr = " << fmt_f64(lr) << "\nbatch_size = " << batch_size
     << "\n";
  os << "bias_shift = " << fmt_f64(bias_shift) << "\n";
  os << "method = " << method << "\nbudgets = " << budgets << "\n";
  os << "gate_ratio = " << fmt_f64(gate_ratio) << "\ngate_epochs = " << gate_epochs
     << "\ngate_lr = " << fmt_f64(gate_lr) << "\ngate_batch = " << gate_batch << "\n";
  os << "thresholds = " << thresholds << "\nquality_budget = " << fmt_f64(quality_budget) << "\n";
  os << "mask_levels = " << mask_levels << "\ntrace_mode = " << trace_mode << "\n";
  os << "seed = " << seed << "\nthreads = " << threads << "\nout_dir = " << out_dir << "\n";
  require(bool(os), errc::io_failure, "write failed: " + path);
}

// ---- small parsing helpers shared with the CLI ----

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(detail::trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(detail::trim(cur));
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  for (const std::string& tok : split_list(s)) out.push_back(detail::parse_num<std::size_t>(tok, what));
  require(!out.empty(), errc::bad_config, what + ": empty list");
  return out;
}

inline std::vector<double> parse_double_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const std::string& tok : split_list(s)) out.push_back(detail::parse_num<double>(tok, what));
  require(!out.empty(), errc::bad_config, what + ": empty list");
  return out;
}

// "0.5" broadcasts; "0.5,0.1,..." must match the layer count; "@file" or a
// readable path loads one value per line.
inline std::vector<float> parse_thresholds(const std::string& spec, std::size_t layer_count) {
  std::string body = spec;
  if (!spec.empty() && spec[0] == '@') body = spec.substr(1);
  if (std::filesystem::exists(body) && !std::filesystem::is_directory(body)) {
    std::vector<float> out;
    auto is = open_in(body);
    std::string line;
    while (std::getline(is, line)) {
      std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      for (const std::string& tok : split_list(t))
        out.push_back(detail::parse_num<float>(tok, "thresholds"));
    }
    require(out.size() == layer_count, errc::bad_config,
            "thresholds file has " + std::to_string(out.size()) + " values, expected " +
                std::to_string(layer_count));
    return out;
  }
  std::vector<double> vals = parse_double_list(body, "thresholds");
  if (vals.size() == 1) return std::vector<float>(layer_count, static_cast<float>(vals[0]));
  require(vals.size() == layer_count, errc::bad_config,
          "thresholds list has " + std::to_string(vals.size()) + " values, expected " +
              std::to_string(layer_count));
  std::vector<float> out;
  for (double v : vals) out.push_back(static_cast<float>(v));
  return out;
}

// ---- CSV helpers ----

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : os_(open_out(path)) {
    os_ << header << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ",";
      os_ << cells[i];
    }
    os_ << "\n";
  }

  void close(const std::string& path) {
    os_.flush();
    require(bool(os_), errc::io_failure, "write failed: " + path);
  }

 private:
  std::ofstream os_;
};

inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  auto is = open_in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    rows.push_back(split_list(line));
  }
  return rows;
}

// ---- derived seeds ----
// One master seed fans out to fixed, documented sub-streams.

struct SeedPlan {
  std::uint64_t master;
  std::uint64_t params() const { return master; }
  std::uint64_t train_draw() const { return master + 1; }
  std::uint64_t eval_draw() const { return master + 2; }
  std::uint64_t init() const { return master + 3; }
  std::uint64_t sgd() const { return master + 4; }
  std::uint64_t mask() const { return master + 7; }
  std::uint64_t gate(std::size_t layer) const { return master + 100 + layer; }
};

// ---- pipeline stages ----
// Each stage is also reachable as a standalone CLI subcommand; the pipeline
// just chains them over one output directory.

struct PipelinePaths {
  std::string root;
  std::string config_echo() const { return root + "/run_config.txt"; }
  std::string checkpoint() const { return root + "/base.mgsb"; }
  std::string train_data() const { return root + "/train.mgsd"; }
  std::string eval_data() const { return root + "/eval.mgsd"; }
  std::string loss_csv() const { return root + "/loss.csv"; }
  std::string trace_dir() const { return root + "/traces"; }
  std::string trace(std::size_t layer) const {
    return trace_dir() + "/layer_" + std::to_string(layer) + ".mgst";
  }
  std::string profile_csv() const { return root + "/profile.csv"; }
  std::string mask_csv() const { return root + "/mask_study.csv"; }
  std::string table_dir(std::size_t budget) const {
    return root + "/tables_b" + std::to_string(budget);
  }
  std::string table(std::size_t budget, std::size_t layer) const {
    return table_dir(budget) + "/layer_" + std::to_string(layer) + ".mgsi";
  }
  std::string sibs_csv() const { return root + "/sibs_eval.csv"; }
  std::string coverage_csv() const { return root + "/sibs_coverage.csv"; }
  std::string gate_dir() const { return root + "/gates"; }
  std::string gate(std::size_t layer) const {
    return gate_dir() + "/layer_" + std::to_string(layer) + ".mgsg";
  }
  std::string mgs_csv() const { return root + "/mgs_eval.csv"; }
  std::string mgs_tuned_csv() const { return root + "/mgs_eval_tuned.csv"; }
  std::string tune_csv() const { return root + "/tune.csv"; }
  std::string flops_csv() const { return root + "/flops.csv"; }
  std::string report_csv() const { return root + "/report.csv"; }
  std::string flops_report_csv() const { return root + "/flops_report.csv"; }
};

inline DatasetSpec dataset_spec_of(const RunConfig& cfg) {
  DatasetSpec spec;
  spec.d = cfg.d;
  spec.components = cfg.components;
  spec.component_spread = cfg.spread;
  spec.param_seed = SeedPlan{cfg.seed}.params();
  spec.teacher_layers = cfg.teacher_layers;
  spec.teacher_f = cfg.teacher_f;
  return spec;
}

inline void stage_train_base(const RunConfig& cfg, const PipelinePaths& paths) {
  SeedPlan seeds{cfg.seed};
  DatasetSpec spec = dataset_spec_of(cfg);
  SynthDataset train = generate_dataset(spec, cfg.n_train, seeds.train_draw());
  SynthDataset eval = generate_dataset(spec, cfg.n_eval, seeds.eval_draw());
  save_dataset(train, paths.train_data());
  save_dataset(eval, paths.eval_data());

  BaseModel init = init_base(cfg.d, cfg.f, cfg.layers, seeds.init(),
                             static_cast<float>(cfg.bias_shift));
  TrainConfig tc;
  tc.learning_rate = static_cast<float>(cfg.lr);
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.seed = seeds.sgd();
  tc.sparsity_bias_shift = static_cast<float>(cfg.bias_shift);
  TrainResult tr = train_base(std::move(init), train, tc);
  save_checkpoint(tr.model, paths.checkpoint());

  CsvWriter csv(paths.loss_csv(), "epoch,mean_loss");
  for (std::size_t e = 0; e < tr.epoch_loss.size(); ++e)
    csv.row({std::to_string(e), fmt_f64(tr.epoch_loss[e])});
  csv.close(paths.loss_csv());
}

struct MaskStudyRow {
  std::size_t layer;
  std::string mask_method;  // random | topk
  double level;             // target sparsity
  double sparsity;          // measured effective sparsity at this layer
  double quality;
};

// Random vs top-k masking sweep over the hidden activations, the Fig.-2
// analog. Level x means: random -> keep_fraction 1-x; topk -> k = (1-x)*f.
inline std::vector<MaskStudyRow> mask_study(const BaseModel& m, const SynthDataset& data,
                                            const std::vector<double>& levels,
                                            std::uint64_t seed) {
  std::vector<MaskStudyRow> rows;
  for (double level : levels) {
    require(level >= 0.0 && level <= 1.0, errc::bad_argument, "mask level must be in [0,1]");
    {
      Rng rng(seed);
      std::vector<std::uint64_t> zeros(m.layer_count(), 0);
      double q = detail::masked_quality(m, data, [&](std::size_t, std::size_t l, Vector& hidden) {
        for (float& h : hidden)
          if (!rng.bernoulli(1.0 - level)) h = 0.0f;
        for (float h : hidden)
          if (h == 0.0f) ++zeros[l];
      });
      for (std::size_t l = 0; l < m.layer_count(); ++l)
        rows.push_back({l, "random", level,
                        static_cast<double>(zeros[l]) / (static_cast<double>(data.size()) * m.f),
                        q});
    }
    {
      std::size_t k = static_cast<std::size_t>(
          std::llround((1.0 - level) * static_cast<double>(m.f)));
      std::vector<std::uint64_t> zeros(m.layer_count(), 0);
      std::vector<std::size_t> idx(m.f);
      double q = detail::masked_quality(m, data, [&](std::size_t, std::size_t l, Vector& hidden) {
        if (k < hidden.size()) {
          std::iota(idx.begin(), idx.end(), std::size_t{0});
          std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                            [&](std::size_t a, std::size_t b) {
                              if (hidden[a] != hidden[b]) return hidden[a] > hidden[b];
                              return a < b;
                            });
          Vector kept(hidden.size(), 0.0f);
          for (std::size_t j = 0; j < k; ++j) kept[idx[j]] = hidden[idx[j]];
          hidden = std::move(kept);
        }
        for (float h : hidden)
          if (h == 0.0f) ++zeros[l];
      });
      for (std::size_t l = 0; l < m.layer_count(); ++l)
        rows.push_back({l, "topk", level,
                        static_cast<double>(zeros[l]) / (static_cast<double>(data.size()) * m.f),
                        q});
    }
  }
  return rows;
}

inline void stage_profile(const RunConfig& cfg, const PipelinePaths& paths) {
  BaseModel base = load_checkpoint(paths.checkpoint());
  SynthDataset train = load_dataset(paths.train_data());
  SynthDataset eval = load_dataset(paths.eval_data());

  std::vector<std::size_t> layer_set(base.layer_count());
  for (std::size_t l = 0; l < layer_set.size(); ++l) layer_set[l] = l;
  TraceMode mode = cfg.trace_mode == "full" ? TraceMode::full : TraceMode::bitmap;
  std::vector<ActivationTrace> traces = collect_traces(base, train, layer_set, mode, cfg.threads);

  std::filesystem::create_directories(paths.trace_dir());
  CsvWriter csv(paths.profile_csv(), "layer,samples,mean_sparsity,dead_neurons");
  for (const ActivationTrace& t : traces) {
    save_trace(t, paths.trace(t.layer));
    SparsityProfile p = sparsity_stats(t);
    csv.row({std::to_string(t.layer), std::to_string(t.samples), fmt_f64(p.mean_sparsity),
             std::to_string(p.dead_neurons.size())});
  }
  csv.close(paths.profile_csv());

  std::vector<double> levels = parse_double_list(cfg.mask_levels, "mask_levels");
  std::vector<MaskStudyRow> rows = mask_study(base, eval, levels, SeedPlan{cfg.seed}.mask());
  CsvWriter mcsv(paths.mask_csv(), "layer,method,level,sparsity,quality");
  for (const MaskStudyRow& r : rows)
    mcsv.row({std::to_string(r.layer), r.mask_method, fmt_f64(r.level), fmt_f64(r.sparsity),
              fmt_f64(r.quality)});
  mcsv.close(paths.mask_csv());
}

// ---- SIBS evaluation ----

struct SibsEvalRow {
  std::string label;  // layer index or "all"
  int layer = -1;
  std::size_t budget = 0;  // actual indicator count (requested budget for "all")
  std::size_t covered = 0;
  double amplification = 0.0;
  double skip_rate = 0.0;
  double violation_rate = 0.0;  // skipped neurons that were actually nonzero
  double quality = 0.0;
  double flops_reduction = 0.0;
};

// Skipped neurons the dense block would have activated. The skip set is
// replayed from the dense hidden vector; indicator rows are computed by both
// paths with identical arithmetic, so the decisions agree bit for bit.
inline std::uint64_t count_violations(const IndicatorTable& table, const Vector& dense_hidden) {
  std::size_t f = table.f;
  std::vector<bool> is_indicator(f, false);
  for (std::uint32_t i : table.indicators) is_indicator[i] = true;
  std::vector<bool> skip(f, false);
  for (std::size_t k = 0; k < table.indicators.size(); ++k) {
    if (dense_hidden[table.indicators[k]] != 0.0f) continue;
    for (std::uint32_t j : table.implied[k]) skip[j] = true;
  }
  std::uint64_t violations = 0;
  for (std::size_t j = 0; j < f; ++j)
    if (skip[j] && !is_indicator[j] && dense_hidden[j] != 0.0f) ++violations;
  return violations;
}

// Per-layer ablation rows (only that layer masked) plus an "all" row with
// every layer masked. Violations are judged against what a dense block would
// have produced on the same stream input.
inline std::vector<SibsEvalRow> evaluate_sibs(const BaseModel& base,
                                              const std::vector<IndicatorTable>& tables,
                                              const SynthDataset& data,
                                              std::size_t requested_budget) {
  require(tables.size() == base.layer_count(), errc::bad_argument,
          "evaluate_sibs: need one table per layer");
  require(data.size() >= 1, errc::bad_argument, "evaluate_sibs: empty dataset");
  std::size_t n = data.size();
  std::uint64_t dense_layer_macs = dense_ff_macs(base.d, base.f);

  std::vector<SibsEvalRow> rows;
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    const IndicatorTable& table = tables[l];
    std::uint64_t skipped = 0, violations = 0, method_macs = 0;
    double q = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      Vector cur = data.xs[s];
      for (std::size_t ll = 0; ll < base.layer_count(); ++ll) {
        if (ll == l) {
          FFResult dense = ff_forward(base.layers[ll], cur);
          SibsResult r = sibs_forward(base.layers[ll], table, cur);
          skipped += r.skipped;
          method_macs += sibs_macs(base.d, base.f, table.indicators.size(), r.computed);
          violations += count_violations(table, dense.hidden);
          add_inplace(cur, r.out);
        } else {
          FFResult r = ff_forward(base.layers[ll], cur);
          add_inplace(cur, r.out);
        }
      }
      double acc = 0.0;
      for (std::size_t i = 0; i < base.d; ++i) {
        double diff = static_cast<double>(cur[i]) - data.ys[s][i];
        acc += diff * diff;
      }
      q += acc / static_cast<double>(base.d);
    }
    SibsEvalRow row;
    row.label = std::to_string(l);
    row.layer = static_cast<int>(l);
    row.budget = table.indicators.size();
    row.covered = table.covered_count;
    row.amplification = table.amplification;
    row.skip_rate = static_cast<double>(skipped) / (static_cast<double>(n) * base.f);
    row.violation_rate =
        skipped == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(skipped);
    row.quality = q / static_cast<double>(n);
    row.flops_reduction = 1.0 - static_cast<double>(method_macs) /
                                    (static_cast<double>(dense_layer_macs) * n);
    rows.push_back(std::move(row));
  }

  // all layers masked at once
  std::uint64_t skipped = 0, violations = 0, method_macs = 0;
  double q = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    Vector cur = data.xs[s];
    for (std::size_t l = 0; l < base.layer_count(); ++l) {
      const IndicatorTable& table = tables[l];
      FFResult dense = ff_forward(base.layers[l], cur);
      SibsResult r = sibs_forward(base.layers[l], table, cur);
      skipped += r.skipped;
      method_macs += sibs_macs(base.d, base.f, table.indicators.size(), r.computed);
      violations += count_violations(table, dense.hidden);
      add_inplace(cur, r.out);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < base.d; ++i) {
      double diff = static_cast<double>(cur[i]) - data.ys[s][i];
      acc += diff * diff;
    }
    q += acc / static_cast<double>(base.d);
  }
  SibsEvalRow all;
  all.label = "all";
  all.layer = -1;
  all.budget = requested_budget;
  std::uint64_t covered_total = 0;
  double amp_sum = 0.0;
  for (const IndicatorTable& t : tables) {
    covered_total += t.covered_count;
    amp_sum += t.amplification;
  }
  all.covered = covered_total;
  all.amplification = amp_sum / static_cast<double>(tables.size());
  all.skip_rate = static_cast<double>(skipped) /
                  (static_cast<double>(n) * base.f * base.layer_count());
  all.violation_rate =
      skipped == 0 ? 0.0 : static_cast<double>(violations) / static_cast<double>(skipped);
  all.quality = q / static_cast<double>(n);
  all.flops_reduction =
      1.0 - static_cast<double>(method_macs) /
                (static_cast<double>(dense_layer_macs) * n * base.layer_count());
  rows.push_back(std::move(all));
  return rows;
}

// Appends to flops.csv, creating it with a header on first use.
inline void append_flops_rows(const PipelinePaths& paths, const std::vector<FlopsRow>& rows) {
  std::string path = paths.flops_csv();
  bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  require(bool(os), errc::io_failure, "cannot open for append: " + path);
  if (fresh)
    os << "config,layer,dense_macs,method_macs,gate_macs,saved_fraction,measured_sparsity\n";
  for (const FlopsRow& r : rows) {
    os << r.config << "," << (r.layer < 0 ? std::string("total") : std::to_string(r.layer)) << ","
       << r.dense_macs << "," << r.method_macs() << "," << r.gate_macs << ","
       << fmt_f64(r.saved_fraction) << "," << fmt_f64(r.measured_sparsity) << "\n";
  }
  require(bool(os), errc::io_failure, "write failed: " + path);
}

inline void stage_sibs(const RunConfig& cfg, const PipelinePaths& paths) {
  BaseModel base = load_checkpoint(paths.checkpoint());
  SynthDataset eval = load_dataset(paths.eval_data());

  std::vector<std::size_t> budgets = parse_size_list(cfg.budgets, "budgets");
  CsvWriter csv(paths.sibs_csv(),
                "layer,budget,covered,amplification,skip_rate,violation_rate,quality,"
                "flops_reduction");
  CsvWriter cov(paths.coverage_csv(), "layer,budget,covered,amplification");
  std::vector<FlopsRow> flops_rows;

  for (std::size_t budget : budgets) {
    std::vector<IndicatorTable> tables;
    std::filesystem::create_directories(paths.table_dir(budget));
    for (std::size_t l = 0; l < base.layer_count(); ++l) {
      ActivationTrace trace = load_trace(paths.trace(l));
      ImplicationSets imp = mine_implications(trace);
      IndicatorTable table = greedy_cover(imp, budget);
      save_indicator_table(table, paths.table(budget, l));
      cov.row({std::to_string(l), std::to_string(budget), std::to_string(table.covered_count),
               fmt_f64(table.amplification)});
      tables.push_back(std::move(table));
    }
    std::vector<SibsEvalRow> rows = evaluate_sibs(base, tables, eval, budget);
    for (const SibsEvalRow& r : rows)
      csv.row({r.label, std::to_string(r.budget), std::to_string(r.covered),
               fmt_f64(r.amplification), fmt_f64(r.skip_rate), fmt_f64(r.violation_rate),
               fmt_f64(r.quality), fmt_f64(r.flops_reduction)});
    FlopsReport rep = measure_sibs(base, tables, eval, "sibs-b" + std::to_string(budget));
    for (const FlopsRow& r : rep.per_layer) flops_rows.push_back(r);
    flops_rows.push_back(rep.total);
  }
  csv.close(paths.sibs_csv());
  cov.close(paths.coverage_csv());
  append_flops_rows(paths, flops_rows);
}

inline void stage_mgs_train(const RunConfig& cfg, const PipelinePaths& paths) {
  BaseModel base = load_checkpoint(paths.checkpoint());
  SynthDataset train = load_dataset(paths.train_data());
  std::filesystem::create_directories(paths.gate_dir());
  SeedPlan seeds{cfg.seed};
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    GateTrainConfig gc;
    gc.epochs = cfg.gate_epochs;
    gc.learning_rate = static_cast<float>(cfg.gate_lr);
    gc.batch_size = cfg.gate_batch;
    gc.seed = seeds.gate(l);
    gc.gate_ratio = cfg.gate_ratio;
    GateTrainResult r = train_gate(base, l, train, gc);
    save_gate(r.gate, paths.gate(l));
  }
}

inline std::vector<MicroGate> load_gates(const BaseModel& base, const PipelinePaths& paths) {
  std::vector<MicroGate> gates;
  for (std::size_t l = 0; l < base.layer_count(); ++l) {
    MicroGate gate = load_gate(paths.gate(l));
    require(gate.layer == l, errc::bad_argument,
            "gate file " + paths.gate(l) + " is for layer " + std::to_string(gate.layer));
    require(gate.g * gate.group_size == base.f && gate.wg.cols == base.d, errc::dim_mismatch,
            "gate geometry does not match checkpoint");
    gates.push_back(std::move(gate));
  }
  return gates;
}

inline void write_eval_rows(const std::string& path, const std::vector<LayerEvalRow>& rows) {
  CsvWriter csv(path, "layer,acc,mse,sparsity,threshold");
  for (const LayerEvalRow& r : rows)
    csv.row({r.label, fmt_f64(r.accuracy), fmt_f64(r.quality), fmt_f64(r.sparsity),
             r.threshold_label});
  csv.close(path);
}

inline void stage_mgs_eval(const RunConfig& cfg, const PipelinePaths& paths) {
  BaseModel base = load_checkpoint(paths.checkpoint());
  SynthDataset eval = load_dataset(paths.eval_data());
  std::vector<MicroGate> gates = load_gates(base, paths);
  std::vector<float> thresholds = parse_thresholds(cfg.thresholds, base.layer_count());
  for (std::size_t l = 0; l < gates.size(); ++l) gates[l].threshold = thresholds[l];

  write_eval_rows(paths.mgs_csv(), evaluate_gated(base, gates, eval));

  std::vector<FlopsRow> flops_rows;
  FlopsReport vanilla = measure_vanilla(base, eval);
  for (const FlopsRow& r : vanilla.per_layer) flops_rows.push_back(r);
  flops_rows.push_back(vanilla.total);
  FlopsReport gated = measure_mgs(base, gates, eval, "mgs");
  for (const FlopsRow& r : gated.per_layer) flops_rows.push_back(r);
  flops_rows.push_back(gated.total);
  // threshold-0 convention: the gate still runs, pure overhead
  std::vector<MicroGate> zeroed = gates;
  for (MicroGate& gate : zeroed) gate.threshold = 0.0f;
  FlopsReport overhead = measure_mgs(base, zeroed, eval, "mgs-threshold0");
  for (const FlopsRow& r : overhead.per_layer) flops_rows.push_back(r);
  flops_rows.push_back(overhead.total);
  // disabled config: gate removed entirely, identical to vanilla
  FlopsReport disabled = measure_vanilla(base, eval);
  for (FlopsRow& r : disabled.per_layer) r.config = "mgs-disabled";
  disabled.total.config = "mgs-disabled";
  for (const FlopsRow& r : disabled.per_layer) flops_rows.push_back(r);
  flops_rows.push_back(disabled.total);
  append_flops_rows(paths, flops_rows);
}

inline void stage_tune(const RunConfig& cfg, const PipelinePaths& paths) {
  BaseModel base = load_checkpoint(paths.checkpoint());
  SynthDataset eval = load_dataset(paths.eval_data());
  std::vector<MicroGate> gates = load_gates(base, paths);
  std::vector<float> thresholds = tune_thresholds(base, gates, eval, cfg.quality_budget);

  CsvWriter csv(paths.tune_csv(), "layer,threshold");
  for (std::size_t l = 0; l < thresholds.size(); ++l)
    csv.row({std::to_string(l), fmt_f32(thresholds[l])});
  csv.close(paths.tune_csv());
  for (std::size_t l = 0; l < gates.size(); ++l) save_gate(gates[l], paths.gate(l));

  write_eval_rows(paths.mgs_tuned_csv(), evaluate_gated(base, gates, eval));
}

// Merges whatever evaluation CSVs exist in the output directory into one
// combined per-layer table plus a FLOPs-reduction summary.
inline void stage_report(const PipelinePaths& paths) {
  CsvWriter report(paths.report_csv(), "method,layer,acc,mse,sparsity,threshold");
  auto merge_eval = [&](const std::string& path, const std::string& method) {
    if (!std::filesystem::exists(path)) return;
    auto rows = read_csv(path);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() < 5) continue;
      report.row({method, r[0], r[1], r[2], r[3], r[4]});
    }
  };
  merge_eval(paths.mgs_csv(), "mgs");
  merge_eval(paths.mgs_tuned_csv(), "mgs-tuned");
  if (std::filesystem::exists(paths.sibs_csv())) {
    auto rows = read_csv(paths.sibs_csv());
    // columns: layer,budget,covered,amplification,skip_rate,violation_rate,quality,flops_reduction
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() < 8) continue;
      report.row({"sibs-b" + r[1], r[0], "", r[6], r[4], ""});
    }
  }
  report.close(paths.report_csv());

  CsvWriter fr(paths.flops_report_csv(), "config,flops_reduction,measured_sparsity");
  if (std::filesystem::exists(paths.flops_csv())) {
    auto rows = read_csv(paths.flops_csv());
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() < 7 || r[1] != "total") continue;
      fr.row({r[0], r[5], r[6]});
    }
  }
  fr.close(paths.flops_report_csv());
}

// train-base -> profile -> method stages, all under one output directory.
inline void run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  PipelinePaths paths{cfg.out_dir};
  std::filesystem::create_directories(cfg.out_dir);
  std::filesystem::remove(paths.flops_csv());  // flops.csv accumulates across stages
  cfg.save(paths.config_echo());

  stage_train_base(cfg, paths);
  stage_profile(cfg, paths);
  if (cfg.method == "sibs" || cfg.method == "all") stage_sibs(cfg, paths);
  if (cfg.method == "mgs" || cfg.method == "tune" || cfg.method == "all") {
    stage_mgs_train(cfg, paths);
    stage_mgs_eval(cfg, paths);
  }
  if (cfg.method == "tune" || cfg.method == "all") stage_tune(cfg, paths);
  stage_report(paths);
}

}  // namespace mgsparse
