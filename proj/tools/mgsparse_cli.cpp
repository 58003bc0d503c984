// mgsparse command-line toolkit: train the synthetic base model, profile its
// activation sparsity, and build/evaluate SIBS indicator tables and MGS
// micro-gates. See README.md for the file formats and CSV schemas.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mgsparse/pipeline.hpp"

namespace {

using namespace mgsparse;

int exit_code_for(errc code) {
  switch (code) {
    case errc::bad_argument:
    case errc::bad_config:
      return 2;
    case errc::io_failure:
      return 3;
    case errc::bad_magic:
    case errc::bad_version:
    case errc::truncated_file:
      return 4;
    case errc::dim_mismatch:
    case errc::dim_overflow:
      return 5;
    case errc::nan_loss:
      return 6;
    case errc::accounting_mismatch:
      return 7;
  }
  return 1;
}

std::vector<std::size_t> parse_layer_arg(const std::string& arg, std::size_t layer_count) {
  if (arg == "all") {
    std::vector<std::size_t> out(layer_count);
    for (std::size_t l = 0; l < layer_count; ++l) out[l] = l;
    return out;
  }
  return parse_size_list(arg, "--layers");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"input-adaptive sparsification toolkit for ReLU feedforward stacks"};
  app.require_subcommand(1);
  app.fallthrough();  // shared flags (--seed, --config, ...) work after a subcommand name

  // Shared flags, applied on top of an optional config file.
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  bool have_seed = false, have_threads = false;
  app.add_option("--config", config_path, "key=value config file")->expected(1);
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--seed", seed, "master seed")->each([&](const std::string&) { have_seed = true; });
  app.add_option("--threads", threads, "worker threads for evaluation loops (default 1)")
      ->each([&](const std::string&) { have_threads = true; });

  auto make_config = [&]() {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (have_seed) cfg.seed = seed;
    if (have_threads) cfg.threads = threads;
    return cfg;
  };

  // ---- run: full pipeline from a config file ----
  auto* run = app.add_subcommand("run", "run the configured end-to-end pipeline");

  // ---- train-base ----
  auto* train = app.add_subcommand("train-base", "train the frozen base model on synthetic data");
  std::size_t t_d = 64, t_f = 256, t_layers = 6, t_n = 2000, t_epochs = 10;
  double t_lr = 0.05, t_shift = 1.65;
  std::string t_out = "base.mgsb", t_data_out, t_eval_out;
  train->add_option("--d", t_d, "model width");
  train->add_option("--f", t_f, "hidden width");
  train->add_option("--layers", t_layers, "layer count");
  train->add_option("--n-samples", t_n, "training samples");
  train->add_option("--epochs", t_epochs, "training epochs");
  train->add_option("--lr", t_lr, "learning rate");
  train->add_option("--bias-shift", t_shift, "sparsity bias shift");
  train->add_option("--out", t_out, "checkpoint output path");
  train->add_option("--data-out", t_data_out, "also save the training dataset (MGSD)");
  train->add_option("--eval-data-out", t_eval_out, "also save a held-out dataset (MGSD)");

  // ---- profile ----
  auto* profile = app.add_subcommand("profile", "collect activation traces and sparsity stats");
  std::string p_ckpt, p_data, p_layers = "all", p_mode = "bitmap", p_out = "traces";
  std::string p_mask, p_csv = "profile.csv";
  double p_level = 0.5;
  profile->add_option("--checkpoint", p_ckpt, "base checkpoint")->required();
  profile->add_option("--data", p_data, "dataset (MGSD)")->required();
  profile->add_option("--layers", p_layers, "comma list or 'all'");
  profile->add_option("--mode", p_mode, "trace mode: bitmap|full");
  profile->add_option("--out", p_out, "trace output directory");
  profile->add_option("--mask", p_mask, "masking study: random|topk|both");
  profile->add_option("--level", p_level, "masking level (target sparsity)");
  profile->add_option("--csv", p_csv, "stats / masking-study CSV path");

  // ---- sibs-build ----
  auto* sibs_build = app.add_subcommand("sibs-build", "mine implications and pick indicators");
  std::string sb_trace, sb_out = "table.mgsi";
  std::size_t sb_budget = 16;
  sibs_build->add_option("--trace", sb_trace, "activation trace (MGST)")->required();
  sibs_build->add_option("--budget", sb_budget, "max indicator count")->required();
  sibs_build->add_option("--out", sb_out, "indicator table output path");

  // ---- sibs-eval ----
  auto* sibs_eval = app.add_subcommand("sibs-eval", "evaluate indicator tables");
  std::string se_ckpt, se_data, se_tables, se_csv = "sibs_eval.csv";
  sibs_eval->add_option("--checkpoint", se_ckpt, "base checkpoint")->required();
  sibs_eval->add_option("--data", se_data, "dataset (MGSD)")->required();
  sibs_eval->add_option("--tables", se_tables, "directory of layer_<i>.mgsi tables")->required();
  sibs_eval->add_option("--csv", se_csv, "output CSV path");

  // ---- mgs-train ----
  auto* mgs_train = app.add_subcommand("mgs-train", "train micro-gates on the frozen base");
  std::string mt_ckpt, mt_data, mt_layer = "all", mt_out = "gates";
  std::size_t mt_epochs = 5;
  double mt_lr = 0.1, mt_ratio = 0.125;
  mgs_train->add_option("--checkpoint", mt_ckpt, "base checkpoint")->required();
  mgs_train->add_option("--data", mt_data, "dataset (MGSD)")->required();
  mgs_train->add_option("--layer", mt_layer, "layer index or 'all'");
  mgs_train->add_option("--epochs", mt_epochs, "gate training epochs");
  mgs_train->add_option("--lr", mt_lr, "gate learning rate");
  mgs_train->add_option("--gate-ratio", mt_ratio, "gate width as a fraction of f");
  mgs_train->add_option("--out", mt_out, "gate output directory");

  // ---- mgs-eval ----
  auto* mgs_eval = app.add_subcommand("mgs-eval", "evaluate gated inference");
  std::string me_ckpt, me_data, me_gates, me_thresholds = "0.5", me_csv = "mgs_eval.csv";
  std::string me_flops_csv;
  mgs_eval->add_option("--checkpoint", me_ckpt, "base checkpoint")->required();
  mgs_eval->add_option("--data", me_data, "dataset (MGSD)")->required();
  mgs_eval->add_option("--gates", me_gates, "directory of layer_<i>.mgsg gates")->required();
  mgs_eval->add_option("--thresholds", me_thresholds, "value, comma list, or @file");
  mgs_eval->add_option("--csv", me_csv, "output CSV path");
  mgs_eval->add_option("--flops-csv", me_flops_csv, "also emit a FLOPs accounting CSV");

  // ---- tune ----
  auto* tune = app.add_subcommand("tune", "relax per-layer thresholds under a quality budget");
  std::string tu_ckpt, tu_data, tu_gates, tu_csv = "tune.csv";
  double tu_budget = 0.05;
  tune->add_option("--checkpoint", tu_ckpt, "base checkpoint")->required();
  tune->add_option("--data", tu_data, "dataset (MGSD)")->required();
  tune->add_option("--gates", tu_gates, "directory of layer_<i>.mgsg gates")->required();
  tune->add_option("--budget", tu_budget, "max quality degradation vs vanilla (MSE)");
  tune->add_option("--csv", tu_csv, "output CSV path");

  // ---- report ----
  auto* report = app.add_subcommand("report", "merge an output directory's CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      RunConfig cfg = make_config();
      run_pipeline(cfg);
      std::cout << "pipeline complete: " << cfg.out_dir << "\n";
      return 0;
    }

    if (train->parsed()) {
      RunConfig cfg = make_config();
      cfg.d = t_d;
      cfg.f = t_f;
      cfg.layers = t_layers;
      cfg.n_train = t_n;
      cfg.epochs = t_epochs;
      cfg.lr = t_lr;
      cfg.bias_shift = t_shift;
      cfg.validate();
      SeedPlan seeds{cfg.seed};
      DatasetSpec spec = dataset_spec_of(cfg);
      SynthDataset data = generate_dataset(spec, cfg.n_train, seeds.train_draw());
      BaseModel init = init_base(cfg.d, cfg.f, cfg.layers, seeds.init(),
                                 static_cast<float>(cfg.bias_shift));
      TrainConfig tc;
      tc.learning_rate = static_cast<float>(cfg.lr);
      tc.epochs = cfg.epochs;
      tc.batch_size = cfg.batch_size;
      tc.seed = seeds.sgd();
      tc.sparsity_bias_shift = static_cast<float>(cfg.bias_shift);
      TrainResult tr = train_base(std::move(init), data, tc);
      save_checkpoint(tr.model, t_out);
      if (!t_data_out.empty()) save_dataset(data, t_data_out);
      if (!t_eval_out.empty())
        save_dataset(generate_dataset(spec, cfg.n_eval, seeds.eval_draw()), t_eval_out);
      std::cout << "trained " << cfg.layers << " layers (d=" << cfg.d << ", f=" << cfg.f
                << "); first-epoch loss " << fmt_f64(tr.epoch_loss.front()) << ", last "
                << fmt_f64(tr.epoch_loss.back()) << "; checkpoint -> " << t_out << "\n";
      return 0;
    }

    if (profile->parsed()) {
      RunConfig cfg = make_config();
      BaseModel base = load_checkpoint(p_ckpt);
      SynthDataset data = load_dataset(p_data);
      std::vector<std::size_t> layers = parse_layer_arg(p_layers, base.layer_count());
      require(p_mode == "bitmap" || p_mode == "full", errc::bad_argument,
              "--mode must be bitmap or full");
      TraceMode mode = p_mode == "full" ? TraceMode::full : TraceMode::bitmap;

      if (p_mask.empty()) {
        std::vector<ActivationTrace> traces = collect_traces(base, data, layers, mode, cfg.threads);
        std::filesystem::create_directories(p_out);
        CsvWriter csv(p_csv, "layer,samples,mean_sparsity,dead_neurons");
        for (const ActivationTrace& t : traces) {
          save_trace(t, p_out + "/layer_" + std::to_string(t.layer) + ".mgst");
          SparsityProfile prof = sparsity_stats(t);
          csv.row({std::to_string(t.layer), std::to_string(t.samples),
                   fmt_f64(prof.mean_sparsity), std::to_string(prof.dead_neurons.size())});
        }
        csv.close(p_csv);
        std::cout << "traces -> " << p_out << ", stats -> " << p_csv << "\n";
      } else {
        require(p_mask == "random" || p_mask == "topk" || p_mask == "both", errc::bad_argument,
                "--mask must be random, topk or both");
        std::vector<MaskStudyRow> rows =
            mask_study(base, data, {p_level}, SeedPlan{cfg.seed}.mask());
        CsvWriter csv(p_csv, "layer,method,level,sparsity,quality");
        for (const MaskStudyRow& r : rows) {
          if (p_mask != "both" && r.mask_method != p_mask) continue;
          csv.row({std::to_string(r.layer), r.mask_method, fmt_f64(r.level), fmt_f64(r.sparsity),
                   fmt_f64(r.quality)});
        }
        csv.close(p_csv);
        std::cout << "masking study -> " << p_csv << "\n";
      }
      return 0;
    }

    if (sibs_build->parsed()) {
      ActivationTrace trace = load_trace(sb_trace);
      ImplicationSets imp = mine_implications(trace);
      IndicatorTable table = greedy_cover(imp, sb_budget);
      save_indicator_table(table, sb_out);
      std::cout << "layer " << table.layer << ": " << table.indicators.size() << " indicators, "
                << table.covered_count << " covered, amplification "
                << fmt_f64(table.amplification) << " -> " << sb_out << "\n";
      return 0;
    }

    if (sibs_eval->parsed()) {
      BaseModel base = load_checkpoint(se_ckpt);
      SynthDataset data = load_dataset(se_data);
      std::vector<IndicatorTable> tables;
      std::size_t max_budget = 0;
      for (std::size_t l = 0; l < base.layer_count(); ++l) {
        std::string path = se_tables + "/layer_" + std::to_string(l) + ".mgsi";
        tables.push_back(load_indicator_table(path));
        require(tables.back().layer == l, errc::bad_argument,
                path + " is for layer " + std::to_string(tables.back().layer));
        max_budget = std::max(max_budget, tables.back().indicators.size());
      }
      std::vector<SibsEvalRow> rows = evaluate_sibs(base, tables, data, max_budget);
      CsvWriter csv(se_csv,
                    "layer,budget,covered,amplification,skip_rate,violation_rate,quality,"
                    "flops_reduction");
      for (const SibsEvalRow& r : rows)
        csv.row({r.label, std::to_string(r.budget), std::to_string(r.covered),
                 fmt_f64(r.amplification), fmt_f64(r.skip_rate), fmt_f64(r.violation_rate),
                 fmt_f64(r.quality), fmt_f64(r.flops_reduction)});
      csv.close(se_csv);
      std::cout << "sibs evaluation -> " << se_csv << "\n";
      return 0;
    }

    if (mgs_train->parsed()) {
      RunConfig cfg = make_config();
      BaseModel base = load_checkpoint(mt_ckpt);
      SynthDataset data = load_dataset(mt_data);
      std::vector<std::size_t> layers = parse_layer_arg(mt_layer, base.layer_count());
      std::filesystem::create_directories(mt_out);
      SeedPlan seeds{cfg.seed};
      for (std::size_t l : layers) {
        GateTrainConfig gc;
        gc.epochs = mt_epochs;
        gc.learning_rate = static_cast<float>(mt_lr);
        gc.gate_ratio = mt_ratio;
        gc.seed = seeds.gate(l);
        GateTrainResult r = train_gate(base, l, data, gc);
        std::string path = mt_out + "/layer_" + std::to_string(l) + ".mgsg";
        save_gate(r.gate, path);
        std::cout << "layer " << l << ": BCE " << fmt_f64(r.epoch_loss.back())
                  << ", train acc " << fmt_f64(r.train_accuracy) << " -> " << path << "\n";
      }
      return 0;
    }

    if (mgs_eval->parsed()) {
      BaseModel base = load_checkpoint(me_ckpt);
      SynthDataset data = load_dataset(me_data);
      std::vector<MicroGate> gates;
      for (std::size_t l = 0; l < base.layer_count(); ++l) {
        std::string path = me_gates + "/layer_" + std::to_string(l) + ".mgsg";
        gates.push_back(load_gate(path));
        require(gates.back().layer == l, errc::bad_argument,
                path + " is for layer " + std::to_string(gates.back().layer));
      }
      std::vector<float> thresholds = parse_thresholds(me_thresholds, base.layer_count());
      for (std::size_t l = 0; l < gates.size(); ++l) gates[l].threshold = thresholds[l];
      write_eval_rows(me_csv, evaluate_gated(base, gates, data));
      if (!me_flops_csv.empty()) {
        FlopsReport vanilla = measure_vanilla(base, data);
        FlopsReport gated = measure_mgs(base, gates, data, "mgs");
        std::vector<FlopsRow> rows;
        for (const FlopsRow& r : vanilla.per_layer) rows.push_back(r);
        rows.push_back(vanilla.total);
        for (const FlopsRow& r : gated.per_layer) rows.push_back(r);
        rows.push_back(gated.total);
        CsvWriter csv(me_flops_csv,
                      "config,layer,dense_macs,method_macs,gate_macs,saved_fraction,"
                      "measured_sparsity");
        for (const FlopsRow& r : rows)
          csv.row({r.config, r.layer < 0 ? std::string("total") : std::to_string(r.layer),
                   std::to_string(r.dense_macs), std::to_string(r.method_macs()),
                   std::to_string(r.gate_macs), fmt_f64(r.saved_fraction),
                   fmt_f64(r.measured_sparsity)});
        csv.close(me_flops_csv);
      }
      std::cout << "mgs evaluation -> " << me_csv << "\n";
      return 0;
    }

    if (tune->parsed()) {
      BaseModel base = load_checkpoint(tu_ckpt);
      SynthDataset data = load_dataset(tu_data);
      std::vector<MicroGate> gates;
      for (std::size_t l = 0; l < base.layer_count(); ++l) {
        std::string path = tu_gates + "/layer_" + std::to_string(l) + ".mgsg";
        gates.push_back(load_gate(path));
        require(gates.back().layer == l, errc::bad_argument,
                path + " is for layer " + std::to_string(gates.back().layer));
      }
      std::vector<float> thresholds = tune_thresholds(base, gates, data, tu_budget);
      CsvWriter csv(tu_csv, "layer,threshold");
      for (std::size_t l = 0; l < thresholds.size(); ++l)
        csv.row({std::to_string(l), fmt_f32(thresholds[l])});
      csv.close(tu_csv);
      for (std::size_t l = 0; l < gates.size(); ++l)
        save_gate(gates[l], tu_gates + "/layer_" + std::to_string(l) + ".mgsg");
      std::cout << "tuned thresholds -> " << tu_csv << "\n";
      return 0;
    }

    if (report->parsed()) {
      RunConfig cfg = make_config();
      PipelinePaths paths{cfg.out_dir};
      stage_report(paths);
      std::cout << "report -> " << paths.report_csv() << " and " << paths.flops_report_csv()
                << "\n";
      return 0;
    }
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
