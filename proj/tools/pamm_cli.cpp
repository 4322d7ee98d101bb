// pamm: data generation, training suites and analyses over the synthetic benchmark.

#include "pamm/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace pamm;

namespace {

struct Args {
  std::string dataset;
  std::string variant = "pamm-gate";
  std::string seeds = "1";
  std::optional<std::uint64_t> steps;
  std::string buckets;
  std::string out;
  std::string checkpoint;
  std::string baseline_checkpoint;
  std::string config;
  std::string mode;
  bool reuse = false;
};

std::vector<std::uint64_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::uint64_t> out;
  for (const auto& part : split(text, ',')) {
    const auto t = std::string(trim(part));
    if (t.empty()) continue;
    try {
      out.push_back(parse_int<std::uint64_t>(t));
    } catch (const InvalidInput&) {
      throw InvalidInput(std::string("--") + what + ": '" + t + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw InvalidInput(std::string("--") + what + " is empty");
  return out;
}

Variant variant_arg(const std::string& name) {
  const auto v = parse_variant(name);
  if (!v) {
    std::string known;
    for (auto k : kAllVariants) known += std::string(known.empty() ? "" : ", ") + std::string(variant_name(k));
    throw InvalidInput("unknown variant '" + name + "' (expected one of: " + known + ")");
  }
  return *v;
}

ConfigMap config_file(const Args& a) { return a.config.empty() ? ConfigMap{} : ConfigMap::load(a.config); }

RunConfig run_config(const Args& a, Variant v) {
  auto cfg = RunConfig::from_config(config_file(a));
  cfg.model = ModelConfig::make(v, cfg.model.motif, cfg.model.host, cfg.model.fusion);
  if (a.steps) cfg.train.steps = *a.steps;
  cfg.validate();
  return cfg;
}

Dataset dataset_arg(const Args& a) {
  if (a.dataset.empty()) throw InvalidInput("--dataset is required");
  return load_dataset_dir(a.dataset);
}

std::filesystem::path out_arg(const Args& a) {
  if (a.out.empty()) throw InvalidInput("--out is required");
  return a.out;
}

TrainState checkpoint_arg(const std::string& path, const char* flag) {
  if (path.empty()) throw InvalidInput(std::string("--") + flag + " is required");
  return load_checkpoint(path);
}

void print_rows(const std::vector<SummaryRow>& rows) {
  for (const auto& r : rows) {
    std::cout << r.label << ": val E/atom " << mean_pm_std(r.stat(&FinalMetrics::val_energy)) << ", val F "
              << mean_pm_std(r.stat(&FinalMetrics::val_force)) << " (" << r.runs.size() << " seeds";
    if (!r.failed_seeds.empty()) std::cout << ", " << r.failed_seeds.size() << " failed";
    std::cout << ")\n";
  }
}

int suite_exit(const std::vector<ExperimentRecord>& records) {
  for (const auto& r : records) {
    if (r.status == RunStatus::Failed) {
      std::cerr << "run " << variant_name(r.variant) << " seed " << r.seed << " failed: " << r.message << "\n";
      return 4;
    }
  }
  return 0;
}

int cmd_gen(const Args& a) {
  const auto spec = DataSpec::from_config(config_file(a));
  const auto data = generate_dataset(spec);
  write_dataset_dir(out_arg(a), data);
  std::cout << "wrote " << data.structures.size() << " structures in " << spec.families.size() << " families to "
            << a.out << "\n";
  return 0;
}

int run_and_report(const std::string& experiment, const std::vector<SuiteEntry>& entries, const Args& a,
                   const std::string& table, std::string_view label) {
  const auto data = dataset_arg(a);
  const auto seeds = parse_list(a.seeds, "seed");
  const auto out = out_arg(a);
  std::vector<ExperimentRecord> records;
  const auto rows = run_suite(experiment, entries, seeds, data, out, {a.reuse}, &records);
  std::vector<RunConfig> cfgs;
  for (const auto& e : entries) {
    for (auto s : seeds) {
      cfgs.push_back(e.config);
      cfgs.back().train.seed = s;
    }
  }
  write_file_atomic(out / table, summary_csv(provenance_line(suite_hash(cfgs), dataset_hash(data)), rows, label));
  print_rows(rows);
  return suite_exit(records);
}

int cmd_train(const Args& a) {
  auto cfg = run_config(a, variant_arg(a.variant));
  if (!a.buckets.empty()) {
    const auto m = parse_list(a.buckets, "buckets");
    if (m.size() != 1) throw InvalidInput("train takes a single --buckets value");
    cfg = with_buckets(cfg, static_cast<std::uint32_t>(m[0]));
  }
  return run_and_report("train", {{a.variant, a.variant, cfg}}, a, "summary-" + a.variant + ".csv", "variant");
}

int cmd_controls(const Args& a) {
  std::vector<SuiteEntry> entries;
  for (auto v : kAllVariants) {
    const std::string name(variant_name(v));
    entries.push_back({name, name, run_config(a, v)});
  }
  return run_and_report("controls", entries, a, "controls.csv", "variant");
}

int cmd_sweep(const Args& a) {
  const auto v = variant_arg(a.variant);
  if (!variant_flags(v).lookup()) throw InvalidInput("bucket sweep needs a lookup variant");
  const auto list = parse_list(a.buckets.empty() ? "64,128,256,512" : a.buckets, "buckets");
  std::vector<SuiteEntry> entries;
  for (auto m : list) {
    const auto cfg = with_buckets(run_config(a, v), static_cast<std::uint32_t>(m));
    entries.push_back({std::to_string(m), std::string(variant_name(v)) + "-M" + std::to_string(m), cfg});
  }
  return run_and_report("sweep-buckets", entries, a, "sweep.csv", "buckets");
}

int cmd_eval_families(const Args& a) {
  const auto data = dataset_arg(a);
  const auto model = checkpoint_arg(a.checkpoint, "checkpoint");
  std::string csv;
  if (a.baseline_checkpoint.empty()) {
    csv = family_table({&model}, {"model"}, data);
  } else {
    const auto base = checkpoint_arg(a.baseline_checkpoint, "baseline-checkpoint");
    csv = family_table({&base, &model}, {"baseline", "pamm"}, data);
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_file_atomic(a.out, csv);
  }
  return 0;
}

int cmd_analyze(const Args& a) {
  const auto data = dataset_arg(a);
  const auto st = checkpoint_arg(a.checkpoint, "checkpoint");
  std::vector<std::size_t> all(data.structures.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::string csv;
  if (a.mode == "motif-freq") {
    std::vector<const Structure*> ss;
    for (const auto& s : data.structures) ss.push_back(&s.structure);
    csv = motif_frequency_csv(provenance_line(st.config.hash(), dataset_hash(data)),
                              motif_frequency(ss, st.config.model.motif));
  } else if (a.mode == "gate-usage") {
    const auto prepared = PreparedDataset::build(data, st.config.model);
    csv = gate_usage_csv(provenance_line(st.config.hash(), dataset_hash(data)), gate_usage(st.model, prepared, all));
  } else if (a.mode == "motif-delta") {
    const auto base = checkpoint_arg(a.baseline_checkpoint, "baseline-checkpoint");
    if (!st.config.model.flags().lookup()) throw InvalidInput("motif-delta needs a lookup variant checkpoint");
    csv = motif_delta_csv(provenance_line(st.config.hash() + "+" + base.config.hash(), dataset_hash(data)),
                          motif_delta(st.model, base.model, data, all));
  } else {
    throw InvalidInput("unknown --mode '" + a.mode + "' (expected motif-freq, gate-usage or motif-delta)");
  }
  if (a.out.empty()) {
    std::cout << csv;
  } else {
    write_file_atomic(a.out, csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motif-memory potentials on synthetic periodic data"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", a.config, "key=value config file");
    c->add_option("--out", a.out, "output directory or file");
  };
  auto training = [&](CLI::App* c) {
    c->add_option("--dataset", a.dataset, "dataset directory");
    c->add_option("--seed", a.seeds, "seed or comma-separated seeds");
    c->add_option("--steps", a.steps, "optimizer steps");
    c->add_flag("--reuse", a.reuse, "keep finished runs whose record matches");
  };

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  common(gen);
  auto* train = app.add_subcommand("train", "train one variant over one or more seeds");
  common(train);
  training(train);
  train->add_option("--variant", a.variant, "variant name");
  train->add_option("--buckets", a.buckets, "buckets per table (power of two)");
  auto* controls = app.add_subcommand("controls", "all eight variants at a matched budget");
  common(controls);
  training(controls);
  auto* sweep = app.add_subcommand("sweep-buckets", "one run per bucket count");
  common(sweep);
  training(sweep);
  sweep->add_option("--variant", a.variant, "variant name");
  sweep->add_option("--buckets", a.buckets, "comma-separated powers of two");
  auto* families = app.add_subcommand("eval-families", "per-family errors of one or two checkpoints");
  common(families);
  families->add_option("--dataset", a.dataset, "dataset directory");
  families->add_option("--checkpoint", a.checkpoint, "checkpoint");
  families->add_option("--baseline-checkpoint", a.baseline_checkpoint, "baseline checkpoint (paired mode)");
  auto* analyze = app.add_subcommand("analyze", "motif-freq, gate-usage or motif-delta tables");
  common(analyze);
  analyze->add_option("--dataset", a.dataset, "dataset directory");
  analyze->add_option("--checkpoint", a.checkpoint, "checkpoint");
  analyze->add_option("--baseline-checkpoint", a.baseline_checkpoint, "baseline checkpoint (motif-delta)");
  analyze->add_option("--mode", a.mode, "motif-freq | gate-usage | motif-delta")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(a);
    if (train->parsed()) return cmd_train(a);
    if (controls->parsed()) return cmd_controls(a);
    if (sweep->parsed()) return cmd_sweep(a);
    if (families->parsed()) return cmd_eval_families(a);
    if (analyze->parsed()) return cmd_analyze(a);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    const int code = exit_code_for(e);
    return code == 1 ? 3 : code;
  }
  return 2;
}
