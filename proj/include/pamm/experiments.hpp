#pragma once

// Orchestration shared by the command-line tool and the acceptance suite:
// run records, seed summaries and the table-shaped CSV outputs.

#include "pamm/analysis.hpp"

namespace pamm {

inline std::string dataset_hash(const Dataset& d) {
  std::uint64_t h = fnv1a64("pamm-dataset");
  for (std::size_t k = 0; k < d.structures.size(); ++k) {
    h = mix64(h, fnv1a64(dataset_record_line(d.structures[k])), static_cast<std::uint64_t>(d.splits[k]));
  }
  return hex64(h);
}

inline std::string provenance_line(const std::string& config_hash, const std::string& data_hash) {
  return "# config_hash=" + config_hash + " dataset_hash=" + data_hash + "\n";
}

// Run records.

enum class RunStatus { Done, Failed };

struct ExperimentRecord {
  std::string experiment;
  Variant variant = Variant::Baseline;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string data_hash;
  std::filesystem::path metrics_path;
  std::vector<std::filesystem::path> checkpoints;
  RunStatus status = RunStatus::Failed;
  std::string message;  // failure reason

  std::string to_text() const {
    ConfigMap m;
    m.set("experiment", experiment);
    m.set("variant", std::string(variant_name(variant)));
    m.set("seed", seed);
    m.set("config_hash", config_hash);
    m.set("dataset_hash", data_hash);
    m.set("metrics", metrics_path.string());
    std::string ck;
    for (const auto& p : checkpoints) ck += (ck.empty() ? "" : ",") + p.string();
    m.set("checkpoints", ck);
    m.set("status", status == RunStatus::Done ? "done" : "failed");
    if (!message.empty()) m.set("message", message);
    return m.to_text();
  }

  static ExperimentRecord parse(const std::string& text) {
    const auto m = ConfigMap::parse(text);
    ExperimentRecord r;
    r.experiment = m.get("experiment");
    const auto v = parse_variant(m.get("variant"));
    if (!v) throw DataError("record has unknown variant '" + m.get("variant") + "'");
    r.variant = *v;
    r.seed = m.get_int<std::uint64_t>("seed");
    r.config_hash = m.get("config_hash");
    r.data_hash = m.get("dataset_hash");
    r.metrics_path = m.get("metrics");
    for (const auto& p : split(m.get("checkpoints"), ',')) {
      if (!p.empty()) r.checkpoints.emplace_back(p);
    }
    const auto& status = m.get("status");
    if (status != "done" && status != "failed") throw DataError("record has bad status '" + status + "'");
    r.status = status == "done" ? RunStatus::Done : RunStatus::Failed;
    if (m.has("message")) r.message = m.get("message");
    return r;
  }
};

struct RunResult {
  ExperimentRecord record;
  std::optional<TrainState> state;  // present when the run finished
  int exit_code = 0;                // 2 usage, 3 data, 4 numerical
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const InvalidInput*>(&e)) return 2;
  return 1;
}

struct RunOptions {
  bool reuse = false;  // keep a finished run whose record matches config and data
};

// Trains one configuration into `dir`. Training errors are captured in the
// record (status=failed, log.txt) instead of propagating.
inline RunResult run_experiment(const std::string& experiment, const RunConfig& cfg, const Dataset& data,
                                const std::filesystem::path& dir, const RunOptions& opts = {}) {
  RunResult out;
  auto& rec = out.record;
  rec.experiment = experiment;
  rec.variant = cfg.model.variant;
  rec.seed = cfg.train.seed;
  rec.config_hash = cfg.hash();
  rec.data_hash = dataset_hash(data);
  rec.metrics_path = dir / "metrics.csv";
  rec.checkpoints = {dir / "final.ckpt"};
  const auto record_path = dir / "record.txt";

  if (opts.reuse && std::filesystem::exists(record_path) && std::filesystem::exists(dir / "final.ckpt")) {
    try {
      const auto old = ExperimentRecord::parse(read_file(record_path));
      if (old.status == RunStatus::Done && old.config_hash == rec.config_hash && old.data_hash == rec.data_hash) {
        out.state = load_checkpoint(dir / "final.ckpt", cfg.model);
        if (out.state->step == cfg.train.steps) {
          rec.status = RunStatus::Done;
          return out;
        }
        out.state.reset();
      }
    } catch (const std::exception&) {
      out.state.reset();  // unreadable leftovers: rerun
    }
  }

  std::filesystem::create_directories(dir);
  std::filesystem::remove(dir / "log.txt");
  try {
    out.state = train(cfg, data, {dir, {}});
    rec.status = RunStatus::Done;
  } catch (const std::exception& e) {
    rec.status = RunStatus::Failed;
    out.exit_code = exit_code_for(e);
    rec.message = e.what();
    std::replace(rec.message.begin(), rec.message.end(), '\n', ' ');
    write_file_atomic(dir / "log.txt", std::string(e.what()) + "\n");
  }
  write_file_atomic(record_path, rec.to_text());
  return out;
}

// Seed summaries.

struct SeedStats {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // unbiased (n - 1); 0 for a single value
};

inline SeedStats seed_stats(const std::vector<double>& xs) {
  SeedStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline std::string mean_pm_std(const SeedStats& s) { return format_real(s.mean) + " ± " + format_real(s.std); }

// The four final overall metrics of a finished run.
struct FinalMetrics {
  double val_energy = 0.0;
  double val_force = 0.0;
  double test_energy = 0.0;
  double test_force = 0.0;

  static FinalMetrics of(const TrainState& st) {
    return {final_metrics(st, "val").energy_mae, final_metrics(st, "val").force_mae,
            final_metrics(st, "test").energy_mae, final_metrics(st, "test").force_mae};
  }
};

/// One table row: a variant (or bucket count) over one or more seeds.
struct SummaryRow {
  std::string label;
  std::uint64_t params = 0;
  std::uint64_t memory_params = 0;  // lookup tables or the matched MLP
  std::vector<FinalMetrics> runs;   // finished seeds only
  std::vector<std::uint64_t> failed_seeds;

  SeedStats stat(double FinalMetrics::*field) const {
    std::vector<double> xs;
    for (const auto& r : runs) xs.push_back(r.*field);
    return seed_stats(xs);
  }
};

inline std::uint64_t memory_param_total(const ParameterSet& ps) {
  return ps.count_prefix("memory.") + ps.count_prefix("mlp_control.");
}

inline constexpr std::string_view kSummaryHeader =
    "label,seeds,params,memory_params,val_energy_mae_mean,val_energy_mae_std,val_force_mae_mean,val_force_mae_std,"
    "test_energy_mae_mean,test_energy_mae_std,test_force_mae_mean,test_force_mae_std,status";

inline std::string summary_csv(const std::string& provenance, const std::vector<SummaryRow>& rows,
                               std::string_view label_name) {
  std::string out = provenance;
  std::string header(kSummaryHeader);
  header.replace(0, 5, label_name);
  out += header + "\n";
  for (const auto& r : rows) {
    out += r.label + "," + std::to_string(r.runs.size()) + "," + std::to_string(r.params) + "," +
           std::to_string(r.memory_params);
    for (auto field : {&FinalMetrics::val_energy, &FinalMetrics::val_force, &FinalMetrics::test_energy,
                       &FinalMetrics::test_force}) {
      const auto s = r.stat(field);
      out += s.n ? "," + format_real(s.mean) + "," + format_real(s.std) : std::string(",,");
    }
    if (r.failed_seeds.empty()) {
      out += ",done";
    } else {
      out += ",failed(seeds";
      for (auto s : r.failed_seeds) out += " " + std::to_string(s);
      out += ")";
    }
    out += "\n";
  }
  return out;
}

// Hash over every config in a suite, for the table provenance line.
inline std::string suite_hash(const std::vector<RunConfig>& cfgs) {
  std::uint64_t h = fnv1a64("pamm-suite");
  for (const auto& c : cfgs) h = mix64(h, c.to_config().hash());
  return hex64(h);
}

struct SuiteEntry {
  std::string label;
  std::string dir_name;
  RunConfig config;
};

// Runs every entry over every seed in a fixed order and summarizes.
inline std::vector<SummaryRow> run_suite(const std::string& experiment, const std::vector<SuiteEntry>& entries,
                                         const std::vector<std::uint64_t>& seeds, const Dataset& data,
                                         const std::filesystem::path& out_dir, const RunOptions& opts,
                                         std::vector<ExperimentRecord>* records = nullptr) {
  std::vector<SummaryRow> rows;
  for (const auto& e : entries) {
    SummaryRow row;
    row.label = e.label;
    const auto probe = Model::initialize(e.config.model, 0);
    row.params = probe.params().count();
    row.memory_params = memory_param_total(probe.params());
    for (auto seed : seeds) {
      auto cfg = e.config;
      cfg.train.seed = seed;
      auto res = run_experiment(experiment, cfg, data, out_dir / (e.dir_name + "-s" + std::to_string(seed)), opts);
      if (res.record.status == RunStatus::Done) {
        row.runs.push_back(FinalMetrics::of(*res.state));
      } else {
        row.failed_seeds.push_back(seed);
      }
      if (records) records->push_back(res.record);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline bool is_power_of_two(std::uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline RunConfig with_buckets(RunConfig cfg, std::uint32_t buckets) {
  if (!is_power_of_two(buckets)) throw InvalidInput("bucket count " + std::to_string(buckets) + " is not a power of two");
  cfg.model.motif.pair_buckets = buckets;
  cfg.model.motif.triplet_buckets = buckets;
  return cfg;
}

// Family evaluation tables.

inline std::vector<int> unseen_species(const Dataset& data, const std::vector<std::size_t>& indices,
                                       const std::vector<int>& palette) {
  std::set<int> out;
  for (auto k : indices) {
    for (int z : data.structures[k].structure.species) {
      if (!std::binary_search(palette.begin(), palette.end(), z)) out.insert(z);
    }
  }
  return {out.begin(), out.end()};
}

// Family cell, flagged when the family uses species the model never trained on.
inline std::string family_label(const std::string& family, const std::vector<int>& unseen) {
  if (unseen.empty()) return family;
  std::string s = family + " [unseen species";
  for (int z : unseen) s += " " + std::to_string(z);
  return s + "]";
}

inline std::map<std::string, std::vector<std::size_t>> indices_by_family(const Dataset& data) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (std::size_t k = 0; k < data.structures.size(); ++k) out[data.structures[k].structure.family].push_back(k);
  return out;
}

// One or two checkpoints over every structure of `data`; columns are
// family then (energy, force) per checkpoint.
inline std::string family_table(const std::vector<const TrainState*>& models, const std::vector<std::string>& names,
                                const Dataset& data) {
  if (models.empty()) throw InvalidInput("family evaluation needs a checkpoint");
  std::vector<std::size_t> all(data.structures.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::vector<MetricsRow>> tables;
  std::string hashes;
  for (const auto* m : models) {
    const auto prepared = PreparedDataset::build(data, m->config.model);
    tables.push_back(evaluate(m->model, prepared, all, true));
    hashes += (hashes.empty() ? "" : "+") + m->config.hash();
  }
  std::string out = provenance_line(hashes, dataset_hash(data));
  out += "family";
  for (const auto& n : names) out += "," + n + "_energy_mae_per_atom," + n + "_force_mae";
  out += "\n";
  const auto groups = indices_by_family(data);
  for (std::size_t r = 0; r < tables[0].size(); ++r) {
    const auto& fam = tables[0][r].family;
    std::vector<int> unseen;
    for (const auto* m : models) {
      const auto u = fam == kOverall ? unseen_species(data, all, m->train_species)
                                     : unseen_species(data, groups.at(fam), m->train_species);
      unseen.insert(unseen.end(), u.begin(), u.end());
    }
    std::sort(unseen.begin(), unseen.end());
    unseen.erase(std::unique(unseen.begin(), unseen.end()), unseen.end());
    out += family_label(fam, unseen);
    for (const auto& t : tables) out += "," + format_real(t[r].energy_mae) + "," + format_real(t[r].force_mae);
    out += "\n";
  }
  return out;
}

// Analysis tables.

inline std::string motif_frequency_csv(const std::string& provenance, const std::vector<MotifCount>& rows) {
  std::string out = provenance + "source_z,target_z,distance_bin,count,fraction,coverage\n";
  for (const auto& r : rows) {
    out += std::to_string(r.motif.zj) + "," + std::to_string(r.motif.zi) + "," + std::to_string(r.motif.bin) + "," +
           std::to_string(r.count) + "," + format_real(r.fraction) + "," + format_real(r.coverage) + "\n";
  }
  return out;
}

inline std::string gate_usage_csv(const std::string& provenance, const std::vector<GateUsageRow>& rows) {
  std::string out = provenance + "family,edges,mean_abs_gate_minus_1";
  const auto layers = rows.empty() ? 0 : rows.front().mean_abs_affine_scale.size();
  for (std::size_t l = 0; l < layers; ++l) out += ",layer" + std::to_string(l) + "_mean_abs_affine_scale";
  out += "\n";
  for (const auto& r : rows) {
    out += r.family + "," + std::to_string(r.edges) + "," + format_real(r.mean_abs_gate_shift);
    for (double s : r.mean_abs_affine_scale) out += "," + format_real(s);
    out += "\n";
  }
  return out;
}

inline std::string motif_delta_csv(const std::string& provenance, const std::vector<MotifDeltaRow>& rows) {
  std::string out =
      provenance + "source_z,target_z,distance_bin,count,coverage,force_error_model,force_error_baseline,delta\n";
  for (const auto& r : rows) {
    out += std::to_string(r.motif.zj) + "," + std::to_string(r.motif.zi) + "," + std::to_string(r.motif.bin) + "," +
           std::to_string(r.count) + "," + format_real(r.coverage) + "," + format_real(r.error_model) + "," +
           format_real(r.error_baseline) + "," + format_real(r.delta) + "\n";
  }
  return out;
}

}  // namespace pamm
