#pragma once

#include "pamm/host_model.hpp"
#include "pamm/synthetic_data.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace pamm {

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::uint64_t steps = 2000;
  std::uint32_t batch_size = 4;
  double learning_rate = 3e-3;
  double lookup_lr_scale = 0.1;  // gamma, applied to memory tables and gate
  double energy_weight = 1.0;
  double force_weight = 10.0;
  std::uint64_t eval_interval = 200;
  std::uint64_t seed = 1;
  std::string holdout_family;  // empty: standard 80/10/10 split
  bool keep_checkpoints = false;
  AdamConstants adam;

  void validate() const {
    if (batch_size < 1) throw InvalidInput("train.batch_size must be >= 1");
    if (eval_interval < 1) throw InvalidInput("train.eval_interval must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidInput("train.learning_rate must be positive");
    if (!(lookup_lr_scale > 0.0 && lookup_lr_scale <= 1.0)) throw InvalidInput("train.lookup_lr_scale must be in (0, 1]");
    if (!(energy_weight >= 0.0 && force_weight >= 0.0) || (energy_weight == 0.0 && force_weight == 0.0)) {
      throw InvalidInput("train loss weights must be >= 0 and not both zero");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
      throw InvalidInput("train Adam constants out of range");
    }
  }

  void store(ConfigMap& out) const {
    out.set("train.steps", steps);
    out.set("train.batch_size", batch_size);
    out.set("train.learning_rate", learning_rate);
    out.set("train.lookup_lr_scale", lookup_lr_scale);
    out.set("train.energy_weight", energy_weight);
    out.set("train.force_weight", force_weight);
    out.set("train.eval_interval", eval_interval);
    out.set("train.seed", seed);
    out.set("train.holdout_family", holdout_family);
    out.set("train.keep_checkpoints", keep_checkpoints);
    out.set("train.adam_beta1", adam.beta1);
    out.set("train.adam_beta2", adam.beta2);
    out.set("train.adam_eps", adam.eps);
  }

  static TrainConfig load(const ConfigMap& in) { return load(in, TrainConfig{}); }

  static TrainConfig load(const ConfigMap& in, TrainConfig t) {
    if (in.has("train.steps")) t.steps = in.get_int<std::uint64_t>("train.steps");
    if (in.has("train.batch_size")) t.batch_size = in.get_int<std::uint32_t>("train.batch_size");
    if (in.has("train.learning_rate")) t.learning_rate = in.get_real("train.learning_rate");
    if (in.has("train.lookup_lr_scale")) t.lookup_lr_scale = in.get_real("train.lookup_lr_scale");
    if (in.has("train.energy_weight")) t.energy_weight = in.get_real("train.energy_weight");
    if (in.has("train.force_weight")) t.force_weight = in.get_real("train.force_weight");
    if (in.has("train.eval_interval")) t.eval_interval = in.get_int<std::uint64_t>("train.eval_interval");
    if (in.has("train.seed")) t.seed = in.get_int<std::uint64_t>("train.seed");
    if (in.has("train.holdout_family")) t.holdout_family = in.get("train.holdout_family");
    if (in.has("train.keep_checkpoints")) t.keep_checkpoints = in.get_bool("train.keep_checkpoints");
    if (in.has("train.adam_beta1")) t.adam.beta1 = in.get_real("train.adam_beta1");
    if (in.has("train.adam_beta2")) t.adam.beta2 = in.get_real("train.adam_beta2");
    if (in.has("train.adam_eps")) t.adam.eps = in.get_real("train.adam_eps");
    return t;
  }
};

/// Model plus training configuration; the unit a run and its hash refer to.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }

  ConfigMap to_config() const {
    ConfigMap c;
    model.store(c);
    train.store(c);
    return c;
  }

  static RunConfig from_config(const ConfigMap& c, const RunConfig& base = RunConfig{}) {
    RunConfig r;
    r.model = ModelConfig::load(c, base.model);
    r.train = TrainConfig::load(c, base.train);
    return r;
  }

  std::string hash() const { return hex64(to_config().hash()); }
};

// Optimizer groups.

inline double group_lr(ParamGroup g, const TrainConfig& t) {
  return g == ParamGroup::Lookup ? t.learning_rate * t.lookup_lr_scale : t.learning_rate;
}

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState zeros(const ParameterSet& ps) {
    AdamState s;
    for (const auto& p : ps.items()) {
      s.m.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      s.v.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
  }
};

inline void adam_update(ParameterSet& ps, AdamState& st, const std::vector<Matrix>& grads, const TrainConfig& t) {
  const auto& c = t.adam;
  ++st.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  auto& items = ps.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    const double lr = group_lr(items[k].group, t);
    auto& m = st.m[k];
    auto& v = st.v[k];
    const auto& g = grads[k];
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    items[k].value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

// Metrics.

struct ErrorAccumulator {
  double energy_abs_per_atom = 0.0;
  double force_abs = 0.0;
  std::size_t structures = 0;
  std::size_t force_components = 0;

  void add(double energy, const Matrix& forces, const LabeledStructure& truth) {
    const auto n = truth.structure.size();
    energy_abs_per_atom += std::abs(energy - truth.energy) / static_cast<double>(n);
    for (std::size_t a = 0; a < n; ++a) {
      for (int k = 0; k < 3; ++k) force_abs += std::abs(forces(static_cast<Eigen::Index>(a), k) - truth.forces[a][k]);
    }
    ++structures;
    force_components += 3 * n;
  }

  void merge(const ErrorAccumulator& o) {
    energy_abs_per_atom += o.energy_abs_per_atom;
    force_abs += o.force_abs;
    structures += o.structures;
    force_components += o.force_components;
  }

  double energy_mae() const { return energy_abs_per_atom / static_cast<double>(structures); }
  double force_mae() const { return force_abs / static_cast<double>(force_components); }
};

inline constexpr std::string_view kOverall = "overall";

struct MetricsRow {
  std::uint64_t step = 0;
  std::string split;
  std::string family;
  double energy_mae = 0.0;  // eV/atom
  double force_mae = 0.0;   // eV/A
  std::size_t structures = 0;
};

// Family rows in sorted order, then the overall row.
inline std::vector<MetricsRow> metrics_rows(const std::map<std::string, ErrorAccumulator>& by_family,
                                            bool group_by_family) {
  std::vector<MetricsRow> out;
  ErrorAccumulator all;
  for (const auto& [fam, acc] : by_family) {
    all.merge(acc);
    if (group_by_family) out.push_back({0, "", fam, acc.energy_mae(), acc.force_mae(), acc.structures});
  }
  out.push_back({0, "", std::string(kOverall), all.energy_mae(), all.force_mae(), all.structures});
  return out;
}

/// Prepared copies of every structure of a dataset for one model config.
struct PreparedDataset {
  const Dataset* data = nullptr;
  std::vector<PreparedStructure> items;

  static PreparedDataset build(const Dataset& d, const ModelConfig& cfg) {
    PreparedDataset p;
    p.data = &d;
    p.items.reserve(d.structures.size());
    for (const auto& s : d.structures) p.items.push_back(prepare(s.structure, cfg));
    return p;
  }
};

inline std::vector<MetricsRow> evaluate(const Model& model, const PreparedDataset& prepared,
                                        const std::vector<std::size_t>& indices, bool group_by_family) {
  if (indices.empty()) throw InvalidInput("evaluate: empty dataset");
  std::map<std::string, ErrorAccumulator> by_family;
  for (auto k : indices) {
    const auto& truth = prepared.data->structures[k];
    const auto pred = predict(model, prepared.items[k]);
    by_family[truth.structure.family].add(pred.energy, pred.forces, truth);
  }
  return metrics_rows(by_family, group_by_family);
}

// Splits used by training.

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// With a holdout family, every structure of that family is test data and
// train/val draw only from the other families.
inline SplitIndices split_indices(const Dataset& d, const std::string& holdout_family = {}) {
  SplitIndices s;
  bool seen_holdout = holdout_family.empty();
  for (std::size_t k = 0; k < d.structures.size(); ++k) {
    const bool held = !holdout_family.empty() && d.structures[k].structure.family == holdout_family;
    seen_holdout |= held;
    if (held) {
      s.test.push_back(k);
      continue;
    }
    switch (d.splits[k]) {
      case Split::Train: s.train.push_back(k); break;
      case Split::Val: s.val.push_back(k); break;
      case Split::Test:
        if (holdout_family.empty()) s.test.push_back(k);
        else s.val.push_back(k);
        break;
    }
  }
  if (!seen_holdout) throw InvalidInput("holdout family '" + holdout_family + "' not present in dataset");
  if (s.train.empty()) throw DataError("training split is empty");
  if (s.val.empty() || s.test.empty()) throw DataError("validation or test split is empty");
  return s;
}

// Structures of the batch taken at `step` (0-based): a seeded permutation per
// epoch, consumed in order; the last batch of an epoch may be short.
inline std::vector<std::size_t> batch_for_step(const std::vector<std::size_t>& train, std::uint64_t step,
                                               std::uint32_t batch_size, std::uint64_t seed) {
  const std::uint64_t n = train.size();
  const std::uint64_t per_epoch = (n + batch_size - 1) / batch_size;
  const std::uint64_t epoch = step / per_epoch;
  const std::uint64_t slot = step % per_epoch;
  std::vector<std::size_t> order(train);
  Rng rng(mix64(seed, fnv1a64("shuffle"), epoch));
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
  const auto begin = slot * batch_size;
  const auto end = std::min<std::uint64_t>(n, begin + batch_size);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

// Loss and gradients.

struct BatchResult {
  double loss = 0.0;
  std::vector<Matrix> grads;  // ParameterSet order
};

// loss = w_E * mean_s |E_s - E*_s| / N_s + w_F * sum |F - F*| / (3 * atoms in batch)
// Each structure is recorded on its own tape; gradients are summed in batch order.
inline BatchResult batch_loss(const Model& model, const PreparedDataset& data, const std::vector<std::size_t>& batch,
                              const TrainConfig& cfg) {
  BatchResult out;
  for (const auto& p : model.params().items()) out.grads.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  std::size_t atoms = 0;
  for (auto k : batch) atoms += data.data->structures[k].structure.size();
  const double nb = static_cast<double>(batch.size());
  for (auto k : batch) {
    const auto& truth = data.data->structures[k];
    const auto n = truth.structure.size();
    ad::Tape t;
    const auto fw = forward(t, model, data.items[k]);
    auto loss = ad::scale(ad::abs(ad::add_scalar(fw.energy, -truth.energy)),
                          cfg.energy_weight / (static_cast<double>(n) * nb));
    if (cfg.force_weight > 0.0) {
      const std::array<ad::Var, 1> wrt{fw.positions};
      const auto grad_e = t.gradient(fw.energy, wrt)[0];
      Matrix f_true(static_cast<Eigen::Index>(n), 3);
      for (std::size_t a = 0; a < n; ++a) f_true.row(static_cast<Eigen::Index>(a)) = truth.forces[a].transpose();
      // F - F* = -(dE/dx + F*)
      const auto diff = ad::add(grad_e, t.constant(f_true));
      loss = ad::add(loss, ad::scale(ad::sum(ad::abs(diff)), cfg.force_weight / (3.0 * static_cast<double>(atoms))));
    }
    if (!std::isfinite(loss.scalar())) {
      throw NumericalError("non-finite loss for structure '" + truth.structure.id + "'");
    }
    out.loss += loss.scalar();
    const auto g = t.gradient(loss, fw.params);
    for (std::size_t j = 0; j < g.size(); ++j) out.grads[j] += g[j].value();
  }
  for (std::size_t j = 0; j < out.grads.size(); ++j) {
    if (!out.grads[j].allFinite()) {
      throw NumericalError("non-finite gradient for parameter '" + model.params().items()[j].name + "'");
    }
  }
  return out;
}

// Training state and loop.

struct TrainState {
  RunConfig config;
  Model model;
  AdamState adam;
  std::uint64_t step = 0;
  std::vector<MetricsRow> history;
  std::vector<int> train_species;  // sorted, species seen in the training split
};

// Readout bias starts at the mean training energy per atom so the first
// steps fit shape rather than offset.
inline TrainState init_training(const RunConfig& cfg, const Dataset& data) {
  cfg.validate();
  TrainState st;
  st.config = cfg;
  st.model = Model::initialize(cfg.model, cfg.train.seed);
  const auto split = split_indices(data, cfg.train.holdout_family);
  double mean = 0.0;
  for (auto k : split.train) {
    const auto& s = data.structures[k];
    mean += s.energy / static_cast<double>(s.structure.size());
  }
  st.model.params().at("readout.b2")(0, 0) = mean / static_cast<double>(split.train.size());
  std::set<int> species;
  for (auto k : split.train) species.insert(data.structures[k].structure.species.begin(), data.structures[k].structure.species.end());
  st.train_species.assign(species.begin(), species.end());
  st.adam = AdamState::zeros(st.model.params());
  return st;
}

inline constexpr std::string_view kMetricsHeader = "step,split,family,energy_mae_per_atom,force_mae,variant,seed";

inline std::string metrics_csv(const TrainState& st) {
  std::string out = "# config_hash=" + st.config.hash() + "\n";
  out += kMetricsHeader;
  out += '\n';
  const auto variant = std::string(variant_name(st.config.model.variant));
  const auto seed = std::to_string(st.config.train.seed);
  for (const auto& r : st.history) {
    out += std::to_string(r.step) + "," + r.split + "," + r.family + "," + format_real(r.energy_mae) + "," +
           format_real(r.force_mae) + "," + variant + "," + seed + "\n";
  }
  return out;
}

inline void record_eval(TrainState& st, const PreparedDataset& data, const SplitIndices& split) {
  for (const auto& [name, idx] : {std::pair{"val", &split.val}, std::pair{"test", &split.test}}) {
    for (auto row : evaluate(st.model, data, *idx, /*group_by_family=*/true)) {
      row.step = st.step;
      row.split = name;
      st.history.push_back(std::move(row));
    }
  }
}

// Checkpoint container.

inline constexpr std::string_view kCheckpointMagic = "pamm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint arrays are written in native order");

inline std::string getline_or_throw(std::istream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("checkpoint truncated while reading " + what);
  return line;
}

inline std::size_t parse_count(const std::string& line, std::string_view tag) {
  const auto parts = split(line, ' ');
  if (parts.size() != 2 || parts[0] != tag) throw DataError("checkpoint: expected '" + std::string(tag) + " <n>'");
  return parse_int<std::size_t>(parts[1]);
}

inline MetricsRow parse_metrics_row(const std::string& line) {
  const auto f = split(line, ',');
  if (f.size() != 6) throw DataError("checkpoint: bad metrics line '" + line + "'");
  return MetricsRow{parse_int<std::uint64_t>(f[0]), f[1], f[2], parse_real(f[3]), parse_real(f[4]),
                    parse_int<std::size_t>(f[5])};
}

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& st) {
  std::string out = std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n";
  const auto cfg_text = st.config.to_config().to_text();
  out += "config " + std::to_string(std::count(cfg_text.begin(), cfg_text.end(), '\n')) + "\n" + cfg_text;
  out += "step " + std::to_string(st.step) + "\n";
  out += "adam_step " + std::to_string(st.adam.step) + "\n";
  out += "shuffle_seed " + std::to_string(st.config.train.seed) + "\n";
  std::string species;
  for (int z : st.train_species) species += (species.empty() ? "" : ",") + std::to_string(z);
  out += "species " + species + "\n";
  out += "metrics " + std::to_string(st.history.size()) + "\n";
  for (const auto& r : st.history) {
    out += std::to_string(r.step) + "," + r.split + "," + r.family + "," + format_real(r.energy_mae) + "," +
           format_real(r.force_mae) + "," + std::to_string(r.structures) + "\n";
  }
  const auto& items = st.model.params().items();
  out += "arrays " + std::to_string(3 * items.size()) + "\n";
  auto put = [&](const std::string& name, const Matrix& m) {
    out += name + " f64 " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
    // Matrix is row-major, so data() is already row-major order
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    out += '\n';
  };
  for (std::size_t k = 0; k < items.size(); ++k) put("param/" + items[k].name, items[k].value);
  for (std::size_t k = 0; k < items.size(); ++k) put("adam_m/" + items[k].name, st.adam.m[k]);
  for (std::size_t k = 0; k < items.size(); ++k) put("adam_v/" + items[k].name, st.adam.v[k]);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  write_file_atomic(path, serialize_checkpoint(st));
}

inline TrainState parse_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes);
  const auto head = split(detail::getline_or_throw(in, "header"), ' ');
  if (head.size() != 2 || head[0] != kCheckpointMagic) throw DataError("not a checkpoint file");
  if (parse_int<int>(head[1]) != kCheckpointVersion) {
    throw DataError("checkpoint version " + head[1] + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto n_cfg = detail::parse_count(detail::getline_or_throw(in, "config"), "config");
  std::string cfg_text;
  for (std::size_t k = 0; k < n_cfg; ++k) cfg_text += detail::getline_or_throw(in, "config") + "\n";
  TrainState st;
  st.config = RunConfig::from_config(ConfigMap::parse(cfg_text));
  st.config.validate();
  st.step = detail::parse_count(detail::getline_or_throw(in, "step"), "step");
  const auto adam_step = detail::parse_count(detail::getline_or_throw(in, "adam_step"), "adam_step");
  const auto shuffle = detail::parse_count(detail::getline_or_throw(in, "shuffle_seed"), "shuffle_seed");
  if (shuffle != st.config.train.seed) throw DataError("checkpoint shuffle seed disagrees with train.seed");
  const auto species = detail::getline_or_throw(in, "species");
  if (!species.starts_with("species ")) throw DataError("checkpoint: expected 'species' line");
  for (const auto& z : split(species.substr(8), ',')) st.train_species.push_back(parse_int<int>(z));
  const auto n_rows = detail::parse_count(detail::getline_or_throw(in, "metrics"), "metrics");
  for (std::size_t k = 0; k < n_rows; ++k) {
    st.history.push_back(detail::parse_metrics_row(detail::getline_or_throw(in, "metrics")));
  }

  st.model = Model::initialize(st.config.model, st.config.train.seed);
  st.adam = AdamState::zeros(st.model.params());
  st.adam.step = adam_step;
  auto& items = st.model.params().items();
  std::map<std::string, Matrix*> slots;
  for (std::size_t k = 0; k < items.size(); ++k) {
    slots["param/" + items[k].name] = &items[k].value;
    slots["adam_m/" + items[k].name] = &st.adam.m[k];
    slots["adam_v/" + items[k].name] = &st.adam.v[k];
  }
  const auto n_arrays = detail::parse_count(detail::getline_or_throw(in, "arrays"), "arrays");
  std::set<std::string> seen;
  for (std::size_t k = 0; k < n_arrays; ++k) {
    const auto desc = split(detail::getline_or_throw(in, "array header"), ' ');
    if (desc.size() != 4 || desc[1] != "f64") throw DataError("checkpoint: malformed array header");
    const auto& name = desc[0];
    const auto it = slots.find(name);
    if (it == slots.end()) throw DataError("checkpoint array '" + name + "' is not part of this model");
    if (!seen.insert(name).second) throw DataError("checkpoint array '" + name + "' appears twice");
    Matrix& dst = *it->second;
    const auto rows = parse_int<Eigen::Index>(desc[2]);
    const auto cols = parse_int<Eigen::Index>(desc[3]);
    if (rows != dst.rows() || cols != dst.cols()) {
      throw DataError("checkpoint array '" + name + "' has shape " + desc[2] + "x" + desc[3] + ", expected " +
                      std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
    }
    const auto n_bytes = static_cast<std::streamsize>(dst.size() * static_cast<Eigen::Index>(sizeof(double)));
    in.read(reinterpret_cast<char*>(dst.data()), n_bytes);
    if (in.gcount() != n_bytes || in.get() != '\n') throw DataError("checkpoint array '" + name + "' is truncated");
  }
  for (const auto& [name, _] : slots) {
    if (!seen.count(name)) throw DataError("checkpoint is missing array '" + name + "'");
  }
  return st;
}

inline TrainState load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

// Rejects checkpoints whose model differs from the expected one.
inline TrainState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto st = load_checkpoint(path);
  const auto& got = st.config.model;
  if (got.variant != expected.variant) {
    throw InvalidInput("variant mismatch: checkpoint is '" + std::string(variant_name(got.variant)) +
                       "', config expects '" + std::string(variant_name(expected.variant)) + "'");
  }
  ConfigMap a, b;
  got.store(a);
  expected.store(b);
  if (a.to_text() != b.to_text()) throw InvalidInput("checkpoint model config differs from the expected config");
  return st;
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // metrics.csv, last.ckpt, final.ckpt
  std::optional<std::uint64_t> stop_at;          // pause here (resumable); defaults to train.steps
};

// Runs (or continues) training until stop_at or train.steps. Evaluates on
// val and test at step 0, every eval_interval steps and at the final step.
inline void run_training(TrainState& st, const Dataset& data, const TrainOptions& opts = {}) {
  const auto& tc = st.config.train;
  const auto split = split_indices(data, tc.holdout_family);
  const auto prepared = PreparedDataset::build(data, st.config.model);
  const auto stop = std::min(tc.steps, opts.stop_at.value_or(tc.steps));
  if (opts.out_dir) std::filesystem::create_directories(*opts.out_dir);

  auto checkpoint = [&](const std::string& name) {
    if (!opts.out_dir) return;
    write_file_atomic(*opts.out_dir / "metrics.csv", metrics_csv(st));
    save_checkpoint(*opts.out_dir / name, st);
    if (tc.keep_checkpoints) save_checkpoint(*opts.out_dir / ("step-" + std::to_string(st.step) + ".ckpt"), st);
  };

  if (st.step == 0 && st.history.empty()) {
    record_eval(st, prepared, split);
    checkpoint("last.ckpt");
  }
  while (st.step < stop) {
    const auto batch = batch_for_step(split.train, st.step, tc.batch_size, tc.seed);
    BatchResult br;
    try {
      br = batch_loss(st.model, prepared, batch, tc);
    } catch (const NumericalError& e) {
      if (opts.out_dir) {
        save_checkpoint(*opts.out_dir / "diverged.ckpt", st);
        std::string diag = "step=" + std::to_string(st.step) + "\nerror=" + e.what() + "\nbatch=";
        for (auto k : batch) diag += data.structures[k].structure.id + " ";
        write_file_atomic(*opts.out_dir / "diverged.txt", diag + "\n");
      }
      throw NumericalError("training diverged at step " + std::to_string(st.step) + ": " + e.what());
    }
    adam_update(st.model.params(), st.adam, br.grads, tc);
    ++st.step;
    if (st.step % tc.eval_interval == 0 || st.step == tc.steps) {
      record_eval(st, prepared, split);
      checkpoint("last.ckpt");
    }
  }
  if (st.step == tc.steps && opts.out_dir) checkpoint("final.ckpt");
}

inline TrainState train(const RunConfig& cfg, const Dataset& data, const TrainOptions& opts = {}) {
  auto st = init_training(cfg, data);
  run_training(st, data, opts);
  return st;
}

// Last evaluation rows for one split and family ("overall" by default).
inline const MetricsRow& final_metrics(const TrainState& st, std::string_view split,
                                       std::string_view family = kOverall) {
  for (auto it = st.history.rbegin(); it != st.history.rend(); ++it) {
    if (it->split == split && it->family == family) return *it;
  }
  throw InvalidInput("no metrics for split '" + std::string(split) + "' family '" + std::string(family) + "'");
}

}  // namespace pamm
