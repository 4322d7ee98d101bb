#pragma once

// Mechanism analyses over a trained model: how often each pair motif
// occurs, how far the gate moves from 1, and where lookup changes errors.

#include "pamm/training.hpp"

namespace pamm {

struct PairMotif {
  int zj = 0;  // source species
  int zi = 0;  // target species
  std::uint32_t bin = 0;

  auto operator<=>(const PairMotif&) const = default;
};

struct MotifCount {
  PairMotif motif;
  std::uint64_t count = 0;
  double fraction = 0.0;
  double coverage = 0.0;  // cumulative fraction through this row
};

inline std::map<PairMotif, std::uint64_t> count_pair_motifs(const std::vector<const Structure*>& structures,
                                                           const MotifConfig& cfg) {
  std::map<PairMotif, std::uint64_t> counts;
  for (const auto* s : structures) {
    const auto g = build_neighbor_list(*s, cfg.r_max);
    for (const auto& e : g.edges) {
      ++counts[{s->species[e.source], s->species[e.target], quantize_distance(e.distance, cfg)}];
    }
  }
  return counts;
}

// Most frequent first; ties by motif.
inline std::vector<MotifCount> motif_frequency(const std::vector<const Structure*>& structures,
                                               const MotifConfig& cfg) {
  const auto counts = count_pair_motifs(structures, cfg);
  std::vector<MotifCount> rows;
  std::uint64_t total = 0;
  for (const auto& [m, n] : counts) {
    rows.push_back({m, n, 0.0, 0.0});
    total += n;
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
  std::uint64_t running = 0;
  for (auto& r : rows) {
    running += r.count;
    r.fraction = static_cast<double>(r.count) / static_cast<double>(total);
    r.coverage = static_cast<double>(running) / static_cast<double>(total);
  }
  return rows;
}

// Share of edges covered by the most frequent `top_fraction` of keys.
inline double head_coverage(const std::vector<MotifCount>& rows, double top_fraction) {
  if (rows.empty()) return 0.0;
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(rows.size()))));
  return rows[std::min(n, rows.size()) - 1].coverage;
}

struct GateUsageRow {
  std::string family;
  std::uint64_t edges = 0;
  double mean_abs_gate_shift = 0.0;          // mean |g - 1|
  std::vector<double> mean_abs_affine_scale; // per layer, mean |alpha tanh(dg)|
};

inline std::vector<GateUsageRow> gate_usage(const Model& model, const PreparedDataset& data,
                                            const std::vector<std::size_t>& indices) {
  const auto f = model.config().flags();
  if (!f.gate) {
    throw InvalidInput("gate-usage needs a gated variant, checkpoint is '" +
                       std::string(variant_name(model.config().variant)) + "'");
  }
  if (indices.empty()) throw InvalidInput("gate-usage: empty dataset");
  struct Acc {
    std::uint64_t edges = 0;
    double shift = 0.0;
    std::vector<double> scale;
    std::uint64_t scale_n = 0;
  };
  std::map<std::string, Acc> by_family;
  Acc all;
  for (auto k : indices) {
    const auto pred = predict(model, data.items[k]);
    auto& acc = by_family[data.data->structures[k].structure.family];
    for (auto* a : {&acc, &all}) {
      a->edges += static_cast<std::uint64_t>(pred.gate.size());
      a->shift += (pred.gate.array() - 1.0).abs().sum();
      a->scale.resize(pred.affine_scale.size(), 0.0);
      for (std::size_t l = 0; l < pred.affine_scale.size(); ++l) a->scale[l] += pred.affine_scale[l].cwiseAbs().sum();
      if (!pred.affine_scale.empty()) a->scale_n += static_cast<std::uint64_t>(pred.affine_scale[0].size());
    }
  }
  auto finish = [](const std::string& name, const Acc& a) {
    GateUsageRow r{name, a.edges, a.edges ? a.shift / static_cast<double>(a.edges) : 0.0, {}};
    for (double s : a.scale) r.mean_abs_affine_scale.push_back(s / static_cast<double>(a.scale_n));
    return r;
  };
  std::vector<GateUsageRow> rows;
  for (const auto& [fam, acc] : by_family) rows.push_back(finish(fam, acc));
  rows.push_back(finish(std::string(kOverall), all));
  return rows;
}

struct MotifDeltaRow {
  PairMotif motif;
  std::uint64_t count = 0;
  double coverage = 0.0;
  double error_model = 0.0;
  double error_baseline = 0.0;
  double delta = 0.0;  // model - baseline
};

// Each edge is charged the mean absolute force error (over components) of
// its target atom; rows average that over the edges carrying each motif.
inline std::vector<MotifDeltaRow> motif_delta(const Model& model, const Model& baseline, const Dataset& data,
                                              const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw InvalidInput("motif-delta: empty dataset");
  const auto& mc = model.config().motif;
  struct Acc {
    std::uint64_t n = 0;
    double a = 0.0;
    double b = 0.0;
  };
  std::map<PairMotif, Acc> acc;
  std::vector<const Structure*> structures;
  for (auto k : indices) {
    const auto& truth = data.structures[k];
    structures.push_back(&truth.structure);
    const auto pa = predict(model, prepare(truth.structure, model.config()));
    const auto pb = predict(baseline, prepare(truth.structure, baseline.config()));
    Matrix f_true(static_cast<Eigen::Index>(truth.structure.size()), 3);
    for (std::size_t i = 0; i < truth.structure.size(); ++i) f_true.row(static_cast<Eigen::Index>(i)) = truth.forces[i].transpose();
    const Eigen::VectorXd ea = (pa.forces - f_true).cwiseAbs().rowwise().mean();
    const Eigen::VectorXd eb = (pb.forces - f_true).cwiseAbs().rowwise().mean();
    const auto g = build_neighbor_list(truth.structure, mc.r_max);
    for (const auto& e : g.edges) {
      auto& slot = acc[{truth.structure.species[e.source], truth.structure.species[e.target],
                        quantize_distance(e.distance, mc)}];
      ++slot.n;
      slot.a += ea[e.target];
      slot.b += eb[e.target];
    }
  }
  std::vector<MotifDeltaRow> rows;
  for (const auto& f : motif_frequency(structures, mc)) {
    const auto& s = acc.at(f.motif);
    const double a = s.a / static_cast<double>(s.n), b = s.b / static_cast<double>(s.n);
    rows.push_back({f.motif, f.count, f.coverage, a, b, a - b});
  }
  return rows;
}

}  // namespace pamm
