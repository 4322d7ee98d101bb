#pragma once

#include "pamm/autodiff.hpp"
#include "pamm/fusion.hpp"

#include <map>

namespace pamm {

/// Message-passing host. All activations are SiLU.
struct HostConfig {
  std::uint32_t layers = 2;
  std::uint32_t node_width = 32;
  std::uint32_t edge_width = 32;
  std::uint32_t radial_basis = 8;
  std::uint32_t species_width = 8;
  double cutoff = 4.5;

  void validate() const {
    if (layers < 1 || node_width < 1 || edge_width < 1 || radial_basis < 1 || species_width < 1) {
      throw InvalidInput("host widths and layer count must be >= 1");
    }
    if (!(cutoff > 0.0)) throw InvalidInput("host cutoff must be positive");
  }

  void store(ConfigMap& out) const {
    out.set("host.layers", layers);
    out.set("host.node_width", node_width);
    out.set("host.edge_width", edge_width);
    out.set("host.radial_basis", radial_basis);
    out.set("host.species_width", species_width);
    out.set("host.cutoff", cutoff);
  }

  static HostConfig load(const ConfigMap& in) { return load(in, HostConfig{}); }

  static HostConfig load(const ConfigMap& in, HostConfig h) {
    if (in.has("host.layers")) h.layers = in.get_int<std::uint32_t>("host.layers");
    if (in.has("host.node_width")) h.node_width = in.get_int<std::uint32_t>("host.node_width");
    if (in.has("host.edge_width")) h.edge_width = in.get_int<std::uint32_t>("host.edge_width");
    if (in.has("host.radial_basis")) h.radial_basis = in.get_int<std::uint32_t>("host.radial_basis");
    if (in.has("host.species_width")) h.species_width = in.get_int<std::uint32_t>("host.species_width");
    if (in.has("host.cutoff")) h.cutoff = in.get_real("host.cutoff");
    return h;
  }
};

/// Gate and affine constants plus initialization scales.
struct FusionConfig {
  std::uint32_t gate_width = 16;
  double gate_alpha = 0.25;  // 1 / sqrt(gate_width)
  double gate_lambda = 0.5;
  double gate_min = 0.5;
  double gate_max = 1.5;
  double gate_clip = 10.0;
  std::uint32_t affine_hidden = 32;
  double affine_alpha = 0.5;
  double affine_beta = 0.5;
  bool affine_shared = false;
  double memory_init_std = 0.1;

  void validate() const {
    if (gate_width < 1 || affine_hidden < 1) throw InvalidInput("fusion widths must be >= 1");
    GateParams{.alpha = gate_alpha, .lambda = gate_lambda, .g_min = gate_min, .g_max = gate_max, .clip = gate_clip}
        .validate();
    if (!(affine_alpha >= 0.0 && affine_beta >= 0.0)) throw InvalidInput("affine scales must be >= 0");
    if (!(memory_init_std >= 0.0)) throw InvalidInput("memory init std must be >= 0");
  }

  void store(ConfigMap& out) const {
    out.set("fusion.gate_width", gate_width);
    out.set("fusion.gate_alpha", gate_alpha);
    out.set("fusion.gate_lambda", gate_lambda);
    out.set("fusion.gate_min", gate_min);
    out.set("fusion.gate_max", gate_max);
    out.set("fusion.gate_clip", gate_clip);
    out.set("fusion.affine_hidden", affine_hidden);
    out.set("fusion.affine_alpha", affine_alpha);
    out.set("fusion.affine_beta", affine_beta);
    out.set("fusion.affine_shared", affine_shared);
    out.set("fusion.memory_init_std", memory_init_std);
  }

  static FusionConfig load(const ConfigMap& in) { return load(in, FusionConfig{}); }

  static FusionConfig load(const ConfigMap& in, FusionConfig f) {
    if (in.has("fusion.gate_width")) f.gate_width = in.get_int<std::uint32_t>("fusion.gate_width");
    if (in.has("fusion.gate_alpha")) f.gate_alpha = in.get_real("fusion.gate_alpha");
    if (in.has("fusion.gate_lambda")) f.gate_lambda = in.get_real("fusion.gate_lambda");
    if (in.has("fusion.gate_min")) f.gate_min = in.get_real("fusion.gate_min");
    if (in.has("fusion.gate_max")) f.gate_max = in.get_real("fusion.gate_max");
    if (in.has("fusion.gate_clip")) f.gate_clip = in.get_real("fusion.gate_clip");
    if (in.has("fusion.affine_hidden")) f.affine_hidden = in.get_int<std::uint32_t>("fusion.affine_hidden");
    if (in.has("fusion.affine_alpha")) f.affine_alpha = in.get_real("fusion.affine_alpha");
    if (in.has("fusion.affine_beta")) f.affine_beta = in.get_real("fusion.affine_beta");
    if (in.has("fusion.affine_shared")) f.affine_shared = in.get_bool("fusion.affine_shared");
    if (in.has("fusion.memory_init_std")) f.memory_init_std = in.get_real("fusion.memory_init_std");
    return f;
  }
};

struct ModelConfig {
  Variant variant = Variant::PammGate;
  MotifConfig motif;
  HostConfig host;
  FusionConfig fusion;

  static ModelConfig make(Variant v, MotifConfig motif = {}, HostConfig host = {}, FusionConfig fusion = {}) {
    ModelConfig c{v, apply_variant(motif, v), host, fusion};
    c.motif.r_max = c.host.cutoff;
    return c;
  }

  VariantFlags flags() const { return variant_flags(variant); }

  EdgeInputLayout layout() const {
    return {static_cast<Eigen::Index>(host.radial_basis), static_cast<Eigen::Index>(host.species_width),
            static_cast<Eigen::Index>(motif.width)};
  }

  void validate() const {
    host.validate();
    fusion.validate();
    const auto f = flags();
    motif.validate(/*allow_no_source=*/!f.lookup());
    if (motif.pair_enabled != f.pair || motif.triplet_enabled != f.triplet || motif.random_bucket != f.random_bucket) {
      throw InvalidInput("motif toggles disagree with variant '" + std::string(variant_name(variant)) + "'");
    }
    if (motif.r_max != host.cutoff) throw InvalidInput("motif r_max must equal the host cutoff");
  }

  void store(ConfigMap& out) const {
    out.set("variant", std::string(variant_name(variant)));
    motif.store(out);
    host.store(out);
    fusion.store(out);
  }

  static ModelConfig load(const ConfigMap& in) { return load(in, ModelConfig{}); }

  static ModelConfig load(const ConfigMap& in, const ModelConfig& base) {
    ModelConfig c = base;
    if (in.has("variant")) {
      const auto v = parse_variant(in.get("variant"));
      if (!v) throw InvalidInput("unknown variant '" + in.get("variant") + "'");
      c.variant = *v;
    }
    c.host = HostConfig::load(in, c.host);
    c.fusion = FusionConfig::load(in, c.fusion);
    c.motif = apply_variant(MotifConfig::load(in, c.motif), c.variant);
    if (!in.has("motif.r_max")) c.motif.r_max = c.host.cutoff;
    return c;
  }
};

enum class ParamGroup : std::uint8_t { Lookup, Host };

struct Parameter {
  std::string name;
  Matrix value;
  ParamGroup group = ParamGroup::Host;
};

class ParameterSet {
 public:
  void add(std::string name, Matrix value, ParamGroup group) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.push_back(Parameter{std::move(name), std::move(value), group});
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Matrix& at(const std::string& name) const { return items_[position(name)].value; }
  Matrix& at(const std::string& name) { return items_[position(name)].value; }

  std::size_t position(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::uint64_t count(std::optional<ParamGroup> group = std::nullopt) const {
    std::uint64_t n = 0;
    for (const auto& p : items_) {
      if (!group || p.group == *group) n += static_cast<std::uint64_t>(p.value.size());
    }
    return n;
  }

  std::uint64_t count_prefix(std::string_view prefix) const {
    std::uint64_t n = 0;
    for (const auto& p : items_) {
      if (p.name.starts_with(prefix)) n += static_cast<std::uint64_t>(p.value.size());
    }
    return n;
  }

 private:
  std::vector<Parameter> items_;
  std::map<std::string, std::size_t> index_;
};

inline Matrix random_normal(std::uint64_t seed, std::string_view name, Eigen::Index rows, Eigen::Index cols,
                            double stddev) {
  Rng rng(mix64(seed, fnv1a64(name)));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

inline std::string layer_name(std::uint32_t layer, std::string_view leaf) {
  return "layer" + std::to_string(layer) + "." + std::string(leaf);
}

inline std::string affine_name(const ModelConfig& cfg, std::uint32_t layer, std::string_view leaf) {
  return cfg.fusion.affine_shared ? "affine." + std::string(leaf) : layer_name(layer, "affine." + std::string(leaf));
}

class Model {
 public:
  Model() = default;

  // Every tensor draws from its own stream keyed by (seed, name), so
  // variants that share a tensor name share its initial value.
  static Model initialize(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.config_ = cfg;
    const auto f = cfg.flags();
    const auto& h = cfg.host;
    const auto& fu = cfg.fusion;
    const auto x_width = cfg.layout().total();
    auto& ps = m.params_;
    auto normal = [&](const std::string& name, Eigen::Index r, Eigen::Index c, double sd, ParamGroup g) {
      ps.add(name, random_normal(seed, name, r, c, sd), g);
    };
    auto zeros = [&](const std::string& name, Eigen::Index r, Eigen::Index c, ParamGroup g) {
      ps.add(name, Matrix::Zero(r, c), g);
    };
    const auto sd = [](double fan_in) { return 1.0 / std::sqrt(fan_in); };

    normal("species_embedding", kMaxAtomicNumber, h.species_width, 1.0, ParamGroup::Host);
    normal("node_input", h.species_width, h.node_width, sd(h.species_width), ParamGroup::Host);

    if (f.pair) {
      for (std::uint32_t k = 0; k < cfg.motif.hashes; ++k) {
        normal("memory.pair." + std::to_string(k), cfg.motif.pair_buckets, cfg.motif.width, fu.memory_init_std,
               ParamGroup::Lookup);
      }
    }
    if (f.triplet) {
      for (std::uint32_t k = 0; k < cfg.motif.hashes; ++k) {
        normal("memory.triplet." + std::to_string(k), cfg.motif.triplet_buckets, cfg.motif.width,
               fu.memory_init_std, ParamGroup::Lookup);
      }
    }
    if (f.mlp_control) {
      const auto match = match_mlp_params(cfg.motif, h.radial_basis);
      const auto w = static_cast<Eigen::Index>(match.hidden);
      const double in_sd = sd(2.0 + h.radial_basis);
      normal("mlp_control.w1_source", kMaxAtomicNumber, w, in_sd, ParamGroup::Host);
      normal("mlp_control.w1_target", kMaxAtomicNumber, w, in_sd, ParamGroup::Host);
      normal("mlp_control.w1_radial", h.radial_basis, w, in_sd, ParamGroup::Host);
      zeros("mlp_control.b1", 1, w, ParamGroup::Host);
      normal("mlp_control.w2", w, 2 * cfg.motif.width, sd(static_cast<double>(w)), ParamGroup::Host);
      zeros("mlp_control.b2", 1, 2 * cfg.motif.width, ParamGroup::Host);
    }
    if (f.gate) {
      normal("gate.wq", x_width, fu.gate_width, sd(static_cast<double>(x_width)), ParamGroup::Lookup);
      normal("gate.wk", x_width, fu.gate_width, sd(static_cast<double>(x_width)), ParamGroup::Lookup);
    }
    const auto msg_in = 2 * h.node_width + h.edge_width;
    for (std::uint32_t l = 0; l < h.layers; ++l) {
      normal(layer_name(l, "edge_proj"), x_width, h.edge_width, sd(static_cast<double>(x_width)), ParamGroup::Host);
      if (f.affine && (!fu.affine_shared || l == 0)) {
        normal(affine_name(cfg, l, "w1"), 2 * cfg.motif.width, fu.affine_hidden, sd(2.0 * cfg.motif.width),
               ParamGroup::Host);
        zeros(affine_name(cfg, l, "b1"), 1, fu.affine_hidden, ParamGroup::Host);
        zeros(affine_name(cfg, l, "wg"), fu.affine_hidden, h.edge_width, ParamGroup::Host);
        zeros(affine_name(cfg, l, "wb"), fu.affine_hidden, h.edge_width, ParamGroup::Host);
      }
      normal(layer_name(l, "msg.w1"), msg_in, h.node_width, sd(msg_in), ParamGroup::Host);
      zeros(layer_name(l, "msg.b1"), 1, h.node_width, ParamGroup::Host);
      normal(layer_name(l, "msg.w2"), h.node_width, h.node_width, sd(h.node_width), ParamGroup::Host);
      zeros(layer_name(l, "msg.b2"), 1, h.node_width, ParamGroup::Host);
    }
    normal("readout.w1", h.node_width, h.node_width, sd(h.node_width), ParamGroup::Host);
    zeros("readout.b1", 1, h.node_width, ParamGroup::Host);
    normal("readout.w2", h.node_width, 1, sd(h.node_width), ParamGroup::Host);
    zeros("readout.b2", 1, 1, ParamGroup::Host);
    return m;
  }

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  MemoryTables memory_tables() const {
    MemoryTables t;
    for (std::uint32_t k = 0; k < config_.motif.hashes; ++k) {
      const auto pk = "memory.pair." + std::to_string(k);
      const auto tk = "memory.triplet." + std::to_string(k);
      if (params_.has(pk)) t.pair.push_back(params_.at(pk));
      if (params_.has(tk)) t.triplet.push_back(params_.at(tk));
    }
    return t;
  }

  GateParams gate_params() const {
    const auto& fu = config_.fusion;
    return GateParams{params_.at("gate.wq"), params_.at("gate.wk"), fu.gate_alpha, fu.gate_lambda,
                      fu.gate_min,           fu.gate_max,           fu.gate_clip};
  }

 private:
  ModelConfig config_;
  ParameterSet params_;
};

/// Everything about a structure that does not change during training:
/// topology, motif addressing and the constant gather/scatter operators.
struct PreparedStructure {
  Structure structure;
  NeighborGraph graph;
  TripletSet triplets;
  MotifAssignment assignment;
  ad::SparseOperator edge_difference;  // E x N, +1 at source, -1 at target
  ad::SparseOperator gather_source;    // E x N
  ad::SparseOperator gather_target;    // E x N
  ad::SparseOperator source_species;   // E x 118 one-hot
  ad::SparseOperator target_species;   // E x 118 one-hot
  ad::SparseOperator atom_species;     // N x 118 one-hot
  std::vector<ad::SparseOperator> pair_lookup;     // per hash, E x M_pair
  std::vector<ad::SparseOperator> triplet_lookup;  // per hash, E x M_tri
  Matrix shift_cartesian;                          // E x 3
  Matrix inv_sqrt_degree;                          // N x 1

  std::size_t atom_count() const { return structure.size(); }
  std::size_t edge_count() const { return graph.edges.size(); }
};

namespace detail {

using Triplets = std::vector<Eigen::Triplet<double, std::int64_t>>;

inline ad::SparseOperator make_sparse(Eigen::Index rows, Eigen::Index cols, const Triplets& entries) {
  auto m = std::make_shared<ad::SparseMatrix>(rows, cols);
  m->setFromTriplets(entries.begin(), entries.end());
  m->makeCompressed();
  return m;
}

}  // namespace detail

inline Matrix positions_matrix(const Structure& s) {
  Matrix p(static_cast<Eigen::Index>(s.size()), 3);
  for (std::size_t a = 0; a < s.size(); ++a) p.row(static_cast<Eigen::Index>(a)) = s.positions[a].transpose();
  return p;
}

inline PreparedStructure prepare(const Structure& s, const ModelConfig& cfg) {
  PreparedStructure p;
  p.structure = s;
  p.graph = build_neighbor_list(s, cfg.host.cutoff);
  p.triplets = enumerate_triplets(p.graph);
  const bool lookup = cfg.motif.any_enabled();
  if (lookup) {
    p.assignment = assign_buckets(s, p.graph, p.triplets, cfg.motif);
  } else {
    p.assignment.hashes = cfg.motif.hashes;
    p.assignment.triplet_offsets = p.triplets.offsets;
  }

  const auto n = static_cast<Eigen::Index>(s.size());
  const auto e_count = static_cast<Eigen::Index>(p.graph.edges.size());
  detail::Triplets diff, src, tgt, src_z, tgt_z, atom_z;
  p.shift_cartesian.resize(e_count, 3);
  for (Eigen::Index e = 0; e < e_count; ++e) {
    const auto& edge = p.graph.edges[static_cast<std::size_t>(e)];
    diff.emplace_back(e, edge.source, 1.0);
    diff.emplace_back(e, edge.target, -1.0);
    src.emplace_back(e, edge.source, 1.0);
    tgt.emplace_back(e, edge.target, 1.0);
    src_z.emplace_back(e, s.species[static_cast<std::size_t>(edge.source)] - 1, 1.0);
    tgt_z.emplace_back(e, s.species[static_cast<std::size_t>(edge.target)] - 1, 1.0);
    p.shift_cartesian.row(e) = s.cell.shift_vector(edge.shift).transpose();
  }
  for (Eigen::Index a = 0; a < n; ++a) atom_z.emplace_back(a, s.species[static_cast<std::size_t>(a)] - 1, 1.0);
  p.edge_difference = detail::make_sparse(e_count, n, diff);
  p.gather_source = detail::make_sparse(e_count, n, src);
  p.gather_target = detail::make_sparse(e_count, n, tgt);
  p.source_species = detail::make_sparse(e_count, kMaxAtomicNumber, src_z);
  p.target_species = detail::make_sparse(e_count, kMaxAtomicNumber, tgt_z);
  p.atom_species = detail::make_sparse(n, kMaxAtomicNumber, atom_z);

  p.inv_sqrt_degree.resize(n, 1);
  for (Eigen::Index a = 0; a < n; ++a) {
    const auto deg = std::max<std::size_t>(1, p.graph.in_degree(static_cast<std::size_t>(a)));
    p.inv_sqrt_degree(a, 0) = 1.0 / std::sqrt(static_cast<double>(deg));
  }

  const auto& mc = cfg.motif;
  const double inv_h = 1.0 / mc.hashes;
  if (mc.pair_enabled) {
    for (std::uint32_t h = 0; h < mc.hashes; ++h) {
      detail::Triplets entries;
      entries.reserve(static_cast<std::size_t>(e_count));
      for (Eigen::Index e = 0; e < e_count; ++e) {
        entries.emplace_back(e, p.assignment.pair_bucket(static_cast<std::size_t>(e), h), inv_h);
      }
      p.pair_lookup.push_back(detail::make_sparse(e_count, mc.pair_buckets, entries));
    }
  }
  if (mc.triplet_enabled) {
    for (std::uint32_t h = 0; h < mc.hashes; ++h) {
      detail::Triplets entries;
      entries.reserve(p.triplets.triplets.size());
      for (Eigen::Index e = 0; e < e_count; ++e) {
        const auto begin = p.triplets.offsets[static_cast<std::size_t>(e)];
        const auto end = p.triplets.offsets[static_cast<std::size_t>(e) + 1];
        if (begin == end) continue;
        const double w = inv_h / static_cast<double>(end - begin);
        for (auto t = begin; t < end; ++t) entries.emplace_back(e, p.assignment.triplet_bucket(t, h), w);
      }
      p.triplet_lookup.push_back(detail::make_sparse(e_count, mc.triplet_buckets, entries));
    }
  }
  return p;
}

inline Eigen::RowVectorXd radial_centers(const HostConfig& h) {
  Eigen::RowVectorXd mu(h.radial_basis);
  for (std::uint32_t k = 0; k < h.radial_basis; ++k) mu[k] = h.cutoff * (k + 1) / h.radial_basis;
  return mu;
}

inline double cutoff_envelope(double r, double cutoff) { return 0.5 * (1.0 + std::cos(M_PI * r / cutoff)); }

// phi_k(r) = exp(-(r - mu_k)^2 / (2 sigma^2)) f_cut(r), sigma = cutoff / N_rb
inline Eigen::RowVectorXd radial_basis(double r, const HostConfig& h) {
  if (!(r > 0.0) || r > h.cutoff) throw InvalidInput("radial basis needs 0 < r <= cutoff");
  const auto mu = radial_centers(h);
  const double sigma = h.cutoff / h.radial_basis;
  const double fc = cutoff_envelope(r, h.cutoff);
  Eigen::RowVectorXd out(h.radial_basis);
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    const double d = r - mu[k];
    out[k] = std::exp(d * d * (-1.0 / (2.0 * sigma * sigma))) * fc;
  }
  return out;
}

namespace tape {

inline ad::Var cutoff_envelope(const ad::Var& r, double cutoff) {
  return ad::add_scalar(ad::scale(ad::cos(ad::scale(r, M_PI / cutoff)), 0.5), 0.5);
}

// r is E x 1; returns E x N_rb.
inline ad::Var radial_basis(const ad::Var& r, const HostConfig& h) {
  auto& t = r.tape();
  const auto e = r.rows();
  const double sigma = h.cutoff / h.radial_basis;
  const auto mu = t.constant(Matrix(radial_centers(h)));
  const auto d = ad::sub(ad::broadcast_to(r, e, h.radial_basis), ad::broadcast_to(mu, e, h.radial_basis));
  const auto gauss = ad::exp(ad::scale(ad::mul(d, d), -1.0 / (2.0 * sigma * sigma)));
  return ad::mul_bcast(gauss, cutoff_envelope(r, h.cutoff));
}

// x is E x |x|; returns the E x 1 gate column.
inline ad::Var edge_gate(const ad::Var& x, const ad::Var& wq, const ad::Var& wk, const FusionConfig& fu) {
  const auto q = ad::matmul(x, wq);
  const auto k = ad::matmul(x, wk);
  const auto s = ad::sum_to(ad::mul(q, k), x.rows(), 1);
  const auto s_hat = ad::clip(ad::scale(s, fu.gate_alpha), -fu.gate_clip, fu.gate_clip);
  const auto a = ad::silu(s_hat);
  return ad::clip(ad::add_scalar(ad::scale(a, fu.gate_lambda), 1.0), fu.gate_min, fu.gate_max);
}

}  // namespace tape

/// Handles into a recorded forward pass.
struct ForwardPass {
  ad::Var energy;         // 1 x 1
  ad::Var atom_energies;  // N x 1
  ad::Var positions;      // N x 3 leaf
  ad::Var gate;           // E x 1, invalid without a gate
  ad::Var memory;         // E x 2d
  std::vector<ad::Var> affine_scale;  // per layer, alpha_aff tanh(delta_g)
  std::vector<ad::Var> params;        // leaves, ParameterSet order
};

namespace detail {

inline void check_finite(const ad::Var& v, std::string_view name, const PreparedStructure& p) {
  if (!v.value().allFinite()) {
    throw NumericalError("non-finite values in tensor '" + std::string(name) + "' for structure '" +
                         p.structure.id + "'");
  }
}

}  // namespace detail

// Records the energy of one structure. `positions` overrides the stored
// coordinates while keeping the prepared topology and motif addressing.
inline ForwardPass forward(ad::Tape& t, const Model& model, const PreparedStructure& p,
                           const Matrix* positions = nullptr) {
  const auto& cfg = model.config();
  const auto& h = cfg.host;
  const auto& fu = cfg.fusion;
  const auto f = cfg.flags();
  const auto& ps = model.params();
  ForwardPass out;

  out.params.reserve(ps.size());
  for (const auto& prm : ps.items()) out.params.push_back(t.leaf(prm.value));
  auto P = [&](const std::string& name) { return out.params[ps.position(name)]; };

  out.positions = t.leaf(positions ? *positions : positions_matrix(p.structure));
  const auto n_edges = static_cast<Eigen::Index>(p.edge_count());
  const auto width = static_cast<Eigen::Index>(cfg.motif.width);

  const auto d = ad::add(ad::spmm(p.edge_difference, out.positions), t.constant(p.shift_cartesian));
  const auto r = ad::sqrt(ad::sum_to(ad::mul(d, d), n_edges, 1));
  const auto phi_r = tape::radial_basis(r, h);
  detail::check_finite(phi_r, "radial_basis", p);
  const auto envelope = tape::cutoff_envelope(r, h.cutoff);

  const auto emb = P("species_embedding");
  const auto phi_s = ad::spmm(p.source_species, emb);
  const auto phi_t = ad::spmm(p.target_species, emb);

  ad::Var x;
  if (f.mlp_control) {
    const auto pre = ad::add_bcast(
        ad::add(ad::add(ad::spmm(p.source_species, P("mlp_control.w1_source")),
                        ad::spmm(p.target_species, P("mlp_control.w1_target"))),
                ad::matmul(phi_r, P("mlp_control.w1_radial"))),
        P("mlp_control.b1"));
    out.memory = ad::affine(ad::silu(pre), P("mlp_control.w2"), P("mlp_control.b2"));
    x = ad::concat_cols({phi_r, phi_s, phi_t, out.memory});
  } else {
    auto lookup = [&](bool enabled, const std::vector<ad::SparseOperator>& ops, const std::string& prefix) {
      if (!enabled) return t.constant(Matrix::Zero(n_edges, width));
      ad::Var acc = ad::spmm(ops[0], P(prefix + "0"));
      for (std::size_t k = 1; k < ops.size(); ++k) acc = ad::add(acc, ad::spmm(ops[k], P(prefix + std::to_string(k))));
      return acc;
    };
    const auto e_pair = lookup(f.pair, p.pair_lookup, "memory.pair.");
    const auto e_tri = lookup(f.triplet, p.triplet_lookup, "memory.triplet.");
    out.memory = ad::concat_cols({e_pair, e_tri});
    x = ad::concat_cols({phi_r, phi_s, phi_t, e_pair, e_tri});
  }
  detail::check_finite(x, "edge_input", p);

  if (f.gate) {
    out.gate = tape::edge_gate(x, P("gate.wq"), P("gate.wk"), fu);
    detail::check_finite(out.gate, "gate", p);
    x = ad::mul_bcast(x, out.gate);
  }

  auto node = ad::matmul(ad::spmm(p.atom_species, emb), P("node_input"));
  const auto inv_deg = t.constant(p.inv_sqrt_degree);
  for (std::uint32_t l = 0; l < h.layers; ++l) {
    auto e = ad::matmul(x, P(layer_name(l, "edge_proj")));
    if (f.affine) {
      const auto hidden = ad::silu(ad::affine(out.memory, P(affine_name(cfg, l, "w1")), P(affine_name(cfg, l, "b1"))));
      const auto dg = ad::matmul(hidden, P(affine_name(cfg, l, "wg")));
      const auto db = ad::matmul(hidden, P(affine_name(cfg, l, "wb")));
      const auto sc = ad::scale(ad::tanh(dg), fu.affine_alpha);
      e = ad::add(ad::mul(e, ad::add_scalar(sc, 1.0)), ad::scale(db, fu.affine_beta));
      out.affine_scale.push_back(sc);
    }
    detail::check_finite(e, layer_name(l, "edge_state"), p);
    const auto z = ad::concat_cols({ad::spmm(p.gather_target, node), ad::spmm(p.gather_source, node), e});
    const auto hidden = ad::silu(ad::affine(z, P(layer_name(l, "msg.w1")), P(layer_name(l, "msg.b1"))));
    const auto msg = ad::mul_bcast(ad::affine(hidden, P(layer_name(l, "msg.w2")), P(layer_name(l, "msg.b2"))), envelope);
    detail::check_finite(msg, layer_name(l, "message"), p);
    const auto agg = ad::spmm(p.gather_target, msg, /*transposed=*/true);
    node = ad::add(node, ad::mul_bcast(agg, inv_deg));
    detail::check_finite(node, layer_name(l, "node_state"), p);
  }
  const auto hidden = ad::silu(ad::affine(node, P("readout.w1"), P("readout.b1")));
  out.atom_energies = ad::affine(hidden, P("readout.w2"), P("readout.b2"));
  detail::check_finite(out.atom_energies, "atom_energy", p);
  out.energy = ad::sum(out.atom_energies);
  return out;
}

struct Prediction {
  double energy = 0.0;
  Eigen::VectorXd atom_energies;
  Matrix forces;                    // N x 3, eV/A
  Eigen::VectorXd gate;             // per edge; empty without a gate
  std::vector<Matrix> affine_scale; // per layer, E x d_e
  Matrix memory;                    // E x 2d
};

inline Prediction predict(const Model& model, const PreparedStructure& p, const Matrix* positions = nullptr) {
  ad::Tape t;
  const auto fw = forward(t, model, p, positions);
  const std::array<ad::Var, 1> wrt{fw.positions};
  const auto grads = t.gradient(fw.energy, wrt);
  Prediction out;
  out.energy = fw.energy.scalar();
  out.atom_energies = Eigen::Map<const Eigen::VectorXd>(fw.atom_energies.value().data(), fw.atom_energies.rows());
  out.forces = -grads[0].value();
  if (!out.forces.allFinite()) throw NumericalError("non-finite forces for structure '" + p.structure.id + "'");
  if (fw.gate.valid()) out.gate = Eigen::Map<const Eigen::VectorXd>(fw.gate.value().data(), fw.gate.rows());
  for (const auto& sc : fw.affine_scale) out.affine_scale.push_back(sc.value());
  out.memory = fw.memory.value();
  return out;
}

inline double predict_energy(const Model& model, const PreparedStructure& p, const Matrix* positions = nullptr) {
  ad::Tape t;
  return forward(t, model, p, positions).energy.scalar();
}

}  // namespace pamm
