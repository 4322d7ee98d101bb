#pragma once

#include "pamm/config_map.hpp"
#include "pamm/periodic_graph.hpp"

namespace pamm {

/// Discretization, hashing and table-shape constants for the motif memory.
struct MotifConfig {
  double r_max = 4.5;
  std::uint32_t distance_bins = 64;  // B_r
  std::uint32_t angle_bins = 16;     // B_theta
  std::uint32_t hashes = 2;          // H
  std::uint32_t pair_buckets = 512;  // M_pair
  std::uint32_t triplet_buckets = 512;
  std::uint32_t width = 16;          // d
  std::uint32_t key_base = 131;      // p, odd prime
  bool pair_enabled = true;
  bool triplet_enabled = true;
  bool random_bucket = false;
  std::uint64_t random_seed = 0x5eed;

  bool any_enabled() const { return pair_enabled || triplet_enabled; }

  void validate(bool allow_no_source = false) const {
    if (!(r_max > 0.0) || !std::isfinite(r_max)) throw InvalidInput("motif r_max must be positive");
    if (distance_bins < 1 || angle_bins < 1 || hashes < 1 || pair_buckets < 1 || triplet_buckets < 1 ||
        width < 1) {
      throw InvalidInput("motif bin, hash, bucket and width counts must be >= 1");
    }
    if (key_base < 3 || key_base % 2 == 0) throw InvalidInput("motif key base must be an odd prime");
    for (std::uint32_t f = 3; f * f <= key_base; f += 2) {
      if (key_base % f == 0) throw InvalidInput("motif key base " + std::to_string(key_base) + " is not prime");
    }
    if (key_base + hashes >= (1u << 16)) throw InvalidInput("motif key base + H must be < 2^16");
    if (!allow_no_source && !any_enabled()) {
      throw InvalidInput("at least one of pair/triplet memory must be enabled");
    }
  }

  void store(ConfigMap& out) const {
    out.set("motif.r_max", r_max);
    out.set("motif.distance_bins", distance_bins);
    out.set("motif.angle_bins", angle_bins);
    out.set("motif.hashes", hashes);
    out.set("motif.pair_buckets", pair_buckets);
    out.set("motif.triplet_buckets", triplet_buckets);
    out.set("motif.width", width);
    out.set("motif.key_base", key_base);
    out.set("motif.pair_enabled", pair_enabled);
    out.set("motif.triplet_enabled", triplet_enabled);
    out.set("motif.random_bucket", random_bucket);
    out.set("motif.random_seed", random_seed);
  }

  static MotifConfig load(const ConfigMap& in) { return load(in, MotifConfig{}); }

  static MotifConfig load(const ConfigMap& in, MotifConfig base) {
    auto m = base;
    if (in.has("motif.r_max")) m.r_max = in.get_real("motif.r_max");
    if (in.has("motif.distance_bins")) m.distance_bins = in.get_int<std::uint32_t>("motif.distance_bins");
    if (in.has("motif.angle_bins")) m.angle_bins = in.get_int<std::uint32_t>("motif.angle_bins");
    if (in.has("motif.hashes")) m.hashes = in.get_int<std::uint32_t>("motif.hashes");
    if (in.has("motif.pair_buckets")) m.pair_buckets = in.get_int<std::uint32_t>("motif.pair_buckets");
    if (in.has("motif.triplet_buckets")) m.triplet_buckets = in.get_int<std::uint32_t>("motif.triplet_buckets");
    if (in.has("motif.width")) m.width = in.get_int<std::uint32_t>("motif.width");
    if (in.has("motif.key_base")) m.key_base = in.get_int<std::uint32_t>("motif.key_base");
    if (in.has("motif.pair_enabled")) m.pair_enabled = in.get_bool("motif.pair_enabled");
    if (in.has("motif.triplet_enabled")) m.triplet_enabled = in.get_bool("motif.triplet_enabled");
    if (in.has("motif.random_bucket")) m.random_bucket = in.get_bool("motif.random_bucket");
    if (in.has("motif.random_seed")) m.random_seed = in.get_int<std::uint64_t>("motif.random_seed");
    return m;
  }
};

/// H pair tables (M_pair x d) and H triplet tables (M_tri x d). A disabled
/// source has no tables.
struct MemoryTables {
  std::vector<Matrix> pair;
  std::vector<Matrix> triplet;

  static MemoryTables zeros(const MotifConfig& cfg) {
    MemoryTables t;
    if (cfg.pair_enabled) t.pair.assign(cfg.hashes, Matrix::Zero(cfg.pair_buckets, cfg.width));
    if (cfg.triplet_enabled) t.triplet.assign(cfg.hashes, Matrix::Zero(cfg.triplet_buckets, cfg.width));
    return t;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& m : pair) n += static_cast<std::size_t>(m.size());
    for (const auto& m : triplet) n += static_cast<std::size_t>(m.size());
    return n;
  }
};

// Values within this fraction of a bin below an edge land in the upper bin.
// Symmetric geometries sit exactly on edges (right angles between
// orthogonal self images), and roundoff would otherwise split them.
inline constexpr double kBinEdgeTolerance = 1e-9;

inline std::uint32_t quantize_distance(double r, const MotifConfig& cfg) {
  if (!(r > 0.0) || r > cfg.r_max) {
    throw InvalidInput("distance " + format_real(r) + " outside (0, r_max]");
  }
  const auto b = static_cast<std::uint64_t>(std::floor(r / cfg.r_max * cfg.distance_bins + kBinEdgeTolerance));
  return static_cast<std::uint32_t>(std::min<std::uint64_t>(b, cfg.distance_bins - 1));
}

inline std::uint32_t quantize_angle(double theta, const MotifConfig& cfg) {
  if (!(theta >= 0.0) || theta > M_PI) {
    throw InvalidInput("angle " + format_real(theta) + " outside [0, pi]");
  }
  const auto b = static_cast<std::uint64_t>(std::floor(theta / M_PI * cfg.angle_bins + kBinEdgeTolerance));
  return static_cast<std::uint32_t>(std::min<std::uint64_t>(b, cfg.angle_bins - 1));
}

struct HashedKey {
  std::uint64_t key = 0;
  std::uint32_t bucket = 0;
};

// h is 1-based, as in the key definition.
inline HashedKey pair_key(int zj, int zi, std::uint32_t distance_bin, std::uint32_t h,
                          const MotifConfig& cfg) {
  const std::uint64_t base = cfg.key_base + h;
  const std::uint64_t key = static_cast<std::uint64_t>(zj) * base * base +
                            static_cast<std::uint64_t>(zi) * base + distance_bin;
  return {key, static_cast<std::uint32_t>(key % cfg.pair_buckets)};
}

inline HashedKey triplet_key(int zj, int zi, int zk, std::uint32_t angle_bin, std::uint32_t h,
                             const MotifConfig& cfg) {
  const std::uint64_t base = cfg.key_base + h;
  const std::uint64_t key = static_cast<std::uint64_t>(zj) * base * base * base +
                            static_cast<std::uint64_t>(zi) * base * base +
                            static_cast<std::uint64_t>(zk) * base + angle_bin;
  return {key, static_cast<std::uint32_t>(key % cfg.triplet_buckets)};
}

/// Bucket indices addressing the tables for one structure.
struct MotifAssignment {
  std::uint32_t hashes = 0;
  // pair_buckets[e * H + h]
  std::vector<std::uint32_t> pair_buckets;
  // triplet_buckets[t * H + h], t indexing TripletSet::triplets
  std::vector<std::uint32_t> triplet_buckets;
  std::vector<std::size_t> triplet_offsets;

  std::size_t edge_count() const { return triplet_offsets.empty() ? 0 : triplet_offsets.size() - 1; }
  std::uint32_t pair_bucket(std::size_t edge, std::uint32_t h) const { return pair_buckets[edge * hashes + h]; }
  std::uint32_t triplet_bucket(std::size_t t, std::uint32_t h) const { return triplet_buckets[t * hashes + h]; }

  bool operator==(const MotifAssignment&) const = default;
};

inline MotifAssignment assign_structured_buckets(const Structure& s, const NeighborGraph& g,
                                                 const TripletSet& t, const MotifConfig& cfg) {
  MotifAssignment a;
  a.hashes = cfg.hashes;
  a.triplet_offsets = t.offsets;
  a.pair_buckets.resize(g.edges.size() * cfg.hashes);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& edge = g.edges[e];
    const auto b = quantize_distance(edge.distance, cfg);
    for (std::uint32_t h = 0; h < cfg.hashes; ++h) {
      a.pair_buckets[e * cfg.hashes + h] =
          pair_key(s.species[edge.source], s.species[edge.target], b, h + 1, cfg).bucket;
    }
  }
  a.triplet_buckets.resize(t.triplets.size() * cfg.hashes);
  for (std::size_t k = 0; k < t.triplets.size(); ++k) {
    const auto& tri = t.triplets[k];
    const auto& ej = g.edges[tri.edge];
    const auto& ek = g.edges[tri.other];
    const auto b = quantize_angle(tri.theta, cfg);
    for (std::uint32_t h = 0; h < cfg.hashes; ++h) {
      a.triplet_buckets[k * cfg.hashes + h] =
          triplet_key(s.species[ej.source], s.species[ej.target], s.species[ek.source], b, h + 1, cfg).bucket;
    }
  }
  return a;
}

// Geometry-blind control: buckets depend only on (structure id, ordinal, h,
// seed), so they are stable across epochs but carry no motif information.
inline MotifAssignment assign_random_buckets(const std::string& structure_id, const NeighborGraph& g,
                                             const TripletSet& t, const MotifConfig& cfg) {
  MotifAssignment a;
  a.hashes = cfg.hashes;
  a.triplet_offsets = t.offsets;
  const std::uint64_t sid = fnv1a64(structure_id);
  a.pair_buckets.resize(g.edges.size() * cfg.hashes);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    for (std::uint32_t h = 0; h < cfg.hashes; ++h) {
      a.pair_buckets[e * cfg.hashes + h] =
          static_cast<std::uint32_t>(mix64(cfg.random_seed, sid, 1, e, h) % cfg.pair_buckets);
    }
  }
  a.triplet_buckets.resize(t.triplets.size() * cfg.hashes);
  for (std::size_t k = 0; k < t.triplets.size(); ++k) {
    for (std::uint32_t h = 0; h < cfg.hashes; ++h) {
      a.triplet_buckets[k * cfg.hashes + h] =
          static_cast<std::uint32_t>(mix64(cfg.random_seed, sid, 2, k, h) % cfg.triplet_buckets);
    }
  }
  return a;
}

inline MotifAssignment assign_buckets(const Structure& s, const NeighborGraph& g, const TripletSet& t,
                                      const MotifConfig& cfg) {
  return cfg.random_bucket ? assign_random_buckets(s.id, g, t, cfg) : assign_structured_buckets(s, g, t, cfg);
}

/// Retrieved per-edge memories (E x d each) plus the addressing used.
struct RetrievedMemory {
  Matrix pair;
  Matrix triplet;
  MotifAssignment assignment;
};

// e_pair = (1/H) sum_h E_pair^(h)[bucket]; zero when the pair source is off.
inline Matrix lookup_pair(const MemoryTables& tables, const MotifAssignment& a, const MotifConfig& cfg) {
  const auto n_edges = static_cast<Eigen::Index>(a.edge_count());
  Matrix out = Matrix::Zero(n_edges, cfg.width);
  if (!cfg.pair_enabled) return out;
  const double w = 1.0 / cfg.hashes;
  for (Eigen::Index e = 0; e < n_edges; ++e) {
    for (std::uint32_t h = 0; h < cfg.hashes; ++h) {
      out.row(e) += w * tables.pair[h].row(a.pair_bucket(static_cast<std::size_t>(e), h));
    }
  }
  return out;
}

// Per-edge mean over contributing triplets of the per-triplet hash mean.
// An edge with no triplets keeps the zero vector.
inline Matrix lookup_triplet(const MemoryTables& tables, const MotifAssignment& a, const MotifConfig& cfg) {
  const auto n_edges = static_cast<Eigen::Index>(a.edge_count());
  Matrix out = Matrix::Zero(n_edges, cfg.width);
  if (!cfg.triplet_enabled) return out;
  for (Eigen::Index e = 0; e < n_edges; ++e) {
    const auto begin = a.triplet_offsets[static_cast<std::size_t>(e)];
    const auto end = a.triplet_offsets[static_cast<std::size_t>(e) + 1];
    if (begin == end) continue;
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(cfg.width);
    for (auto k = begin; k < end; ++k) {
      Eigen::RowVectorXd per = Eigen::RowVectorXd::Zero(cfg.width);
      for (std::uint32_t h = 0; h < cfg.hashes; ++h) per += tables.triplet[h].row(a.triplet_bucket(k, h));
      acc += per / static_cast<double>(cfg.hashes);
    }
    out.row(e) = acc / static_cast<double>(end - begin);
  }
  return out;
}

inline RetrievedMemory retrieve(const MemoryTables& tables, const MotifAssignment& a, const MotifConfig& cfg) {
  return {lookup_pair(tables, a, cfg), lookup_triplet(tables, a, cfg), a};
}

struct MemoryParamCount {
  std::uint64_t pair_params = 0;
  std::uint64_t triplet_params = 0;
  std::uint64_t total = 0;
  std::uint64_t bytes_f32 = 0;
};

inline MemoryParamCount memory_param_count(const MotifConfig& cfg) {
  MemoryParamCount c;
  const std::uint64_t hd = std::uint64_t{cfg.hashes} * cfg.width;
  c.pair_params = cfg.pair_enabled ? hd * cfg.pair_buckets : 0;
  c.triplet_params = cfg.triplet_enabled ? hd * cfg.triplet_buckets : 0;
  c.total = c.pair_params + c.triplet_params;
  c.bytes_f32 = 4 * c.total;
  return c;
}

// Size of the full two-source structured memory; the MLP control is matched to this.
inline std::uint64_t structured_memory_size(const MotifConfig& cfg) {
  return std::uint64_t{cfg.hashes} * (std::uint64_t{cfg.pair_buckets} + cfg.triplet_buckets) * cfg.width;
}

}  // namespace pamm
