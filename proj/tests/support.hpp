#pragma once

#include "pamm/host_model.hpp"
#include "pamm/synthetic_data.hpp"

#include <Eigen/Geometry>

namespace pamm::fixtures {

// Unlabeled structure from one of the default families, drawn from `seed`.
inline Structure sample_structure(std::uint64_t seed, std::size_t family_index = 0) {
  const auto spec = DataSpec::defaults();
  const auto& fam = spec.families[family_index % spec.families.size()];
  Rng rng(mix64(seed, 0xface));
  auto s = build_lattice(fam, rng);
  perturb(s, fam, rng);
  s.id = "sample-" + std::to_string(seed);
  return s;
}

inline std::vector<Structure> sample_structures(std::size_t count, std::uint64_t seed) {
  std::vector<Structure> out;
  for (std::size_t k = 0; k < count; ++k) out.push_back(sample_structure(mix64(seed, k), k));
  return out;
}

inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

inline Structure rotated(const Structure& s, const Mat3& rot) {
  Structure out = s;
  out.cell.vectors = s.cell.vectors * rot.transpose();
  for (auto& p : out.positions) p = rot * p;
  return out;
}

// Translate every atom and wrap it back into the cell.
inline Structure translated(const Structure& s, const Vec3& t) {
  Structure out = s;
  for (auto& p : out.positions) {
    Vec3 f = s.cell.to_fractional(p + t);
    for (int k = 0; k < 3; ++k) f[k] -= std::floor(f[k]);
    p = s.cell.to_cartesian(f);
  }
  return out;
}

inline Structure permuted(const Structure& s, Rng& rng) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
  Structure out = s;
  for (std::size_t k = 0; k < order.size(); ++k) {
    out.species[k] = s.species[order[k]];
    out.positions[k] = s.positions[order[k]];
  }
  return out;
}

inline double relative(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::abs(b)); }

// True when no edge sits within `margin` of a distance-bin edge and no gate
// is within `gate_margin` of a clip bound.
inline bool screened(const Model& m, const PreparedStructure& p, double gate_margin = 1e-4) {
  const auto& mc = m.config().motif;
  const double width = mc.r_max / mc.distance_bins;
  const double margin = 1e-3 * width;
  for (const auto& e : p.graph.edges) {
    const double u = e.distance / width;
    const double frac = u - std::floor(u);
    if (frac * width < margin || (1.0 - frac) * width < margin) return false;
  }
  if (m.config().flags().gate) {
    const auto pred = predict(m, p);
    const auto& fu = m.config().fusion;
    for (Eigen::Index e = 0; e < pred.gate.size(); ++e) {
      if (std::abs(pred.gate[e] - fu.gate_min) < gate_margin || std::abs(pred.gate[e] - fu.gate_max) < gate_margin) {
        return false;
      }
    }
  }
  return true;
}

// max |F_analytic - F_fd| / max(|F_fd|, 1e-3), central differences with
// topology and motif bins held fixed.
inline double fd_force_error(const Model& m, const PreparedStructure& p, double step = 1e-4) {
  const auto pred = predict(m, p);
  const Matrix pos = positions_matrix(p.structure);
  Matrix fd(pos.rows(), 3);
  for (Eigen::Index a = 0; a < pos.rows(); ++a) {
    for (Eigen::Index k = 0; k < 3; ++k) {
      Matrix plus = pos, minus = pos;
      plus(a, k) += step;
      minus(a, k) -= step;
      fd(a, k) = -(predict_energy(m, p, &plus) - predict_energy(m, p, &minus)) / (2.0 * step);
    }
  }
  const double scale = std::max(1e-3, fd.cwiseAbs().maxCoeff());
  return (pred.forces - fd).cwiseAbs().maxCoeff() / scale;
}

inline Model make_model(Variant v, std::uint64_t seed = 1, MotifConfig motif = {}, HostConfig host = {},
                        FusionConfig fusion = {}) {
  return Model::initialize(ModelConfig::make(v, motif, host, fusion), seed);
}

// Gives lookup tables and zero-initialized heads nonzero values so tests
// exercise every path.
inline void randomize_all(Model& m, std::uint64_t seed, double scale = 0.3) {
  for (auto& prm : m.params().items()) {
    if (prm.name.starts_with("memory.") || prm.name.find("affine.") != std::string::npos ||
        prm.name.find(".b") != std::string::npos) {
      prm.value = random_normal(seed, prm.name, prm.value.rows(), prm.value.cols(), scale);
    }
  }
}

// Default families with `per_family` structures each.
inline Dataset small_dataset(std::uint32_t per_family = 10) {
  auto spec = DataSpec::defaults();
  for (auto& f : spec.families) f.count = per_family;
  return generate_dataset(spec);
}

}  // namespace pamm::fixtures
