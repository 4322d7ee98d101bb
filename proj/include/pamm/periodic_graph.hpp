#pragma once

#include "pamm/common.hpp"

#include <algorithm>

namespace pamm {

/// Lattice vectors a1, a2, a3 stored as rows, in Angstrom.
struct Cell {
  Mat3 vectors = Mat3::Identity();

  double volume() const { return vectors.determinant(); }

  double min_length() const {
    return std::min({vectors.row(0).norm(), vectors.row(1).norm(), vectors.row(2).norm()});
  }

  Vec3 to_cartesian(const Vec3& frac) const { return vectors.transpose() * frac; }
  Vec3 to_fractional(const Vec3& cart) const { return vectors.transpose().inverse() * cart; }
  Vec3 shift_vector(const Eigen::Vector3i& n) const { return vectors.transpose() * n.cast<double>(); }

  void validate() const {
    if (!vectors.allFinite()) throw InvalidInput("cell has non-finite entries");
    if (std::abs(volume()) <= 1e-8) throw InvalidInput("degenerate cell: |det| <= 1e-8 A^3");
  }
};

struct Structure {
  Cell cell;
  std::vector<int> species;
  std::vector<Vec3> positions;
  std::string family = "default";
  std::string id = "structure";

  std::size_t size() const { return species.size(); }

  void validate() const {
    cell.validate();
    if (species.empty()) throw InvalidInput("structure '" + id + "' has no atoms");
    if (species.size() != positions.size()) {
      throw InvalidInput("structure '" + id + "': species/positions length mismatch");
    }
    for (int z : species) {
      if (z < 1 || z > kMaxAtomicNumber) {
        throw InvalidInput("structure '" + id + "': atomic number out of range: " + std::to_string(z));
      }
    }
    for (const auto& p : positions) {
      if (!p.allFinite()) throw InvalidInput("structure '" + id + "': non-finite position");
    }
    if (family.empty()) throw InvalidInput("structure '" + id + "': empty family tag");
  }
};

/// Directed edge j -> i; `vec` points from i to the shifted image of j.
struct Edge {
  int source = 0;
  int target = 0;
  Eigen::Vector3i shift = Eigen::Vector3i::Zero();
  double distance = 0.0;
  Vec3 unit = Vec3::Zero();
};

struct NeighborGraph {
  std::vector<Edge> edges;
  // edges[offsets[i] .. offsets[i+1]) all target atom i
  std::vector<std::size_t> offsets;
  double cutoff = 0.0;

  std::size_t atom_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t in_degree(std::size_t atom) const { return offsets[atom + 1] - offsets[atom]; }
};

struct Triplet {
  std::size_t edge = 0;   // j -> i
  std::size_t other = 0;  // k -> i
  double theta = 0.0;     // angle j-i-k
};

struct TripletSet {
  std::vector<Triplet> triplets;
  // triplets[offsets[e] .. offsets[e+1]) belong to edge e
  std::vector<std::size_t> offsets;

  std::size_t count(std::size_t edge) const { return offsets[edge + 1] - offsets[edge]; }
};

struct NeighborOptions {
  // cutoff may not exceed this multiple of the shortest lattice vector
  double max_cutoff_factor = 3.0;
};

// Exact supercell enumeration. For each (target, source) pair the admissible
// integer shifts come from bounding every fractional component of the image
// separation by cutoff / interplanar spacing.
inline NeighborGraph build_neighbor_list(const Structure& s, double cutoff,
                                         const NeighborOptions& options = {}) {
  s.validate();
  if (!(cutoff > 0.0) || !std::isfinite(cutoff)) throw InvalidInput("cutoff must be positive");
  const double bound = options.max_cutoff_factor * s.cell.min_length();
  if (cutoff > bound) {
    throw InvalidInput("cutoff " + format_real(cutoff) + " A exceeds the safety bound of " +
                       format_real(bound) + " A (" + format_real(options.max_cutoff_factor) +
                       "x the shortest lattice vector); use a larger cell");
  }

  const Mat3 a = s.cell.vectors;
  const Mat3 recip = a.inverse().transpose();  // rows b_k with a_i . b_k = delta_ik
  Vec3 reach;
  for (int k = 0; k < 3; ++k) reach[k] = cutoff * recip.row(k).norm();

  const std::size_t n = s.size();
  std::vector<Vec3> frac(n);
  for (std::size_t i = 0; i < n; ++i) frac[i] = s.cell.to_fractional(s.positions[i]);

  NeighborGraph g;
  g.cutoff = cutoff;
  g.offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    g.offsets[i] = g.edges.size();
    for (std::size_t j = 0; j < n; ++j) {
      const Vec3 df = frac[j] - frac[i];
      Eigen::Vector3i lo, hi;
      for (int k = 0; k < 3; ++k) {
        lo[k] = static_cast<int>(std::ceil(-reach[k] - df[k] - 1e-12));
        hi[k] = static_cast<int>(std::floor(reach[k] - df[k] + 1e-12));
      }
      for (int nx = lo[0]; nx <= hi[0]; ++nx) {
        for (int ny = lo[1]; ny <= hi[1]; ++ny) {
          for (int nz = lo[2]; nz <= hi[2]; ++nz) {
            const Eigen::Vector3i shift(nx, ny, nz);
            if (i == j && shift.isZero()) continue;
            const Vec3 d = s.positions[j] + s.cell.shift_vector(shift) - s.positions[i];
            const double r = d.norm();
            if (r > cutoff) continue;
            if (r < 1e-8) {
              throw InvalidInput("structure '" + s.id + "': atoms " + std::to_string(i) + " and " +
                                 std::to_string(j) + " coincide");
            }
            g.edges.push_back(Edge{static_cast<int>(j), static_cast<int>(i), shift, r, d / r});
          }
        }
      }
    }
  }
  g.offsets[n] = g.edges.size();
  return g;
}

inline TripletSet enumerate_triplets(const NeighborGraph& g) {
  TripletSet t;
  const std::size_t n_edges = g.edges.size();
  t.offsets.assign(n_edges + 1, 0);
  std::size_t total = 0;
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    const auto deg = g.in_degree(i);
    total += deg * (deg > 0 ? deg - 1 : 0);
  }
  t.triplets.reserve(total);
  for (std::size_t i = 0; i < g.atom_count(); ++i) {
    for (std::size_t e = g.offsets[i]; e < g.offsets[i + 1]; ++e) {
      t.offsets[e] = t.triplets.size();
      const Vec3& uj = g.edges[e].unit;
      for (std::size_t k = g.offsets[i]; k < g.offsets[i + 1]; ++k) {
        if (k == e) continue;
        const double c = std::clamp(uj.dot(g.edges[k].unit), -1.0, 1.0);
        t.triplets.push_back(Triplet{e, k, std::acos(c)});
      }
    }
  }
  t.offsets[n_edges] = t.triplets.size();
  return t;
}

// Tiles the cell na x nb x nc times; atom order is (image, original index).
inline Structure make_supercell(const Structure& s, const std::array<int, 3>& repeat) {
  for (int r : repeat) {
    if (r < 1) throw InvalidInput("supercell repeat entries must be >= 1");
  }
  Structure out;
  out.family = s.family;
  out.id = s.id + "-x" + std::to_string(repeat[0]) + std::to_string(repeat[1]) + std::to_string(repeat[2]);
  out.cell = s.cell;
  for (int k = 0; k < 3; ++k) out.cell.vectors.row(k) *= repeat[static_cast<std::size_t>(k)];
  for (int a = 0; a < repeat[0]; ++a) {
    for (int b = 0; b < repeat[1]; ++b) {
      for (int c = 0; c < repeat[2]; ++c) {
        const Vec3 t = s.cell.shift_vector(Eigen::Vector3i(a, b, c));
        for (std::size_t i = 0; i < s.size(); ++i) {
          out.species.push_back(s.species[i]);
          out.positions.push_back(s.positions[i] + t);
        }
      }
    }
  }
  return out;
}

}  // namespace pamm
