#pragma once

#include "pamm/motif_memory.hpp"

#include <optional>

namespace pamm {

enum class Variant : std::uint8_t {
  Baseline,
  PammGate,
  PammAffine,
  PairOnly,
  TripletOnly,
  NoGate,
  RandomBucket,
  MlpControl,
};

inline constexpr std::array<Variant, 8> kAllVariants = {
    Variant::Baseline, Variant::PammGate,     Variant::PammAffine,   Variant::PairOnly,
    Variant::TripletOnly, Variant::NoGate, Variant::RandomBucket, Variant::MlpControl,
};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::PammGate: return "pamm-gate";
    case Variant::PammAffine: return "pamm-affine";
    case Variant::PairOnly: return "pair-only";
    case Variant::TripletOnly: return "triplet-only";
    case Variant::NoGate: return "no-gate";
    case Variant::RandomBucket: return "random-bucket";
    case Variant::MlpControl: return "mlp-control";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view name) {
  for (auto v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  return std::nullopt;
}

/// Mechanism toggles a variant switches on.
struct VariantFlags {
  bool pair = false;
  bool triplet = false;
  bool gate = false;
  bool affine = false;
  bool random_bucket = false;
  bool mlp_control = false;

  bool lookup() const { return pair || triplet; }
};

inline VariantFlags variant_flags(Variant v) {
  switch (v) {
    case Variant::Baseline: return {};
    case Variant::PammGate: return {.pair = true, .triplet = true, .gate = true};
    case Variant::PammAffine: return {.pair = true, .triplet = true, .gate = true, .affine = true};
    case Variant::PairOnly: return {.pair = true, .gate = true};
    case Variant::TripletOnly: return {.triplet = true, .gate = true};
    case Variant::NoGate: return {.pair = true, .triplet = true};
    case Variant::RandomBucket: return {.pair = true, .triplet = true, .gate = true, .random_bucket = true};
    case Variant::MlpControl: return {.gate = true, .mlp_control = true};
  }
  return {};
}

// Sets the memory toggles of `cfg` to match the variant.
inline MotifConfig apply_variant(MotifConfig cfg, Variant v) {
  const auto f = variant_flags(v);
  cfg.pair_enabled = f.pair;
  cfg.triplet_enabled = f.triplet;
  cfg.random_bucket = f.random_bucket;
  return cfg;
}

/// Edge gate: g = clip(1 + lambda SiLU(clip(alpha <W_q x, W_k x>, -c, c)), g_min, g_max).
/// Projections are stored as (|x| x d_gate) so that q = x W_q for a row x.
struct GateParams {
  Matrix wq;
  Matrix wk;
  double alpha = 0.25;
  double lambda = 0.5;
  double g_min = 0.5;
  double g_max = 1.5;
  double clip = 10.0;

  void validate() const {
    if (!(g_min > 0.0 && g_min <= 1.0 && 1.0 <= g_max)) throw InvalidInput("gate bounds need 0 < g_min <= 1 <= g_max");
    if (!(clip > 0.0)) throw InvalidInput("gate pre-activation clip must be positive");
    if (!(lambda >= 0.0)) throw InvalidInput("gate strength lambda must be >= 0");
  }
};

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

struct GateOutput {
  double g = 1.0;
  double score = 0.0;  // s = <q, k>
  Eigen::RowVectorXd gated;
};

inline GateOutput gate(const Eigen::RowVectorXd& x, const GateParams& p) {
  const Eigen::RowVectorXd q = x * p.wq;
  const Eigen::RowVectorXd k = x * p.wk;
  GateOutput out;
  out.score = q.dot(k);
  const double s_hat = std::clamp(p.alpha * out.score, -p.clip, p.clip);
  out.g = std::clamp(1.0 + p.lambda * silu(s_hat), p.g_min, p.g_max);
  out.gated = x * out.g;
  return out;
}

/// Per-layer memory-conditioned affine branch. Hidden = SiLU(m W1 + b1);
/// delta_g = hidden W_g; delta_b = hidden W_b. The heads start at zero.
struct AffineLayerParams {
  Matrix w1;  // 2d x hidden
  Matrix b1;  // 1 x hidden
  Matrix wg;  // hidden x d_e
  Matrix wb;  // hidden x d_e
};

struct AffineScales {
  double alpha = 0.5;
  double beta = 0.5;
};

inline Eigen::RowVectorXd affine_modulate(const Eigen::RowVectorXd& edge_state, const Eigen::RowVectorXd& memory,
                                          const AffineLayerParams& p, const AffineScales& s) {
  Eigen::RowVectorXd pre = memory * p.w1 + p.b1;
  const Eigen::RowVectorXd hidden = pre.unaryExpr([](double z) { return silu(z); });
  const Eigen::RowVectorXd dg = hidden * p.wg;
  const Eigen::RowVectorXd db = hidden * p.wb;
  const Eigen::RowVectorXd scale = (s.alpha * dg.array().tanh() + 1.0).matrix();
  return edge_state.cwiseProduct(scale) + s.beta * db;
}

/// Widths of the concatenated edge input [phi_r; phi_s; phi_t; e_pair; e_tri].
struct EdgeInputLayout {
  Eigen::Index radial = 8;
  Eigen::Index species = 8;
  Eigen::Index memory = 16;

  Eigen::Index total() const { return radial + 2 * species + 2 * memory; }
  Eigen::Index memory_offset() const { return radial + 2 * species; }
};

// Zero-filled memory slots keep the width fixed across variants.
inline Eigen::RowVectorXd assemble_edge_input(const Eigen::RowVectorXd& phi_r, const Eigen::RowVectorXd& phi_s,
                                              const Eigen::RowVectorXd& phi_t, const Eigen::RowVectorXd& e_pair,
                                              const Eigen::RowVectorXd& e_tri, const EdgeInputLayout& layout) {
  if (phi_r.size() != layout.radial || phi_s.size() != layout.species || phi_t.size() != layout.species ||
      e_pair.size() != layout.memory || e_tri.size() != layout.memory) {
    throw InvalidInput("edge input dimension mismatch");
  }
  Eigen::RowVectorXd x(layout.total());
  x << phi_r, phi_s, phi_t, e_pair, e_tri;
  return x;
}

/// One-hidden-layer branch (in -> w -> out, biases on both layers).
inline std::uint64_t mlp_branch_params(std::uint64_t in_dim, std::uint64_t hidden, std::uint64_t out_dim) {
  return hidden * (in_dim + 1) + out_dim * (hidden + 1);
}

struct MlpMatch {
  std::uint64_t hidden = 0;
  std::uint64_t params = 0;
  std::uint64_t target = 0;
};

// Largest hidden width whose parameter count stays <= target.
inline MlpMatch match_mlp_params(std::uint64_t target, std::uint64_t in_dim, std::uint64_t out_dim) {
  if (mlp_branch_params(in_dim, 1, out_dim) > target) {
    throw InvalidInput("parameter target " + std::to_string(target) +
                       " is too small for any MLP control branch (needs " +
                       std::to_string(mlp_branch_params(in_dim, 1, out_dim)) + " for width 1)");
  }
  // params(w) = w (in + 1 + out) + out
  const std::uint64_t hidden = (target - out_dim) / (in_dim + 1 + out_dim);
  return {hidden, mlp_branch_params(in_dim, hidden, out_dim), target};
}

inline MlpMatch match_mlp_params(const MotifConfig& cfg, std::uint64_t radial_basis) {
  const std::uint64_t in_dim = 2 * kMaxAtomicNumber + radial_basis;
  return match_mlp_params(structured_memory_size(cfg), in_dim, 2 * std::uint64_t{cfg.width});
}

}  // namespace pamm
