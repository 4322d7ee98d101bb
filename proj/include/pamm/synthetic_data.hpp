#pragma once

#include "pamm/config_map.hpp"
#include "pamm/periodic_graph.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <optional>
#include <set>

namespace pamm {

/// Species-pair Lennard-Jones with a C1 polynomial switch over
/// [cutoff - switch_width, cutoff]. (epsilon, sigma) are a deterministic
/// function of (min Z, max Z, seed).
struct OraclePotential {
  std::uint64_t seed = 7;
  double cutoff = 4.5;
  double switch_width = 1.0;

  struct PairParams {
    double epsilon = 0.0;  // eV
    double sigma = 0.0;    // A
  };

  PairParams pair(int za, int zb) const {
    const auto lo = static_cast<std::uint64_t>(std::min(za, zb));
    const auto hi = static_cast<std::uint64_t>(std::max(za, zb));
    Rng rng(mix64(seed, lo * 1000 + hi));
    PairParams p;
    p.epsilon = rng.uniform(0.02, 0.10);
    p.sigma = rng.uniform(2.0, 2.4);
    return p;
  }

  void validate() const {
    if (!(cutoff > 0.0)) throw InvalidInput("oracle cutoff must be positive");
    if (!(switch_width > 0.0 && switch_width < cutoff)) throw InvalidInput("oracle switch width must be in (0, cutoff)");
    if (!(2.4 < cutoff)) throw InvalidInput("oracle cutoff must exceed the largest sigma (2.4 A)");
  }

  double switching(double r, double* derivative = nullptr) const {
    const double start = cutoff - switch_width;
    if (r <= start) {
      if (derivative) *derivative = 0.0;
      return 1.0;
    }
    if (r >= cutoff) {
      if (derivative) *derivative = 0.0;
      return 0.0;
    }
    const double x = (r - start) / switch_width;
    if (derivative) *derivative = (-6.0 * x + 6.0 * x * x) / switch_width;
    return 1.0 - 3.0 * x * x + 2.0 * x * x * x;
  }

  // Pair energy and its radial derivative.
  double pair_energy(double r, const PairParams& p, double* derivative = nullptr) const {
    if (r >= cutoff) {
      if (derivative) *derivative = 0.0;
      return 0.0;
    }
    const double sr6 = std::pow(p.sigma / r, 6);
    const double v = 4.0 * p.epsilon * (sr6 * sr6 - sr6);
    const double dv = 4.0 * p.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r;
    double ds = 0.0;
    const double s = switching(r, &ds);
    if (derivative) *derivative = dv * s + v * ds;
    return v * s;
  }

  void store(ConfigMap& out) const {
    out.set("oracle.seed", seed);
    out.set("oracle.cutoff", cutoff);
    out.set("oracle.switch_width", switch_width);
  }

  static OraclePotential load(const ConfigMap& in) { return load(in, OraclePotential{}); }

  static OraclePotential load(const ConfigMap& in, OraclePotential o) {
    if (in.has("oracle.seed")) o.seed = in.get_int<std::uint64_t>("oracle.seed");
    if (in.has("oracle.cutoff")) o.cutoff = in.get_real("oracle.cutoff");
    if (in.has("oracle.switch_width")) o.switch_width = in.get_real("oracle.switch_width");
    return o;
  }
};

struct LabeledStructure {
  Structure structure;
  double energy = 0.0;        // eV
  std::vector<Vec3> forces;   // eV/A

  bool operator==(const LabeledStructure& o) const {
    return structure.id == o.structure.id && structure.family == o.structure.family &&
           structure.cell.vectors == o.structure.cell.vectors && structure.species == o.structure.species &&
           structure.positions == o.structure.positions && energy == o.energy && forces == o.forces;
  }
};

struct OracleResult {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

// Each unordered image pair is visited twice as a directed edge, so every
// directed edge contributes half the pair energy.
inline OracleResult oracle_energy_forces(const Structure& s, const OraclePotential& pot) {
  const auto g = build_neighbor_list(s, pot.cutoff);
  OracleResult out;
  out.forces.assign(s.size(), Vec3::Zero());
  for (const auto& e : g.edges) {
    const auto p = pot.pair(s.species[static_cast<std::size_t>(e.source)], s.species[static_cast<std::size_t>(e.target)]);
    if (e.distance < 0.5 * p.sigma) {
      throw InvalidInput("structure '" + s.id + "': unphysical overlap (r = " + format_real(e.distance) +
                         " A < sigma/2)");
    }
    double dphi = 0.0;
    out.energy += 0.5 * pot.pair_energy(e.distance, p, &dphi);
    const Vec3 grad = 0.5 * dphi * e.unit;  // d(E)/d(x_source)
    out.forces[static_cast<std::size_t>(e.source)] -= grad;
    out.forces[static_cast<std::size_t>(e.target)] += grad;
  }
  return out;
}

enum class Lattice : std::uint8_t { Fcc, Bcc, RockSalt };

inline std::string_view lattice_name(Lattice l) {
  switch (l) {
    case Lattice::Fcc: return "fcc";
    case Lattice::Bcc: return "bcc";
    case Lattice::RockSalt: return "rocksalt";
  }
  return "?";
}

inline Lattice parse_lattice(std::string_view s) {
  if (s == "fcc") return Lattice::Fcc;
  if (s == "bcc") return Lattice::Bcc;
  if (s == "rocksalt") return Lattice::RockSalt;
  throw InvalidInput("unknown lattice '" + std::string(s) + "'");
}

inline constexpr std::array<std::string_view, 4> kFamilyNames = {"rattled-small", "rattled-large", "strained",
                                                                 "mdlike"};

struct FamilySpec {
  std::string name = "rattled-small";
  Lattice lattice = Lattice::Fcc;
  double lattice_constant = 3.8;
  std::array<int, 3> repeat = {2, 1, 1};
  std::vector<int> palette = {28, 29};
  double amplitude = 0.05;
  std::size_t count = 50;
  std::uint64_t seed = 101;

  double nearest_neighbor() const {
    switch (lattice) {
      case Lattice::Fcc: return lattice_constant / std::sqrt(2.0);
      case Lattice::Bcc: return lattice_constant * std::sqrt(3.0) / 2.0;
      case Lattice::RockSalt: return lattice_constant / 2.0;
    }
    return 0.0;
  }

  void validate() const {
    if (std::find(kFamilyNames.begin(), kFamilyNames.end(), name) == kFamilyNames.end()) {
      throw InvalidInput("family '" + name + "': name must be one of rattled-small, rattled-large, strained, mdlike");
    }
    if (!(lattice_constant > 0.0)) throw InvalidInput("family '" + name + "': lattice constant must be positive");
    for (int r : repeat) {
      if (r < 1) throw InvalidInput("family '" + name + "': repeat entries must be >= 1");
    }
    if (palette.empty()) throw InvalidInput("family '" + name + "': empty species palette");
    for (int z : palette) {
      if (z < 1 || z > kMaxAtomicNumber) throw InvalidInput("family '" + name + "': palette atomic number out of range");
    }
    if (!(amplitude >= 0.0) || amplitude >= 0.25 * nearest_neighbor()) {
      throw InvalidInput("family '" + name + "': amplitude " + format_real(amplitude) +
                         " A must be below a quarter of the nearest-neighbor distance (" +
                         format_real(0.25 * nearest_neighbor()) + " A)");
    }
  }
};

namespace detail {

struct Site {
  Vec3 frac;
  int sublattice = 0;
};

inline std::vector<Site> basis_sites(Lattice l) {
  switch (l) {
    case Lattice::Fcc:
      return {{Vec3(0, 0, 0), 0}, {Vec3(0, 0.5, 0.5), 0}, {Vec3(0.5, 0, 0.5), 0}, {Vec3(0.5, 0.5, 0), 0}};
    case Lattice::Bcc:
      return {{Vec3(0, 0, 0), 0}, {Vec3(0.5, 0.5, 0.5), 0}};
    case Lattice::RockSalt:
      return {{Vec3(0, 0, 0), 0},       {Vec3(0, 0.5, 0.5), 0},   {Vec3(0.5, 0, 0.5), 0},
              {Vec3(0.5, 0.5, 0), 0},   {Vec3(0.5, 0, 0), 1},     {Vec3(0, 0.5, 0), 1},
              {Vec3(0, 0, 0.5), 1},     {Vec3(0.5, 0.5, 0.5), 1}};
  }
  return {};
}

}  // namespace detail

/// Perfect-lattice supercell with species drawn from the palette.
/// Rock-salt draws sublattice A from even palette slots and B from odd ones.
inline Structure build_lattice(const FamilySpec& spec, Rng& rng) {
  Structure s;
  s.family = spec.name;
  const double a = spec.lattice_constant;
  s.cell.vectors = Mat3::Zero();
  for (int k = 0; k < 3; ++k) s.cell.vectors(k, k) = a * spec.repeat[static_cast<std::size_t>(k)];
  const auto basis = detail::basis_sites(spec.lattice);
  std::vector<int> even, odd;
  for (std::size_t k = 0; k < spec.palette.size(); ++k) (k % 2 == 0 ? even : odd).push_back(spec.palette[k]);
  if (odd.empty()) odd = even;
  for (int ix = 0; ix < spec.repeat[0]; ++ix) {
    for (int iy = 0; iy < spec.repeat[1]; ++iy) {
      for (int iz = 0; iz < spec.repeat[2]; ++iz) {
        for (const auto& site : basis) {
          const Vec3 cart = a * (site.frac + Vec3(ix, iy, iz));
          int z = 0;
          if (spec.lattice == Lattice::RockSalt) {
            const auto& pool = site.sublattice == 0 ? even : odd;
            z = pool[rng.below(pool.size())];
          } else {
            z = spec.palette[rng.below(spec.palette.size())];
          }
          s.species.push_back(z);
          s.positions.push_back(cart);
        }
      }
    }
  }
  return s;
}

inline void perturb(Structure& s, const FamilySpec& spec, Rng& rng) {
  const double amp = spec.amplitude;
  if (spec.name == "strained") {
    const double scale = rng.uniform(0.95, 1.05);
    s.cell.vectors *= scale;
    for (auto& p : s.positions) p *= scale;
  }
  if (spec.name == "mdlike") {
    // Shared low-frequency field: three lattice-periodic plane waves.
    struct Mode {
      Vec3 k;
      Vec3 amplitude;
      double phase;
    };
    std::vector<Mode> modes;
    for (int m = 0; m < 3; ++m) {
      Vec3 k = Vec3::Zero();
      while (k.isZero()) k = Vec3(static_cast<double>(rng.below(3)) - 1.0, static_cast<double>(rng.below(3)) - 1.0,
                                   static_cast<double>(rng.below(3)) - 1.0);
      modes.push_back({k, Vec3(rng.normal(), rng.normal(), rng.normal()), rng.uniform(0.0, 2.0 * M_PI)});
    }
    for (auto& p : s.positions) {
      const Vec3 frac = s.cell.to_fractional(p);
      Vec3 shared = Vec3::Zero();
      for (const auto& mode : modes) shared += mode.amplitude * std::sin(2.0 * M_PI * mode.k.dot(frac) + mode.phase);
      const Vec3 local(rng.normal(), rng.normal(), rng.normal());
      p += amp * (0.6 * shared + 0.5 * local);
    }
    return;
  }
  for (auto& p : s.positions) p += amp * Vec3(rng.normal(), rng.normal(), rng.normal());
}

inline std::string structure_id(const std::string& family, std::size_t index) {
  std::string n = std::to_string(index);
  while (n.size() < 4) n.insert(n.begin(), '0');
  return family + "-" + n;
}

inline std::vector<LabeledStructure> generate_family(const FamilySpec& spec, const OraclePotential& pot) {
  spec.validate();
  pot.validate();
  std::vector<LabeledStructure> out;
  out.reserve(spec.count);
  for (std::size_t index = 0; index < spec.count; ++index) {
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 100 && !done; ++attempt) {
      Rng rng(mix64(spec.seed, index, attempt));
      auto s = build_lattice(spec, rng);
      perturb(s, spec, rng);
      s.id = structure_id(spec.name, index);
      try {
        auto labels = oracle_energy_forces(s, pot);
        out.push_back(LabeledStructure{std::move(s), labels.energy, std::move(labels.forces)});
        done = true;
      } catch (const InvalidInput&) {
        // overlap: resample
      }
    }
    if (!done) {
      throw DataError("family '" + spec.name + "': structure " + std::to_string(index) +
                      " still overlapping after 100 attempts");
    }
  }
  return out;
}

// Dataset file: a JSON header line, then one JSON record per structure.

inline constexpr int kDatasetVersion = 1;

struct DatasetHeader {
  std::optional<OraclePotential> oracle;
};

namespace detail {

inline std::string json_real(double v) {
  if (!std::isfinite(v)) throw DataError("cannot serialize non-finite value");
  if (v == 0.0 && std::signbit(v)) return "-0.0";
  return format_real17(v);
}

inline void append_reals(std::string& out, const double* begin, std::size_t n) {
  out += '[';
  for (std::size_t k = 0; k < n; ++k) {
    if (k) out += ',';
    out += json_real(begin[k]);
  }
  out += ']';
}

}  // namespace detail

inline std::string dataset_header_line(const DatasetHeader& header) {
  std::string line = "{\"format\":\"pamm-dataset\",\"version\":" + std::to_string(kDatasetVersion);
  if (header.oracle) {
    line += ",\"oracle\":{\"cutoff\":" + detail::json_real(header.oracle->cutoff) +
            ",\"seed\":" + std::to_string(header.oracle->seed) +
            ",\"switch_width\":" + detail::json_real(header.oracle->switch_width) + "}";
  }
  line += "}\n";
  return line;
}

inline std::string dataset_record_line(const LabeledStructure& ls) {
  const auto& s = ls.structure;
  std::string line = "{\"id\":" + nlohmann::json(s.id).dump() + ",\"family\":" + nlohmann::json(s.family).dump();
  line += ",\"cell\":";
  std::array<double, 9> cell{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cell[static_cast<std::size_t>(3 * r + c)] = s.cell.vectors(r, c);
  detail::append_reals(line, cell.data(), cell.size());
  line += ",\"species\":[";
  for (std::size_t k = 0; k < s.species.size(); ++k) {
    if (k) line += ',';
    line += std::to_string(s.species[k]);
  }
  line += "],\"positions\":";
  std::vector<double> flat;
  for (const auto& p : s.positions) flat.insert(flat.end(), {p.x(), p.y(), p.z()});
  detail::append_reals(line, flat.data(), flat.size());
  line += ",\"energy\":" + detail::json_real(ls.energy);
  line += ",\"forces\":";
  flat.clear();
  for (const auto& f : ls.forces) flat.insert(flat.end(), {f.x(), f.y(), f.z()});
  detail::append_reals(line, flat.data(), flat.size());
  line += "}\n";
  return line;
}

inline std::string serialize_dataset(const std::vector<LabeledStructure>& structures, const DatasetHeader& header = {}) {
  std::string out = dataset_header_line(header);
  for (const auto& s : structures) out += dataset_record_line(s);
  return out;
}

inline void write_dataset(const std::filesystem::path& path, const std::vector<LabeledStructure>& structures,
                          const DatasetHeader& header = {}) {
  write_file_atomic(path, serialize_dataset(structures, header));
}

namespace detail {

[[noreturn]] inline void dataset_fail(std::size_t line_no, const std::string& what) {
  throw DataError("dataset line " + std::to_string(line_no) + ": " + what);
}

inline std::vector<double> reals(const nlohmann::json& j, const char* key, std::size_t line_no) {
  const auto& a = j.at(key);
  if (!a.is_array()) dataset_fail(line_no, std::string("field '") + key + "' must be an array");
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& v : a) {
    if (!v.is_number()) dataset_fail(line_no, std::string("field '") + key + "' must contain numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace detail

struct DatasetFile {
  DatasetHeader header;
  std::vector<LabeledStructure> structures;
};

inline DatasetFile parse_dataset(std::string_view text) {
  static const std::set<std::string> kRecordKeys = {"id", "family", "cell", "species", "positions", "energy", "forces"};
  static const std::set<std::string> kHeaderKeys = {"format", "version", "oracle"};
  DatasetFile out;
  std::size_t line_no = 0;
  bool saw_header = false;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    if (trim(raw).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception& e) {
      detail::dataset_fail(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) detail::dataset_fail(line_no, "expected a JSON object");
    if (!saw_header) {
      for (const auto& [k, v] : j.items()) {
        if (!kHeaderKeys.count(k)) detail::dataset_fail(line_no, "unknown header field '" + k + "'");
      }
      if (!j.contains("format") || j["format"] != "pamm-dataset") detail::dataset_fail(line_no, "not a pamm-dataset file");
      if (!j.contains("version") || j["version"] != kDatasetVersion) {
        detail::dataset_fail(line_no, "unsupported dataset version (expected " + std::to_string(kDatasetVersion) + ")");
      }
      if (j.contains("oracle")) {
        OraclePotential o;
        try {
          o.seed = j["oracle"].at("seed").get<std::uint64_t>();
          o.cutoff = j["oracle"].at("cutoff").get<double>();
          o.switch_width = j["oracle"].at("switch_width").get<double>();
        } catch (const nlohmann::json::exception& e) {
          detail::dataset_fail(line_no, std::string("bad oracle metadata: ") + e.what());
        }
        out.header.oracle = o;
      }
      saw_header = true;
      continue;
    }
    for (const auto& [k, v] : j.items()) {
      if (!kRecordKeys.count(k)) detail::dataset_fail(line_no, "unknown field '" + k + "'");
    }
    for (const auto& k : kRecordKeys) {
      if (!j.contains(k)) detail::dataset_fail(line_no, "missing field '" + k + "'");
    }
    LabeledStructure ls;
    try {
      ls.structure.id = j["id"].get<std::string>();
      ls.structure.family = j["family"].get<std::string>();
      const auto cell = detail::reals(j, "cell", line_no);
      if (cell.size() != 9) detail::dataset_fail(line_no, "cell must have 9 entries");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) ls.structure.cell.vectors(r, c) = cell[static_cast<std::size_t>(3 * r + c)];
      for (const auto& z : j["species"]) {
        if (!z.is_number_integer()) detail::dataset_fail(line_no, "species must be integers");
        ls.structure.species.push_back(z.get<int>());
      }
      const auto pos = detail::reals(j, "positions", line_no);
      const auto frc = detail::reals(j, "forces", line_no);
      const auto n = ls.structure.species.size();
      if (pos.size() != 3 * n) detail::dataset_fail(line_no, "positions must have 3N entries");
      if (frc.size() != 3 * n) detail::dataset_fail(line_no, "forces must have 3N entries");
      for (std::size_t a = 0; a < n; ++a) {
        ls.structure.positions.emplace_back(pos[3 * a], pos[3 * a + 1], pos[3 * a + 2]);
        ls.forces.emplace_back(frc[3 * a], frc[3 * a + 1], frc[3 * a + 2]);
      }
      if (!j["energy"].is_number()) detail::dataset_fail(line_no, "energy must be a number");
      ls.energy = j["energy"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      detail::dataset_fail(line_no, std::string("bad field type: ") + e.what());
    }
    try {
      ls.structure.validate();
    } catch (const InvalidInput& e) {
      detail::dataset_fail(line_no, e.what());
    }
    out.structures.push_back(std::move(ls));
  }
  if (!saw_header) throw DataError("dataset line 1: missing header line");
  return out;
}

inline DatasetFile read_dataset_file(const std::filesystem::path& path) {
  try {
    return parse_dataset(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline std::vector<LabeledStructure> read_dataset(const std::filesystem::path& path) {
  return read_dataset_file(path).structures;
}

// Splits.

enum class Split : std::uint8_t { Train, Val, Test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

// 80/10/10 by id hash.
inline Split split_of(const std::string& id) {
  const auto bucket = fnv1a64(id) % 10;
  if (bucket < 8) return Split::Train;
  return bucket == 8 ? Split::Val : Split::Test;
}

/// Generation recipe: oracle plus one FamilySpec per family.
struct DataSpec {
  OraclePotential oracle;
  std::vector<FamilySpec> families;

  static DataSpec defaults() {
    DataSpec d;
    d.families = {
        FamilySpec{"rattled-small", Lattice::Fcc, 3.8, {2, 1, 1}, {28, 29}, 0.05, 50, 101},
        FamilySpec{"rattled-large", Lattice::Fcc, 3.8, {2, 1, 1}, {28, 29}, 0.12, 50, 202},
        FamilySpec{"strained", Lattice::RockSalt, 5.4, {1, 1, 1}, {11, 17}, 0.05, 50, 303},
        FamilySpec{"mdlike", Lattice::Bcc, 3.0, {2, 2, 2}, {24, 26, 28}, 0.12, 50, 404},
    };
    return d;
  }

  ConfigMap to_config() const {
    ConfigMap c;
    oracle.store(c);
    std::string names;
    for (const auto& f : families) {
      if (!names.empty()) names += ',';
      names += f.name;
      const std::string p = "family." + f.name + ".";
      c.set(p + "lattice", std::string(lattice_name(f.lattice)));
      c.set(p + "lattice_constant", f.lattice_constant);
      c.set(p + "repeat", std::to_string(f.repeat[0]) + "," + std::to_string(f.repeat[1]) + "," +
                              std::to_string(f.repeat[2]));
      std::string pal;
      for (int z : f.palette) pal += (pal.empty() ? "" : ",") + std::to_string(z);
      c.set(p + "palette", pal);
      c.set(p + "amplitude", f.amplitude);
      c.set(p + "count", f.count);
      c.set(p + "seed", f.seed);
    }
    c.set("families", names);
    return c;
  }

  // Keys absent from `c` keep their default; a family not in the defaults
  // must be fully specified.
  static DataSpec from_config(const ConfigMap& c) {
    auto d = defaults();
    d.oracle = OraclePotential::load(c, d.oracle);
    if (c.has("families")) {
      std::vector<FamilySpec> chosen;
      for (const auto& raw : split(c.get("families"), ',')) {
        const std::string name(trim(raw));
        auto it = std::find_if(d.families.begin(), d.families.end(), [&](const auto& f) { return f.name == name; });
        FamilySpec f = it != d.families.end() ? *it : FamilySpec{};
        f.name = name;
        chosen.push_back(f);
      }
      d.families = chosen;
    }
    for (auto& f : d.families) {
      const std::string p = "family." + f.name + ".";
      try {
        if (c.has(p + "lattice")) f.lattice = parse_lattice(c.get(p + "lattice"));
        if (c.has(p + "lattice_constant")) f.lattice_constant = c.get_real(p + "lattice_constant");
        if (c.has(p + "repeat")) {
          const auto parts = split(c.get(p + "repeat"), ',');
          if (parts.size() != 3) throw InvalidInput("expected three integers");
          for (std::size_t k = 0; k < 3; ++k) f.repeat[k] = parse_int<int>(trim(parts[k]));
        }
        if (c.has(p + "palette")) {
          f.palette.clear();
          for (const auto& z : split(c.get(p + "palette"), ',')) f.palette.push_back(parse_int<int>(trim(z)));
        }
        if (c.has(p + "amplitude")) f.amplitude = c.get_real(p + "amplitude");
        if (c.has(p + "count")) f.count = c.get_int<std::size_t>(p + "count");
        if (c.has(p + "seed")) f.seed = c.get_int<std::uint64_t>(p + "seed");
      } catch (const InvalidInput& e) {
        throw InvalidInput("family '" + f.name + "': " + e.what());
      }
    }
    d.validate();
    return d;
  }

  void validate() const {
    oracle.validate();
    if (families.empty()) throw InvalidInput("data spec has no families");
    std::set<std::string> seen;
    for (const auto& f : families) {
      f.validate();
      if (!seen.insert(f.name).second) throw InvalidInput("duplicate family '" + f.name + "'");
    }
  }
};

/// All families of a generated dataset plus the split manifest.
struct Dataset {
  std::vector<LabeledStructure> structures;
  std::vector<Split> splits;  // parallel to structures
  std::optional<OraclePotential> oracle;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < splits.size(); ++k) {
      if (splits[k] == s) out.push_back(k);
    }
    return out;
  }

  std::vector<std::string> families() const {
    std::vector<std::string> out;
    for (const auto& s : structures) {
      if (std::find(out.begin(), out.end(), s.structure.family) == out.end()) out.push_back(s.structure.family);
    }
    return out;
  }
};

inline Dataset generate_dataset(const DataSpec& spec) {
  spec.validate();
  Dataset d;
  d.oracle = spec.oracle;
  for (const auto& f : spec.families) {
    for (auto& s : generate_family(f, spec.oracle)) {
      d.splits.push_back(split_of(s.structure.id));
      d.structures.push_back(std::move(s));
    }
  }
  return d;
}

inline std::string manifest_text(const Dataset& d) {
  std::string out = "id,family,split\n";
  for (std::size_t k = 0; k < d.structures.size(); ++k) {
    out += d.structures[k].structure.id + "," + d.structures[k].structure.family + "," +
           std::string(split_name(d.splits[k])) + "\n";
  }
  return out;
}

// <dir>/<family>.jsonl for each family plus <dir>/manifest.csv
inline void write_dataset_dir(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  DatasetHeader header{d.oracle};
  for (const auto& fam : d.families()) {
    std::vector<LabeledStructure> members;
    for (const auto& s : d.structures) {
      if (s.structure.family == fam) members.push_back(s);
    }
    write_dataset(dir / (fam + ".jsonl"), members, header);
  }
  write_file_atomic(dir / "manifest.csv", manifest_text(d));
}

inline Dataset load_dataset_dir(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.csv";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no manifest.csv in " + dir.string());
  const auto lines = split(read_file(manifest_path), '\n');
  if (lines.empty() || trim(lines[0]) != "id,family,split") throw DataError(manifest_path.string() + ": bad header");
  std::vector<std::tuple<std::string, std::string, Split>> rows;
  std::vector<std::string> families;
  for (std::size_t k = 1; k < lines.size(); ++k) {
    if (trim(lines[k]).empty()) continue;
    const auto cols = split(trim(lines[k]), ',');
    if (cols.size() != 3) throw DataError(manifest_path.string() + " line " + std::to_string(k + 1) + ": expected 3 columns");
    rows.emplace_back(cols[0], cols[1], parse_split(cols[2]));
    if (std::find(families.begin(), families.end(), cols[1]) == families.end()) families.push_back(cols[1]);
  }
  std::map<std::string, LabeledStructure> by_id;
  Dataset d;
  for (const auto& fam : families) {
    auto file = read_dataset_file(dir / (fam + ".jsonl"));
    if (file.header.oracle) d.oracle = file.header.oracle;
    for (auto& s : file.structures) {
      const auto id = s.structure.id;
      if (!by_id.emplace(id, std::move(s)).second) throw DataError("duplicate structure id '" + id + "'");
    }
  }
  for (const auto& [id, fam, sp] : rows) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("manifest lists unknown structure '" + id + "'");
    if (it->second.structure.family != fam) throw DataError("manifest family mismatch for '" + id + "'");
    d.structures.push_back(it->second);
    d.splits.push_back(sp);
  }
  if (d.structures.size() != by_id.size()) throw DataError("dataset files contain structures missing from the manifest");
  return d;
}

}  // namespace pamm
