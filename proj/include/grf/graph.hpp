#pragma once

// Molecular graph tensors: padding with virtual atoms and "no bond" channels,
// uniform dequantisation, argmax quantisation, and the augmented normalised
// adjacency used to condition the feature flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "grf/error.hpp"
#include "grf/linalg.hpp"
#include "grf/random.hpp"
#include "json.hpp"

namespace grf {

struct Bond {
  int i = 0;
  int j = 0;
  int order = 1;  // 1 single, 2 double, 3 triple
  bool operator==(const Bond&) const = default;
};

// Unpadded molecule with explicit heavy atoms and bond orders.
struct Molecule {
  std::vector<std::string> atoms;
  std::vector<Bond> bonds;

  int atom_count() const { return static_cast<int>(atoms.size()); }
  bool operator==(const Molecule&) const = default;
};

// Line format: {"n": 3, "atom_types": ["C","C","O"], "bonds": [[0,1,1],[1,2,2]]}
inline nlohmann::json molecule_to_json(const Molecule& m) {
  nlohmann::json bonds = nlohmann::json::array();
  for (const Bond& b : m.bonds) bonds.push_back({b.i, b.j, b.order});
  return {{"n", m.atoms.size()}, {"atom_types", m.atoms}, {"bonds", bonds}};
}

inline Molecule molecule_from_json(const nlohmann::json& j) {
  try {
    Molecule m;
    m.atoms = j.at("atom_types").get<std::vector<std::string>>();
    if (j.at("n").get<std::size_t>() != m.atoms.size()) {
      throw DataError("graph record: n does not match atom_types length");
    }
    for (const auto& b : j.at("bonds")) {
      if (!b.is_array() || b.size() != 3) throw DataError("graph record: bond must be [i, j, order]");
      Bond bond{b[0].get<int>(), b[1].get<int>(), b[2].get<int>()};
      if (bond.i < 0 || bond.j < 0 || bond.i >= m.atom_count() || bond.j >= m.atom_count() ||
          bond.i == bond.j) {
        throw DataError("graph record: bond endpoint out of range");
      }
      m.bonds.push_back(bond);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("graph record: ") + e.what());
  }
}

// Atom symbols in feature-column order. The virtual atom takes the column after
// the last symbol.
class AtomVocabulary {
 public:
  AtomVocabulary() : symbols_{"C", "N", "O", "F"} {}
  explicit AtomVocabulary(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
    if (symbols_.empty()) throw DataError("atom vocabulary is empty");
  }

  const std::vector<std::string>& symbols() const { return symbols_; }
  int feature_count() const { return static_cast<int>(symbols_.size()) + 1; }
  int virtual_index() const { return static_cast<int>(symbols_.size()); }

  int index_of(const std::string& symbol) const {
    auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
    if (it == symbols_.end()) throw DataError("atom type '" + symbol + "' is not in the vocabulary");
    return static_cast<int>(it - symbols_.begin());
  }
  bool contains(const std::string& symbol) const {
    return std::find(symbols_.begin(), symbols_.end(), symbol) != symbols_.end();
  }
  const std::string& symbol(int index) const { return symbols_.at(static_cast<std::size_t>(index)); }

  bool operator==(const AtomVocabulary&) const = default;

 private:
  std::vector<std::string> symbols_;
};

struct GraphShape {
  int n_max = 9;         // N
  int n_atom_types = 5;  // M, including the virtual atom
  int n_bond_types = 4;  // R, including the "no bond" channel

  int virtual_atom() const { return n_atom_types - 1; }
  int virtual_bond() const { return n_bond_types - 1; }
  std::size_t adjacency_size() const {
    return static_cast<std::size_t>(n_max) * n_max * n_bond_types;
  }
  std::size_t feature_size() const { return static_cast<std::size_t>(n_max) * n_atom_types; }
  std::size_t latent_dimension() const { return adjacency_size() + feature_size(); }
  bool operator==(const GraphShape&) const = default;
};

// One-hot adjacency tensor (N x N x R) and feature matrix (N x M).
struct MolGraph {
  GraphShape shape;
  Tensor3 adjacency;
  Matrix features;

  bool operator==(const MolGraph&) const = default;

  bool is_virtual_atom(int i) const { return features(i, shape.virtual_atom()) == 1.0; }

  int atom_type(int i) const {
    for (int m = 0; m < shape.n_atom_types; ++m)
      if (features(i, m) == 1.0) return m;
    return -1;
  }
  // Channel holding the one-hot entry for pair (i, j).
  int bond_channel(int i, int j) const {
    for (int r = 0; r < shape.n_bond_types; ++r)
      if (adjacency(i, j, r) == 1.0) return r;
    return -1;
  }
  int real_atom_count() const {
    int n = 0;
    for (int i = 0; i < shape.n_max; ++i) n += is_virtual_atom(i) ? 0 : 1;
    return n;
  }

  // Empty string when every invariant holds, otherwise a description of the first violation.
  std::string invariant_violation() const {
    const int n = shape.n_max, m_types = shape.n_atom_types, r_types = shape.n_bond_types;
    if (adjacency.dim1() != static_cast<std::size_t>(n) ||
        adjacency.dim2() != static_cast<std::size_t>(n) ||
        adjacency.dim3() != static_cast<std::size_t>(r_types) ||
        features.rows() != static_cast<std::size_t>(n) ||
        features.cols() != static_cast<std::size_t>(m_types)) {
      return "tensor shapes do not match (N, M, R)";
    }
    for (int i = 0; i < n; ++i) {
      int ones = 0;
      for (int m = 0; m < m_types; ++m) {
        const double x = features(i, m);
        if (x != 0.0 && x != 1.0) return "feature entry not in {0,1}";
        ones += x == 1.0;
      }
      if (ones != 1) return "feature row " + std::to_string(i) + " is not one-hot";
      for (int j = 0; j < n; ++j) {
        int hot = 0;
        for (int r = 0; r < r_types; ++r) {
          const double x = adjacency(i, j, r);
          if (x != 0.0 && x != 1.0) return "adjacency entry not in {0,1}";
          if (x != adjacency(j, i, r)) return "adjacency is not symmetric";
          hot += x == 1.0;
        }
        if (hot != 1) return "adjacency slice is not one-hot";
        if (i == j && adjacency(i, i, shape.virtual_bond()) != 1.0) return "self bond present";
      }
    }
    return {};
  }
  bool valid() const { return invariant_violation().empty(); }
};

struct DequantGraph {
  Tensor3 adjacency_c;
  Matrix features_c;
  double noise_scale = 0.9;
};

struct LatentPoint {
  Tensor3 z_adjacency;
  Matrix z_features;

  std::vector<double> concat() const {
    std::vector<double> z(z_adjacency.flat().begin(), z_adjacency.flat().end());
    z.insert(z.end(), z_features.flat().begin(), z_features.flat().end());
    return z;
  }
  static LatentPoint split(std::span<const double> z, const GraphShape& s) {
    if (z.size() != s.latent_dimension()) throw ShapeError("LatentPoint::split: wrong length");
    const std::size_t na = s.adjacency_size();
    LatentPoint p;
    p.z_adjacency = Tensor3(s.n_max, s.n_max, s.n_bond_types,
                            std::vector<double>(z.begin(), z.begin() + na));
    p.z_features = Matrix(s.n_max, s.n_atom_types, std::vector<double>(z.begin() + na, z.end()));
    return p;
  }
};

// ---------------------------------------------------------------------------

inline int bond_channel_for_order(int order, const GraphShape& s) {
  if (order < 1 || order >= s.n_bond_types) {
    throw DataError("bond order " + std::to_string(order) + " has no adjacency channel");
  }
  return order - 1;
}

// Pads a molecule to n_max nodes. Real atoms keep their indices 0..n-1.
inline MolGraph pad_graph(const Molecule& mol, const AtomVocabulary& vocab, int n_max,
                          int n_bond_types = 4) {
  if (mol.atom_count() > n_max) {
    throw DataError("molecule has " + std::to_string(mol.atom_count()) +
                    " atoms, more than n_max = " + std::to_string(n_max));
  }
  GraphShape s{n_max, vocab.feature_count(), n_bond_types};
  MolGraph g{s, Tensor3(n_max, n_max, n_bond_types), Matrix(n_max, vocab.feature_count())};
  for (int i = 0; i < n_max; ++i) {
    const int t = i < mol.atom_count() ? vocab.index_of(mol.atoms[i]) : vocab.virtual_index();
    g.features(i, t) = 1.0;
    for (int j = 0; j < n_max; ++j) g.adjacency(i, j, s.virtual_bond()) = 1.0;
  }
  for (const Bond& b : mol.bonds) {
    if (b.i == b.j || b.i < 0 || b.j < 0 || b.i >= mol.atom_count() || b.j >= mol.atom_count()) {
      throw DataError("bond endpoint out of range");
    }
    const int r = bond_channel_for_order(b.order, s);
    for (auto [p, q] : {std::pair{b.i, b.j}, std::pair{b.j, b.i}}) {
      g.adjacency(p, q, s.virtual_bond()) = 0.0;
      g.adjacency(p, q, r) = 1.0;
    }
  }
  return g;
}

// Drops virtual atoms and every bond touching one. Remaining atoms are
// renumbered in index order.
inline Molecule unpad_graph(const MolGraph& g, const AtomVocabulary& vocab) {
  Molecule mol;
  std::vector<int> new_index(g.shape.n_max, -1);
  for (int i = 0; i < g.shape.n_max; ++i) {
    const int t = g.atom_type(i);
    if (t < 0 || t == g.shape.virtual_atom()) continue;
    new_index[i] = mol.atom_count();
    mol.atoms.push_back(vocab.symbol(t));
  }
  for (int i = 0; i < g.shape.n_max; ++i) {
    for (int j = i + 1; j < g.shape.n_max; ++j) {
      if (new_index[i] < 0 || new_index[j] < 0) continue;
      const int r = g.bond_channel(i, j);
      if (r >= 0 && r != g.shape.virtual_bond()) mol.bonds.push_back({new_index[i], new_index[j], r + 1});
    }
  }
  return mol;
}

// A' = A + c u, X' = X + c u with u ~ U[0, 1) drawn independently per entry.
inline DequantGraph dequantize(const MolGraph& g, double c, std::uint64_t rng_seed) {
  if (!(c > 0.0 && c < 1.0)) throw std::invalid_argument("dequantize: c must lie in (0, 1)");
  Rng rng(derive_seed(rng_seed, {stream::dequant}));
  DequantGraph d{g.adjacency, g.features, c};
  for (double& x : d.adjacency_c.flat()) x += c * uniform01(rng);
  for (double& x : d.features_c.flat()) x += c * uniform01(rng);
  return d;
}

// Channel argmax after averaging (i, j) and (j, i); ties go to the lowest
// channel. Diagonal pairs are forced to the "no bond" channel.
inline Tensor3 quantize_adjacency(const Tensor3& a) {
  const std::size_t n = a.dim1(), r_types = a.dim3();
  if (a.dim2() != n || r_types == 0) throw ShapeError("quantize_adjacency: expected N x N x R");
  Tensor3 out(n, n, r_types);
  for (std::size_t i = 0; i < n; ++i) {
    out(i, i, r_types - 1) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      std::size_t best = 0;
      double best_val = -std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < r_types; ++r) {
        const double v = 0.5 * (a(i, j, r) + a(j, i, r));
        if (v > best_val) {
          best_val = v;
          best = r;
        }
      }
      out(i, j, best) = 1.0;
      out(j, i, best) = 1.0;
    }
  }
  return out;
}

inline Matrix quantize_features(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t m = 1; m < x.cols(); ++m)
      if (x(i, m) > x(i, best)) best = m;
    if (x.cols() > 0) out(i, best) = 1.0;
  }
  return out;
}

inline MolGraph quantize(const GraphShape& s, const Tensor3& a_cont, const Matrix& x_cont) {
  return MolGraph{s, quantize_adjacency(a_cont), quantize_features(x_cont)};
}

// Undirected 0/1 adjacency over real bonds (any non-virtual channel).
inline Matrix collapsed_adjacency(const MolGraph& g) {
  const int n = g.shape.n_max;
  Matrix a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (int r = 0; r < g.shape.virtual_bond(); ++r) s += g.adjacency(i, j, r);
      a(i, j) = std::min(1.0, s);
    }
  return a;
}

// D~^{-1/2} (A + I) D~^{-1/2} for a 0/1 symmetric adjacency matrix.
inline Matrix normalized_with_self_loops(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix at = a + Matrix::identity(n);
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += at(i, j);
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) at(i, j) *= inv_sqrt[i] * inv_sqrt[j];
  return at;
}

// P over the collapsed bond graph.
inline Matrix augmented_normalized_adjacency(const MolGraph& g) {
  return normalized_with_self_loops(collapsed_adjacency(g));
}

// One P per real bond channel, for the relational (per-channel) GCN variant.
inline std::vector<Matrix> channel_normalized_adjacency(const MolGraph& g) {
  const int n = g.shape.n_max;
  std::vector<Matrix> out;
  for (int r = 0; r < g.shape.virtual_bond(); ++r) {
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j) a(i, j) = g.adjacency(i, j, r);
    out.push_back(normalized_with_self_loops(a));
  }
  return out;
}

// Node relabelling helpers: new index k holds old node perm[k].
inline MolGraph permute_nodes(const MolGraph& g, std::span<const int> perm) {
  MolGraph out = g;
  const int n = g.shape.n_max;
  for (int a = 0; a < n; ++a) {
    for (int m = 0; m < g.shape.n_atom_types; ++m) out.features(a, m) = g.features(perm[a], m);
    for (int b = 0; b < n; ++b)
      for (int r = 0; r < g.shape.n_bond_types; ++r)
        out.adjacency(a, b, r) = g.adjacency(perm[a], perm[b], r);
  }
  return out;
}

inline Tensor3 permute_nodes(const Tensor3& t, std::span<const int> perm) {
  Tensor3 out = t;
  for (std::size_t a = 0; a < t.dim1(); ++a)
    for (std::size_t b = 0; b < t.dim2(); ++b)
      for (std::size_t r = 0; r < t.dim3(); ++r)
        out(a, b, r) = t(static_cast<std::size_t>(perm[a]), static_cast<std::size_t>(perm[b]), r);
  return out;
}

inline Matrix permute_rows(const Matrix& x, std::span<const int> perm) {
  Matrix out = x;
  for (std::size_t a = 0; a < x.rows(); ++a)
    for (std::size_t m = 0; m < x.cols(); ++m) out(a, m) = x(static_cast<std::size_t>(perm[a]), m);
  return out;
}

}  // namespace grf
