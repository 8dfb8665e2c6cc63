#pragma once

// Independent reference implementations used by the tests.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "grf/graph.hpp"
#include "grf/linalg.hpp"
#include "grf/random.hpp"

namespace oracle {

inline Eigen::MatrixXd to_eigen(const grf::Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

inline double spectral_norm(const grf::Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(m));
  return svd.singularValues()(0);
}

inline double logabsdet(const grf::Matrix& m) {
  return std::log(std::abs(to_eigen(m).determinant()));
}

inline grf::Matrix triple_loop_matmul(const grf::Matrix& a, const grf::Matrix& b) {
  grf::Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

// Laplace expansion along the first row.
inline double cofactor_det(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  if (n == 1) return m[0][0];
  double det = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<std::vector<double>> minor;
    for (std::size_t r = 1; r < n; ++r) {
      std::vector<double> row;
      for (std::size_t k = 0; k < n; ++k)
        if (k != c) row.push_back(m[r][k]);
      minor.push_back(row);
    }
    det += (c % 2 == 0 ? 1.0 : -1.0) * m[0][c] * cofactor_det(minor);
  }
  return det;
}

inline grf::Matrix random_matrix(std::size_t r, std::size_t c, grf::Rng& rng, double scale = 1.0) {
  grf::Matrix m(r, c);
  grf::NormalSampler nd;
  for (double& x : m.flat()) x = scale * nd(rng);
  return m;
}

inline double max_abs_diff(const grf::Matrix& a, const grf::Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// Labelled-graph isomorphism by backtracking over atom assignments.
inline bool isomorphic(const grf::Molecule& a, const grf::Molecule& b) {
  const int n = a.atom_count();
  if (n != b.atom_count() || a.bonds.size() != b.bonds.size()) return false;
  std::vector<std::vector<int>> ma(n, std::vector<int>(n, 0)), mb(n, std::vector<int>(n, 0));
  for (const auto& e : a.bonds) ma[e.i][e.j] = ma[e.j][e.i] = e.order;
  for (const auto& e : b.bonds) mb[e.i][e.j] = mb[e.j][e.i] = e.order;
  std::vector<int> map(n, -1);
  std::vector<bool> used(n, false);
  std::function<bool(int)> go = [&](int i) {
    if (i == n) return true;
    for (int j = 0; j < n; ++j) {
      if (used[j] || a.atoms[i] != b.atoms[j]) continue;
      bool ok = true;
      for (int k = 0; k < i && ok; ++k) ok = ma[i][k] == mb[j][map[k]];
      if (!ok) continue;
      used[j] = true;
      map[i] = j;
      if (go(i + 1)) return true;
      used[j] = false;
    }
    return false;
  };
  return go(0);
}

inline grf::Molecule relabel(const grf::Molecule& m, const std::vector<int>& perm) {
  // new atom perm[i] is old atom i
  grf::Molecule out;
  out.atoms.resize(m.atoms.size());
  for (std::size_t i = 0; i < m.atoms.size(); ++i) out.atoms[perm[i]] = m.atoms[i];
  for (const auto& b : m.bonds) out.bonds.push_back({perm[b.i], perm[b.j], b.order});
  return out;
}

inline std::vector<int> random_permutation(int n, grf::Rng& rng) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(p[i], p[rng() % (i + 1)]);
  return p;
}

// A random valid one-hot graph: random atom count, types and bonds.
inline grf::MolGraph random_graph(const grf::GraphShape& s, grf::Rng& rng) {
  grf::MolGraph g{s, grf::Tensor3(s.n_max, s.n_max, s.n_bond_types), grf::Matrix(s.n_max, s.n_atom_types)};
  const int real = 1 + static_cast<int>(rng() % s.n_max);
  for (int i = 0; i < s.n_max; ++i) {
    const int t = i < real ? static_cast<int>(rng() % (s.n_atom_types - 1)) : s.virtual_atom();
    g.features(i, t) = 1.0;
  }
  for (int i = 0; i < s.n_max; ++i) {
    g.adjacency(i, i, s.virtual_bond()) = 1.0;
    for (int j = i + 1; j < s.n_max; ++j) {
      const int r = (i < real && j < real) ? static_cast<int>(rng() % s.n_bond_types) : s.virtual_bond();
      g.adjacency(i, j, r) = g.adjacency(j, i, r) = 1.0;
    }
  }
  return g;
}

}  // namespace oracle
