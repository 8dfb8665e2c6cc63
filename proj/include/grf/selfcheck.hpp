#pragma once

// Randomised checks of the contraction guarantees: the matrix-norm inequality,
// the spectrum of the normalised adjacency, Lip(R) < 1 for normalised blocks,
// the log-determinant series against an exact determinant, and convergence of
// the fixed-point inverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "grf/flow.hpp"
#include "grf/inversion.hpp"
#include "grf/likelihood.hpp"
#include "grf/linalg.hpp"
#include "grf/random.hpp"

namespace grf {

// sqrt(lambda_max(W^T W)) via Jacobi; the certified counterpart of the
// power-iteration estimate.
inline double exact_spectral_norm(const Matrix& w) {
  if (w.size() == 0) return 0.0;
  const auto ev = sym_eigenvalues(matmul_tn(w, w));
  return std::sqrt(std::max(0.0, ev.back()));
}

// ||U V^T||_2^2 = lambda_max(H^{1/2} G H^{1/2}) with G = U^T U, H = V^T V.
inline double exact_spectral_norm(const Weight& w) {
  if (!w.low_rank()) return exact_spectral_norm(w.full);
  const SymmetricEigen h = sym_eigen(matmul_tn(w.v, w.v));
  const std::size_t r = h.values.size();
  Matrix root(r, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < r; ++k)
        root(i, j) += h.vectors(i, k) * std::sqrt(std::max(0.0, h.values[k])) * h.vectors(j, k);
  Matrix m = matmul(matmul(root, matmul_tn(w.u, w.u)), root);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j) m(i, j) = m(j, i) = 0.5 * (m(i, j) + m(j, i));
  return std::sqrt(std::max(0.0, sym_eigenvalues(m).back()));
}

// prod_l sum_c ||W_{l,c}||_2 with exact norms.
inline double certified_lipschitz_bound(const ResidualBlock& b) {
  double bound = 1.0;
  for (const Layer& l : b.layers) {
    double s = 0.0;
    for (const Weight& w : l.weights) s += exact_spectral_norm(w);
    bound *= s;
  }
  return bound;
}

struct SelfcheckRow {
  std::string name;
  std::size_t instances = 0;
  std::size_t violations = 0;
  double worst = 0.0;  // largest observed statistic (ratio, excess or error)
  double limit = 0.0;
  bool pass() const { return violations == 0; }
};

struct SelfcheckOptions {
  std::size_t instances = 1000;
  std::uint64_t seed = 0;
  // Test hook: > 0 rescales one weight per block to this spectral norm after
  // normalisation, which must make the Lipschitz check fail.
  double inject_sigma = 0.0;
  const GrfModel* model = nullptr;  // also check the blocks of this model
};

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  NormalSampler nd;
  for (double& x : m.flat()) x = scale * nd(rng);
  return m;
}

inline std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

// Random symmetric 0/1 adjacency with empty diagonal.
inline Matrix random_adjacency(std::size_t n, Rng& rng) {
  Matrix a(n, n);
  const double density = uniform01(rng);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (uniform01(rng) < density) a(i, j) = a(j, i) = 1.0;
  return a;
}

inline void inject(Weight& w, double sigma) {
  const double s = exact_spectral_norm(w);
  if (s <= 0.0) return;
  if (w.low_rank()) {
    w.u *= std::sqrt(sigma / s);
    w.v *= std::sqrt(sigma / s);
  } else {
    w.full *= sigma / s;
  }
  w.sn.sigma_estimate = sigma;
}

// A small normalised block of either kind, with its propagation matrices.
struct RandomBlock {
  ResidualBlock block;
  std::vector<Matrix> props;
  std::size_t rows = 0, cols = 0;
};

struct RandomBlockSpec {
  std::size_t max_nodes = 6;
  std::size_t max_types = 4;  // feature columns, virtual atom included
  int kind = -1;              // -1 either, 0 dense, 1 graph
};

inline RandomBlock random_block(Rng& rng, std::uint64_t seed, double inject_sigma, RandomBlockSpec spec = {}) {
  ModelConfig cfg;
  cfg.n_max = static_cast<int>(uniform_int(rng, 1, spec.max_nodes));
  cfg.vocab = AtomVocabulary(std::vector<std::string>(uniform_int(rng, 1, spec.max_types - 1), "C"));
  cfg.n_bond_types = static_cast<int>(uniform_int(rng, 2, 4));
  cfg.init_seed = seed;
  cfg.init_gain = 1.0;
  cfg.bias = (rng() & 1) != 0;
  const bool coin = (rng() & 1) != 0;
  const bool graph = spec.kind < 0 ? coin : spec.kind == 1;
  RandomBlock out;
  if (graph) {
    cfg.gcn_blocks = 1;
    cfg.mlp_blocks = 0;
    cfg.gcn_layers = static_cast<int>(uniform_int(rng, 1, 3));
    cfg.gcn_mode = (rng() & 1) ? GcnMode::PerChannel : GcnMode::Collapsed;
  } else {
    cfg.gcn_blocks = 0;
    cfg.mlp_blocks = 1;
    cfg.mlp_layers = static_cast<int>(uniform_int(rng, 1, 3));
    cfg.adjacency_layout = static_cast<AdjacencyLayout>(uniform_int(rng, 0, 2));
    cfg.adjacency_rank = (rng() & 1) ? static_cast<int>(uniform_int(rng, 1, 3)) : 0;
  }
  GrfModel m = make_model(cfg);
  if (graph) {
    out.block = m.feature_blocks.front();
    const std::size_t n = static_cast<std::size_t>(cfg.n_max);
    const std::size_t channels = out.block.layers.front().weights.size();
    for (std::size_t c = 0; c < channels; ++c) out.props.push_back(normalized_with_self_loops(random_adjacency(n, rng)));
    out.rows = n;
    out.cols = static_cast<std::size_t>(cfg.shape().n_atom_types);
  } else {
    out.block = m.adjacency_blocks.front();
    std::tie(out.rows, out.cols) = cfg.adjacency_view();
  }
  if (out.block.layers.front().bias.size() > 0) {
    for (Layer& l : out.block.layers)
      for (double& x : l.bias.flat()) x = 0.5 * (uniform01(rng) - 0.5);
  }
  if (inject_sigma > 0.0) inject(out.block.layers.front().weights.front(), inject_sigma);
  return out;
}

}  // namespace detail

// ||A X||_F <= ||A||_2 ||X||_F + 1e-9.
inline SelfcheckRow check_matrix_norm_inequality(std::size_t instances, std::uint64_t seed) {
  SelfcheckRow row{"frobenius_spectral_bound", instances, 0, -std::numeric_limits<double>::infinity(), 1e-9};
  Rng rng(derive_seed(seed, {11}));
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t p = detail::uniform_int(rng, 1, 8), q = detail::uniform_int(rng, 1, 8),
                      r = detail::uniform_int(rng, 1, 8);
    const Matrix a = detail::random_matrix(p, q, rng);
    const Matrix x = detail::random_matrix(q, r, rng);
    const double excess = frobenius_norm(matmul(a, x)) - exact_spectral_norm(a) * frobenius_norm(x);
    row.worst = std::max(row.worst, excess);
    if (excess > row.limit) ++row.violations;
  }
  return row;
}

// Every eigenvalue of D~^{-1/2}(A+I)D~^{-1/2} lies in [-1, 1] (+1e-9).
inline SelfcheckRow check_normalized_adjacency_spectrum(std::size_t instances, std::uint64_t seed) {
  SelfcheckRow row{"adjacency_spectrum", instances, 0, 0.0, 1.0 + 1e-9};
  Rng rng(derive_seed(seed, {12}));
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = detail::uniform_int(rng, 1, 12);
    const auto ev = sym_eigenvalues(normalized_with_self_loops(detail::random_adjacency(n, rng)));
    const double rho = std::max(std::abs(ev.front()), std::abs(ev.back()));
    row.worst = std::max(row.worst, rho);
    if (rho > row.limit) ++row.violations;
  }
  return row;
}

// A normalised block is a contraction: both the certified bound and the
// empirical ratio ||R(x) - R(y)|| / ||x - y|| stay below 1.
inline SelfcheckRow check_block_contraction(std::size_t instances, std::uint64_t seed, double inject_sigma) {
  SelfcheckRow row{"block_lipschitz", instances, 0, 0.0, 1.0};
  Rng rng(derive_seed(seed, {13}));
  for (std::size_t t = 0; t < instances; ++t) {
    const detail::RandomBlock rb = detail::random_block(rng, derive_seed(seed, {13, t}), inject_sigma);
    const double certified = certified_lipschitz_bound(rb.block);
    const Matrix x = detail::random_matrix(rb.rows, rb.cols, rng, 2.0);
    const Matrix y = x + detail::random_matrix(rb.rows, rb.cols, rng, uniform01(rng) + 1e-3);
    const double ratio =
        frobenius_norm(rb.block.forward(x, rb.props) - rb.block.forward(y, rb.props)) / frobenius_norm(x - y);
    const double stat = std::max(certified, ratio);
    row.worst = std::max(row.worst, stat);
    if (!(stat < row.limit)) ++row.violations;
  }
  return row;
}

inline SelfcheckRow check_model_contraction(const GrfModel& model, double inject_sigma) {
  SelfcheckRow row{"model_block_lipschitz", 0, 0, 0.0, 1.0};
  GrfModel m = model;
  m.for_each_block([&](ResidualBlock& b) {
    if (inject_sigma > 0.0) detail::inject(b.layers.front().weights.front(), inject_sigma);
    const double bound = certified_lipschitz_bound(b);
    ++row.instances;
    row.worst = std::max(row.worst, bound);
    if (!(bound < 1.0)) ++row.violations;
  });
  return row;
}

// Series estimate with many probes against log|det(I + J_R)| on small blocks.
inline SelfcheckRow check_logdet_oracle(std::size_t instances, std::uint64_t seed, int series_terms = 20,
                                        int samples = 256, ProbeKind probe = ProbeKind::Orthogonal,
                                        detail::RandomBlockSpec spec = {4, 3, 1}) {
  SelfcheckRow row{"logdet_series_vs_exact", instances, 0, 0.0, 0.02};
  Rng rng(derive_seed(seed, {14}));
  for (std::size_t t = 0; t < instances; ++t) {
    const detail::RandomBlock rb = detail::random_block(rng, derive_seed(seed, {14, t}), 0.0, spec);
    const Matrix x = detail::random_matrix(rb.rows, rb.cols, rng);
    Matrix j = explicit_jacobian(rb.block, x, rb.props);
    for (std::size_t i = 0; i < j.rows(); ++i) j(i, i) += 1.0;
    const double exact = exact_logabsdet(j).value;
    LogDetEstimatorConfig est{series_terms, samples, probe, derive_seed(seed, {14, t, 1})};
    const double approx = logdet_series(rb.block, x, rb.props, est);
    const double err = std::abs(approx - exact);
    const double rel = std::abs(exact) > 0.5 ? err / std::abs(exact) : err / 0.5;  // 0.01 absolute near zero
    row.worst = std::max(row.worst, rel);
    if (rel > row.limit) ++row.violations;
  }
  return row;
}

// y = x + R(x) for random x; after n fixed-point steps the error obeys
// ||x_n - x|| <= L^n ||R(x)|| with L the certified Lipschitz bound. The
// statistic is the error divided by that bound.
inline SelfcheckRow check_inversion(std::size_t instances, std::uint64_t seed, int iterations = 60) {
  SelfcheckRow row{"fixed_point_inversion", instances, 0, 0.0, 1.0};
  Rng rng(derive_seed(seed, {15}));
  for (std::size_t t = 0; t < instances; ++t) {
    const detail::RandomBlock rb = detail::random_block(rng, derive_seed(seed, {15, t}), 0.0);
    const Matrix x = detail::random_matrix(rb.rows, rb.cols, rng);
    const Matrix r = rb.block.forward(x, rb.props);
    const Matrix xr = invert_residual_layer(rb.block, x + r, rb.props, InversionConfig{iterations, 0.0, 5});
    const double bound = std::pow(certified_lipschitz_bound(rb.block), iterations) * frobenius_norm(r);
    const double ratio = frobenius_norm(xr - x) / (bound * (1.0 + 1e-6) + 1e-13);
    row.worst = std::max(row.worst, ratio);
    if (!(ratio <= row.limit)) ++row.violations;
  }
  return row;
}

inline std::vector<SelfcheckRow> run_selfcheck(const SelfcheckOptions& opt) {
  std::vector<SelfcheckRow> rows;
  rows.push_back(check_matrix_norm_inequality(opt.instances, opt.seed));
  rows.push_back(check_normalized_adjacency_spectrum(opt.instances, opt.seed));
  rows.push_back(check_block_contraction(opt.instances, opt.seed, opt.inject_sigma));
  if (opt.model) rows.push_back(check_model_contraction(*opt.model, opt.inject_sigma));
  rows.push_back(check_logdet_oracle(std::max<std::size_t>(1, opt.instances / 100), opt.seed));
  if (opt.inject_sigma <= 0.0) rows.push_back(check_inversion(std::max<std::size_t>(1, opt.instances / 10), opt.seed));
  return rows;
}

}  // namespace grf
