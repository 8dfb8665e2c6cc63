#pragma once

// Gaussian prior, truncated power-series log-determinants with Hutchinson
// probes, and the change-of-variables log-likelihood of a dequantised graph.

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/graph.hpp"
#include "grf/linalg.hpp"
#include "grf/random.hpp"
#include "json.hpp"

namespace grf {

// Orthogonal: Rademacher probes taken as rows of a Sylvester-Hadamard matrix
// with random column signs and row order. Each probe is marginally uniform on
// {-1, 1}^d; every full block of 2^ceil(log2 d) probes satisfies
// sum v v^T = 2^k I, so traces become exact once S covers a block.
enum class ProbeKind { Rademacher, Normal, Orthogonal };

inline std::string to_string(ProbeKind k) {
  switch (k) {
    case ProbeKind::Rademacher: return "rademacher";
    case ProbeKind::Normal: return "normal";
    case ProbeKind::Orthogonal: return "orthogonal";
  }
  return "?";
}
inline ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "rademacher") return ProbeKind::Rademacher;
  if (s == "normal") return ProbeKind::Normal;
  if (s == "orthogonal") return ProbeKind::Orthogonal;
  throw DataError("unknown probe distribution '" + s + "'");
}

struct LogDetEstimatorConfig {
  int series_terms = 20;       // K
  int hutchinson_samples = 1;  // S
  ProbeKind probe = ProbeKind::Rademacher;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (series_terms < 1 || hutchinson_samples < 1) {
      throw DataError("log-det estimator: series_terms and hutchinson_samples must be >= 1");
    }
  }
};

// Zero mean, identity covariance.
inline Matrix make_probe(std::size_t rows, std::size_t cols, ProbeKind kind, Rng& rng) {
  Matrix v(rows, cols);
  if (kind == ProbeKind::Rademacher) {
    for (double& x : v.flat()) x = (rng() >> 63) ? 1.0 : -1.0;
  } else {
    NormalSampler nd;
    for (double& x : v.flat()) x = nd(rng);
  }
  return v;
}

inline std::vector<Matrix> make_orthogonal_probes(std::size_t rows, std::size_t cols, int count, Rng& rng) {
  const std::size_t d = rows * cols;
  std::size_t order = 1;
  while (order < d) order *= 2;
  std::vector<Matrix> out;
  std::vector<std::size_t> perm(order);
  std::vector<double> sign(d);
  for (std::size_t made = 0; made < static_cast<std::size_t>(count);) {
    for (double& x : sign) x = (rng() >> 63) ? 1.0 : -1.0;
    for (std::size_t i = 0; i < order; ++i) perm[i] = i;
    for (std::size_t i = order; i-- > 1;) std::swap(perm[i], perm[rng() % (i + 1)]);
    for (std::size_t r = 0; r < order && made < static_cast<std::size_t>(count); ++r, ++made) {
      Matrix v(rows, cols);
      for (std::size_t j = 0; j < d; ++j) v[j] = (std::popcount(perm[r] & j) & 1) ? -sign[j] : sign[j];
      out.push_back(std::move(v));
    }
  }
  return out;
}

inline std::vector<Matrix> make_probes(std::size_t rows, std::size_t cols, const LogDetEstimatorConfig& cfg,
                                       std::uint64_t seed) {
  Rng rng(seed);
  if (cfg.probe == ProbeKind::Orthogonal) return make_orthogonal_probes(rows, cols, cfg.hutchinson_samples, rng);
  std::vector<Matrix> out;
  for (int s = 0; s < cfg.hutchinson_samples; ++s) out.push_back(make_probe(rows, cols, cfg.probe, rng));
  return out;
}

// Probe vectors for every block of a model, indexed [block][sample].
struct ProbeBank {
  std::vector<std::vector<Matrix>> feature;
  std::vector<std::vector<Matrix>> adjacency;
};

inline ProbeBank make_probe_bank(const GrfModel& model, const LogDetEstimatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const GraphShape s = model.shape();
  ProbeBank bank;
  for (std::size_t b = 0; b < model.feature_blocks.size(); ++b) {
    bank.feature.push_back(make_probes(s.n_max, s.n_atom_types, cfg, derive_seed(seed, {stream::probe, 0, b})));
  }
  auto [rows, cols] = model.config.adjacency_view();
  for (std::size_t b = 0; b < model.adjacency_blocks.size(); ++b) {
    bank.adjacency.push_back(make_probes(rows, cols, cfg, derive_seed(seed, {stream::probe, 1, b})));
  }
  return bank;
}

inline void require_contractive(const ResidualBlock& block, const char* where) {
  const double lip = block.lipschitz_bound();
  if (!(lip < 1.0)) {
    throw LipschitzViolation(std::string(where) + ": residual block Lipschitz bound " + std::to_string(lip) +
                             " >= 1, the log-determinant series may diverge");
  }
}

// log det(I + J_R(x)) ~ mean_v sum_{k=1..K} (-1)^{k+1} v^T J^k v / k.
inline double logdet_series(const ResidualBlock& block, const Matrix& x, std::span<const Matrix> props,
                            int series_terms, std::span<const Matrix> probes) {
  require_contractive(block, "logdet_series");
  if (probes.empty()) throw DataError("logdet_series: no probe vectors");
  const BlockLinearization lin = block.linearize(x, props);
  double total = 0.0;
  for (const Matrix& v : probes) {
    if (!v.same_shape(x)) throw ShapeError("logdet_series: probe shape does not match input");
    Matrix w = v;
    double sign = 1.0;
    for (int k = 1; k <= series_terms; ++k) {
      w = lin.apply(w);
      total += sign * frobenius_dot(v, w) / k;
      sign = -sign;
    }
  }
  return total / static_cast<double>(probes.size());
}

inline double logdet_series(const ResidualBlock& block, const Matrix& x, std::span<const Matrix> props,
                            const LogDetEstimatorConfig& cfg) {
  cfg.validate();
  const auto probes = make_probes(x.rows(), x.cols(), cfg, derive_seed(cfg.rng_seed, {stream::probe}));
  return logdet_series(block, x, props, cfg.series_terms, probes);
}

// Explicit Jacobian of vec(R) at x from exact JVPs on the basis vectors.
inline Matrix explicit_jacobian(const ResidualBlock& block, const Matrix& x, std::span<const Matrix> props = {}) {
  const BlockLinearization lin = block.linearize(x, props);
  const std::size_t d = x.size();
  Matrix j(d, d);
  Matrix e(x.rows(), x.cols());
  for (std::size_t c = 0; c < d; ++c) {
    e[c] = 1.0;
    Matrix col = lin.apply(e);
    e[c] = 0.0;
    for (std::size_t r = 0; r < d; ++r) j(r, c) = col[r];
  }
  return j;
}

// The K-term series evaluated with exact traces (the quantity the probes
// estimate without bias).
inline double truncated_series_exact(const ResidualBlock& block, const Matrix& x, std::span<const Matrix> props,
                                     int series_terms) {
  const Matrix j = explicit_jacobian(block, x, props);
  Matrix p = j;
  double total = 0.0, sign = 1.0;
  for (int k = 1; k <= series_terms; ++k) {
    total += sign * trace(p) / k;
    sign = -sign;
    if (k < series_terms) p = matmul(p, j);
  }
  return total;
}

// ---------------------------------------------------------------------------

inline double prior_logp(std::span<const double> z) {
  constexpr double half_log_2pi = 0.91893853320467274178;  // log(2 pi) / 2
  double sq = 0.0;
  for (double x : z) sq += x * x;
  return -0.5 * sq - half_log_2pi * static_cast<double>(z.size());
}

inline double prior_logp(const LatentPoint& z) {
  return prior_logp(z.z_adjacency.flat()) + prior_logp(z.z_features.flat());
}

struct FlowTrace {
  std::vector<double> feature_logdets;
  std::vector<double> adjacency_logdets;
  double prior_logp = 0.0;
  double total_logp = 0.0;

  double logdet_sum() const {
    double s = 0.0;
    for (double x : feature_logdets) s += x;
    for (double x : adjacency_logdets) s += x;
    return s;
  }

  nlohmann::json to_json() const {
    return {{"feature_logdets", feature_logdets},
            {"adjacency_logdets", adjacency_logdets},
            {"prior_logp", prior_logp},
            {"logdet", logdet_sum()},
            {"total_logp", total_logp}};
  }
};

struct LikelihoodResult {
  FlowTrace trace;
  LatentPoint z;
};

// Change of variables on an already dequantised graph; the feature flow is
// conditioned on the discrete bond graph of `cond`.
inline LikelihoodResult flow_logp(const GrfModel& model, const DequantGraph& deq, const MolGraph& cond,
                                  int series_terms, const ProbeBank& probes) {
  const auto props = propagation_matrices(model.config, cond);
  const FlowPass fx = feature_flow_forward(model, deq.features_c, props);
  const FlowPass fa = adjacency_flow_forward(model, deq.adjacency_c);
  LikelihoodResult r;
  for (std::size_t b = 0; b < model.feature_blocks.size(); ++b) {
    r.trace.feature_logdets.push_back(
        logdet_series(model.feature_blocks[b], fx.block_inputs[b], props, series_terms, probes.feature.at(b)));
  }
  for (std::size_t b = 0; b < model.adjacency_blocks.size(); ++b) {
    r.trace.adjacency_logdets.push_back(
        logdet_series(model.adjacency_blocks[b], fa.block_inputs[b], {}, series_terms, probes.adjacency.at(b)));
  }
  r.z.z_features = fx.output;
  r.z.z_adjacency = adjacency_unview(model.config, fa.output);
  r.trace.prior_logp = prior_logp(r.z);
  r.trace.total_logp = r.trace.prior_logp + r.trace.logdet_sum();
  if (!std::isfinite(r.trace.total_logp)) throw NumericalError("flow_logp: non-finite log-likelihood");
  return r;
}

// dequantise -> both flows -> prior + log-determinants. Dequantisation noise
// and probes are derived from `rng_seed`.
inline FlowTrace full_logp(const GrfModel& model, const MolGraph& g, const LogDetEstimatorConfig& cfg,
                           std::uint64_t rng_seed) {
  cfg.validate();
  const DequantGraph deq = dequantize(g, model.config.noise_scale, rng_seed);
  const ProbeBank probes = make_probe_bank(model, cfg, derive_seed(rng_seed, {stream::probe}));
  return flow_logp(model, deq, g, cfg.series_terms, probes).trace;
}

struct PriorSampling {
  bool truncate = false;  // redraw coordinates beyond +-2 standard deviations
};

// z_X ~ N(0, t_x^2 I), z_A ~ N(0, t_a^2 I).
inline LatentPoint sample_prior(const GraphShape& s, double t_x, double t_a, std::uint64_t rng_seed,
                                PriorSampling opts = {}) {
  if (!(t_x > 0.0) || !(t_a > 0.0)) throw DataError("sample_prior: temperatures must be positive");
  Rng rng(derive_seed(rng_seed, {stream::prior}));
  NormalSampler nd;
  auto draw = [&](double t) {
    double x = nd(rng);
    while (opts.truncate && std::abs(x) > 2.0) x = nd(rng);
    return t * x;
  };
  LatentPoint z;
  z.z_adjacency = Tensor3(s.n_max, s.n_max, s.n_bond_types);
  z.z_features = Matrix(s.n_max, s.n_atom_types);
  for (double& x : z.z_adjacency.flat()) x = draw(t_a);
  for (double& x : z.z_features.flat()) x = draw(t_x);
  return z;
}

}  // namespace grf
