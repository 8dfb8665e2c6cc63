#pragma once

// Fixed-point inversion of contractive residual layers and two-step graph
// generation: adjacency first, then features conditioned on the quantised
// adjacency.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/graph.hpp"
#include "grf/likelihood.hpp"
#include "grf/parallel.hpp"
#include "grf/random.hpp"

namespace grf {

struct InversionConfig {
  int iterations = 100;
  double early_stop_tol = 1e-8;  // on ||x_{i+1} - x_i||; 0 disables
  int divergence_window = 5;     // consecutive growing steps that count as divergence
};

struct InversionStats {
  int iterations_run = 0;
  std::vector<double> step_distances;  // ||x_{i+1} - x_i||
};

// x_0 = y, x_{i+1} = y - R(x_i); returns x_n.
inline Matrix invert_residual_layer(const ResidualBlock& block, const Matrix& y, std::span<const Matrix> props,
                                    const InversionConfig& cfg, InversionStats* stats = nullptr) {
  if (cfg.iterations < 0) throw DataError("invert_residual_layer: iterations must be >= 0");
  Matrix x = y;
  double prev_dist = std::numeric_limits<double>::infinity();
  int growing = 0;
  const double noise_floor = 1e-12 * (1.0 + frobenius_norm(y));
  int i = 0;
  for (; i < cfg.iterations; ++i) {
    Matrix next = y - block.forward(x, props);
    const double dist = frobenius_norm(next - x);
    if (stats) stats->step_distances.push_back(dist);
    if (!std::isfinite(dist)) throw LipschitzViolation("fixed-point inversion produced non-finite iterates");
    if (dist > prev_dist && dist > noise_floor) {
      if (++growing >= cfg.divergence_window) {
        throw LipschitzViolation("fixed-point inversion diverging: step distance grew for " +
                                 std::to_string(growing) + " consecutive iterations (Lip(R) >= 1?)");
      }
    } else {
      growing = 0;
    }
    prev_dist = dist;
    x = std::move(next);
    if (cfg.early_stop_tol > 0.0 && dist <= cfg.early_stop_tol) {
      ++i;
      break;
    }
  }
  if (stats) stats->iterations_run = i;
  return x;
}

struct DecodedGraph {
  DequantGraph continuous;  // A^', X^'
  MolGraph graph;           // quantised
};

// Inverts the adjacency flow on z_A, quantises, then inverts the feature flow
// on z_X with the propagation built from the quantised adjacency.
inline DecodedGraph invert_flow(const GrfModel& model, const LatentPoint& z, const InversionConfig& cfg) {
  const GraphShape s = model.shape();
  if (z.z_adjacency.size() != s.adjacency_size() || z.z_features.rows() != static_cast<std::size_t>(s.n_max) ||
      z.z_features.cols() != static_cast<std::size_t>(s.n_atom_types)) {
    throw ShapeError("invert_flow: latent point does not match the model shape");
  }
  Matrix a = adjacency_view(model.config, z.z_adjacency);
  for (auto it = model.adjacency_blocks.rbegin(); it != model.adjacency_blocks.rend(); ++it) {
    a = invert_residual_layer(*it, a, {}, cfg);
  }
  DecodedGraph out;
  out.continuous.noise_scale = model.config.noise_scale;
  out.continuous.adjacency_c = adjacency_unview(model.config, a);
  const Tensor3 a_hat = quantize_adjacency(out.continuous.adjacency_c);
  MolGraph cond{s, a_hat, Matrix(s.n_max, s.n_atom_types)};
  const auto props = propagation_matrices(model.config, cond);
  Matrix x = z.z_features;
  for (auto it = model.feature_blocks.rbegin(); it != model.feature_blocks.rend(); ++it) {
    x = invert_residual_layer(*it, x, props, cfg);
  }
  out.continuous.features_c = x;
  out.graph = MolGraph{s, a_hat, quantize_features(x)};
  return out;
}

// Forward map without log-determinants.
inline LatentPoint encode(const GrfModel& model, const DequantGraph& deq, const MolGraph& cond) {
  LatentPoint z;
  z.z_features = feature_flow_forward(model, deq.features_c, cond).output;
  z.z_adjacency = adjacency_unview(model.config, adjacency_flow_forward(model, deq.adjacency_c).output);
  return z;
}

inline std::vector<MolGraph> generate(const GrfModel& model, std::size_t count, double t_x, double t_a,
                                      const InversionConfig& cfg, std::uint64_t rng_seed, int threads = 1,
                                      PriorSampling sampling = {}) {
  std::vector<MolGraph> out(count);
  parallel_for(count, threads, [&](std::size_t i) {
    const LatentPoint z = sample_prior(model.shape(), t_x, t_a, derive_seed(rng_seed, {stream::prior, i}), sampling);
    out[i] = invert_flow(model, z, cfg).graph;
  });
  return out;
}

}  // namespace grf
