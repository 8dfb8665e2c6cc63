#pragma once

// Negative log-likelihood gradients through both flows and the series
// log-determinant (probes frozen per step), Adam, and the training loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "grf/autodiff.hpp"
#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/graph.hpp"
#include "grf/likelihood.hpp"
#include "grf/parallel.hpp"
#include "grf/random.hpp"

namespace grf {

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 1e-3;
  int epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lipschitz_budget = 0.9;
  int series_terms = 8;
  int hutchinson_samples = 1;
  ProbeKind probe = ProbeKind::Rademacher;
  std::uint64_t rng_seed = 0;
  int checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints
  int sn_iterations = 1;     // warm-started power iterations per step (minimum)
  int threads = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DataError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (epochs < 0) throw DataError("train config: epochs must be >= 0");
    if (series_terms < 1 || hutchinson_samples < 1) {
      throw DataError("train config: series_terms and hutchinson_samples must be >= 1");
    }
  }

  LogDetEstimatorConfig estimator() const {
    return {series_terms, hutchinson_samples, probe, rng_seed};
  }

  // Full-size QM9 setting.
  static TrainConfig qm9_full() {
    TrainConfig c;
    c.batch_size = 2048;
    c.learning_rate = 1e-3;
    c.epochs = 70;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameter enumeration. Order: feature blocks, then adjacency blocks; within
// a layer each weight (dense W, or U then V), then the bias.

template <class Model, class F>
void for_each_parameter(Model& model, F&& f) {
  auto visit_block = [&](auto& block) {
    for (auto& layer : block.layers) {
      for (auto& w : layer.weights) {
        if (w.low_rank()) {
          f(w.u);
          f(w.v);
        } else {
          f(w.full);
        }
      }
      if (!layer.bias.empty()) f(layer.bias);
    }
  };
  for (auto& b : model.feature_blocks) visit_block(b);
  for (auto& b : model.adjacency_blocks) visit_block(b);
}

inline std::vector<Matrix> zero_like_parameters(const GrfModel& model) {
  std::vector<Matrix> out;
  for_each_parameter(model, [&](const Matrix& p) { out.emplace_back(p.rows(), p.cols()); });
  return out;
}

namespace detail {

struct LayerVars {
  std::vector<ad::Var> w_full, w_u, w_v;  // per channel
  std::vector<bool> low_rank;
  bool has_bias = false;
  ad::Var bias;
};

struct BlockVars {
  std::vector<LayerVars> layers;
};

struct ModelVars {
  std::vector<BlockVars> feature, adjacency;
  std::vector<ad::Var> flat;  // in for_each_parameter order
};

inline ModelVars make_leaves(ad::Tape& tape, const GrfModel& model) {
  ModelVars mv;
  auto make_block = [&](const ResidualBlock& b) {
    BlockVars bv;
    for (const Layer& l : b.layers) {
      LayerVars lv;
      for (const Weight& w : l.weights) {
        lv.low_rank.push_back(w.low_rank());
        if (w.low_rank()) {
          lv.w_u.push_back(tape.leaf(w.u));
          mv.flat.push_back(lv.w_u.back());
          lv.w_v.push_back(tape.leaf(w.v));
          mv.flat.push_back(lv.w_v.back());
          lv.w_full.push_back({});
        } else {
          lv.w_full.push_back(tape.leaf(w.full));
          mv.flat.push_back(lv.w_full.back());
          lv.w_u.push_back({});
          lv.w_v.push_back({});
        }
      }
      if (!l.bias.empty()) {
        lv.has_bias = true;
        lv.bias = tape.leaf(l.bias);
        mv.flat.push_back(lv.bias);
      }
      bv.layers.push_back(std::move(lv));
    }
    return bv;
  };
  for (const auto& b : model.feature_blocks) mv.feature.push_back(make_block(b));
  for (const auto& b : model.adjacency_blocks) mv.adjacency.push_back(make_block(b));
  return mv;
}

inline ad::Var apply_weight(const LayerVars& lv, std::size_t c, ad::Var z) {
  if (lv.low_rank[c]) return ad::matmul_nt(ad::matmul(z, lv.w_u[c]), lv.w_v[c]);
  return ad::matmul(z, lv.w_full[c]);
}

inline ad::Var layer_linear(const LayerVars& lv, LayerKind kind, ad::Var z, std::span<const Matrix> props) {
  if (kind == LayerKind::Dense) return apply_weight(lv, 0, z);
  ad::Var h{};
  for (std::size_t c = 0; c < lv.low_rank.size(); ++c) {
    ad::Var t = apply_weight(lv, c, ad::lmul_const(props[c], z));
    h = c == 0 ? t : ad::add(h, t);
  }
  return h;
}

// R(z) on the tape plus the ELU slopes needed for Jacobian-vector products.
inline std::pair<ad::Var, std::vector<ad::Var>> block_forward(const BlockVars& bv, LayerKind kind, ad::Var z,
                                                              std::span<const Matrix> props) {
  std::vector<ad::Var> slopes;
  ad::Var h = z;
  for (const LayerVars& lv : bv.layers) {
    ad::Var pre = layer_linear(lv, kind, h, props);
    if (lv.has_bias) pre = ad::add_row(pre, lv.bias);
    slopes.push_back(ad::elu_prime(pre));
    h = ad::elu(pre);
  }
  return {h, slopes};
}

inline ad::Var block_jvp(const BlockVars& bv, LayerKind kind, const std::vector<ad::Var>& slopes, ad::Var v,
                         std::span<const Matrix> props) {
  ad::Var t = v;
  for (std::size_t l = 0; l < bv.layers.size(); ++l) {
    t = ad::hadamard(slopes[l], layer_linear(bv.layers[l], kind, t, props));
  }
  return t;
}

// Appends the series terms of one block to `terms`; returns the new z.
inline ad::Var flow_block(ad::Tape& tape, const BlockVars& bv, LayerKind kind, ad::Var z,
                          std::span<const Matrix> props, const std::vector<Matrix>& probes, int series_terms,
                          std::vector<std::pair<double, ad::Var>>& terms) {
  auto [r, slopes] = block_forward(bv, kind, z, props);
  const double inv_s = 1.0 / static_cast<double>(probes.size());
  for (const Matrix& p : probes) {
    ad::Var v = tape.leaf(p);
    ad::Var w = v;
    double sign = 1.0;
    for (int k = 1; k <= series_terms; ++k) {
      w = block_jvp(bv, kind, slopes, w, props);
      terms.push_back({sign * inv_s / k, ad::dot(v, w)});
      sign = -sign;
    }
  }
  return ad::add(z, r);
}

}  // namespace detail

struct SampleGradient {
  double nll = 0.0;
  double prior_logp = 0.0;
  double logdet = 0.0;
  std::vector<Matrix> grads;  // d nll / d parameter, for_each_parameter order
};

// Negative log-likelihood of one graph and its parameter gradient. Noise and
// probes come from `rng_seed` exactly as in full_logp, so the value matches
// -full_logp(model, g, estimator, rng_seed).total_logp.
inline SampleGradient sample_nll_gradient(const GrfModel& model, const MolGraph& g,
                                          const LogDetEstimatorConfig& est, std::uint64_t rng_seed) {
  est.validate();
  const DequantGraph deq = dequantize(g, model.config.noise_scale, rng_seed);
  const ProbeBank probes = make_probe_bank(model, est, derive_seed(rng_seed, {stream::probe}));
  const auto props = propagation_matrices(model.config, g);

  ad::Tape tape;
  const detail::ModelVars mv = detail::make_leaves(tape, model);
  std::vector<std::pair<double, ad::Var>> logdet_terms;

  ad::Var zx = tape.leaf(deq.features_c);
  for (std::size_t b = 0; b < mv.feature.size(); ++b) {
    require_contractive(model.feature_blocks[b], "grad_nll");
    zx = detail::flow_block(tape, mv.feature[b], LayerKind::Graph, zx, props, probes.feature.at(b),
                            est.series_terms, logdet_terms);
  }
  ad::Var za = tape.leaf(adjacency_view(model.config, deq.adjacency_c));
  for (std::size_t b = 0; b < mv.adjacency.size(); ++b) {
    require_contractive(model.adjacency_blocks[b], "grad_nll");
    za = detail::flow_block(tape, mv.adjacency[b], LayerKind::Dense, za, {}, probes.adjacency.at(b),
                            est.series_terms, logdet_terms);
  }

  const double dim = static_cast<double>(model.shape().latent_dimension());
  constexpr double half_log_2pi = 0.91893853320467274178;
  // nll = 0.5 |z|^2 + D/2 log 2 pi - sum logdet terms
  std::vector<std::pair<double, ad::Var>> terms;
  terms.push_back({0.5, ad::sum_squares(zx)});
  terms.push_back({0.5, ad::sum_squares(za)});
  double logdet = 0.0;
  for (auto [c, v] : logdet_terms) {
    terms.push_back({-c, v});
    logdet += c * v.value()[0];
  }
  ad::Var nll = ad::linear_combination(terms, half_log_2pi * dim);

  SampleGradient out;
  out.nll = nll.value()[0];
  out.logdet = logdet;
  out.prior_logp = -out.nll - logdet;
  if (!std::isfinite(out.nll)) throw NumericalError("grad_nll: non-finite loss");
  tape.backward(nll);
  for (ad::Var p : mv.flat) out.grads.push_back(tape.grad(p));
  return out;
}

struct BatchGradient {
  double loss = 0.0;  // mean NLL
  double prior_mean = 0.0;
  double logdet_mean = 0.0;
  std::vector<Matrix> grads;
};

// Names the first block whose parameters received a non-finite gradient.
inline std::string locate_nonfinite(const GrfModel& model, const std::vector<Matrix>& grads) {
  std::size_t k = 0;
  std::string where;
  auto scan = [&](const char* flow, const std::vector<ResidualBlock>& blocks) {
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (std::size_t l = 0; l < blocks[b].layers.size(); ++l) {
        const Layer& layer = blocks[b].layers[l];
        std::size_t count = 0;
        for (const Weight& w : layer.weights) count += w.low_rank() ? 2 : 1;
        count += layer.bias.empty() ? 0 : 1;
        for (std::size_t i = 0; i < count; ++i, ++k)
          if (where.empty() && !all_finite(grads[k].flat()))
            where = std::string(flow) + " block " + std::to_string(b) + " layer " + std::to_string(l);
      }
  };
  scan("feature", model.feature_blocks);
  scan("adjacency", model.adjacency_blocks);
  return where;
}

// loss = -mean_i total_logp(g_i); per-sample seeds derive_seed(step_seed, {i}).
inline BatchGradient grad_nll(const GrfModel& model, const std::vector<MolGraph>& batch,
                              const LogDetEstimatorConfig& est, std::uint64_t step_seed, int threads = 1) {
  if (batch.empty()) throw DataError("grad_nll: empty batch");
  std::vector<SampleGradient> per(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    per[i] = sample_nll_gradient(model, batch[i], est, derive_seed(step_seed, {i}));
  });
  BatchGradient out;
  out.grads = zero_like_parameters(model);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const SampleGradient& s : per) {
    out.loss += s.nll * inv;
    out.prior_mean += s.prior_logp * inv;
    out.logdet_mean += s.logdet * inv;
    for (std::size_t k = 0; k < out.grads.size(); ++k) out.grads[k] += s.grads[k] * inv;
  }
  if (!std::isfinite(out.loss)) throw NumericalError("grad_nll: non-finite loss");
  if (const std::string where = locate_nonfinite(model, out.grads); !where.empty()) {
    throw NumericalError("grad_nll: non-finite gradient in " + where);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> m, v;
  long step = 0;

  bool operator==(const AdamState&) const = default;
};

// Bias-corrected Adam update, then every weight is scaled back into its
// spectral budget.
inline void adam_step(GrfModel& model, const std::vector<Matrix>& grads, AdamState& state, const TrainConfig& cfg) {
  std::vector<Matrix*> params;
  for_each_parameter(model, [&](Matrix& p) { params.push_back(&p); });
  if (grads.size() != params.size()) throw ShapeError("adam_step: gradient count does not match parameters");
  if (state.m.empty()) {
    for (Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    const Matrix& g = grads[k];
    if (!p.same_shape(g)) throw ShapeError("adam_step: gradient shape mismatch");
    Matrix& m = state.m[k];
    Matrix& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  model.for_each_block([&](ResidualBlock& b) {
    for (Layer& l : b.layers)
      for (Weight& w : l.weights) w.sn.iterations_per_step = cfg.sn_iterations;
    b.normalize();
  });
}

struct TrainRecord {
  int epoch = 0;
  long step = 0;
  double nll = 0.0;
  double logdet_mean = 0.0;
  double prior_mean = 0.0;
  bool operator==(const TrainRecord&) const = default;
};

struct TrainState {
  GrfModel model;
  AdamState adam;
  int epochs_done = 0;
  long global_step = 0;
  std::vector<TrainRecord> history;
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {stream::shuffle, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[rng() % (i + 1)]);
  return idx;
}

// Runs epochs (state.epochs_done, cfg.epochs]. Shuffling, noise and probes are
// derived from (seed, epoch, step), so resuming from a saved state continues
// the same trajectory. `on_epoch` runs after every epoch.
inline TrainState train(TrainState state, const std::vector<MolGraph>& dataset, const TrainConfig& cfg,
                        const std::function<void(const TrainState&)>& on_epoch = {}) {
  cfg.validate();
  if (dataset.empty()) throw DataError("train: dataset is empty");
  const LogDetEstimatorConfig est = cfg.estimator();
  for (int epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(dataset.size(), cfg.rng_seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<MolGraph> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(dataset[order[k]]);
      }
      const std::uint64_t step_seed =
          derive_seed(cfg.rng_seed, {stream::dequant, static_cast<std::uint64_t>(state.global_step)});
      const BatchGradient bg = grad_nll(state.model, batch, est, step_seed, cfg.threads);
      adam_step(state.model, bg.grads, state.adam, cfg);
      ++state.global_step;
      state.history.push_back({epoch, state.global_step, bg.loss, bg.logdet_mean, bg.prior_mean});
    }
    state.epochs_done = epoch;
    if (on_epoch) on_epoch(state);
  }
  return state;
}

// Mean NLL over a dataset with per-molecule seeds derive_seed(seed, {i}).
inline double mean_nll(const GrfModel& model, const std::vector<MolGraph>& data, const LogDetEstimatorConfig& est,
                       std::uint64_t seed, int threads = 1) {
  if (data.empty()) throw DataError("mean_nll: empty dataset");
  std::vector<double> nll(data.size());
  parallel_for(data.size(), threads,
               [&](std::size_t i) { nll[i] = -full_logp(model, data[i], est, derive_seed(seed, {i})).total_logp; });
  return std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(data.size());
}

}  // namespace grf
