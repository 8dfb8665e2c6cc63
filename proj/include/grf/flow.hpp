#pragma once

// Lipschitz-constrained residual blocks and the two sub-flows of the model:
// a GCN-style flow over node features conditioned on the bond graph, and an
// MLP-style flow over the adjacency tensor.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "grf/error.hpp"
#include "grf/graph.hpp"
#include "grf/linalg.hpp"
#include "grf/random.hpp"

namespace grf {

inline double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }
inline double elu_prime(double x) { return x >= 0.0 ? 1.0 : std::exp(x); }
inline double elu_second(double x) { return x >= 0.0 ? 0.0 : std::exp(x); }

inline Matrix elu(const Matrix& h) {
  Matrix out = h;
  for (double& x : out.flat()) x = elu(x);
  return out;
}
inline Matrix elu_prime(const Matrix& h) {
  Matrix out = h;
  for (double& x : out.flat()) x = elu_prime(x);
  return out;
}

// A square weight, either dense or factored as U V^T, with its own
// power-iteration state and spectral budget.
struct Weight {
  Matrix full;  // n x n, used when rank == 0
  Matrix u, v;  // n x r factors, used when rank > 0
  SpectralNormState sn;
  double budget = 0.9;

  bool low_rank() const { return !u.empty(); }
  std::size_t dim() const { return low_rank() ? u.rows() : full.rows(); }
  std::size_t parameter_count() const { return low_rank() ? u.size() + v.size() : full.size(); }

  Matrix dense() const { return low_rank() ? matmul_nt(u, v) : full; }

  // z * W
  Matrix apply_right(const Matrix& z) const {
    return low_rank() ? matmul_nt(matmul(z, u), v) : matmul(z, full);
  }

  LinearOperator op() const {
    if (!low_rank()) return LinearOperator::dense(full);
    LinearOperator o;
    o.rows = u.rows();
    o.cols = v.rows();
    o.apply = [this](std::span<const double> x) {
      std::vector<double> t(u.cols(), 0.0), y(u.rows(), 0.0);
      for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t k = 0; k < v.cols(); ++k) t[k] += v(i, k) * x[i];
      for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t k = 0; k < u.cols(); ++k) y[i] += u(i, k) * t[k];
      return y;
    };
    o.apply_transpose = [this](std::span<const double> y) {
      std::vector<double> t(u.cols(), 0.0), x(v.rows(), 0.0);
      for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t k = 0; k < u.cols(); ++k) t[k] += u(i, k) * y[i];
      for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t k = 0; k < v.cols(); ++k) x[i] += v(i, k) * t[k];
      return x;
    };
    return o;
  }

  bool is_zero() const {
    auto zero = [](const Matrix& m) {
      return std::all_of(m.flat().begin(), m.flat().end(), [](double x) { return x == 0.0; });
    };
    return low_rank() ? (zero(u) || zero(v)) : zero(full);
  }

  // Re-estimates sigma warm-started from the stored vectors.
  double refresh_sigma(int min_iterations = 100) {
    if (is_zero()) return sn.sigma_estimate = 0.0;
    return power_iterate_until(op(), sn, min_iterations);
  }

  // Scales the weight so its spectral norm is at most `budget`.
  void normalize() {
    if (is_zero()) {
      sn.sigma_estimate = 0.0;
      return;
    }
    const double sigma = power_iterate_until(op(), sn, std::max(1, sn.iterations_per_step));
    if (sigma <= budget) return;
    const double f = budget / sigma;
    if (low_rank()) {
      u *= std::sqrt(f);
      v *= std::sqrt(f);
    } else {
      full *= f;
    }
    sn.sigma_estimate = budget;
  }
};

enum class LayerKind { Dense, Graph };

// One linear map plus ELU. Graph layers sum over propagation channels:
// H = sum_c P_c Z W_c (+ b); dense layers use H = Z W (+ b).
struct Layer {
  std::vector<Weight> weights;
  Matrix bias;  // 1 x n, empty when disabled

  Matrix preactivation(const Matrix& z, std::span<const Matrix> props, LayerKind kind) const {
    Matrix h;
    if (kind == LayerKind::Dense) {
      h = weights.front().apply_right(z);
    } else {
      if (props.size() != weights.size()) {
        throw ShapeError("graph layer expects " + std::to_string(weights.size()) +
                         " propagation matrices, got " + std::to_string(props.size()));
      }
      for (std::size_t c = 0; c < weights.size(); ++c) {
        Matrix t = weights[c].apply_right(matmul(props[c], z));
        if (c == 0) h = std::move(t); else h += t;
      }
    }
    if (!bias.empty()) {
      for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h(r, c) += bias(0, c);
    }
    return h;
  }

  // The linear part applied to a tangent (no bias).
  Matrix linear(const Matrix& v, std::span<const Matrix> props, LayerKind kind) const {
    if (kind == LayerKind::Dense) return weights.front().apply_right(v);
    Matrix h;
    for (std::size_t c = 0; c < weights.size(); ++c) {
      Matrix t = weights[c].apply_right(matmul(props[c], v));
      if (c == 0) h = std::move(t); else h += t;
    }
    return h;
  }
};

struct ResidualBlock;

// Jacobian-vector products of a residual branch around a fixed input.
struct BlockLinearization {
  std::vector<Matrix> slopes;  // ELU'(H_l) per layer
  const ResidualBlock* block = nullptr;
  std::vector<Matrix> props;

  Matrix apply(const Matrix& v) const;
};

// R(z) = phi(L_k(... phi(L_1(z)))), with every L_l spectrally bounded so that
// Lip(R) <= prod_l budget_l < 1.
struct ResidualBlock {
  LayerKind kind = LayerKind::Dense;
  std::vector<Layer> layers;
  double lipschitz_budget = 0.9;

  Matrix forward(const Matrix& z, std::span<const Matrix> props = {}) const {
    Matrix h = z;
    for (const Layer& l : layers) h = elu(l.preactivation(h, props, kind));
    return h;
  }

  BlockLinearization linearize(const Matrix& z, std::span<const Matrix> props = {}) const {
    BlockLinearization lin;
    lin.block = this;
    lin.props.assign(props.begin(), props.end());
    Matrix h = z;
    for (const Layer& l : layers) {
      Matrix pre = l.preactivation(h, props, kind);
      lin.slopes.push_back(elu_prime(pre));
      h = elu(pre);
    }
    return lin;
  }

  // Upper bound on Lip(R) from the cached spectral estimates (||P_c|| <= 1).
  double lipschitz_bound() const {
    double bound = 1.0;
    for (const Layer& l : layers) {
      double s = 0.0;
      for (const Weight& w : l.weights) s += w.sn.sigma_estimate;
      bound *= s;
    }
    return bound;
  }

  void normalize() {
    for (Layer& l : layers)
      for (Weight& w : l.weights) w.normalize();
  }
  void refresh_sigma(int iterations = 100) {
    for (Layer& l : layers)
      for (Weight& w : l.weights) w.refresh_sigma(iterations);
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) {
      for (const Weight& w : l.weights) n += w.parameter_count();
      n += l.bias.size();
    }
    return n;
  }
};

inline Matrix BlockLinearization::apply(const Matrix& v) const {
  Matrix t = v;
  for (std::size_t l = 0; l < slopes.size(); ++l) {
    t = hadamard(slopes[l], block->layers[l].linear(t, props, block->kind));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Model

// How the adjacency tensor is viewed by the MLP flow. Each layout reshapes the
// N x N x R storage to rows x width and right-multiplies by a width x width
// weight shared across rows.
//   Flattened  : 1 x (N*N*R)  one dense map over the whole tensor
//   NodeRows   : N x (N*R)    one map shared by every node's row
//   PairSlices : (N*N) x R    one map shared by every node pair (permutation equivariant)
enum class AdjacencyLayout { Flattened, NodeRows, PairSlices };
enum class GcnMode { Collapsed, PerChannel };

inline std::string to_string(AdjacencyLayout l) {
  switch (l) {
    case AdjacencyLayout::Flattened: return "flattened";
    case AdjacencyLayout::NodeRows: return "node_rows";
    case AdjacencyLayout::PairSlices: return "pair_slices";
  }
  return "?";
}
inline AdjacencyLayout adjacency_layout_from_string(const std::string& s) {
  if (s == "flattened") return AdjacencyLayout::Flattened;
  if (s == "node_rows") return AdjacencyLayout::NodeRows;
  if (s == "pair_slices") return AdjacencyLayout::PairSlices;
  throw DataError("unknown adjacency layout '" + s + "'");
}
inline std::string to_string(GcnMode m) { return m == GcnMode::Collapsed ? "collapsed" : "per_channel"; }
inline GcnMode gcn_mode_from_string(const std::string& s) {
  if (s == "collapsed") return GcnMode::Collapsed;
  if (s == "per_channel") return GcnMode::PerChannel;
  throw DataError("unknown gcn mode '" + s + "'");
}

struct ModelConfig {
  AtomVocabulary vocab;
  int n_max = 9;
  int n_bond_types = 4;
  int gcn_blocks = 1;
  int gcn_layers = 1;
  int mlp_blocks = 4;
  int mlp_layers = 2;
  AdjacencyLayout adjacency_layout = AdjacencyLayout::NodeRows;
  GcnMode gcn_mode = GcnMode::Collapsed;
  int adjacency_rank = 0;  // 0 = full weights
  bool bias = false;
  double lipschitz_budget = 0.9;
  double noise_scale = 0.9;
  double init_gain = 1.0;  // initial sigma as a fraction of each weight's budget
  std::uint64_t init_seed = 0;

  GraphShape shape() const { return {n_max, vocab.feature_count(), n_bond_types}; }

  std::pair<std::size_t, std::size_t> adjacency_view() const {
    const std::size_t n = static_cast<std::size_t>(n_max), r = static_cast<std::size_t>(n_bond_types);
    switch (adjacency_layout) {
      case AdjacencyLayout::Flattened: return {1, n * n * r};
      case AdjacencyLayout::NodeRows: return {n, n * r};
      case AdjacencyLayout::PairSlices: return {n * n, r};
    }
    return {0, 0};
  }

  // Full-size QM9 setting.
  static ModelConfig qm9_full() {
    ModelConfig c;
    c.gcn_blocks = 1;
    c.gcn_layers = 1;
    c.mlp_blocks = 32;
    c.mlp_layers = 25;
    return c;
  }
  // Desk-scale default.
  static ModelConfig toy(int n_max = 9) {
    ModelConfig c;
    c.n_max = n_max;
    return c;
  }
};

struct GrfModel {
  ModelConfig config;
  std::vector<ResidualBlock> feature_blocks;
  std::vector<ResidualBlock> adjacency_blocks;

  GraphShape shape() const { return config.shape(); }

  template <class F>
  void for_each_block(F&& f) {
    for (auto& b : feature_blocks) f(b);
    for (auto& b : adjacency_blocks) f(b);
  }
  template <class F>
  void for_each_block(F&& f) const {
    for (const auto& b : feature_blocks) f(b);
    for (const auto& b : adjacency_blocks) f(b);
  }

  void normalize() {
    for_each_block([](ResidualBlock& b) { b.normalize(); });
  }
  void refresh_sigma(int iterations = 100) {
    for_each_block([&](ResidualBlock& b) { b.refresh_sigma(iterations); });
  }
};

namespace detail {

inline Weight make_weight(std::size_t n, int rank, double budget, double gain, Rng& rng,
                          std::uint64_t sn_seed) {
  Weight w;
  w.budget = budget;
  NormalSampler nd;
  const double sd = 1.0 / std::sqrt(static_cast<double>(n));
  if (rank > 0) {
    const std::size_t r = static_cast<std::size_t>(rank);
    w.u = Matrix(n, r);
    w.v = Matrix(n, r);
    for (double& x : w.u.flat()) x = sd * nd(rng);
    for (double& x : w.v.flat()) x = sd * nd(rng);
  } else {
    w.full = Matrix(n, n);
    for (double& x : w.full.flat()) x = sd * nd(rng);
  }
  w.sn = SpectralNormState(n, n, sn_seed);
  // Rescale to sigma = gain * budget exactly.
  const double sigma = power_iterate_until(w.op(), w.sn, 100);
  if (sigma > 0.0) {
    const double f = gain * budget / sigma;
    if (w.low_rank()) {
      w.u *= std::sqrt(f);
      w.v *= std::sqrt(f);
    } else {
      w.full *= f;
    }
    w.sn.sigma_estimate = gain * budget;
  }
  return w;
}

}  // namespace detail

// Per-weight budget so a block of `layers` layers with `channels` summed
// weights per layer stays within `block_budget`.
inline double per_weight_budget(double block_budget, int layers, int channels) {
  return std::pow(block_budget, 1.0 / layers) / channels;
}

inline GrfModel make_model(const ModelConfig& cfg) {
  if (cfg.gcn_blocks < 0 || cfg.mlp_blocks < 0 || cfg.gcn_layers < 1 || cfg.mlp_layers < 1) {
    throw DataError("model config: block counts must be >= 0 and layer counts >= 1");
  }
  if (!(cfg.lipschitz_budget > 0.0 && cfg.lipschitz_budget < 1.0)) {
    throw DataError("model config: lipschitz_budget must lie in (0, 1)");
  }
  if (cfg.n_bond_types < 2) throw DataError("model config: need at least one real bond type");
  GrfModel m;
  m.config = cfg;
  Rng rng(derive_seed(cfg.init_seed, {stream::init}));
  const GraphShape s = cfg.shape();
  const int channels = cfg.gcn_mode == GcnMode::Collapsed ? 1 : s.n_bond_types - 1;
  std::uint64_t sn_counter = 0;
  for (int b = 0; b < cfg.gcn_blocks; ++b) {
    ResidualBlock blk;
    blk.kind = LayerKind::Graph;
    blk.lipschitz_budget = cfg.lipschitz_budget;
    const double wb = per_weight_budget(cfg.lipschitz_budget, cfg.gcn_layers, channels);
    for (int l = 0; l < cfg.gcn_layers; ++l) {
      Layer layer;
      for (int c = 0; c < channels; ++c) {
        layer.weights.push_back(detail::make_weight(s.n_atom_types, 0, wb, cfg.init_gain, rng,
                                                    derive_seed(cfg.init_seed, {stream::init, ++sn_counter})));
      }
      if (cfg.bias) layer.bias = Matrix(1, s.n_atom_types);
      blk.layers.push_back(std::move(layer));
    }
    m.feature_blocks.push_back(std::move(blk));
  }
  const std::size_t width = cfg.adjacency_view().second;
  for (int b = 0; b < cfg.mlp_blocks; ++b) {
    ResidualBlock blk;
    blk.kind = LayerKind::Dense;
    blk.lipschitz_budget = cfg.lipschitz_budget;
    const double wb = per_weight_budget(cfg.lipschitz_budget, cfg.mlp_layers, 1);
    for (int l = 0; l < cfg.mlp_layers; ++l) {
      Layer layer;
      layer.weights.push_back(detail::make_weight(width, cfg.adjacency_rank, wb, cfg.init_gain, rng,
                                                  derive_seed(cfg.init_seed, {stream::init, ++sn_counter})));
      if (cfg.bias) layer.bias = Matrix(1, width);
      blk.layers.push_back(std::move(layer));
    }
    m.adjacency_blocks.push_back(std::move(blk));
  }
  return m;
}

// Sets every weight (and bias) to zero: the flow becomes the identity.
inline void zero_weights(GrfModel& m) {
  m.for_each_block([](ResidualBlock& b) {
    for (Layer& l : b.layers) {
      for (Weight& w : l.weights) {
        if (w.low_rank()) {
          w.u *= 0.0;
          w.v *= 0.0;
        } else {
          w.full *= 0.0;
        }
        w.sn.sigma_estimate = 0.0;
      }
      l.bias *= 0.0;
    }
  });
}

// Conditioning matrices for the feature flow, from the discrete bond graph.
inline std::vector<Matrix> propagation_matrices(const ModelConfig& cfg, const MolGraph& g) {
  if (cfg.gcn_mode == GcnMode::Collapsed) return {augmented_normalized_adjacency(g)};
  return channel_normalized_adjacency(g);
}

inline Matrix adjacency_view(const ModelConfig& cfg, const Tensor3& a) {
  auto [rows, cols] = cfg.adjacency_view();
  return a.as_matrix(rows, cols);
}
inline Tensor3 adjacency_unview(const ModelConfig& cfg, const Matrix& m) {
  return Tensor3::from_matrix(m, cfg.n_max, cfg.n_max, cfg.n_bond_types);
}

// Output of a sub-flow with the input seen by each block (needed for the
// log-determinant terms and their gradients).
struct FlowPass {
  Matrix output;
  std::vector<Matrix> block_inputs;
};

// z <- z + R_X(z; A) for every feature block.
inline FlowPass feature_flow_forward(const GrfModel& model, const Matrix& x_deq,
                                     std::span<const Matrix> props) {
  const GraphShape s = model.shape();
  if (x_deq.rows() != static_cast<std::size_t>(s.n_max) ||
      x_deq.cols() != static_cast<std::size_t>(s.n_atom_types)) {
    throw ShapeError("feature_flow_forward: expected N x M features");
  }
  FlowPass pass{x_deq, {}};
  for (const ResidualBlock& b : model.feature_blocks) {
    pass.block_inputs.push_back(pass.output);
    pass.output += b.forward(pass.output, props);
  }
  return pass;
}

inline FlowPass feature_flow_forward(const GrfModel& model, const Matrix& x_deq, const MolGraph& g) {
  const auto props = propagation_matrices(model.config, g);
  return feature_flow_forward(model, x_deq, props);
}

// z <- z + R_A(z) for every adjacency block, on the layout view of the tensor.
inline FlowPass adjacency_flow_forward(const GrfModel& model, const Tensor3& a_deq) {
  const GraphShape s = model.shape();
  if (a_deq.dim1() != static_cast<std::size_t>(s.n_max) || a_deq.dim2() != static_cast<std::size_t>(s.n_max) ||
      a_deq.dim3() != static_cast<std::size_t>(s.n_bond_types)) {
    throw ShapeError("adjacency_flow_forward: expected N x N x R adjacency");
  }
  FlowPass pass{adjacency_view(model.config, a_deq), {}};
  for (const ResidualBlock& b : model.adjacency_blocks) {
    pass.block_inputs.push_back(pass.output);
    pass.output += b.forward(pass.output);
  }
  return pass;
}

inline std::size_t count_parameters(const GrfModel& model) {
  std::size_t n = 0;
  model.for_each_block([&](const ResidualBlock& b) { n += b.parameter_count(); });
  return n;
}

// Closed-form count of the same architecture without building it.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  const std::size_t m = static_cast<std::size_t>(cfg.vocab.feature_count());
  const std::size_t channels = cfg.gcn_mode == GcnMode::Collapsed ? 1 : cfg.n_bond_types - 1;
  const std::size_t w = cfg.adjacency_view().second;
  const std::size_t gcn_layer = channels * m * m + (cfg.bias ? m : 0);
  const std::size_t mlp_weight = cfg.adjacency_rank > 0 ? 2 * w * cfg.adjacency_rank : w * w;
  const std::size_t mlp_layer = mlp_weight + (cfg.bias ? w : 0);
  return static_cast<std::size_t>(cfg.gcn_blocks * cfg.gcn_layers) * gcn_layer +
         static_cast<std::size_t>(cfg.mlp_blocks * cfg.mlp_layers) * mlp_layer;
}

// Coupling-flow model of the same shape: one adjacency coupling layer per node
// (L = N) with an (N*N*R)^2 affine net, plus per-node feature couplings with
// (N*M*R)^2 nets. Used only as an analytic comparison point.
inline double coupling_flow_parameter_estimate(int n, int m, int r, int layers) {
  const double N = n, M = m, R = r, L = layers;
  return L * (N * N * N * N * R * R) + L * (N * N * M * M * R * R);
}

}  // namespace grf
