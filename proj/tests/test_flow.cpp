#include <gtest/gtest.h>

#include "grf/chem.hpp"
#include "grf/flow.hpp"
#include "oracles.hpp"

using namespace grf;

namespace {

ModelConfig small_config(int n = 4) {
  ModelConfig c = ModelConfig::toy(n);
  c.mlp_blocks = 2;
  c.gcn_layers = 2;
  c.bias = true;
  c.init_seed = 5;
  return c;
}

// Forward-difference free Jacobian column check: central differences of R.
Matrix fd_jvp(const ResidualBlock& b, const Matrix& x, const Matrix& v, std::span<const Matrix> props) {
  const double h = 1e-6;
  Matrix xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] += h * v[i];
    xm[i] -= h * v[i];
  }
  Matrix d = b.forward(xp, props) - b.forward(xm, props);
  d *= 1.0 / (2 * h);
  return d;
}

}  // namespace

TEST(Elu, ValuesAndDerivatives) {
  EXPECT_EQ(elu(2.0), 2.0);
  EXPECT_NEAR(elu(-1.0), std::exp(-1.0) - 1.0, 1e-16);
  EXPECT_EQ(elu_prime(0.5), 1.0);
  EXPECT_NEAR(elu_prime(-2.0), std::exp(-2.0), 1e-16);
  EXPECT_LE(elu_prime(-100.0), 1.0);
}

TEST(Model, WeightsStartWithinBudget) {
  for (int rank : {0, 2}) {
    for (auto mode : {GcnMode::Collapsed, GcnMode::PerChannel}) {
      ModelConfig c = small_config();
      c.adjacency_rank = rank;
      c.gcn_mode = mode;
      const GrfModel m = make_model(c);
      m.for_each_block([&](const ResidualBlock& b) {
        EXPECT_LT(b.lipschitz_bound(), 1.0);
        EXPECT_NEAR(b.lipschitz_bound(), 0.9, 1e-9);
        double exact = 1.0;
        for (const Layer& l : b.layers) {
          double s = 0.0;
          for (const Weight& w : l.weights) s += oracle::spectral_norm(w.dense());
          exact *= s;
        }
        EXPECT_LE(exact, 0.9 * (1.0 + 1e-8));
      });
    }
  }
}

TEST(Model, ConfigValidation) {
  ModelConfig c = small_config();
  c.lipschitz_budget = 1.0;
  EXPECT_THROW(make_model(c), DataError);
  c = small_config();
  c.mlp_layers = 0;
  EXPECT_THROW(make_model(c), DataError);
  EXPECT_THROW(adjacency_layout_from_string("diagonal"), DataError);
}

TEST(Model, ZeroWeightsGiveIdentity) {
  GrfModel m = make_model(small_config());
  for (auto& b : m.feature_blocks)
    for (auto& l : b.layers) l.bias *= 0.0;
  for (auto& b : m.adjacency_blocks)
    for (auto& l : b.layers) l.bias *= 0.0;
  zero_weights(m);
  Rng rng(1);
  const MolGraph g = oracle::random_graph(m.shape(), rng);
  const DequantGraph d = dequantize(g, 0.9, 3);
  EXPECT_EQ(feature_flow_forward(m, d.features_c, g).output, d.features_c);
  EXPECT_EQ(adjacency_unview(m.config, adjacency_flow_forward(m, d.adjacency_c).output), d.adjacency_c);
}

TEST(Model, LinearizationMatchesFiniteDifferences) {
  for (auto mode : {GcnMode::Collapsed, GcnMode::PerChannel}) {
    ModelConfig c = small_config();
    c.gcn_mode = mode;
    c.adjacency_rank = mode == GcnMode::PerChannel ? 3 : 0;
    GrfModel m = make_model(c);
    Rng rng(2);
    for (auto& b : m.feature_blocks)
      for (auto& l : b.layers)
        for (double& x : l.bias.flat()) x = uniform01(rng) - 0.5;
    const MolGraph g = oracle::random_graph(m.shape(), rng);
    const auto props = propagation_matrices(c, g);
    const Matrix x = oracle::random_matrix(4, 5, rng);
    const Matrix v = oracle::random_matrix(4, 5, rng);
    const auto& fb = m.feature_blocks.front();
    EXPECT_LT(oracle::max_abs_diff(fb.linearize(x, props).apply(v), fd_jvp(fb, x, v, props)), 1e-7);
    const auto& ab = m.adjacency_blocks.front();
    auto [rows, cols] = c.adjacency_view();
    const Matrix xa = oracle::random_matrix(rows, cols, rng);
    const Matrix va = oracle::random_matrix(rows, cols, rng);
    EXPECT_LT(oracle::max_abs_diff(ab.linearize(xa).apply(va), fd_jvp(ab, xa, va, {})), 1e-7);
  }
}

TEST(Model, FeatureFlowPermutationEquivariant) {
  const GrfModel m = make_model(small_config(6));
  Rng rng(3);
  const MolGraph g = oracle::random_graph(m.shape(), rng);
  const auto perm = oracle::random_permutation(6, rng);
  const Matrix x = oracle::random_matrix(6, 5, rng);
  const Matrix z = feature_flow_forward(m, x, g).output;
  const Matrix zp = feature_flow_forward(m, permute_rows(x, perm), permute_nodes(g, perm)).output;
  EXPECT_LT(oracle::max_abs_diff(zp, permute_rows(z, perm)), 1e-12);
}

TEST(Model, PairSlicesAdjacencyFlowPermutationEquivariant) {
  ModelConfig c = small_config(5);
  c.adjacency_layout = AdjacencyLayout::PairSlices;
  const GrfModel m = make_model(c);
  Rng rng(4);
  Tensor3 a(5, 5, 4);
  for (double& x : a.flat()) x = uniform01(rng);
  const auto perm = oracle::random_permutation(5, rng);
  const Tensor3 z = adjacency_unview(c, adjacency_flow_forward(m, a).output);
  const Tensor3 zp = adjacency_unview(c, adjacency_flow_forward(m, permute_nodes(a, perm)).output);
  const Tensor3 want = permute_nodes(z, perm);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(zp.flat()[i], want.flat()[i], 1e-12);
}

TEST(Model, ShapeErrors) {
  const GrfModel m = make_model(small_config());
  EXPECT_THROW(feature_flow_forward(m, Matrix(3, 5), std::vector<Matrix>{Matrix::identity(3)}), ShapeError);
  EXPECT_THROW(adjacency_flow_forward(m, Tensor3(4, 4, 3)), ShapeError);
}

TEST(ParameterCount, ClosedFormMatchesBuiltModel) {
  for (auto layout : {AdjacencyLayout::Flattened, AdjacencyLayout::NodeRows, AdjacencyLayout::PairSlices})
    for (int rank : {0, 1, 3})
      for (bool bias : {false, true})
        for (auto mode : {GcnMode::Collapsed, GcnMode::PerChannel}) {
          ModelConfig c = small_config(5);
          c.adjacency_layout = layout;
          c.adjacency_rank = rank;
          c.bias = bias;
          c.gcn_mode = mode;
          EXPECT_EQ(count_parameters(make_model(c)), count_parameters(c));
        }
}

TEST(ParameterCount, FullQm9Shape) {
  // N = 9, R = 4, node-row view: width N R = 36; M = 5.
  const ModelConfig c = ModelConfig::qm9_full();
  const std::size_t mlp = 32u * 25u * 36u * 36u;
  const std::size_t gcn = 1u * 1u * 5u * 5u;
  EXPECT_EQ(count_parameters(c), mlp + gcn);
}
