#include <gtest/gtest.h>

#include "grf/chem.hpp"
#include "grf/graph.hpp"
#include "oracles.hpp"

using namespace grf;

namespace {
const AtomVocabulary vocab;
const GraphShape qm9{9, 5, 4};
}  // namespace

TEST(Padding, RoundTripAndInvariants) {
  const Molecule m = parse_smiles("C1=CC(=O)N1");
  const MolGraph g = pad_graph(m, vocab, 9);
  EXPECT_TRUE(g.valid()) << g.invariant_violation();
  EXPECT_EQ(g.real_atom_count(), 5);
  EXPECT_EQ(g.bond_channel(0, 1), 1);  // double
  EXPECT_EQ(g.bond_channel(2, 3), 1);
  EXPECT_EQ(g.bond_channel(0, 2), 3);  // virtual
  EXPECT_TRUE(g.is_virtual_atom(8));
  const Molecule back = unpad_graph(g, vocab);
  EXPECT_EQ(back.atoms, m.atoms);
  EXPECT_TRUE(oracle::isomorphic(back, m));
}

TEST(Padding, Errors) {
  EXPECT_THROW(pad_graph(parse_smiles("CCCCCCCCCC"), vocab, 9), DataError);
  EXPECT_THROW(pad_graph(parse_smiles("CS"), vocab, 9), DataError);
  Molecule bad{{"C", "C"}, {{0, 1, 4}}};
  EXPECT_THROW(pad_graph(bad, vocab, 9), DataError);
}

TEST(Padding, InvariantViolationsReported) {
  MolGraph g = pad_graph(parse_smiles("CO"), vocab, 4);
  g.adjacency(0, 1, 0) = 0.0;
  EXPECT_FALSE(g.valid());
  g = pad_graph(parse_smiles("CO"), vocab, 4);
  g.features(1, 0) = 1.0;
  EXPECT_NE(g.invariant_violation().find("one-hot"), std::string::npos);
}

TEST(GraphJson, RoundTripAndErrors) {
  const Molecule m = parse_smiles("C#CC(F)O");
  EXPECT_EQ(molecule_from_json(molecule_to_json(m)), m);
  EXPECT_THROW(molecule_from_json(nlohmann::json::parse(R"({"n":2,"atom_types":["C"],"bonds":[]})")), DataError);
  EXPECT_THROW(molecule_from_json(nlohmann::json::parse(R"({"n":2,"atom_types":["C","C"],"bonds":[[0,2,1]]})")),
               DataError);
  EXPECT_THROW(molecule_from_json(nlohmann::json::parse(R"({"atom_types":["C"]})")), DataError);
}

TEST(Dequantization, NoiseRangeAndDeterminism) {
  Rng rng(1);
  const MolGraph g = oracle::random_graph(qm9, rng);
  const DequantGraph d = dequantize(g, 0.9, 42);
  for (std::size_t i = 0; i < g.adjacency.size(); ++i) {
    const double u = d.adjacency_c.flat()[i] - g.adjacency.flat()[i];
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 0.9);
  }
  for (std::size_t i = 0; i < g.features.size(); ++i) {
    const double u = d.features_c[i] - g.features[i];
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 0.9);
  }
  EXPECT_EQ(dequantize(g, 0.9, 42).adjacency_c, d.adjacency_c);
  EXPECT_NE(dequantize(g, 0.9, 43).adjacency_c, d.adjacency_c);
  EXPECT_THROW(dequantize(g, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(dequantize(g, 0.0, 1), std::invalid_argument);
}

TEST(Quantization, InvertsDequantization) {
  Rng rng(2);
  for (int t = 0; t < 300; ++t) {
    const MolGraph g = oracle::random_graph(qm9, rng);
    const DequantGraph d = dequantize(g, 0.9, t);
    EXPECT_EQ(quantize(qm9, d.adjacency_c, d.features_c), g);
  }
}

TEST(Quantization, TiesGoToLowestAndDiagonalIsVirtual) {
  Tensor3 a(2, 2, 3, 0.5);
  const Tensor3 q = quantize_adjacency(a);
  EXPECT_EQ(q(0, 1, 0), 1.0);
  EXPECT_EQ(q(1, 0, 0), 1.0);
  EXPECT_EQ(q(0, 0, 2), 1.0);
  EXPECT_EQ(quantize_features(Matrix{{0.3, 0.3, 0.1}})(0, 0), 1.0);
  // Asymmetric input is symmetrised by averaging.
  Tensor3 b(2, 2, 2);
  b(0, 1, 0) = 1.0;
  b(1, 0, 1) = 0.8;
  b(1, 0, 0) = 0.0;
  b(0, 1, 1) = 0.0;
  EXPECT_EQ(quantize_adjacency(b)(1, 0, 0), 1.0);
}

TEST(Propagation, PathOfThree) {
  // C-C-C: degrees with self loops 2, 3, 2.
  const MolGraph g = pad_graph(parse_smiles("CCC"), vocab, 3);
  const Matrix p = augmented_normalized_adjacency(g);
  EXPECT_NEAR(p(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(p(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_EQ(p(0, 2), 0.0);
}

TEST(Propagation, BondOrderCollapses) {
  const Matrix a = collapsed_adjacency(pad_graph(parse_smiles("C#C"), vocab, 2));
  EXPECT_EQ(a(0, 1), 1.0);
  EXPECT_EQ(a(0, 0), 0.0);
  const auto per = channel_normalized_adjacency(pad_graph(parse_smiles("C#C"), vocab, 2));
  ASSERT_EQ(per.size(), 3u);
  EXPECT_EQ(per[0](0, 1), 0.0);
  EXPECT_NEAR(per[2](0, 1), 0.5, 1e-15);
}

TEST(Propagation, SpectrumWithinUnitDisk) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const MolGraph g = oracle::random_graph(qm9, rng);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(oracle::to_eigen(augmented_normalized_adjacency(g)));
    EXPECT_LE(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0 + 1e-9);
  }
}

TEST(Propagation, PermutationEquivariant) {
  Rng rng(4);
  const MolGraph g = oracle::random_graph(qm9, rng);
  const auto perm = oracle::random_permutation(9, rng);
  const Matrix p = augmented_normalized_adjacency(g);
  const Matrix pp = augmented_normalized_adjacency(permute_nodes(g, perm));
  for (int a = 0; a < 9; ++a)
    for (int b = 0; b < 9; ++b) EXPECT_DOUBLE_EQ(pp(a, b), p(perm[a], perm[b]));
}

TEST(LatentPoint, ConcatSplit) {
  Rng rng(5);
  LatentPoint z{Tensor3(2, 2, 3), oracle::random_matrix(2, 4, rng)};
  for (double& x : z.z_adjacency.flat()) x = uniform01(rng);
  const LatentPoint back = LatentPoint::split(z.concat(), GraphShape{2, 4, 3});
  EXPECT_EQ(back.z_adjacency, z.z_adjacency);
  EXPECT_EQ(back.z_features, z.z_features);
  EXPECT_THROW(LatentPoint::split(std::vector<double>(3), GraphShape{2, 4, 3}), ShapeError);
}
