#include <gtest/gtest.h>

#include "grf/chem.hpp"
#include "grf/inversion.hpp"
#include "grf/likelihood.hpp"
#include "grf/selfcheck.hpp"
#include "oracles.hpp"

using namespace grf;

// Randomised invariants over many generated instances.

TEST(Property, DequantizeQuantizeRoundTrip) {
  Rng rng(1);
  for (std::uint64_t t = 0; t < 500; ++t) {
    const GraphShape s{1 + static_cast<int>(rng() % 9), 2 + static_cast<int>(rng() % 4),
                       2 + static_cast<int>(rng() % 3)};
    const MolGraph g = oracle::random_graph(s, rng);
    ASSERT_TRUE(g.valid()) << g.invariant_violation();
    const DequantGraph d = dequantize(g, 0.9, t);
    EXPECT_EQ(quantize(s, d.adjacency_c, d.features_c), g);
  }
}

TEST(Property, PadUnpadAndCanonicalUnderRelabel) {
  const auto entries = load_dataset(std::string(GRF_DATA_DIR) + "/qm9_like.smi");
  Rng rng(2);
  const AtomVocabulary vocab;
  for (const auto& e : entries) {
    const Molecule m = parse_smiles(e.smiles);
    const Molecule back = unpad_graph(pad_graph(m, vocab, 9), vocab);
    EXPECT_TRUE(oracle::isomorphic(m, back)) << e.smiles;
    const Molecule r = oracle::relabel(m, oracle::random_permutation(m.atom_count(), rng));
    EXPECT_EQ(canonical_smiles(r), canonical_smiles(m)) << e.smiles;
  }
}

TEST(Property, PropagationSpectrumWithinUnitInterval) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    const GraphShape s{1 + static_cast<int>(rng() % 9), 5, 4};
    const auto ev = sym_eigenvalues(augmented_normalized_adjacency(oracle::random_graph(s, rng)));
    EXPECT_GE(ev.front(), -1.0 - 1e-12);
    EXPECT_LE(ev.back(), 1.0 + 1e-12);
  }
}

TEST(Property, EncodeInvertIdentityOnRandomGraphs) {
  for (int variant = 0; variant < 3; ++variant) {
    ModelConfig c = ModelConfig::toy(6);
    c.init_seed = 30 + variant;
    c.bias = variant != 0;
    if (variant == 1) c.adjacency_rank = 1;
    if (variant == 2) {
      c.gcn_mode = GcnMode::PerChannel;
      c.adjacency_layout = AdjacencyLayout::Flattened;
    }
    const GrfModel m = make_model(c);
    Rng rng(40 + variant);
    for (std::uint64_t t = 0; t < 30; ++t) {
      const MolGraph g = oracle::random_graph(c.shape(), rng);
      const DequantGraph d = dequantize(g, c.noise_scale, t);
      const DecodedGraph out = invert_flow(m, encode(m, d, g), InversionConfig{});
      EXPECT_EQ(out.graph, g);
    }
  }
}

TEST(Property, EveryModelBlockContractive) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelConfig c = ModelConfig::toy(2 + static_cast<int>(seed % 8));
    c.init_seed = seed;
    c.adjacency_rank = static_cast<int>(seed % 3);
    const GrfModel m = make_model(c);
    m.for_each_block([&](const ResidualBlock& b) {
      for (const Layer& l : b.layers)
        for (const Weight& w : l.weights) EXPECT_LE(oracle::spectral_norm(w.dense()), w.budget * (1 + 1e-6));
    });
  }
}

TEST(Property, LogDetSeriesTracksExactOnContractiveBlocks) {
  Rng rng(5);
  for (std::size_t t = 0; t < 100; ++t) {
    const auto rb = detail::random_block(rng, derive_seed(5, {t}), 0.0, {3, 3, -1});
    const Matrix x = oracle::random_matrix(rb.rows, rb.cols, rng);
    Matrix j = explicit_jacobian(rb.block, x, rb.props);
    for (std::size_t i = 0; i < j.rows(); ++i) j(i, i) += 1.0;
    const double exact = oracle::logabsdet(j);
    const double series = truncated_series_exact(rb.block, x, rb.props, 250);
    EXPECT_NEAR(series, exact, 1e-6 * std::max(1.0, std::abs(exact)));
  }
}
