#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "grf/chem.hpp"
#include "malformed_cases.hpp"
#include "oracles.hpp"

using namespace grf;

namespace {
std::vector<DatasetEntry> corpus() { return load_dataset(std::string(GRF_DATA_DIR) + "/qm9_like.smi"); }
}  // namespace

TEST(Smiles, ParsesBasicForms) {
  Molecule m = parse_smiles("OC(=O)C#N");
  EXPECT_EQ(m.atoms, (std::vector<std::string>{"O", "C", "O", "C", "N"}));
  ASSERT_EQ(m.bonds.size(), 4u);
  EXPECT_EQ(m.bonds[1], (Bond{1, 2, 2}));
  EXPECT_EQ(m.bonds[3], (Bond{3, 4, 3}));

  m = parse_smiles("C1CC1");
  EXPECT_EQ(m.bonds.size(), 3u);
  EXPECT_EQ(m.bonds[2], (Bond{0, 2, 1}));

  m = parse_smiles("C%12CC=%12");
  EXPECT_EQ(m.bonds[2], (Bond{0, 2, 2}));

  m = parse_smiles("ClCBr");
  EXPECT_EQ(m.atoms, (std::vector<std::string>{"Cl", "C", "Br"}));
}

TEST(Smiles, MalformedRejectedWithOffsets) {
  for (const auto& c : malformed_cases()) {
    try {
      parse_smiles(c.smiles);
      ADD_FAILURE() << "accepted '" << c.smiles << "'";
    } catch (const SmilesError& e) {
      EXPECT_EQ(e.offset(), c.offset) << c.smiles << ": " << e.what();
      EXPECT_NE(std::string(e.what()).find(c.fragment), std::string::npos) << c.smiles << ": " << e.what();
      EXPECT_NE(std::string(e.what()).find("offset " + std::to_string(c.offset)), std::string::npos);
    }
  }
}

TEST(Smiles, WriteParseIsIsomorphicOnCorpus) {
  for (const auto& e : corpus()) {
    const std::string out = write_smiles(e.molecule);
    EXPECT_TRUE(oracle::isomorphic(parse_smiles(out), e.molecule)) << e.smiles << " -> " << out;
  }
}

TEST(Smiles, WriterRejectsDisconnected) {
  EXPECT_THROW(write_smiles(Molecule{{"C", "C"}, {}}), DataError);
  EXPECT_THROW(write_smiles(Molecule{}), DataError);
}

TEST(Canonical, InvariantUnderRelabelling) {
  Rng rng(1);
  const auto data = corpus();
  for (std::size_t i = 0; i < data.size(); i += 3) {
    const Molecule& m = data[i].molecule;
    const std::string c = canonical_smiles(m);
    for (int t = 0; t < 4; ++t) {
      const Molecule r = oracle::relabel(m, oracle::random_permutation(m.atom_count(), rng));
      EXPECT_EQ(canonical_smiles(r), c) << data[i].smiles;
    }
    EXPECT_TRUE(oracle::isomorphic(parse_smiles(c), m));
  }
}

TEST(Canonical, SeparatesNonIsomorphic) {
  EXPECT_NE(canonical_smiles(parse_smiles("CCO")), canonical_smiles(parse_smiles("COC")));
  EXPECT_EQ(canonical_smiles(parse_smiles("OCC")), canonical_smiles(parse_smiles("CCO")));
  EXPECT_NE(canonical_smiles(parse_smiles("C=CC")), canonical_smiles(parse_smiles("CCC")));
  // Distinct canonical strings on the corpus match distinct isomorphism classes.
  const auto data = corpus();
  std::set<std::string> keys;
  for (const auto& e : data) keys.insert(canonical_smiles(e.molecule));
  std::size_t classes = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i && !seen; ++j) seen = oracle::isomorphic(data[i].molecule, data[j].molecule);
    classes += seen ? 0 : 1;
  }
  EXPECT_EQ(keys.size(), classes);
}

TEST(Valence, Rules) {
  const ValenceTable t;
  EXPECT_TRUE(check_validity(parse_smiles("O=O"), t));
  EXPECT_TRUE(check_validity(parse_smiles("FF"), t));
  EXPECT_TRUE(check_validity(parse_smiles("C#N"), t));
  EXPECT_FALSE(check_validity(parse_smiles("C(C)(C)(C)(C)C"), t));
  EXPECT_FALSE(check_validity(parse_smiles("C=F"), t));
  EXPECT_FALSE(check_validity(parse_smiles("N#N=C"), t));
  EXPECT_FALSE(check_validity(Molecule{{"C", "C"}, {}}, t));
  EXPECT_FALSE(check_validity(Molecule{}, t));
  const ValenceTable custom = ValenceTable::from_json(nlohmann::json::parse(R"({"C": 5, "F": 1})"));
  EXPECT_TRUE(check_validity(parse_smiles("C(C)(C)(C)(C)C"), custom));
  EXPECT_FALSE(check_validity(parse_smiles("CO"), custom));  // O not covered
  EXPECT_FALSE(custom.covers(AtomVocabulary()));
  EXPECT_THROW(ValenceTable::from_json(nlohmann::json::parse(R"({"C": "four"})")), DataError);
}

TEST(Valence, CorpusIsValid) {
  const ValenceTable t;
  for (const auto& e : corpus()) EXPECT_TRUE(check_validity(e.molecule, t)) << e.smiles;
}

TEST(Metrics, HandCountedExample) {
  const AtomVocabulary v;
  std::vector<MolGraph> gen;
  for (const char* s : {"CCO", "OCC", "CC", "C=F", "COC"}) gen.push_back(pad_graph(parse_smiles(s), v, 4));
  const std::unordered_set<std::string> train{canonical_smiles(parse_smiles("CC"))};
  const MetricsReport r = compute_metrics(gen, v, ValenceTable(), train, 3, 4);
  EXPECT_DOUBLE_EQ(r.validity, 4.0 / 5.0);
  EXPECT_DOUBLE_EQ(r.uniqueness, 3.0 / 4.0);  // CCO twice
  EXPECT_DOUBLE_EQ(r.novelty, 3.0 / 4.0);     // CC is known
  EXPECT_DOUBLE_EQ(r.reconstruction, 3.0 / 4.0);
  EXPECT_FALSE(r.no_valid_samples);
}

TEST(Metrics, NoValidSamplesFlagged) {
  const AtomVocabulary v;
  const MetricsReport r = compute_metrics({pad_graph(parse_smiles("C=F"), v, 2)}, v, ValenceTable(), {});
  EXPECT_EQ(r.validity, 0.0);
  EXPECT_TRUE(r.no_valid_samples);
  EXPECT_THROW(compute_metrics({}, v, ValenceTable(), {}), DataError);
}

TEST(Metrics, RecountOracle) {
  // Metrics over a random mixture, recounted with an independent multiset pass.
  Rng rng(3);
  const auto data = corpus();
  const AtomVocabulary v;
  std::vector<MolGraph> gen;
  std::vector<std::string> keys;
  for (int i = 0; i < 300; ++i) {
    const auto& e = data[rng() % 40];
    gen.push_back(pad_graph(e.molecule, v, 9));
    keys.push_back(canonical_smiles(oracle::relabel(e.molecule, oracle::random_permutation(e.molecule.atom_count(), rng))));
  }
  std::unordered_set<std::string> train;
  for (int i = 0; i < 20; ++i) train.insert(canonical_smiles(data[i].molecule));
  const MetricsReport r = compute_metrics(gen, v, ValenceTable(), train);
  const std::set<std::string> uniq(keys.begin(), keys.end());
  const auto novel = std::count_if(keys.begin(), keys.end(), [&](const std::string& k) { return !train.count(k); });
  EXPECT_DOUBLE_EQ(r.validity, 1.0);
  EXPECT_DOUBLE_EQ(r.uniqueness, static_cast<double>(uniq.size()) / 300.0);
  EXPECT_DOUBLE_EQ(r.novelty, static_cast<double>(novel) / 300.0);
}

TEST(Dataset, CommentsTripleBondsAndErrors) {
  std::istringstream in("# header\nC#N\n\n  CCO  trailing note\n# another\n");
  const auto d = read_smiles_lines(in);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].smiles, "C#N");
  EXPECT_EQ(d[1].smiles, "CCO");
  EXPECT_EQ(d[1].line, 4u);
  std::istringstream bad("CC\nC(\n");
  try {
    read_smiles_lines(bad, "set.smi");
    ADD_FAILURE();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("set.smi:2"), std::string::npos);
  }
  EXPECT_THROW(load_dataset("/nonexistent/file.smi"), DataError);
}

TEST(Dataset, CorpusShape) {
  const auto data = corpus();
  EXPECT_GE(data.size(), 200u);
  for (const auto& e : data) EXPECT_LE(e.molecule.atom_count(), 9);
  const auto toy = load_dataset(std::string(GRF_DATA_DIR) + "/toy6.smi");
  EXPECT_EQ(toy.size(), 50u);
  for (const auto& e : toy) EXPECT_LE(e.molecule.atom_count(), 6);
}
