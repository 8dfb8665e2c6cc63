#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Malformed SMILES with the expected error offset and a fragment of the message.
struct MalformedCase {
  std::string smiles;
  std::size_t offset;
  std::string fragment;
};

inline const std::vector<MalformedCase>& malformed_cases() {
  static const std::vector<MalformedCase> cases = {
      {"", 0, "empty"},
      {"C(", 1, "unclosed branch"},
      {"C)", 1, "unmatched"},
      {"C1CC", 1, "dangling ring"},
      {"=C", 0, "no preceding atom"},
      {"C==C", 2, "consecutive bond"},
      {"C()C", 1, "empty branch"},
      {"c1ccccc1", 0, "aromatic"},
      {"CX", 1, "unknown symbol"},
      {"C=", 1, "no following atom"},
      {"C1C1", 3, "duplicate bond"},
      {"C11", 2, "to itself"},
      {"C=1CC#1", 6, "conflicting"},
      {"(C)", 0, "no preceding atom"},
      {"C%1", 1, "two digits"},
      {"1CC", 0, "before any atom"},
      {"CC(=)C", 3, "no following atom"},
      {"C=(C)", 1, "before branch"},
      {"C[NH]", 1, "unknown symbol"},
      {"CC.C", 2, "unknown symbol"},
  };
  return cases;
}
