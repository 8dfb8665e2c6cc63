#pragma once

// Kekulized-SMILES subset reader/writer, canonical molecule strings, valence
// checks and the validity / novelty / uniqueness / reconstruction ratios.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <vector>

#include "grf/error.hpp"
#include "grf/graph.hpp"
#include "json.hpp"

namespace grf {

class SmilesError : public DataError {
 public:
  SmilesError(const std::string& message, std::size_t offset)
      : DataError("SMILES error at offset " + std::to_string(offset) + ": " + message),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

inline int bond_order_of(char c) {
  switch (c) {
    case '-': return 1;
    case '=': return 2;
    case '#': return 3;
    default: return 0;
  }
}

inline char bond_symbol(int order) {
  switch (order) {
    case 2: return '=';
    case 3: return '#';
    default: return '-';
  }
}

}  // namespace detail

// Grammar: atoms B C N O F P S Cl Br I, bonds - = #, branches, ring closures
// (single digit or %nn). No brackets, charges, isotopes, chirality or
// aromatic lowercase atoms.
inline Molecule parse_smiles(std::string_view s) {
  Molecule mol;
  struct OpenRing {
    int atom;
    int order;  // 0 = unspecified
    std::size_t offset;
  };
  std::map<int, OpenRing> rings;
  std::vector<int> branch_stack;
  std::vector<std::size_t> branch_offsets;
  int prev = -1;
  int pending_order = 0;
  std::size_t pending_offset = 0;

  auto has_bond = [&](int a, int b) {
    return std::any_of(mol.bonds.begin(), mol.bonds.end(), [&](const Bond& x) {
      return (x.i == a && x.j == b) || (x.i == b && x.j == a);
    });
  };
  auto add_bond = [&](int a, int b, int order, std::size_t at) {
    if (a == b) throw SmilesError("ring closure bonds an atom to itself", at);
    if (has_bond(a, b)) throw SmilesError("duplicate bond between the same atoms", at);
    mol.bonds.push_back({a, b, order});
  };
  auto close_ring = [&](int digit, std::size_t at) {
    if (prev < 0) throw SmilesError("ring closure before any atom", at);
    auto it = rings.find(digit);
    if (it == rings.end()) {
      rings[digit] = {prev, pending_order, at};
    } else {
      const OpenRing open = it->second;
      rings.erase(it);
      int order = pending_order != 0 ? pending_order : open.order;
      if (pending_order != 0 && open.order != 0 && pending_order != open.order) {
        throw SmilesError("conflicting ring-closure bond orders", at);
      }
      add_bond(open.atom, prev, order == 0 ? 1 : order, at);
    }
    pending_order = 0;
  };

  if (s.empty()) throw SmilesError("empty string", 0);
  std::size_t pos = 0;
  while (pos < s.size()) {
    const char c = s[pos];
    const std::size_t at = pos;
    if (const int order = detail::bond_order_of(c); order != 0) {
      if (prev < 0) throw SmilesError("bond with no preceding atom", at);
      if (pending_order != 0) throw SmilesError("two consecutive bond symbols", at);
      pending_order = order;
      pending_offset = at;
      ++pos;
      continue;
    }
    if (c == '(') {
      if (prev < 0) throw SmilesError("branch with no preceding atom", at);
      if (pending_order != 0) throw SmilesError("bond symbol before branch", pending_offset);
      if (pos + 1 < s.size() && s[pos + 1] == ')') throw SmilesError("empty branch", at);
      branch_stack.push_back(prev);
      branch_offsets.push_back(at);
      ++pos;
      continue;
    }
    if (c == ')') {
      if (branch_stack.empty()) throw SmilesError("unmatched ')'", at);
      if (pending_order != 0) throw SmilesError("bond symbol with no following atom", pending_offset);
      prev = branch_stack.back();
      branch_stack.pop_back();
      branch_offsets.pop_back();
      ++pos;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      close_ring(c - '0', at);
      ++pos;
      continue;
    }
    if (c == '%') {
      if (pos + 2 >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos + 1])) ||
          !std::isdigit(static_cast<unsigned char>(s[pos + 2]))) {
        throw SmilesError("'%' must be followed by two digits", at);
      }
      close_ring((s[pos + 1] - '0') * 10 + (s[pos + 2] - '0'), at);
      pos += 3;
      continue;
    }
    std::string symbol;
    if (c == 'C' && pos + 1 < s.size() && s[pos + 1] == 'l') {
      symbol = "Cl";
    } else if (c == 'B' && pos + 1 < s.size() && s[pos + 1] == 'r') {
      symbol = "Br";
    } else if (std::string_view("BCNOFPSI").find(c) != std::string_view::npos) {
      symbol = std::string(1, c);
    } else if (std::string_view("bcnops").find(c) != std::string_view::npos) {
      throw SmilesError(std::string("aromatic atom '") + c + "' (input must be kekulized)", at);
    } else {
      throw SmilesError(std::string("unknown symbol '") + c + "'", at);
    }
    const int atom = mol.atom_count();
    mol.atoms.push_back(symbol);
    if (prev >= 0) add_bond(prev, atom, pending_order == 0 ? 1 : pending_order, at);
    pending_order = 0;
    prev = atom;
    pos += symbol.size();
  }
  if (pending_order != 0) throw SmilesError("bond symbol with no following atom", pending_offset);
  if (!branch_stack.empty()) throw SmilesError("unclosed branch", branch_offsets.back());
  if (!rings.empty()) throw SmilesError("dangling ring closure", rings.begin()->second.offset);
  return mol;
}

namespace detail {

inline std::vector<std::vector<std::pair<int, int>>> neighbor_lists(const Molecule& m) {
  std::vector<std::vector<std::pair<int, int>>> nb(m.atoms.size());
  for (const Bond& b : m.bonds) {
    nb[b.i].push_back({b.j, b.order});
    nb[b.j].push_back({b.i, b.order});
  }
  return nb;
}

inline bool is_connected(const Molecule& m) {
  if (m.atoms.empty()) return false;
  auto nb = neighbor_lists(m);
  std::vector<char> seen(m.atoms.size(), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    const int a = stack.back();
    stack.pop_back();
    for (auto [b, o] : nb[a]) {
      if (!seen[b]) {
        seen[b] = 1;
        ++count;
        stack.push_back(b);
      }
    }
  }
  return count == m.atoms.size();
}

// Depth-first SMILES emission. `order_neighbors(atom, candidates)` fixes the
// visiting order of an atom's not-yet-expanded neighbours.
class SmilesEmitter {
 public:
  using Orderer = std::function<void(int atom, std::vector<std::pair<int, int>>& candidates)>;

  SmilesEmitter(const Molecule& m, Orderer orderer)
      : mol_(m), nb_(neighbor_lists(m)), orderer_(std::move(orderer)) {}

  std::string emit(int start) {
    const std::size_t n = mol_.atoms.size();
    visit_order_.assign(n, -1);
    parent_.assign(n, -1);
    children_.assign(n, {});
    ring_open_.assign(n, {});
    ring_close_.assign(n, {});
    counter_ = 0;
    build(start, -1);
    for (std::size_t a = 0; a < n; ++a) {
      if (visit_order_[a] < 0) throw DataError("write_smiles: molecule is not connected");
    }
    for (auto& v : ring_open_)
      std::sort(v.begin(), v.end(), [&](auto& x, auto& y) { return visit_order_[x.first] < visit_order_[y.first]; });
    for (auto& v : ring_close_)
      std::sort(v.begin(), v.end(), [&](auto& x, auto& y) { return visit_order_[x.first] < visit_order_[y.first]; });
    digit_of_.clear();
    in_use_.assign(100, false);
    std::string out;
    write(start, 0, out);
    return out;
  }

 private:
  void build(int a, int parent) {
    visit_order_[a] = counter_++;
    parent_[a] = parent;
    std::vector<std::pair<int, int>> cand;
    for (auto [b, o] : nb_[a])
      if (b != parent) cand.push_back({b, o});
    orderer_(a, cand);
    for (auto [b, o] : cand) {
      if (visit_order_[b] < 0) {
        children_[a].push_back({b, o});
        build(b, a);
      } else if (visit_order_[b] < visit_order_[a]) {
        // b is an ancestor reached again: ring bond opening at b, closing at a.
        bool known = std::any_of(ring_close_[a].begin(), ring_close_[a].end(),
                                 [&](auto& x) { return x.first == b; });
        if (!known) {
          ring_open_[b].push_back({a, o});
          ring_close_[a].push_back({b, o});
        }
      }
    }
  }

  void write(int a, int bond_order, std::string& out) {
    if (bond_order > 1) out.push_back(bond_symbol(bond_order));
    out += mol_.atoms[a];
    for (auto [b, o] : ring_close_[a]) {
      const int d = digit_of_.at(key(b, a));
      in_use_[d] = false;
      out += digit_text(d);
    }
    for (auto [b, o] : ring_open_[a]) {
      int d = 1;
      while (d < 100 && in_use_[d]) ++d;
      if (d >= 100) throw DataError("write_smiles: more than 99 open rings");
      in_use_[d] = true;
      digit_of_[key(a, b)] = d;
      if (o > 1) out.push_back(bond_symbol(o));
      out += digit_text(d);
    }
    const auto& ch = children_[a];
    for (std::size_t k = 0; k < ch.size(); ++k) {
      if (k + 1 < ch.size()) {
        out.push_back('(');
        write(ch[k].first, ch[k].second, out);
        out.push_back(')');
      } else {
        write(ch[k].first, ch[k].second, out);
      }
    }
  }

  static std::string digit_text(int d) {
    return d < 10 ? std::string(1, static_cast<char>('0' + d)) : "%" + std::to_string(d);
  }
  static long key(int opener, int closer) { return static_cast<long>(opener) * 100000 + closer; }

  const Molecule& mol_;
  std::vector<std::vector<std::pair<int, int>>> nb_;
  Orderer orderer_;
  std::vector<int> visit_order_, parent_;
  std::vector<std::vector<std::pair<int, int>>> children_, ring_open_, ring_close_;
  std::map<long, int> digit_of_;
  std::vector<bool> in_use_;
  int counter_ = 0;
};

}  // namespace detail

// DFS from atom 0, neighbours in index order.
inline std::string write_smiles(const Molecule& m) {
  if (m.atoms.empty()) throw DataError("write_smiles: molecule has no atoms");
  detail::SmilesEmitter em(m, [](int, std::vector<std::pair<int, int>>& c) {
    std::sort(c.begin(), c.end());
  });
  return em.emit(0);
}

inline std::string write_smiles(const MolGraph& g, const AtomVocabulary& vocab) {
  return write_smiles(unpad_graph(g, vocab));
}

// Relabelling-invariant atom classes by iterated neighbourhood refinement.
// Returns a rank per atom; equal ranks mean indistinguishable so far.
inline std::vector<int> refined_atom_ranks(const Molecule& m) {
  const std::size_t n = m.atoms.size();
  auto nb = detail::neighbor_lists(m);
  using Key = std::vector<long>;
  std::vector<Key> keys(n);
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<int> orders;
    for (auto [b, o] : nb[a]) orders.push_back(o);
    std::sort(orders.begin(), orders.end());
    Key k;
    for (char ch : m.atoms[a]) k.push_back(ch);
    k.push_back(-1);
    k.push_back(static_cast<long>(nb[a].size()));
    for (int o : orders) k.push_back(o);
    keys[a] = std::move(k);
  }
  auto ranks_of = [&](const std::vector<Key>& ks) {
    std::vector<Key> sorted = ks;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<int> r(n);
    for (std::size_t a = 0; a < n; ++a)
      r[a] = static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), ks[a]) - sorted.begin());
    return std::pair{r, sorted.size()};
  };
  auto [rank, classes] = ranks_of(keys);
  for (std::size_t round = 0; round < n + 1; ++round) {
    std::vector<Key> next(n);
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<long> env;
      for (auto [b, o] : nb[a]) env.push_back(static_cast<long>(rank[b]) * 8 + o);
      std::sort(env.begin(), env.end());
      Key k{rank[a]};
      k.insert(k.end(), env.begin(), env.end());
      next[a] = std::move(k);
    }
    auto [r2, c2] = ranks_of(next);
    rank = std::move(r2);
    if (c2 == classes) break;
    classes = c2;
  }
  return rank;
}

// Relabelling-invariant SMILES: the lexicographically smallest DFS string over
// every start atom of the lowest class and every ordering of equally-ranked
// neighbours. `max_traversals` bounds the search on highly symmetric inputs.
inline std::string canonical_smiles(const Molecule& m, std::size_t max_traversals = 50000) {
  if (m.atoms.empty()) throw DataError("canonical_smiles: molecule has no atoms");
  if (!detail::is_connected(m)) throw DataError("canonical_smiles: molecule is not connected");
  const std::vector<int> rank = refined_atom_ranks(m);
  const int min_rank = *std::min_element(rank.begin(), rank.end());

  // Odometer over tie-breaking decisions: choices[k] selects the ordering used
  // at the k-th atom expansion that had ties.
  std::vector<std::size_t> choices;
  std::vector<std::size_t> radix;
  std::size_t decision = 0;

  auto orderer = [&](int, std::vector<std::pair<int, int>>& c) {
    std::sort(c.begin(), c.end(), [&](auto& x, auto& y) {
      return std::tuple{rank[x.first], x.second, x.first} < std::tuple{rank[y.first], y.second, y.first};
    });
    // Runs of equal (rank, order) can be permuted freely.
    std::vector<std::pair<std::size_t, std::size_t>> runs;
    for (std::size_t s = 0; s < c.size();) {
      std::size_t e = s + 1;
      while (e < c.size() && rank[c[e].first] == rank[c[s].first] && c[e].second == c[s].second) ++e;
      if (e - s > 1) runs.push_back({s, e});
      s = e;
    }
    if (runs.empty()) return;
    std::size_t count = 1;
    for (auto [s, e] : runs)
      for (std::size_t f = 2; f <= e - s; ++f) count *= f;
    if (decision == choices.size()) {
      choices.push_back(0);
      radix.push_back(count);
    }
    std::size_t pick = choices[decision++];
    for (auto [s, e] : runs) {
      std::size_t len = e - s, perms = 1;
      for (std::size_t f = 2; f <= len; ++f) perms *= f;
      std::size_t idx = pick % perms;
      pick /= perms;
      for (std::size_t i = 0; i < idx; ++i) std::next_permutation(c.begin() + s, c.begin() + e);
    }
  };

  std::optional<std::string> best;
  std::size_t traversals = 0;
  for (int start = 0; start < m.atom_count(); ++start) {
    if (rank[start] != min_rank) continue;
    choices.clear();
    radix.clear();
    while (true) {
      decision = 0;
      detail::SmilesEmitter em(m, orderer);
      std::string s = em.emit(start);
      if (!best || s < *best) best = std::move(s);
      if (++traversals >= max_traversals) return *best;
      // Advance the odometer; decisions past the changed one are re-discovered.
      choices.resize(decision);
      radix.resize(decision);
      bool advanced = false;
      while (!choices.empty()) {
        if (choices.back() + 1 < radix.back()) {
          ++choices.back();
          advanced = true;
          break;
        }
        choices.pop_back();
        radix.pop_back();
      }
      if (!advanced) break;
    }
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Valence rules and validity

class ValenceTable {
 public:
  ValenceTable()
      : max_valence_{{"B", 3}, {"C", 4}, {"N", 3}, {"O", 2}, {"F", 1},
                     {"P", 5}, {"S", 6}, {"Cl", 1}, {"Br", 1}, {"I", 1}} {}
  explicit ValenceTable(std::map<std::string, int> table) : max_valence_(std::move(table)) {}

  static ValenceTable from_json(const nlohmann::json& j) {
    std::map<std::string, int> t;
    try {
      for (auto it = j.begin(); it != j.end(); ++it) t[it.key()] = it.value().get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("valence table: ") + e.what());
    }
    return ValenceTable(std::move(t));
  }
  static ValenceTable load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open valence table '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("valence table '" + path + "': " + e.what());
    }
  }

  std::optional<int> max_valence(const std::string& symbol) const {
    auto it = max_valence_.find(symbol);
    if (it == max_valence_.end()) return std::nullopt;
    return it->second;
  }
  bool covers(const AtomVocabulary& vocab) const {
    return std::all_of(vocab.symbols().begin(), vocab.symbols().end(),
                       [&](const std::string& s) { return max_valence_.count(s) > 0; });
  }

 private:
  std::map<std::string, int> max_valence_;
};

// Valid iff at least one atom, a single connected component and no atom whose
// bond-order sum exceeds its maximum valence.
inline bool check_validity(const Molecule& m, const ValenceTable& table) {
  if (m.atoms.empty()) return false;
  std::vector<int> used(m.atoms.size(), 0);
  for (const Bond& b : m.bonds) {
    used[b.i] += b.order;
    used[b.j] += b.order;
  }
  for (std::size_t a = 0; a < m.atoms.size(); ++a) {
    const auto cap = table.max_valence(m.atoms[a]);
    if (!cap || used[a] > *cap) return false;
  }
  return detail::is_connected(m);
}

inline bool check_validity(const MolGraph& g, const AtomVocabulary& vocab, const ValenceTable& table) {
  return check_validity(unpad_graph(g, vocab), table);
}

struct MetricsReport {
  double validity = 0.0;
  double novelty = 0.0;
  double uniqueness = 0.0;
  double reconstruction = 0.0;
  std::size_t sample_count = 0;
  std::size_t valid_count = 0;
  bool no_valid_samples = false;

  nlohmann::json to_json() const {
    return {{"validity", validity},         {"novelty", novelty},
            {"uniqueness", uniqueness},     {"reconstruction", reconstruction},
            {"sample_count", sample_count}, {"valid_count", valid_count},
            {"no_valid_samples", no_valid_samples}};
  }
};

// V over all samples; N and U over valid samples by canonical string;
// R = reconstructed_ok / reconstruction_attempts (0 when there were none).
inline MetricsReport compute_metrics(const std::vector<MolGraph>& generated, const AtomVocabulary& vocab,
                                     const ValenceTable& table,
                                     const std::unordered_set<std::string>& training_set,
                                     std::size_t reconstructed_ok = 0,
                                     std::size_t reconstruction_attempts = 0) {
  if (generated.empty()) throw DataError("compute_metrics: no generated samples");
  MetricsReport r;
  r.sample_count = generated.size();
  std::unordered_set<std::string> unique;
  std::size_t novel = 0;
  for (const MolGraph& g : generated) {
    Molecule m = unpad_graph(g, vocab);
    if (!check_validity(m, table)) continue;
    ++r.valid_count;
    std::string key = canonical_smiles(m);
    if (!training_set.count(key)) ++novel;
    unique.insert(std::move(key));
  }
  r.validity = static_cast<double>(r.valid_count) / static_cast<double>(r.sample_count);
  if (r.valid_count == 0) {
    r.no_valid_samples = true;
  } else {
    r.novelty = static_cast<double>(novel) / static_cast<double>(r.valid_count);
    r.uniqueness = static_cast<double>(unique.size()) / static_cast<double>(r.valid_count);
  }
  if (reconstruction_attempts > 0) {
    r.reconstruction = static_cast<double>(reconstructed_ok) / static_cast<double>(reconstruction_attempts);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dataset files: one SMILES per line (anything after whitespace is ignored).
// Lines starting with '#' are comments; '#' inside a SMILES is a triple bond.

struct DatasetEntry {
  std::string smiles;
  Molecule molecule;
  std::size_t line = 0;
};

inline std::vector<DatasetEntry> read_smiles_lines(std::istream& in, const std::string& name = "<stream>") {
  std::vector<DatasetEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    auto last = line.find_last_not_of(" \t\r");
    std::string smi = line.substr(first, last - first + 1);
    if (auto ws = smi.find_first_of(" \t"); ws != std::string::npos) smi.erase(ws);
    try {
      out.push_back({smi, parse_smiles(smi), lineno});
    } catch (const SmilesError& e) {
      throw DataError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<DatasetEntry> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return read_smiles_lines(in, path);
}

inline std::vector<MolGraph> pad_dataset(const std::vector<DatasetEntry>& entries,
                                         const AtomVocabulary& vocab, int n_max, int n_bond_types = 4) {
  std::vector<MolGraph> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    try {
      out.push_back(pad_graph(e.molecule, vocab, n_max, n_bond_types));
    } catch (const DataError& err) {
      throw DataError("dataset line " + std::to_string(e.line) + " (" + e.smiles + "): " + err.what());
    }
  }
  return out;
}

inline std::unordered_set<std::string> canonical_set(const std::vector<DatasetEntry>& entries) {
  std::unordered_set<std::string> s;
  for (const auto& e : entries) s.insert(canonical_smiles(e.molecule));
  return s;
}

}  // namespace grf
