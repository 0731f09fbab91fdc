// SPDX-License-Identifier: Apache-2.0
//
// SMILES parsing into molecular graphs, OGB-style integer featurization,
// Bemis-Murcko style scaffolds, hashed scaffold keys and the stratified
// scaffold split.
//
// Supported SMILES subset: organic-subset atoms (B C N O P S F Cl Br I),
// aromatic b c n o p s, bracket atoms with isotope (ignored), chirality
// (ignored), hydrogen count and charge, ring closures 1-9 and %nn, branches,
// bond symbols - = # : and the directional / \ markers (ignored), and '.'
// separated components.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "moce/common.hpp"

namespace moce::mol {

enum class BondOrder : std::uint8_t { kSingle = 0, kDouble = 1, kTriple = 2, kAromatic = 3 };

struct Atom {
  int element = 0;  // atomic number
  int degree = 0;
  int formal_charge = 0;
  int explicit_hydrogens = 0;
  int implicit_hydrogens = 0;
  bool is_aromatic = false;
  bool in_ring = false;
  bool from_bracket = false;
  std::size_t offset = 0;  // byte offset of the atom token in the source
};

struct Bond {
  std::size_t begin = 0;
  std::size_t end = 0;
  BondOrder order = BondOrder::kSingle;
  bool in_ring = false;
};

struct MolecularGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  std::string source_smiles;

  std::size_t num_atoms() const noexcept { return atoms.size(); }
  std::size_t num_bonds() const noexcept { return bonds.size(); }

  /// Per-atom list of (neighbor, bond index).
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adjacency()
      const {
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> adj(
        atoms.size());
    for (std::size_t b = 0; b < bonds.size(); ++b) {
      adj[bonds[b].begin].emplace_back(bonds[b].end, b);
      adj[bonds[b].end].emplace_back(bonds[b].begin, b);
    }
    return adj;
  }
};

class SmilesError : public Error {
 public:
  enum class Kind {
    kUnbalancedParenthesis,
    kUnmatchedRingClosure,
    kUnknownAtomToken,
    kValenceError,
    kSyntax,
  };
  SmilesError(Kind kind, std::size_t offset, const std::string& what)
      : Error(what + " at offset " + std::to_string(offset)),
        kind_(kind),
        offset_(offset) {}
  Kind kind() const noexcept { return kind_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

class UnsupportedElement : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<std::string_view, 119> kElementSymbols = {
    "*",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na",
    "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",
    "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br",
    "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag",
    "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu",
    "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi",
    "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am",
    "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh",
    "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

inline int element_from_symbol(std::string_view sym) {
  for (std::size_t z = 1; z < kElementSymbols.size(); ++z)
    if (kElementSymbols[z] == sym) return static_cast<int>(z);
  return 0;
}

namespace detail {

// Standard valences for organic-subset atoms, ascending.
inline std::span<const int> standard_valences(int element) {
  static constexpr int kB[] = {3}, kC[] = {4}, kN[] = {3, 5}, kO[] = {2},
                       kP[] = {3, 5}, kS[] = {2, 4, 6}, kHal[] = {1};
  switch (element) {
    case 5: return kB;
    case 6: return kC;
    case 7: return kN;
    case 8: return kO;
    case 15: return kP;
    case 16: return kS;
    case 9: case 17: case 35: case 53: return kHal;
    default: return {};
  }
}

inline int bond_valence(BondOrder o) {
  switch (o) {
    case BondOrder::kDouble: return 2;
    case BondOrder::kTriple: return 3;
    default: return 1;
  }
}

class SmilesParser {
 public:
  explicit SmilesParser(std::string_view s) : s_(s) {}

  MolecularGraph run() {
    using K = SmilesError::Kind;
    if (s_.empty()) throw SmilesError(K::kSyntax, 0, "empty SMILES");
    for (char c : s_)
      if (static_cast<unsigned char>(c) > 127)
        throw SmilesError(K::kSyntax, 0, "non-ASCII SMILES");
    g_.source_smiles = std::string(s_);
    while (pos_ < s_.size()) step();
    if (!branches_.empty())
      throw SmilesError(K::kUnbalancedParenthesis, branches_.back().second,
                        "unclosed branch");
    if (!rings_.empty())
      throw SmilesError(K::kUnmatchedRingClosure, rings_.begin()->second.offset,
                        "ring bond " + std::to_string(rings_.begin()->first) +
                            " never closed");
    if (pending_) throw SmilesError(K::kSyntax, pending_pos_, "dangling bond");
    if (g_.atoms.empty()) throw SmilesError(K::kSyntax, 0, "no atoms");
    finish();
    return std::move(g_);
  }

 private:
  struct OpenRing {
    std::size_t atom;
    char bond;
    std::size_t offset;
  };

  void step() {
    using K = SmilesError::Kind;
    const std::size_t at = pos_;
    const char c = s_[pos_];
    switch (c) {
      case '-': case '=': case '#': case ':':
        if (pending_) throw SmilesError(K::kSyntax, at, "two bond symbols");
        pending_ = c;
        pending_pos_ = at;
        ++pos_;
        return;
      case '/': case '\\':
        ++pos_;
        return;
      case '(':
        if (prev_ < 0) throw SmilesError(K::kSyntax, at, "branch before atom");
        branches_.emplace_back(static_cast<std::size_t>(prev_), at);
        ++pos_;
        return;
      case ')':
        if (branches_.empty())
          throw SmilesError(K::kUnbalancedParenthesis, at, "unmatched ')'");
        if (pending_) throw SmilesError(K::kSyntax, pending_pos_, "dangling bond");
        prev_ = static_cast<long>(branches_.back().first);
        branches_.pop_back();
        ++pos_;
        return;
      case '.':
        if (pending_) throw SmilesError(K::kSyntax, pending_pos_, "dangling bond");
        prev_ = -1;
        ++pos_;
        return;
      case '[':
        bracket_atom();
        return;
      case '%':
        if (pos_ + 2 >= s_.size())
          throw SmilesError(K::kSyntax, at, "truncated %nn ring bond");
        if (!std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])) ||
            !std::isdigit(static_cast<unsigned char>(s_[pos_ + 2])))
          throw SmilesError(K::kSyntax, at, "malformed %nn ring bond");
        ring_bond((s_[pos_ + 1] - '0') * 10 + (s_[pos_ + 2] - '0'), at);
        pos_ += 3;
        return;
      default:
        break;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      ring_bond(c - '0', at);
      ++pos_;
      return;
    }
    organic_atom();
  }

  void organic_atom() {
    const std::size_t at = pos_;
    Atom a;
    a.offset = at;
    const std::string_view rest = s_.substr(pos_);
    if (rest.starts_with("Cl")) {
      a.element = 17, pos_ += 2;
    } else if (rest.starts_with("Br")) {
      a.element = 35, pos_ += 2;
    } else {
      switch (s_[pos_]) {
        case 'B': a.element = 5; break;
        case 'C': a.element = 6; break;
        case 'N': a.element = 7; break;
        case 'O': a.element = 8; break;
        case 'P': a.element = 15; break;
        case 'S': a.element = 16; break;
        case 'F': a.element = 9; break;
        case 'I': a.element = 53; break;
        case 'b': a.element = 5, a.is_aromatic = true; break;
        case 'c': a.element = 6, a.is_aromatic = true; break;
        case 'n': a.element = 7, a.is_aromatic = true; break;
        case 'o': a.element = 8, a.is_aromatic = true; break;
        case 'p': a.element = 15, a.is_aromatic = true; break;
        case 's': a.element = 16, a.is_aromatic = true; break;
        default:
          throw SmilesError(SmilesError::Kind::kUnknownAtomToken, at,
                            std::string("unknown atom token '") + s_[pos_] + "'");
      }
      ++pos_;
    }
    add_atom(a);
  }

  void bracket_atom() {
    using K = SmilesError::Kind;
    const std::size_t at = pos_;
    const std::size_t close = s_.find(']', pos_);
    if (close == std::string_view::npos)
      throw SmilesError(K::kUnknownAtomToken, at, "unterminated bracket atom");
    std::string_view body = s_.substr(pos_ + 1, close - pos_ - 1);
    std::size_t i = 0;
    while (i < body.size() && std::isdigit(static_cast<unsigned char>(body[i]))) ++i;
    Atom a;
    a.offset = at;
    a.from_bracket = true;
    if (i >= body.size())
      throw SmilesError(K::kUnknownAtomToken, at, "bracket atom without element");
    if (std::islower(static_cast<unsigned char>(body[i]))) {
      // aromatic: two-letter forms first
      static constexpr std::pair<std::string_view, int> kArom[] = {
          {"se", 34}, {"as", 33}, {"te", 52}, {"b", 5},  {"c", 6},
          {"n", 7},   {"o", 8},   {"p", 15},  {"s", 16}};
      bool found = false;
      for (auto [sym, z] : kArom)
        if (body.substr(i).starts_with(sym)) {
          a.element = z, a.is_aromatic = true, i += sym.size(), found = true;
          break;
        }
      if (!found)
        throw SmilesError(K::kUnknownAtomToken, at,
                          "unknown aromatic symbol in '" + std::string(body) + "'");
    } else {
      int z = 0;
      if (i + 1 < body.size() && std::islower(static_cast<unsigned char>(body[i + 1])))
        z = element_from_symbol(body.substr(i, 2));
      if (z != 0) {
        i += 2;
      } else {
        z = element_from_symbol(body.substr(i, 1));
        if (z == 0)
          throw SmilesError(K::kUnknownAtomToken, at,
                            "unknown element in '" + std::string(body) + "'");
        i += 1;
      }
      a.element = z;
    }
    while (i < body.size() && body[i] == '@') ++i;
    if (i < body.size() && body[i] == 'H') {
      ++i;
      int h = 1;
      if (i < body.size() && std::isdigit(static_cast<unsigned char>(body[i])))
        h = body[i++] - '0';
      a.explicit_hydrogens = h;
    }
    if (i < body.size() && (body[i] == '+' || body[i] == '-')) {
      const char sign = body[i++];
      int mag = 1;
      if (i < body.size() && std::isdigit(static_cast<unsigned char>(body[i]))) {
        mag = body[i++] - '0';
      } else {
        while (i < body.size() && body[i] == sign) ++mag, ++i;
      }
      a.formal_charge = sign == '+' ? mag : -mag;
    }
    if (i < body.size() && body[i] == ':') {
      ++i;
      while (i < body.size() && std::isdigit(static_cast<unsigned char>(body[i]))) ++i;
    }
    if (i != body.size())
      throw SmilesError(K::kUnknownAtomToken, at,
                        "unparsed bracket content '" + std::string(body) + "'");
    pos_ = close + 1;
    add_atom(a);
  }

  void add_atom(const Atom& a) {
    const std::size_t idx = g_.atoms.size();
    g_.atoms.push_back(a);
    if (prev_ >= 0) {
      add_bond(static_cast<std::size_t>(prev_), idx, pending_, a.offset);
    } else if (pending_) {
      throw SmilesError(SmilesError::Kind::kSyntax, pending_pos_,
                        "bond without a preceding atom");
    }
    pending_ = 0;
    prev_ = static_cast<long>(idx);
  }

  void ring_bond(int number, std::size_t at) {
    using K = SmilesError::Kind;
    if (prev_ < 0) throw SmilesError(K::kSyntax, at, "ring bond before atom");
    const auto me = static_cast<std::size_t>(prev_);
    auto it = rings_.find(number);
    if (it == rings_.end()) {
      rings_.emplace(number, OpenRing{me, pending_, at});
    } else {
      const OpenRing open = it->second;
      rings_.erase(it);
      char sym = pending_;
      if (open.bond && sym && open.bond != sym)
        throw SmilesError(K::kUnmatchedRingClosure, at,
                          "conflicting ring bond symbols");
      if (!sym) sym = open.bond;
      if (open.atom == me)
        throw SmilesError(K::kUnmatchedRingClosure, at, "ring bond to itself");
      add_bond(open.atom, me, sym, at);
    }
    pending_ = 0;
  }

  void add_bond(std::size_t a, std::size_t b, char sym, std::size_t at) {
    using K = SmilesError::Kind;
    for (const Bond& e : g_.bonds)
      if ((e.begin == a && e.end == b) || (e.begin == b && e.end == a))
        throw SmilesError(K::kUnmatchedRingClosure, at, "duplicate bond");
    const bool arom = g_.atoms[a].is_aromatic && g_.atoms[b].is_aromatic;
    Bond bond{a, b, BondOrder::kSingle, false};
    switch (sym) {
      case '=': bond.order = BondOrder::kDouble; break;
      case '#': bond.order = BondOrder::kTriple; break;
      case '-': bond.order = BondOrder::kSingle; break;
      case ':':
        if (!arom)
          throw SmilesError(K::kSyntax, at, "aromatic bond between non-aromatic atoms");
        bond.order = BondOrder::kAromatic;
        break;
      default:
        bond.order = arom ? BondOrder::kAromatic : BondOrder::kSingle;
    }
    g_.bonds.push_back(bond);
  }

  void finish() {
    std::vector<int> valence(g_.atoms.size(), 0);
    for (const Bond& b : g_.bonds) {
      const int v = bond_valence(b.order);
      valence[b.begin] += v;
      valence[b.end] += v;
      ++g_.atoms[b.begin].degree;
      ++g_.atoms[b.end].degree;
    }
    for (std::size_t i = 0; i < g_.atoms.size(); ++i) {
      Atom& a = g_.atoms[i];
      if (a.from_bracket) continue;
      const auto vals = standard_valences(a.element);
      int used = valence[i];
      // An aromatic atom spends one valence unit on the pi system when its
      // default valence leaves room for it (pyridine n yes, pyrrole-type no).
      if (a.is_aromatic && used + 1 <= vals.front()) ++used;
      const auto fit = std::find_if(vals.begin(), vals.end(),
                                    [&](int v) { return v >= used; });
      if (fit == vals.end())
        throw SmilesError(SmilesError::Kind::kValenceError, a.offset,
                          "valence " + std::to_string(used) + " exceeds " +
                              std::to_string(vals.back()) + " for " +
                              std::string(kElementSymbols[a.element]));
      a.implicit_hydrogens = *fit - used;
    }
    perceive_rings(g_);
  }

 public:
  // A bond lies on a cycle iff it is not a bridge.
  static void perceive_rings(MolecularGraph& g) {
    const std::size_t n = g.atoms.size();
    const auto adj = g.adjacency();
    std::vector<int> disc(n, -1), low(n, 0);
    int timer = 0;
    for (Bond& b : g.bonds) b.in_ring = true;
    struct Frame {
      std::size_t v;
      std::size_t parent_bond;
      std::size_t next;
    };
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);
    for (std::size_t root = 0; root < n; ++root) {
      if (disc[root] >= 0) continue;
      std::vector<Frame> stack{{root, kNone, 0}};
      disc[root] = low[root] = timer++;
      while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < adj[f.v].size()) {
          const auto [w, bi] = adj[f.v][f.next++];
          if (bi == f.parent_bond) continue;
          if (disc[w] < 0) {
            disc[w] = low[w] = timer++;
            stack.push_back({w, bi, 0});
          } else {
            low[f.v] = std::min(low[f.v], disc[w]);
          }
        } else {
          const Frame done = f;
          stack.pop_back();
          if (!stack.empty()) {
            const std::size_t u = stack.back().v;
            low[u] = std::min(low[u], low[done.v]);
            if (low[done.v] > disc[u]) g.bonds[done.parent_bond].in_ring = false;
          }
        }
      }
    }
    for (Atom& a : g.atoms) a.in_ring = false;
    for (const Bond& b : g.bonds)
      if (b.in_ring) g.atoms[b.begin].in_ring = g.atoms[b.end].in_ring = true;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
  MolecularGraph g_;
  long prev_ = -1;
  char pending_ = 0;
  std::size_t pending_pos_ = 0;
  std::vector<std::pair<std::size_t, std::size_t>> branches_;  // (atom, offset)
  std::map<int, OpenRing> rings_;
};

}  // namespace detail

inline MolecularGraph parse_smiles(std::string_view smiles) {
  return detail::SmilesParser(smiles).run();
}

// ---------------------------------------------------------------------------
// Featurization

inline constexpr std::array<int, 12> kElementVocabulary = {5,  6,  7,  8,  9,  14,
                                                          15, 16, 17, 34, 35, 53};
inline constexpr std::size_t kNodeFeatureCount = 5;
inline constexpr std::size_t kEdgeFeatureCount = 2;
/// Vocabulary sizes: element (12 + other), degree 0-6, charge -2..+2,
/// aromatic flag, ring flag.
inline constexpr std::array<std::size_t, kNodeFeatureCount> kNodeVocab = {13, 7, 5, 2, 2};
/// Bond order (single, double, triple, aromatic), ring flag.
inline constexpr std::array<std::size_t, kEdgeFeatureCount> kEdgeVocab = {4, 2};

struct FeaturizedGraph {
  std::size_t num_nodes = 0;
  std::vector<std::int32_t> node_features;  // num_nodes x kNodeFeatureCount
  std::vector<std::int32_t> edge_features;  // num_edges x kEdgeFeatureCount
  std::vector<std::size_t> edge_src;        // directed edges, both directions
  std::vector<std::size_t> edge_dst;

  std::size_t num_edges() const noexcept { return edge_src.size(); }
  std::int32_t node_feature(std::size_t atom, std::size_t col) const {
    return node_features[atom * kNodeFeatureCount + col];
  }
  std::int32_t edge_feature(std::size_t edge, std::size_t col) const {
    return edge_features[edge * kEdgeFeatureCount + col];
  }
};

struct FeaturizeOptions {
  // Map elements outside the vocabulary to the "other" slot instead of failing.
  bool allow_other_element = true;
};

inline FeaturizedGraph featurize(const MolecularGraph& g,
                                 const FeaturizeOptions& opt = {}) {
  FeaturizedGraph f;
  f.num_nodes = g.atoms.size();
  f.node_features.reserve(f.num_nodes * kNodeFeatureCount);
  for (const Atom& a : g.atoms) {
    const auto it = std::find(kElementVocabulary.begin(), kElementVocabulary.end(), a.element);
    if (it == kElementVocabulary.end() && !opt.allow_other_element)
      throw UnsupportedElement("element " + std::to_string(a.element) +
                               " outside the feature vocabulary");
    f.node_features.push_back(static_cast<std::int32_t>(it - kElementVocabulary.begin()));
    f.node_features.push_back(std::clamp(a.degree, 0, 6));
    f.node_features.push_back(std::clamp(a.formal_charge, -2, 2) + 2);
    f.node_features.push_back(a.is_aromatic ? 1 : 0);
    f.node_features.push_back(a.in_ring ? 1 : 0);
  }
  for (const Bond& b : g.bonds) {
    for (int dir = 0; dir < 2; ++dir) {
      f.edge_src.push_back(dir == 0 ? b.begin : b.end);
      f.edge_dst.push_back(dir == 0 ? b.end : b.begin);
      f.edge_features.push_back(static_cast<std::int32_t>(b.order));
      f.edge_features.push_back(b.in_ring ? 1 : 0);
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Scaffolds

/// Repeatedly deletes atoms with at most one neighbor that are not in a ring.
inline MolecularGraph murcko_scaffold(const MolecularGraph& g) {
  const std::size_t n = g.atoms.size();
  std::vector<bool> alive(n, true);
  std::vector<int> deg(n, 0);
  for (const Bond& b : g.bonds) ++deg[b.begin], ++deg[b.end];
  const auto adj = g.adjacency();
  std::vector<std::size_t> queue;
  for (std::size_t i = 0; i < n; ++i)
    if (!g.atoms[i].in_ring && deg[i] <= 1) queue.push_back(i);
  while (!queue.empty()) {
    const std::size_t v = queue.back();
    queue.pop_back();
    if (!alive[v]) continue;
    alive[v] = false;
    for (auto [w, bi] : adj[v]) {
      if (!alive[w]) continue;
      if (--deg[w] <= 1 && !g.atoms[w].in_ring) queue.push_back(w);
    }
  }
  MolecularGraph out;
  std::vector<std::size_t> remap(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (alive[i]) {
      remap[i] = out.atoms.size();
      out.atoms.push_back(g.atoms[i]);
      out.atoms.back().degree = 0;
    }
  for (const Bond& b : g.bonds)
    if (alive[b.begin] && alive[b.end]) {
      out.bonds.push_back({remap[b.begin], remap[b.end], b.order, b.in_ring});
      ++out.atoms[remap[b.begin]].degree;
      ++out.atoms[remap[b.end]].degree;
    }
  return out;
}

struct ScaffoldKey {
  std::string canonical_hash;
  auto operator<=>(const ScaffoldKey&) const = default;
};

inline constexpr std::string_view kEmptyScaffoldKey = "empty";

/// Weisfeiler-Lehman style refinement over (element, aromaticity) labels and
/// (bond order, neighbor label) multisets, num_atoms rounds, then a hash of the
/// sorted final label multiset. Collisions are possible and merely merge groups.
inline ScaffoldKey scaffold_key(const MolecularGraph& scaffold) {
  const std::size_t n = scaffold.atoms.size();
  if (n == 0) return {std::string(kEmptyScaffoldKey)};
  const auto adj = scaffold.adjacency();
  std::vector<std::uint64_t> label(n), next(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Atom& a = scaffold.atoms[i];
    label[i] = hash_combine(hash_combine(mix64(static_cast<std::uint64_t>(a.element)),
                                         a.is_aromatic ? 1 : 0),
                            static_cast<std::uint64_t>(a.formal_charge + 16));
  }
  std::vector<std::uint64_t> neigh;
  for (std::size_t round = 0; round < n; ++round) {
    for (std::size_t v = 0; v < n; ++v) {
      neigh.clear();
      for (auto [w, bi] : adj[v])
        neigh.push_back(hash_combine(
            mix64(static_cast<std::uint64_t>(scaffold.bonds[bi].order) + 1), label[w]));
      std::sort(neigh.begin(), neigh.end());
      std::uint64_t h = hash_combine(label[v], neigh.size());
      for (std::uint64_t x : neigh) h = hash_combine(h, x);
      next[v] = h;
    }
    label.swap(next);
  }
  std::sort(label.begin(), label.end());
  std::uint64_t h = hash_combine(mix64(n), scaffold.bonds.size());
  for (std::uint64_t x : label) h = hash_combine(h, x);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return {buf};
}

// ---------------------------------------------------------------------------
// Stratified scaffold split

enum class Split : std::uint8_t { kTrain = 0, kValid = 1, kTest = 2 };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

inline std::optional<Split> split_from_name(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

struct SplitFractions {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
  double operator[](std::size_t k) const { return k == 0 ? train : (k == 1 ? valid : test); }
};

struct SplitItem {
  int label = 0;
  ScaffoldKey scaffold;
};

using SplitAssignment = std::vector<Split>;

class EmptyClass : public Error {
 public:
  using Error::Error;
};

/// Within each label class: group records by scaffold key, order groups by
/// (size desc, key asc) with the seed shuffling runs of equal-size groups, and
/// hand each group to the split currently furthest below its target count.
/// Splits with a zero fraction never receive records.
inline SplitAssignment stratified_scaffold_split(std::span<const SplitItem> items,
                                                 const SplitFractions& fr,
                                                 std::uint64_t seed) {
  for (std::size_t k = 0; k < 3; ++k)
    if (fr[k] < 0.0) throw Error("split fractions must be non-negative");
  if (std::abs(fr.train + fr.valid + fr.test - 1.0) > 1e-9)
    throw Error("split fractions must sum to 1");
  if (items.empty()) throw EmptyClass("no records to split");

  SplitAssignment out(items.size(), Split::kTrain);
  std::map<int, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < items.size(); ++i) classes[items[i].label].push_back(i);

  std::mt19937_64 rng(seed);
  for (auto& [label, members] : classes) {
    std::map<ScaffoldKey, std::vector<std::size_t>> by_key;
    for (std::size_t i : members) by_key[items[i].scaffold].push_back(i);
    std::vector<const std::pair<const ScaffoldKey, std::vector<std::size_t>>*> groups;
    for (const auto& kv : by_key) groups.push_back(&kv);
    std::stable_sort(groups.begin(), groups.end(), [](auto* a, auto* b) {
      return a->second.size() > b->second.size();
    });
    for (std::size_t lo = 0; lo < groups.size();) {
      std::size_t hi = lo;
      while (hi < groups.size() && groups[hi]->second.size() == groups[lo]->second.size()) ++hi;
      std::shuffle(groups.begin() + static_cast<long>(lo), groups.begin() + static_cast<long>(hi), rng);
      lo = hi;
    }
    const double total = static_cast<double>(members.size());
    std::array<double, 3> filled{0, 0, 0};
    for (auto* grp : groups) {
      std::size_t best = 3;
      double best_gap = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        if (fr[k] <= 0.0) continue;
        const double gap = fr[k] * total - filled[k];
        if (best == 3 || gap > best_gap) best = k, best_gap = gap;
      }
      filled[best] += static_cast<double>(grp->second.size());
      for (std::size_t i : grp->second) out[i] = static_cast<Split>(best);
    }
  }
  return out;
}

}  // namespace moce::mol
