// SPDX-License-Identifier: Apache-2.0
//
// Random valid SMILES from a small fragment grammar, and planted-rule
// labelings for smoke and overfit experiments.
//
//   molecule := head body* tail?
//   head     := chain | ring
//   body     := chain | ring | "C(=O)"
//   tail     := "Cl" | "F" | "Br" | "C#N" | "C=O"
//
// Fragments are joined end to end, so every atom has at most two chain
// neighbours plus its own branch, which keeps standard valences satisfied.

#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "moce/dataset.hpp"
#include "moce/molgraph.hpp"

namespace moce::synth {

inline const std::vector<std::string>& chain_fragments() {
  static const std::vector<std::string> v{"C", "CC", "N", "O", "CCC", "C(C)", "S"};
  return v;
}
inline const std::vector<std::string>& ring_fragments() {
  static const std::vector<std::string> v{"c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCOC1",
                                          "C1CC1",    "c1ccsc1",  "C1CCNCC1"};
  return v;
}
inline const std::vector<std::string>& tail_fragments() {
  static const std::vector<std::string> v{"Cl", "F", "Br", "C#N", "C=O"};
  return v;
}

/// One random molecule; a pure function of the generator state.
inline std::string random_smiles(std::mt19937_64& rng) {
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto coin = [&](double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; };
  std::string s = coin(0.35) ? pick(ring_fragments()) : pick(chain_fragments());
  const int body = std::uniform_int_distribution<int>(0, 3)(rng);
  for (int i = 0; i < body; ++i) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (u < 0.2)
      s += "C(=O)";
    else if (u < 0.4)
      s += pick(ring_fragments());
    else
      s += pick(chain_fragments());
  }
  if (coin(0.5)) s += pick(tail_fragments());
  return s;
}

/// True when some non-aromatic C=O double bond exists.
inline bool has_carbonyl(const mol::MolecularGraph& g) {
  for (const auto& b : g.bonds) {
    if (b.order != mol::BondOrder::kDouble) continue;
    const int a = g.atoms[b.begin].element, c = g.atoms[b.end].element;
    if ((a == 6 && c == 8) || (a == 8 && c == 6)) return true;
  }
  return false;
}

inline bool has_ring(const mol::MolecularGraph& g) {
  for (const auto& a : g.atoms)
    if (a.in_ring) return true;
  return false;
}

struct Molecule {
  std::string smiles;
  bool carbonyl = false;
  bool ring = false;
};

/// `n` distinct molecules; draws until both planted rules see each class at
/// least `n / 4` times.
inline std::vector<Molecule> generate_molecules(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Molecule> out;
  std::set<std::string> seen;
  std::size_t counts[2][2] = {{0, 0}, {0, 0}};  // [rule][label]
  const std::size_t quota = n / 4;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 1000 * n + 10000) throw Error("synthetic generator failed to reach quotas");
    std::string s = random_smiles(rng);
    if (seen.count(s)) continue;
    const auto g = mol::parse_smiles(s);
    Molecule m{s, has_carbonyl(g), has_ring(g)};
    const std::size_t remaining = n - out.size();
    std::size_t need = 0;
    for (int r = 0; r < 2; ++r)
      for (int l = 0; l < 2; ++l) need += counts[r][l] < quota ? quota - counts[r][l] : 0;
    // Once the quotas are tight, only accept molecules that help fill them.
    if (need >= remaining) {
      const bool helps = counts[0][m.carbonyl] < quota || counts[1][m.ring] < quota;
      if (!helps) continue;
    }
    seen.insert(s);
    ++counts[0][m.carbonyl];
    ++counts[1][m.ring];
    out.push_back(std::move(m));
  }
  return out;
}

enum class Rule { kCarbonyl, kRing };

inline int apply_rule(const Molecule& m, Rule r) {
  return (r == Rule::kCarbonyl ? m.carbonyl : m.ring) ? 1 : 0;
}

inline std::vector<DatasetRecord> make_task_records(const std::vector<Molecule>& mols, Rule rule,
                                                    const std::string& task_id) {
  std::vector<DatasetRecord> out;
  out.reserve(mols.size());
  for (const auto& m : mols) out.push_back(make_record(m.smiles, apply_rule(m, rule), task_id));
  return out;
}

inline void write_task_csv(std::ostream& out, const std::vector<Molecule>& mols, Rule rule,
                           const std::string& task_id) {
  out << "smiles,label,task_id\n";
  for (const auto& m : mols) out << m.smiles << ',' << apply_rule(m, rule) << ',' << task_id << '\n';
}

}  // namespace moce::synth
