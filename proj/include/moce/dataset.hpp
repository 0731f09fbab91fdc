// SPDX-License-Identifier: Apache-2.0
//
// Dataset records, the `smiles,label,task_id` CSV format and the
// `record_index,split` split file.

#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "moce/common.hpp"
#include "moce/molgraph.hpp"

namespace moce {

struct DatasetRecord {
  std::string smiles;
  mol::FeaturizedGraph graph;
  int label = 0;
  std::string task_id;
  mol::ScaffoldKey scaffold;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i)
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  return out;
}

}  // namespace detail

/// Parses one SMILES into a training record. Throws SmilesError.
inline DatasetRecord make_record(std::string smiles, int label, std::string task_id) {
  DatasetRecord r;
  const mol::MolecularGraph g = mol::parse_smiles(smiles);
  r.graph = mol::featurize(g);
  r.scaffold = mol::scaffold_key(mol::murcko_scaffold(g));
  r.smiles = std::move(smiles);
  r.label = label;
  r.task_id = std::move(task_id);
  return r;
}

/// Reads `smiles,label,task_id` rows. Row numbers in errors are 1-based file
/// lines (the header is line 1).
inline std::vector<DatasetRecord> read_dataset_csv(std::istream& in,
                                                   std::string_view source = "<stream>") {
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    return DataError(std::string(source) + ": row " + std::to_string(lineno) + ": " + msg);
  };
  if (!std::getline(in, line)) throw DataError(std::string(source) + ": empty file");
  ++lineno;
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  {
    const auto cols = detail::split_csv_line(line);
    if (cols.size() != 3 || cols[0] != "smiles" || cols[1] != "label" || cols[2] != "task_id")
      throw fail("expected header 'smiles,label,task_id'");
  }
  std::vector<DatasetRecord> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cols = detail::split_csv_line(line);
    if (cols.size() != 3) throw fail("expected 3 columns, got " + std::to_string(cols.size()));
    if (cols[1] != "0" && cols[1] != "1") throw fail("label must be 0 or 1");
    if (cols[2].empty()) throw fail("empty task_id");
    try {
      out.push_back(make_record(std::string(cols[0]), cols[1] == "1" ? 1 : 0,
                                std::string(cols[2])));
    } catch (const mol::SmilesError& e) {
      throw fail("invalid SMILES '" + std::string(cols[0]) + "': " + e.what());
    }
  }
  return out;
}

inline std::vector<DatasetRecord> read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path);
  return read_dataset_csv(in, path);
}

inline void write_split_csv(std::ostream& out, const mol::SplitAssignment& s) {
  out << "record_index,split\n";
  for (std::size_t i = 0; i < s.size(); ++i) out << i << ',' << mol::split_name(s[i]) << '\n';
}

inline mol::SplitAssignment read_split_csv(std::istream& in, std::size_t expected_records,
                                           std::string_view source = "<stream>") {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "record_index,split")
    throw DataError(std::string(source) + ": expected header 'record_index,split'");
  mol::SplitAssignment out(expected_records, mol::Split::kTest);
  std::vector<bool> seen(expected_records, false);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cols = detail::split_csv_line(line);
    const auto split = cols.size() == 2 ? mol::split_from_name(cols[1]) : std::nullopt;
    std::size_t idx = 0;
    try {
      idx = std::stoul(std::string(cols[0]));
    } catch (const std::exception&) {
      throw DataError(std::string(source) + ": row " + std::to_string(lineno) + ": bad index");
    }
    if (!split || idx >= expected_records || seen[idx])
      throw DataError(std::string(source) + ": row " + std::to_string(lineno) +
                      ": invalid split entry");
    seen[idx] = true;
    out[idx] = *split;
  }
  for (std::size_t i = 0; i < expected_records; ++i)
    if (!seen[i]) throw DataError(std::string(source) + ": record " + std::to_string(i) +
                                  " has no split entry");
  return out;
}

inline mol::SplitAssignment split_records(const std::vector<DatasetRecord>& records,
                                          const mol::SplitFractions& fr, std::uint64_t seed) {
  std::vector<mol::SplitItem> items;
  items.reserve(records.size());
  for (const auto& r : records) items.push_back({r.label, r.scaffold});
  return mol::stratified_scaffold_split(items, fr, seed);
}

}  // namespace moce
