// SPDX-License-Identifier: Apache-2.0
//
// Task descriptors and their embeddings: a `task_id<TAB>v1,v2,...` file plus
// a deterministic fallback embedder keyed on the description text.

#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moce/common.hpp"
#include "moce/dataset.hpp"

namespace moce {

class MissingTaskEmbedding : public Error {
 public:
  using Error::Error;
};

struct TaskDescriptor {
  std::string task_id;
  std::string description;
  std::vector<double> embedding;
};

/// Unit vector whose direction is a pure function of the description text.
inline std::vector<double> fallback_task_embedding(std::string_view description,
                                                   std::size_t dim = 64) {
  const std::uint64_t seed = fnv1a(description);
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    v[i] = counter_normal(seed, i, 0, 0);
    norm2 += v[i] * v[i];
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v) x *= inv;
  return v;
}

class TaskTable {
 public:
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return tasks_.size(); }
  bool contains(const std::string& id) const { return tasks_.count(id) != 0; }

  void add(TaskDescriptor t) {
    if (t.embedding.empty()) throw DataError("task '" + t.task_id + "' has an empty embedding");
    if (dim_ != 0 && t.embedding.size() != dim_)
      throw DataError("task '" + t.task_id + "' embedding has dimension " +
                      std::to_string(t.embedding.size()) + ", expected " + std::to_string(dim_));
    for (double x : t.embedding)
      if (!std::isfinite(x)) throw DataError("task '" + t.task_id + "' embedding is not finite");
    dim_ = t.embedding.size();
    tasks_[t.task_id] = std::move(t);
  }

  const TaskDescriptor& get(const std::string& id) const {
    auto it = tasks_.find(id);
    if (it == tasks_.end()) throw MissingTaskEmbedding("no embedding for task '" + id + "'");
    return it->second;
  }

  /// Returns the task, embedding it with the fallback when absent and allowed.
  const TaskDescriptor& resolve(const std::string& id, bool allow_fallback,
                                std::size_t fallback_dim) {
    if (auto it = tasks_.find(id); it != tasks_.end()) return it->second;
    if (!allow_fallback) throw MissingTaskEmbedding("no embedding for task '" + id + "'");
    add({id, id, fallback_task_embedding(id, dim_ ? dim_ : fallback_dim)});
    return tasks_.at(id);
  }

  const std::map<std::string, TaskDescriptor>& all() const noexcept { return tasks_; }

 private:
  std::size_t dim_ = 0;
  std::map<std::string, TaskDescriptor> tasks_;
};

inline TaskTable read_task_embeddings(std::istream& in, std::string_view source = "<stream>") {
  TaskTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(std::string(source) + ": line " + std::to_string(lineno) +
                      ": expected 'task_id<TAB>v1,v2,...'");
    TaskDescriptor t;
    t.task_id = line.substr(0, tab);
    t.description = t.task_id;
    for (auto field : detail::split_csv_line(std::string_view(line).substr(tab + 1))) {
      try {
        std::size_t used = 0;
        t.embedding.push_back(std::stod(std::string(field), &used));
        if (used != field.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError(std::string(source) + ": line " + std::to_string(lineno) +
                        ": bad value '" + std::string(field) + "'");
      }
    }
    try {
      table.add(std::move(t));
    } catch (const DataError& e) {
      throw DataError(std::string(source) + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

inline TaskTable read_task_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task embeddings " + path);
  return read_task_embeddings(in, path);
}

inline void write_task_embeddings(std::ostream& out, const TaskTable& table) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& [id, t] : table.all()) {
    os << id << '\t';
    for (std::size_t i = 0; i < t.embedding.size(); ++i) os << (i ? "," : "") << t.embedding[i];
    os << '\n';
  }
  out << os.str();
}

}  // namespace moce
