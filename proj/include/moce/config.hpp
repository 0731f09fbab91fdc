// SPDX-License-Identifier: Apache-2.0
//
// Run configuration as a JSON document. Keys mirror the TrainConfig field
// names; path keys sit alongside them. Unknown keys are rejected.

#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moce/train.hpp"

namespace moce {

struct RunConfig {
  train::TrainConfig train;
  std::vector<std::string> datasets;
  std::string split_file;       // empty: every record is treated as train
  std::string task_embeddings;  // empty: fallback embeddings only
  std::string output_dir = "moce_out";
  bool allow_fallback_embedding = true;
  std::size_t checkpoint_every = 1;  // epochs; 0 writes only the final one
  std::vector<std::string> exclude_tasks;
};

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  return nlohmann::json{
      {"batch_size", t.batch_size},
      {"epochs", t.epochs},
      {"seed", t.seed},
      {"num_experts", t.num_experts},
      {"k_s", t.k_s},
      {"k_t", t.k_t},
      {"embed_dim", t.embed_dim},
      {"num_gnn_layers", t.num_gnn_layers},
      {"num_processing_layers", t.num_processing_layers},
      {"task_dim", t.task_dim},
      {"pool_ratio", t.pool_ratio},
      {"sigma_floor", t.sigma_floor},
      {"beta", t.beta},
      {"lr", t.lr},
      {"weight_decay", t.weight_decay},
      {"min_lr_fraction", t.min_lr_fraction},
      {"use_att", t.use_att},
      {"use_exp", t.use_exp},
      {"use_imp", t.use_imp},
      {"use_lod", t.use_lod},
      {"exp_mean", t.exp_mean},
      {"precision", t.precision},
      {"datasets", c.datasets},
      {"split_file", c.split_file},
      {"task_embeddings", c.task_embeddings},
      {"output_dir", c.output_dir},
      {"allow_fallback_embedding", c.allow_fallback_embedding},
      {"checkpoint_every", c.checkpoint_every},
      {"exclude_tasks", c.exclude_tasks},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  auto& t = c.train;
  detail::read_key(j, "batch_size", t.batch_size);
  detail::read_key(j, "epochs", t.epochs);
  detail::read_key(j, "seed", t.seed);
  detail::read_key(j, "num_experts", t.num_experts);
  detail::read_key(j, "k_s", t.k_s);
  detail::read_key(j, "k_t", t.k_t);
  detail::read_key(j, "embed_dim", t.embed_dim);
  detail::read_key(j, "num_gnn_layers", t.num_gnn_layers);
  detail::read_key(j, "num_processing_layers", t.num_processing_layers);
  detail::read_key(j, "task_dim", t.task_dim);
  detail::read_key(j, "pool_ratio", t.pool_ratio);
  detail::read_key(j, "sigma_floor", t.sigma_floor);
  detail::read_key(j, "beta", t.beta);
  detail::read_key(j, "lr", t.lr);
  detail::read_key(j, "weight_decay", t.weight_decay);
  detail::read_key(j, "min_lr_fraction", t.min_lr_fraction);
  detail::read_key(j, "use_att", t.use_att);
  detail::read_key(j, "use_exp", t.use_exp);
  detail::read_key(j, "use_imp", t.use_imp);
  detail::read_key(j, "use_lod", t.use_lod);
  detail::read_key(j, "exp_mean", t.exp_mean);
  detail::read_key(j, "precision", t.precision);
  detail::read_key(j, "datasets", c.datasets);
  detail::read_key(j, "split_file", c.split_file);
  detail::read_key(j, "task_embeddings", c.task_embeddings);
  detail::read_key(j, "output_dir", c.output_dir);
  detail::read_key(j, "allow_fallback_embedding", c.allow_fallback_embedding);
  detail::read_key(j, "checkpoint_every", c.checkpoint_every);
  detail::read_key(j, "exclude_tasks", c.exclude_tasks);
  t.validate();
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string dump_run_config(const RunConfig& c) { return to_json(c).dump(2); }

}  // namespace moce
