// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the moce CLI. Each command reads its inputs,
// writes human-readable output to `out` and warnings to `err`, and returns a
// process exit code.

#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "moce/checkpoint.hpp"
#include "moce/config.hpp"
#include "moce/dataset.hpp"
#include "moce/synthetic.hpp"
#include "moce/tasks.hpp"
#include "moce/train.hpp"
#include "moce/verify.hpp"

namespace moce::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kVerification = 3 };

/// Maps an exception from any command to its exit code.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const losses::BadBeta*>(&e) ||
      dynamic_cast<const mixture::BadK*>(&e))
    return kUsage;
  return kData;
}

inline std::vector<DatasetRecord> read_datasets(const std::vector<std::string>& paths) {
  std::vector<DatasetRecord> all;
  for (const auto& p : paths) {
    auto recs = read_dataset_csv(p);
    all.insert(all.end(), std::make_move_iterator(recs.begin()),
               std::make_move_iterator(recs.end()));
  }
  if (all.empty()) throw DataError("no records in the given datasets");
  return all;
}

inline mol::SplitAssignment read_split_file(const std::string& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split file " + path);
  return read_split_csv(in, n, path);
}

/// Loads the task table from file (if any) and embeds every task that
/// appears in `records`, using the fallback when allowed.
inline TaskTable resolve_tasks(TaskTable table, const std::vector<DatasetRecord>& records,
                               bool allow_fallback, std::size_t task_dim) {
  if (table.size() && table.dim() != task_dim)
    throw DataError("task embeddings have dimension " + std::to_string(table.dim()) +
                    " but task_dim is " + std::to_string(task_dim));
  for (const auto& r : records) table.resolve(r.task_id, allow_fallback, task_dim);
  return table;
}

inline std::string format_auc(const std::optional<double>& a) {
  if (!a) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *a);
  return buf;
}

// ---------------------------------------------------------------------------
// split

struct SplitOptions {
  std::vector<std::string> data;
  mol::SplitFractions fractions;
  std::uint64_t seed = 0;
  std::string out;
};

inline int cmd_split(const SplitOptions& o, std::ostream& out) {
  const auto records = read_datasets(o.data);
  const auto split = split_records(records, o.fractions, o.seed);
  {
    std::ofstream f(o.out);
    if (!f) throw DataError("cannot write split file " + o.out);
    write_split_csv(f, split);
  }
  std::map<int, std::array<std::size_t, 3>> counts;
  for (std::size_t i = 0; i < records.size(); ++i)
    ++counts[records[i].label][static_cast<std::size_t>(split[i])];
  out << "class,train,valid,test\n";
  for (const auto& [label, c] : counts)
    out << label << ',' << c[0] << ',' << c[1] << ',' << c[2] << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string config;
  std::string resume;  // checkpoint path; empty starts fresh
};

namespace detail {

inline std::string metrics_summary(const train::EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "epoch %zu %s: auc %s loss %.5f (base %.5f) max_gate %.4f imp_cv %.4f load_cv %.4f",
                m.epoch, m.split.c_str(), format_auc(m.mean_auc).c_str(), m.loss.overall,
                m.loss.base, m.max_gate_share, m.importance_cv, m.load_cv);
  std::string s = buf;
  if (m.skipped_batches) s += " skipped " + std::to_string(m.skipped_batches);
  return s;
}

template <class Real>
int run_training(const RunConfig& cfg, const std::string& resume, std::ostream& out,
                 std::ostream& err) {
  const auto records = read_datasets(cfg.datasets);
  mol::SplitAssignment split(records.size(), mol::Split::kTrain);
  if (!cfg.split_file.empty()) split = read_split_file(cfg.split_file, records.size());
  const std::set<std::string> excluded(cfg.exclude_tasks.begin(), cfg.exclude_tasks.end());

  std::vector<const DatasetRecord*> train_set, valid_set;
  std::vector<DatasetRecord> used;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (excluded.count(records[i].task_id)) continue;
    if (split[i] == mol::Split::kTrain) train_set.push_back(&records[i]);
    if (split[i] == mol::Split::kValid) valid_set.push_back(&records[i]);
    used.push_back(records[i]);
  }
  if (train_set.empty()) throw DataError("no training records after split and exclusions");

  TaskTable file_tasks;
  if (!cfg.task_embeddings.empty()) file_tasks = read_task_embeddings(cfg.task_embeddings);
  TaskTable tasks =
      resolve_tasks(std::move(file_tasks), used, cfg.allow_fallback_embedding, cfg.train.task_dim);

  std::optional<train::Trainer<Real>> trainer;
  if (resume.empty()) {
    trainer.emplace(cfg.train);
  } else {
    auto loaded = load_checkpoint<Real>(resume);
    if (dump_run_config(loaded.config) != dump_run_config(cfg))
      throw ConfigError("resume: checkpoint config differs from the given config");
    tasks = std::move(loaded.tasks);
    trainer.emplace(std::move(loaded.trainer));
    out << "resumed at epoch " << trainer->epochs_done() << '\n';
  }

  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);
  const fs::path metrics_path = dir / "metrics.csv";
  std::ofstream metrics;
  if (resume.empty() || !fs::exists(metrics_path)) {
    metrics.open(metrics_path, std::ios::trunc);
    train::write_metrics_header(metrics);
  } else {
    metrics.open(metrics_path, std::ios::app);
  }
  if (!metrics) throw DataError("cannot write " + metrics_path.string());

  out << "training on " << train_set.size() << " records (" << valid_set.size() << " valid), "
      << tasks.size() << " tasks, precision " << cfg.train.precision << '\n';
  for (std::size_t e = trainer->epochs_done(); e < cfg.train.epochs; ++e) {
    const auto tm = trainer->train_epoch(train_set, tasks, cfg.train.epochs);
    train::write_metrics_rows(metrics, tm);
    out << metrics_summary(tm) << '\n';
    if (tm.skipped_batches)
      err << "warning: epoch " << tm.epoch << " skipped " << tm.skipped_batches
          << " batches with non-finite gradients\n";
    if (!valid_set.empty()) {
      const auto vm = trainer->evaluate(valid_set, tasks, "valid");
      train::write_metrics_rows(metrics, vm);
      out << metrics_summary(vm) << '\n';
    }
    metrics.flush();
    if (cfg.checkpoint_every && trainer->epochs_done() % cfg.checkpoint_every == 0)
      save_checkpoint(
          (dir / ("checkpoint_epoch" + std::to_string(trainer->epochs_done()) + ".bin")).string(),
          cfg, tasks, *trainer);
  }
  save_checkpoint((dir / "checkpoint.bin").string(), cfg, tasks, *trainer);
  out << "wrote " << (dir / "checkpoint.bin").string() << '\n';
  return kOk;
}

}  // namespace detail

inline int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(o.config);
  if (cfg.train.precision == "float32") return detail::run_training<float>(cfg, o.resume, out, err);
  return detail::run_training<double>(cfg, o.resume, out, err);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::vector<std::string> data;
  std::string split_file;
  std::string which = "test";
  std::string out;
};

namespace detail {

template <class Real>
int run_eval(const std::string& bytes, const EvalOptions& o, std::ostream& out,
             std::ostream& err) {
  auto ck = deserialize_checkpoint<Real>(bytes);
  const auto records = read_datasets(o.data);
  const auto which = mol::split_from_name(o.which);
  if (!which) throw ConfigError("--split must be train, valid or test");
  mol::SplitAssignment split(records.size(), mol::Split::kTest);
  if (o.split_file.empty() || !std::filesystem::exists(o.split_file)) {
    err << "warning: no split file; treating every row as test\n";
  } else {
    split = read_split_file(o.split_file, records.size());
  }
  std::vector<const DatasetRecord*> selected;
  std::vector<DatasetRecord> used;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (split[i] == *which) {
      selected.push_back(&records[i]);
      used.push_back(records[i]);
    }
  if (selected.empty()) throw DataError("no records in split '" + o.which + "'");
  const TaskTable tasks = resolve_tasks(std::move(ck.tasks), used,
                                        ck.config.allow_fallback_embedding,
                                        ck.config.train.task_dim);
  const auto m = ck.trainer.evaluate(selected, tasks, o.which);

  std::map<std::string, std::size_t> n;
  for (const auto* r : selected) ++n[r->task_id];
  std::ostringstream table;
  table << "task_id,n,auc\n";
  for (const auto& [task, auc] : m.task_auc) {
    table << task << ',' << n[task] << ',' << format_auc(auc) << '\n';
    if (!auc) err << "warning: task '" << task << "' has a single class; AUC undefined\n";
  }
  table << "mean," << selected.size() << ',' << format_auc(m.mean_auc) << '\n';
  out << table.str();
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw DataError("cannot write " + o.out);
    f << table.str();
  }
  return kOk;
}

}  // namespace detail

inline int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  const std::string bytes = read_file_bytes(o.checkpoint);
  if (checkpoint_config(bytes).train.precision == "float32")
    return detail::run_eval<float>(bytes, o, out, err);
  return detail::run_eval<double>(bytes, o, out, err);
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
  std::string checkpoint;
  std::string smiles;
  std::string task;
};

namespace detail {

template <class Real>
int run_predict(const std::string& bytes, const PredictOptions& o, std::ostream& out) {
  auto ck = deserialize_checkpoint<Real>(bytes);
  const auto rec = make_record(o.smiles, 0, o.task);
  ck.tasks.resolve(o.task, ck.config.allow_fallback_embedding, ck.config.train.task_dim);
  const auto batch = make_batch<Real>({&rec}, ck.tasks);
  const auto res = ck.trainer.model().forward(batch);
  const double logit = static_cast<double>(res.logits().item());
  out << std::setprecision(10);
  out << "smiles " << o.smiles << "\ntask " << o.task << "\nprobability "
      << 1.0 / (1.0 + std::exp(-logit)) << "\nlogit " << logit << '\n';
  const auto& w = res.integrated.weights;
  for (std::size_t l = 0; l < res.layers.size(); ++l) {
    const auto& route = res.layers[l].route;
    out << "layer " << l << " weight " << static_cast<double>(w.at(0, l)) << " output "
        << static_cast<double>(res.layers[l].output.item()) << '\n';
    for (std::size_t k = 0; k < route.k_s; ++k) {
      const std::size_t j = route.selected[k];
      out << "  expert " << j << " gate " << static_cast<double>(route.gates.at(0, j)) << '\n';
    }
  }
  return kOk;
}

}  // namespace detail

inline int cmd_predict(const PredictOptions& o, std::ostream& out) {
  const std::string bytes = read_file_bytes(o.checkpoint);
  if (checkpoint_config(bytes).train.precision == "float32")
    return detail::run_predict<float>(bytes, o, out);
  return detail::run_predict<double>(bytes, o, out);
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::string config;  // optional; supplies model dimensions
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  std::size_t molecules = 4;
};

inline int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  ModelConfig model = verify::default_check_model();
  if (!o.config.empty()) model = load_run_config(o.config).train.model();
  model.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = verify::run_suite(o.trials, o.seed, model, o.molecules);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  char buf[256];
  for (const auto& r : results) {
    ok = ok && r.failures == 0;
    std::snprintf(buf, sizeof buf,
                  "%-20s %s  trials %zu  failures %zu  max_rel_err %.3e  skipped %zu/%zu\n",
                  r.family.c_str(), r.failures ? "FAIL" : "ok  ", r.trials, r.failures,
                  r.worst.max_rel_error, r.worst.skipped_kink, r.worst.skipped_unresolvable);
    out << buf;
    if (r.failures) {
      std::snprintf(buf, sizeof buf, "  worst: input %zu index %zu ad %.10g fd %.10g\n",
                    r.worst.worst_input, r.worst.worst_index, r.worst.worst_ad, r.worst.worst_fd);
      out << buf;
    }
  }
  std::snprintf(buf, sizeof buf, "gradcheck %s in %.1f s\n", ok ? "passed" : "FAILED", secs);
  out << buf;
  return ok ? kOk : kVerification;
}

// ---------------------------------------------------------------------------
// show-config, embed-tasks, synth

inline int cmd_show_config(const std::string& config, std::ostream& out) {
  out << dump_run_config(config.empty() ? RunConfig{} : load_run_config(config)) << '\n';
  return kOk;
}

struct EmbedTasksOptions {
  std::vector<std::string> data;
  std::string existing;  // optional table to extend
  std::size_t dim = 64;
  std::string out;
};

/// Writes a task table covering every task in the data; tasks missing from
/// `existing` get the deterministic fallback embedding.
inline int cmd_embed_tasks(const EmbedTasksOptions& o, std::ostream& out) {
  TaskTable table;
  if (!o.existing.empty()) table = read_task_embeddings(o.existing);
  table = resolve_tasks(std::move(table), read_datasets(o.data), true, o.dim);
  std::ofstream f(o.out);
  if (!f) throw DataError("cannot write " + o.out);
  write_task_embeddings(f, table);
  out << "wrote " << table.size() << " task embeddings of dimension " << table.dim() << '\n';
  return kOk;
}

struct SynthOptions {
  std::size_t molecules = 200;
  std::uint64_t seed = 1;
  std::string rule = "carbonyl";
  std::string task = "task_a";
  std::string out;
};

inline int cmd_synth(const SynthOptions& o, std::ostream& out) {
  synth::Rule rule;
  if (o.rule == "carbonyl")
    rule = synth::Rule::kCarbonyl;
  else if (o.rule == "ring")
    rule = synth::Rule::kRing;
  else
    throw ConfigError("--rule must be carbonyl or ring");
  const auto mols = synth::generate_molecules(o.molecules, o.seed);
  std::ofstream f(o.out);
  if (!f) throw DataError("cannot write " + o.out);
  synth::write_task_csv(f, mols, rule, o.task);
  out << "wrote " << mols.size() << " molecules to " << o.out << '\n';
  return kOk;
}

}  // namespace moce::cli
