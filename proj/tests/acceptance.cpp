// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moce/checkpoint.hpp"
#include "moce/losses.hpp"
#include "moce/mixture.hpp"
#include "moce/synthetic.hpp"
#include "moce/train.hpp"
#include "test_support.hpp"

using namespace moce;
namespace fs = std::filesystem;
using T = ad::Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

const std::string kCli = MOCE_CLI_PATH;
const fs::path kArtifacts = MOCE_ARTIFACT_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. gradient integrity through the CLI

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  const auto r = fixtures::run(kCli + " gradcheck --trials 20 --seed 0 --molecules 4");
  const double secs = seconds_since(t0);
  std::ofstream(kArtifacts / "gradcheck.txt") << r.output;
  const bool ok = r.code == 0 && r.output.find("gradcheck passed") != std::string::npos;
  return {ok && secs < 60.0, "exit " + std::to_string(r.code) + ", " + fmt("%.1f s", secs) +
                                 " (log in gradcheck.txt)"};
}

// ---------------------------------------------------------------------------
// 2. routing invariants

mixture::RouteResult<double> route_mu(const std::vector<double>& mu, std::size_t k_s,
                                      std::size_t k_t) {
  mixture::RouterParams<double> r;
  const std::size_t m = mu.size();
  r.w_mu1 = T::zeros({1, m});
  r.w_mu2 = T::from({1, m}, mu);
  r.w_sigma1 = T::zeros({1, m});
  r.w_sigma2 = T::zeros({1, m});
  r.k_s = k_s;
  r.k_t = k_t;
  r.num_experts = m;
  return mixture::route(T::zeros({1, 1}), T::from({1, 1}, {1.0}), r);
}

Outcome routing_invariants() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0, 2);
  std::size_t cases = 0, violations = 0;
  std::string first;
  auto fail = [&](const std::string& what) {
    if (violations++ == 0) first = what + " in case " + std::to_string(cases);
  };
  for (int trial = 0; trial < 1200; ++trial, ++cases) {
    const std::size_t m = std::uniform_int_distribution<std::size_t>(2, 12)(rng);
    const std::size_t k_t = std::uniform_int_distribution<std::size_t>(1, m)(rng);
    const std::size_t k_s = std::uniform_int_distribution<std::size_t>(1, std::min(k_t, m - 1))(rng);
    std::vector<double> v(m);
    for (auto& x : v) x = n(rng);

    const auto r = route_mu(v, k_s, k_t);
    std::size_t positive = 0;
    double total = 0;
    for (std::size_t j = 0; j < m; ++j) {
      positive += r.gates[j] > 0;
      total += r.gates[j];
    }
    if (positive != k_s) fail("positive gate count");
    if (std::abs(total - 1.0) > 1e-12) fail("gate sum");

    const std::span<const double> vs(v);
    if (mixture::gamma_mask(vs, m) != v) fail("gamma(v, m) != v");
    const auto g = mixture::gamma_mask(vs, k_t);
    if (std::max_element(g.begin(), g.end()) - g.begin() !=
        std::max_element(v.begin(), v.end()) - v.begin())
      fail("argmax changed by gamma");

    const double c = n(rng) * 5;
    auto shifted = v;
    for (auto& x : shifted) x += c;
    const auto rs = route_mu(shifted, k_s, m);
    const auto r_full = route_mu(v, k_s, m);
    for (std::size_t j = 0; j < m; ++j)
      if (std::abs(rs.gates[j] - r_full.gates[j]) > 1e-12) fail("gates moved under mu shift");

    // Place expert j exactly on its threshold: the k_s-th largest of the others.
    const std::size_t j = rng() % m;
    std::vector<double> others;
    for (std::size_t i = 0; i < m; ++i)
      if (i != j) others.push_back(v[i]);
    std::sort(others.rbegin(), others.rend());
    auto at = v;
    at[j] = others[k_s - 1];
    if (route_mu(at, k_s, m).p_choose[j] != 0.5) fail("p_choose != 0.5 at threshold");
  }
  return {violations == 0, std::to_string(cases) + " cases, " + std::to_string(violations) +
                               " violations" + (first.empty() ? "" : " (first: " + first + ")")};
}

// ---------------------------------------------------------------------------
// 3. loss closed forms

Outcome loss_closed_forms() {
  using namespace losses;
  auto pair = [](double a0, double a1, double b0, double b1) {
    return attention_cosine_loss(T::from({2, 2}, {a0, b0, a1, b1})).item();
  };
  bool ok = true;
  std::ostringstream d;
  const double same = pair(1, 2, 1, 2), orth = pair(3, 0, 0, -0.5), anti = pair(1, 2, -1, -2);
  ok = ok && std::abs(same - 1.0) <= 1e-12 && std::abs(orth - 0.5) <= 1e-12 &&
       std::abs(anti) <= 1e-12;
  d << "att " << same << "/" << orth << "/" << anti;

  const double imp = importance_loss(T::full({6, 5}, 0.2)).item();
  const double lod = load_loss(T::full({6, 5}, 0.37)).item();
  ok = ok && imp == 0.0 && lod == 0.0;
  d << "; uniform imp " << imp << " lod " << lod;

  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0, 2);
  std::size_t mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    double logits[4][8];
    bool assigned[4][8];
    int labels[8];
    for (int s = 0; s < 8; ++s) labels[s] = int(rng() % 2);
    for (int e = 0; e < 4; ++e)
      for (int s = 0; s < 8; ++s) {
        logits[e][s] = n(rng);
        assigned[e][s] = rng() % 2;
      }
    std::vector<double> pz, py;
    double brute = 0;
    for (int s = 0; s < 8; ++s)
      for (int e = 0; e < 4; ++e)
        if (assigned[e][s]) {
          pz.push_back(logits[e][s]);
          py.push_back(labels[s]);
          brute += bce(logits[e][s], labels[s]);
        }
    const double got =
        pz.empty() ? 0.0 : expert_specific_loss(T::column(pz), T::column(py)).item();
    mismatches += got != brute;
  }
  ok = ok && mismatches == 0;
  d << "; exp brute-force mismatches " << mismatches << "/200";
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 4. AUC oracle

Outcome auc_oracle() {
  std::mt19937_64 rng(77);
  std::size_t mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng() % 99;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng() % 10) / 4.0;
      y[i] = int(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    mismatches += *train::auc_roc(s, y) != fixtures::brute_auc(s, y);
  }
  return {mismatches == 0, "200 instances, " + std::to_string(mismatches) + " inexact"};
}

// ---------------------------------------------------------------------------
// Shared synthetic setup for the training criteria

constexpr std::size_t kTaskDim = 16;

train::TrainConfig synthetic_config(std::uint64_t seed) {
  train::TrainConfig c;
  c.num_experts = 8;
  c.embed_dim = 32;
  c.k_s = 2;
  c.k_t = 4;
  c.num_processing_layers = 2;
  c.num_gnn_layers = 2;
  c.task_dim = kTaskDim;
  c.batch_size = 32;
  c.seed = seed;
  return c;
}

struct Synthetic {
  std::vector<DatasetRecord> records;
  std::vector<const DatasetRecord*> ptrs;
  TaskTable tasks;
};

Synthetic two_task_corpus() {
  Synthetic s;
  const auto mols = synth::generate_molecules(200, 1);
  s.records = synth::make_task_records(mols, synth::Rule::kCarbonyl, "task_a");
  for (auto& r : synth::make_task_records(mols, synth::Rule::kRing, "task_b"))
    s.records.push_back(std::move(r));
  s.ptrs = fixtures::pointers(s.records);
  for (const char* id : {"task_a", "task_b"})
    s.tasks.add({id, id, fallback_task_embedding(id, kTaskDim)});
  return s;
}

// ---------------------------------------------------------------------------
// 5. overfit

Outcome overfit(const Synthetic& s) {
  const auto t0 = Clock::now();
  train::Trainer<double> tr(synthetic_config(1));
  std::ofstream log(kArtifacts / "overfit_metrics.csv");
  train::write_metrics_header(log);
  constexpr std::size_t kMaxEpochs = 200;
  double a = 0, b = 0;
  for (std::size_t e = 0; e < kMaxEpochs; ++e) {
    train::write_metrics_rows(log, tr.train_epoch(s.ptrs, s.tasks, kMaxEpochs));
    const auto m = tr.evaluate(s.ptrs, s.tasks, "train");
    train::write_metrics_rows(log, m);
    a = m.task_auc.at("task_a").value_or(0);
    b = m.task_auc.at("task_b").value_or(0);
    if (a >= 0.99 && b >= 0.99) break;
  }
  const double secs = seconds_since(t0);
  return {a >= 0.99 && b >= 0.99 && secs < 300.0,
          "epochs " + std::to_string(tr.epochs_done()) + ", train AUC A " + fmt("%.4f", a) +
              " B " + fmt("%.4f", b) + ", " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// 6 and 7. auxiliary-loss ablations on matched seeds

constexpr std::size_t kAblationEpochs = 100;
constexpr std::uint64_t kAblationSeeds[] = {1, 2, 3, 4};

struct AblationResult {
  double max_gate_share = 0;
  double mean_abs_cos = 0;
};

/// Mean over layers of the mean |cos| over distinct expert pairs.
double mean_abs_cosine(const train::Trainer<double>& tr, const Synthetic& s) {
  const auto batch = make_batch<double>({s.ptrs.front()}, s.tasks);
  const auto out = tr.model().forward(batch);
  double total = 0;
  for (const auto& layer : out.layers) {
    const auto& th = layer.thetas;
    const std::size_t d = th.rows(), m = th.cols();
    double sum = 0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a + 1; b < m; ++b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t r = 0; r < d; ++r) {
          dot += th.at(r, a) * th.at(r, b);
          na += th.at(r, a) * th.at(r, a);
          nb += th.at(r, b) * th.at(r, b);
        }
        sum += std::abs(dot) / std::sqrt(na * nb);
        ++pairs;
      }
    total += sum / double(pairs);
  }
  return total / double(out.layers.size());
}

AblationResult run_ablation(const Synthetic& s, std::uint64_t seed, const std::string& variant) {
  auto cfg = synthetic_config(seed);
  if (variant == "no_exp") cfg.use_exp = false;
  if (variant == "no_att") cfg.use_att = false;
  train::Trainer<double> tr(cfg);
  std::ofstream log(kArtifacts / ("ablation_seed" + std::to_string(seed) + "_" + variant + ".csv"));
  train::write_metrics_header(log);
  for (std::size_t e = 0; e < kAblationEpochs; ++e)
    train::write_metrics_rows(log, tr.train_epoch(s.ptrs, s.tasks, kAblationEpochs));
  const auto m = tr.evaluate(s.ptrs, s.tasks, "final");
  train::write_metrics_rows(log, m);
  const AblationResult r{m.max_gate_share, mean_abs_cosine(tr, s)};
  log << "# max_gate_share " << r.max_gate_share << " mean_abs_cos " << r.mean_abs_cos << '\n';
  return r;
}

std::pair<Outcome, Outcome> ablations(const Synthetic& s) {
  std::size_t gate_wins = 0, cos_wins = 0;
  std::ostringstream gd, cd;
  gd.precision(4);
  cd.precision(4);
  for (std::uint64_t seed : kAblationSeeds) {
    const auto on = run_ablation(s, seed, "all");
    const auto no_exp = run_ablation(s, seed, "no_exp");
    const auto no_att = run_ablation(s, seed, "no_att");
    gate_wins += on.max_gate_share < no_exp.max_gate_share;
    cos_wins += on.mean_abs_cos < no_att.mean_abs_cos;
    gd << " s" << seed << " " << on.max_gate_share << " vs " << no_exp.max_gate_share << ";";
    cd << " s" << seed << " " << on.mean_abs_cos << " vs " << no_att.mean_abs_cos << ";";
  }
  const std::string epochs = std::to_string(kAblationEpochs) + " epochs";
  return {{gate_wins >= 3, std::to_string(gate_wins) + "/4 seeds lower with exp term (" + epochs +
                               "; on vs off:" + gd.str() + ")"},
          {cos_wins >= 3, std::to_string(cos_wins) + "/4 seeds lower with att term (" + epochs +
                              "; on vs off:" + cd.str() + ")"}};
}

// ---------------------------------------------------------------------------
// 8. split integrity

Outcome split_integrity() {
  const auto mols = synth::generate_molecules(500, 7);
  const auto records = synth::make_task_records(mols, synth::Rule::kCarbonyl, "task_a");
  const mol::SplitFractions fr{0.8, 0.0, 0.2};
  std::size_t problems = 0;
  std::ostringstream d;
  for (std::uint64_t seed : {0u, 1u, 2u, 3u, 4u}) {
    const auto split = split_records(records, fr, seed);
    problems += split != split_records(records, fr, seed);

    // Recount from scratch: groups are (label, scaffold of the parsed SMILES).
    std::map<std::pair<int, std::string>, std::set<mol::Split>> where;
    std::map<std::pair<int, std::string>, std::size_t> group_size;
    std::map<int, std::size_t> n_class, n_train;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto key = mol::scaffold_key(mol::murcko_scaffold(mol::parse_smiles(records[i].smiles)));
      const std::pair g{records[i].label, key.canonical_hash};
      where[g].insert(split[i]);
      ++group_size[g];
      ++n_class[records[i].label];
      n_train[records[i].label] += split[i] == mol::Split::kTrain;
      problems += split[i] == mol::Split::kValid;
    }
    for (const auto& [g, s] : where) problems += s.size() != 1;
    for (const auto& [label, n] : n_class) {
      std::size_t largest = 0;
      for (const auto& [g, size] : group_size)
        if (g.first == label) largest = std::max(largest, size);
      const double dev = std::abs(double(n_train[label]) - 0.8 * double(n));
      problems += dev > double(largest);
      if (seed == 0)
        d << "class " << label << ": " << n_train[label] << "/" << n << " train, largest group "
          << largest << "; ";
    }
  }
  d << "violations " << problems << " over 5 seeds";
  return {problems == 0, d.str()};
}

// ---------------------------------------------------------------------------
// 9. unseen task routed by its embedding

Outcome masked_task() {
  const auto train_mols = synth::generate_molecules(200, 11);
  const auto test_mols = synth::generate_molecules(200, 12);
  const auto train_recs = synth::make_task_records(train_mols, synth::Rule::kCarbonyl, "task_a");
  // Same labeling rule, a different task id and a nearby but distinct embedding.
  const auto test_recs = synth::make_task_records(test_mols, synth::Rule::kCarbonyl, "task_b");

  TaskTable tasks;
  const auto ea = fallback_task_embedding("task_a", kTaskDim);
  const auto noise = fallback_task_embedding("task_b", kTaskDim);
  std::vector<double> eb(kTaskDim);
  double norm = 0;
  for (std::size_t i = 0; i < kTaskDim; ++i) {
    eb[i] = ea[i] + 0.3 * noise[i];
    norm += eb[i] * eb[i];
  }
  for (auto& x : eb) x /= std::sqrt(norm);
  tasks.add({"task_a", "task_a", ea});

  train::Trainer<double> tr(synthetic_config(9));
  const auto ptrs = fixtures::pointers(train_recs);
  constexpr std::size_t kEpochs = 30;
  for (std::size_t e = 0; e < kEpochs; ++e) tr.train_epoch(ptrs, tasks, kEpochs);

  TaskTable eval_tasks;
  eval_tasks.add({"task_b", "task_b", eb});
  const auto m = tr.evaluate(fixtures::pointers(test_recs), eval_tasks, "test");
  const double auc = m.task_auc.at("task_b").value_or(0.0);
  double cos = 0;
  for (std::size_t i = 0; i < kTaskDim; ++i) cos += ea[i] * eb[i];
  return {auc > 0.5, "unseen task AUC " + fmt("%.4f", auc) + " (embedding cosine to trained task " +
                         fmt("%.3f", cos) + ")"};
}

// ---------------------------------------------------------------------------
// 10. bitwise reproducibility through the CLI

Outcome reproducibility() {
  const fs::path dir = kArtifacts / "repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  if (fixtures::run(kCli + " synth --molecules 60 --seed 3 --out " + q(dir / "data.csv")).code)
    return {false, "synth failed"};
  if (fixtures::run(kCli + " split --data " + q(dir / "data.csv") + " --out " + q(dir / "split.csv")).code)
    return {false, "split failed"};
  // One config file, trained twice from scratch into the same directory.
  const fs::path cfg = dir / "run.json";
  std::ofstream(cfg) << R"({"num_experts": 8, "k_s": 2, "k_t": 4, "embed_dim": 32,
    "num_gnn_layers": 2, "task_dim": 16, "batch_size": 32, "epochs": 3, "seed": 17,
    "datasets": [")" << (dir / "data.csv").string()
                     << R"("], "split_file": ")" << (dir / "split.csv").string()
                     << R"(", "output_dir": ")" << (dir / "out").string() << R"("})";
  std::vector<std::string> images;
  for (int run = 1; run <= 2; ++run) {
    fs::remove_all(dir / "out");
    const auto r = fixtures::run(kCli + " train --config " + q(cfg));
    if (r.code != 0) return {false, "run " + std::to_string(run) + " exited " + std::to_string(r.code)};
    images.push_back(fixtures::slurp(dir / "out" / "checkpoint.bin"));
    fs::copy_file(dir / "out" / "checkpoint.bin", dir / ("run" + std::to_string(run) + ".bin"),
                  fs::copy_options::overwrite_existing);
  }
  const bool same = !images[0].empty() && images[0] == images[1];
  return {same, std::to_string(images[0].size()) + "-byte checkpoints " +
                    (same ? "identical" : "differ")};
}

}  // namespace

int main() {
  fs::create_directories(kArtifacts);
  std::size_t failed = 0;
  auto report = [&](int n, const std::string& name, const Outcome& o) {
    std::cout << "criterion " << n << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << "  "
              << o.detail << std::endl;
    failed += !o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) -> Outcome {
    try {
      return f();
    } catch (const std::exception& e) {
      return {false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "gradient integrity", guarded(gradient_integrity));
  report(2, "routing invariants", guarded(routing_invariants));
  report(3, "loss closed forms", guarded(loss_closed_forms));
  report(4, "auc oracle", guarded(auc_oracle));
  const auto corpus = two_task_corpus();
  report(5, "overfit", guarded([&] { return overfit(corpus); }));
  std::pair<Outcome, Outcome> ab;
  try {
    ab = ablations(corpus);
  } catch (const std::exception& e) {
    ab = {{false, e.what()}, {false, e.what()}};
  }
  report(6, "dominance mitigation", ab.first);
  report(7, "diversity effect", ab.second);
  report(8, "split integrity", guarded(split_integrity));
  report(9, "unseen task routing", guarded(masked_task));
  report(10, "reproducibility", guarded(reproducibility));

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
