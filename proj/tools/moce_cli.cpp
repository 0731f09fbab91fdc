// SPDX-License-Identifier: Apache-2.0
//
// moce: split, train, eval, predict, gradcheck, show-config, embed-tasks, synth.

#include <iostream>

#include <CLI11.hpp>

#include "moce/commands.hpp"

namespace {

moce::mol::SplitFractions parse_fractions(const std::vector<double>& v) {
  if (v.size() != 3) throw moce::ConfigError("--fractions takes three values: train valid test");
  return {v[0], v[1], v[2]};
}

}  // namespace

using namespace moce;

int main(int argc, char** argv) {
  CLI::App app{"GNN mixture-of-collaborative-experts for molecular property prediction"};
  app.require_subcommand(1);

  cli::SplitOptions split;
  std::vector<double> fractions{0.8, 0.1, 0.1};
  auto* c_split = app.add_subcommand("split", "stratified scaffold split of a dataset");
  c_split->add_option("--data", split.data, "dataset CSV (smiles,label,task_id)")
      ->required()
      ->check(CLI::ExistingFile);
  c_split->add_option("--fractions", fractions, "train valid test fractions")->expected(3);
  c_split->add_option("--seed", split.seed, "split seed");
  c_split->add_option("--out", split.out, "output split CSV")->required();

  cli::TrainOptions train;
  auto* c_train = app.add_subcommand("train", "train from a JSON config");
  c_train->add_option("--config", train.config, "run config JSON")
      ->required()
      ->check(CLI::ExistingFile);
  c_train->add_option("--resume", train.resume, "checkpoint to resume from")
      ->check(CLI::ExistingFile);

  cli::EvalOptions eval;
  auto* c_eval = app.add_subcommand("eval", "per-task AUCROC of a checkpoint");
  c_eval->add_option("--checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--data", eval.data, "dataset CSV")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--split-file", eval.split_file, "split CSV; absent means all rows are test");
  c_eval->add_option("--split", eval.which, "split to evaluate (train, valid, test)");
  c_eval->add_option("--out", eval.out, "also write the table here");

  cli::PredictOptions predict;
  auto* c_predict = app.add_subcommand("predict", "score one molecule for one task");
  c_predict->add_option("--checkpoint", predict.checkpoint)
      ->required()
      ->check(CLI::ExistingFile);
  c_predict->add_option("--smiles", predict.smiles)->required();
  c_predict->add_option("--task", predict.task)->required();

  cli::GradcheckOptions grad;
  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference gradient check (64-bit)");
  c_grad->add_option("--config", grad.config, "config supplying model dimensions")
      ->check(CLI::ExistingFile);
  c_grad->add_option("--trials", grad.trials, "random trials per family");
  c_grad->add_option("--seed", grad.seed);
  c_grad->add_option("--molecules", grad.molecules, "molecules per model trial")
      ->check(CLI::Range(1, 64));

  std::string show_path;
  auto* c_show = app.add_subcommand("show-config", "print the default or resolved config");
  c_show->add_option("--config", show_path)->check(CLI::ExistingFile);

  cli::EmbedTasksOptions embed;
  auto* c_embed = app.add_subcommand("embed-tasks", "write a task embedding table");
  c_embed->add_option("--data", embed.data)->required()->check(CLI::ExistingFile);
  c_embed->add_option("--existing", embed.existing, "table to extend")->check(CLI::ExistingFile);
  c_embed->add_option("--dim", embed.dim, "embedding dimension for new tasks");
  c_embed->add_option("--out", embed.out)->required();

  cli::SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "write a synthetic planted-rule dataset");
  c_synth->add_option("--molecules", synth.molecules);
  c_synth->add_option("--seed", synth.seed);
  c_synth->add_option("--rule", synth.rule, "carbonyl or ring");
  c_synth->add_option("--task", synth.task, "task id for every row");
  c_synth->add_option("--out", synth.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kOk : cli::kUsage;
  }

  try {
    if (*c_split) {
      split.fractions = parse_fractions(fractions);
      return cli::cmd_split(split, std::cout);
    }
    if (*c_train) return cli::cmd_train(train, std::cout, std::cerr);
    if (*c_eval) return cli::cmd_eval(eval, std::cout, std::cerr);
    if (*c_predict) return cli::cmd_predict(predict, std::cout);
    if (*c_grad) return cli::cmd_gradcheck(grad, std::cout);
    if (*c_show) return cli::cmd_show_config(show_path, std::cout);
    if (*c_embed) return cli::cmd_embed_tasks(embed, std::cout);
    if (*c_synth) return cli::cmd_synth(synth, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return cli::kUsage;
}
