#include <CLI11.hpp>

#include <iostream>

#include "pipeline.hpp"

namespace {

void add_common(CLI::App* cmd, stow::cli::RunOptions& o) {
  cmd->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "override, key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "seed for generation and training");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic unseen-object segmentation and tracking: generate, train, infer, evaluate"};
  app.require_subcommand(1);
  stow::cli::RunOptions o;
  std::string mode;
  long long sequences = 0;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, o);
  gen->add_option("--out", o.out, "dataset directory")->required();
  gen->add_option("--mode", mode, "shelf or tabletop");
  gen->add_option("--sequences", sequences, "number of sequences");

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, o);
  train->add_option("--data", o.data, "dataset directory")->required();
  train->add_option("--out", o.out, "run directory")->required();
  train->add_option("--checkpoint", o.checkpoint, "checkpoint to resume from");

  auto* infer = app.add_subcommand("infer", "predict tracks");
  add_common(infer, o);
  infer->add_option("--data", o.data, "dataset directory")->required();
  infer->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  infer->add_option("--out", o.out, "prediction directory")->required();

  auto* eval = app.add_subcommand("eval", "score tracks against ground truth");
  add_common(eval, o);
  eval->add_option("--data", o.data, "dataset directory")->required();
  eval->add_option("--tracks", o.tracks, "prediction directory")->required();
  eval->add_option("--out", o.out, "report file");

  CLI11_PARSE(app, argc, argv);
  if (!mode.empty()) o.overrides.insert(o.overrides.begin(), "synth.mode=" + mode);
  if (sequences != 0) o.overrides.insert(o.overrides.begin(), "gen.sequences=" + std::to_string(sequences));

  try {
    if (*gen) stow::cli::cmd_gen(o, std::cout);
    if (*train) (void)stow::cli::cmd_train(o, std::cout);
    if (*infer) stow::cli::cmd_infer(o, std::cout);
    if (*eval) (void)stow::cli::cmd_eval(o, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "stow: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
