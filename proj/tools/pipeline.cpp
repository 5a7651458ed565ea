#include "pipeline.hpp"

#include <omp.h>

#include <exception>
#include <filesystem>
#include <fstream>

#include "stow/assoc/associator.hpp"
#include "stow/common/errors.hpp"
#include "stow/model/checkpoint.hpp"
#include "stow/synth/dataset.hpp"

namespace stow::cli {

namespace fs = std::filesystem;

KeyValueConfig resolve_config(const RunOptions& options) {
  KeyValueConfig kv;
  if (!options.config_path.empty()) kv = KeyValueConfig::load(options.config_path);
  if (options.seed) {
    kv.set("gen.seed", std::to_string(*options.seed));
    kv.set("train.seed", std::to_string(*options.seed));
  }
  for (const auto& o : options.overrides) kv.apply_override(o);
  return kv;
}

namespace {

void require(const std::string& value, const char* flag, const char* command) {
  if (value.empty()) throw UsageError(std::string(command) + " needs " + flag);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << text;
}

// Runs body(i) for every i on the configured worker count; the first failure
// by index is rethrown with the sequence name.
template <class F>
void for_each_sequence(const std::vector<std::string>& names, F body) {
  const auto n = static_cast<std::ptrdiff_t>(names.size());
  std::vector<std::exception_ptr> errors(names.size());
#pragma omp parallel for schedule(dynamic) num_threads(train::resolve_workers(0))
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw UsageError("sequence " + names[i] + ": " + e.what());
    }
  }
}

}  // namespace

void cmd_gen(const RunOptions& options, std::ostream& log) {
  require(options.out, "--out", "gen");
  const KeyValueConfig kv = resolve_config(options);
  const synth::SynthConfig config = synth::SynthConfig::from_keyvalue(kv.section("synth."));
  const std::int64_t count = kv.get_int("gen.sequences", 10);
  if (count < 1) throw UsageError("gen.sequences must be positive");
  const std::uint64_t seed = kv.get_uint("gen.seed", 1);
  omp_set_num_threads(train::resolve_workers(0));
  const auto data = synth::generate_dataset(config, seed, static_cast<std::size_t>(count));
  synth::write_dataset(data, options.out, synth::DatasetInfo{seed, config});
  log << "wrote " << data.size() << " " << synth::to_string(config.mode) << " sequences to " << options.out << "\n";
}

train::TrainRunResult cmd_train(const RunOptions& options, std::ostream& log) {
  require(options.data, "--data", "train");
  require(options.out, "--out", "train");
  const KeyValueConfig kv = resolve_config(options);
  auto data = synth::read_dataset(options.data);
  if (data.empty()) throw UsageError("dataset " + options.data + " holds no sequences");

  KeyValueConfig model_kv = kv.section("model.");
  const auto& first = data.front().frames.at(0).image;
  if (!model_kv.contains("image_height")) model_kv.set("image_height", std::to_string(first.height));
  if (!model_kv.contains("image_width")) model_kv.set("image_width", std::to_string(first.width));
  const model::ModelConfig model_config = model::ModelConfig::from_keyvalue(model_kv);
  const train::TrainConfig train_config = train::TrainConfig::from_keyvalue(kv.section("train."));

  fs::create_directories(options.out);
  std::string record;
  const KeyValueConfig model_record = model_config.to_keyvalue(), train_record = train_config.to_keyvalue();
  for (const auto& [k, v] : model_record.entries()) record += "model." + k + " = " + v + "\n";
  for (const auto& [k, v] : train_record.entries()) record += "train." + k + " = " + v + "\n";
  write_text(fs::path(options.out) / "run_config.txt", record);

  std::optional<std::string> resume;
  if (!options.checkpoint.empty()) resume = options.checkpoint;
  auto result = train::train_loop(std::move(data), model_config, train_config, options.out, resume,
                                  [&](const train::StepMetrics& m) {
                                    if ((m.step + 1) % train_config.log_every == 0) log << m.log_line() << "\n";
                                  });
  log << "final checkpoint " << result.final_checkpoint << "\n";
  return result;
}

void cmd_infer(const RunOptions& options, std::ostream& log) {
  require(options.data, "--data", "infer");
  require(options.checkpoint, "--checkpoint", "infer");
  require(options.out, "--out", "infer");
  const KeyValueConfig kv = resolve_config(options);
  const assoc::AssocConfig assoc_config = assoc::AssocConfig::from_keyvalue(kv.section("assoc."));
  const bool overlays = kv.get_bool("infer.overlays", true);
  const model::LoadedCheckpoint ckpt = model::load_checkpoint(options.checkpoint);
  const model::StowModel<float>& net = ckpt.model;
  std::vector<std::string> names;
  const auto data = synth::read_dataset(options.data, &names);

  for (std::size_t i = 0; i < data.size(); ++i)
    for (const auto& f : data[i].frames)
      if (f.image.height != net.config().image_height || f.image.width != net.config().image_width)
        throw ConfigError("checkpoint expects " + std::to_string(net.config().image_height) + "x" +
                          std::to_string(net.config().image_width) + " frames but sequence " + names[i] + " has " +
                          std::to_string(f.image.height) + "x" + std::to_string(f.image.width));

  fs::create_directories(options.out);
  for_each_sequence(names, [&](std::size_t i) {
    const auto& seq = data[i];
    std::vector<ImageU8> images;
    for (const auto& f : seq.frames) images.push_back(f.image);
    const auto predictions = model::predict_sequence(net, images);
    const auto tracks = assoc::run_sequence(predictions, assoc_config);
    const fs::path dir = fs::path(options.out) / names[i];
    fs::create_directories(dir);
    write_tracks((dir / "tracks.txt").string(), tracks, seq.frames.size(), net.config().image_height,
                 net.config().image_width);
    if (!overlays) return;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      char file[32];
      std::snprintf(file, sizeof file, "overlay_%03zu.png", f);
      write_png((dir / file).string(), render_overlay(seq.frames[f].image, tracks, f));
    }
  });
  log << "wrote tracks for " << data.size() << " sequences to " << options.out << "\n";
}

eval::EvalReport cmd_eval(const RunOptions& options, std::ostream& log) {
  require(options.data, "--data", "eval");
  require(options.tracks, "--tracks", "eval");
  std::vector<std::string> names;
  const auto data = synth::read_dataset(options.data, &names);
  std::vector<eval::SequenceEval> inputs(data.size());
  for_each_sequence(names, [&](std::size_t i) {
    inputs[i].name = names[i];
    inputs[i].ground_truth = eval::ground_truth_tracks(data[i]);
    inputs[i].predictions = read_tracks((fs::path(options.tracks) / names[i] / "tracks.txt").string());
  });
  const eval::EvalReport report = eval::evaluate(inputs);
  const std::string text = report.format();
  if (!options.out.empty()) {
    if (fs::path(options.out).has_parent_path()) fs::create_directories(fs::path(options.out).parent_path());
    write_text(options.out, text);
  }
  log << text;
  return report;
}

}  // namespace stow::cli
