#pragma once

// Subcommand implementations shared by the stow binary and the acceptance
// harness.

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stow/common/keyvalue.hpp"
#include "stow/common/mask.hpp"
#include "stow/common/tracks.hpp"
#include "stow/eval/evalkit.hpp"
#include "stow/train/trainer.hpp"

namespace stow::cli {

struct RunOptions {
  std::string config_path;             // key = value file, optional
  std::vector<std::string> overrides;  // key=value, applied last
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string checkpoint;
  std::string out;
  std::string tracks;
};

// Defaults < config file < overrides. Keys are namespaced: gen., synth.,
// model., train., assoc., infer.
[[nodiscard]] KeyValueConfig resolve_config(const RunOptions& options);

// Writes a dataset under options.out.
void cmd_gen(const RunOptions& options, std::ostream& log);

// Trains on options.data into options.out; options.checkpoint resumes.
train::TrainRunResult cmd_train(const RunOptions& options, std::ostream& log);

// Writes <out>/<sequence>/tracks.txt and, unless infer.overlays is false,
// overlay_<frame>.png for every sequence of options.data.
void cmd_infer(const RunOptions& options, std::ostream& log);

// Reads ground truth from options.data and tracks from options.tracks;
// writes the report to options.out when set.
eval::EvalReport cmd_eval(const RunOptions& options, std::ostream& log);

// Fixed color of a trajectory id.
[[nodiscard]] std::array<std::uint8_t, 3> track_color(int id);

// Masks tinted with their track colour, outlined, and labelled with the id.
[[nodiscard]] ImageU8 render_overlay(const ImageU8& image, const std::vector<TrackPrediction>& tracks,
                                     std::size_t frame);

}  // namespace stow::cli
