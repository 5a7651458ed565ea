#pragma once

// On-disk dataset layout:
//   <root>/dataset.txt                 sequence directory list
//   <root>/<sequence>/manifest.txt     frames, masks as run lengths
//   <root>/<sequence>/frame_NNN.png    8-bit RGB

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stow/synth/synthgen.hpp"

namespace stow::synth {

// Generates `count` sequences with seeds sequence_seed(dataset_seed, i).
// A failing sequence is reported as GenerationError naming its index.
[[nodiscard]] std::vector<SequenceRecord> generate_dataset(const SynthConfig& config, std::uint64_t dataset_seed,
                                                           std::size_t count);

void write_sequence(const SequenceRecord& sequence, const std::string& directory);
[[nodiscard]] SequenceRecord read_sequence(const std::string& directory);

struct DatasetInfo {
  std::uint64_t seed = 0;
  SynthConfig config;
};

// Writes <root>/dataset.txt listing the sequences, optionally recording how
// they were generated, plus one directory per sequence.
void write_dataset(const std::vector<SequenceRecord>& sequences, const std::string& root,
                   const std::optional<DatasetInfo>& info = std::nullopt);
// Throws ParseError naming the file, line and record at fault.
// `names`, when given, receives the sequence directory names in order.
[[nodiscard]] std::vector<SequenceRecord> read_dataset(const std::string& root,
                                                       std::vector<std::string>* names = nullptr);

[[nodiscard]] std::string sequence_directory_name(std::size_t index);

}  // namespace stow::synth
