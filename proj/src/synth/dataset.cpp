#include "stow/synth/dataset.hpp"

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "stow/common/errors.hpp"
#include "stow/common/line_reader.hpp"

namespace stow::synth {

namespace fs = std::filesystem;

std::string sequence_directory_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04zu", index);
  return buf;
}

std::vector<SequenceRecord> generate_dataset(const SynthConfig& config, std::uint64_t dataset_seed, std::size_t count) {
  config.validate();
  std::vector<SequenceRecord> out(count);
  std::vector<std::exception_ptr> errors(count);
  const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out[static_cast<std::size_t>(i)] = generate_sequence(config, sequence_seed(dataset_seed, static_cast<std::size_t>(i)));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw GenerationError("sequence " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%03zu.png", index);
  return buf;
}

}  // namespace

void write_sequence(const SequenceRecord& sequence, const std::string& directory) {
  fs::create_directories(directory);
  const fs::path dir(directory);
  std::ofstream out(dir / "manifest.txt");
  if (!out) throw UsageError("cannot write " + (dir / "manifest.txt").string());
  const int height = sequence.frames.empty() ? sequence.config.height : sequence.frames[0].image.height;
  const int width = sequence.frames.empty() ? sequence.config.width : sequence.frames[0].image.width;
  out << "stow-sequence 1\n";
  out << "mode " << to_string(sequence.mode) << "\n";
  out << "seed " << sequence.seed << "\n";
  out << "height " << height << "\nwidth " << width << "\n";
  const KeyValueConfig snapshot = sequence.config.to_keyvalue();
  for (const auto& [k, v] : snapshot.entries()) out << "config " << k << " " << v << "\n";
  for (const auto& [id, g] : sequence.appearance_groups) out << "group " << id << " " << g << "\n";
  out << "frames " << sequence.frames.size() << "\n";
  for (std::size_t f = 0; f < sequence.frames.size(); ++f) {
    const FrameRecord& frame = sequence.frames[f];
    const std::string file = frame_file_name(f);
    write_png((dir / file).string(), frame.image);
    out << "frame " << f << " " << file << " " << frame.masks.size() << "\n";
    for (std::size_t m = 0; m < frame.masks.size(); ++m) {
      const auto counts = rle_encode(frame.masks[m]);
      out << "mask " << frame.object_ids[m] << " " << counts.size();
      for (auto c : counts) out << " " << c;
      out << "\n";
    }
  }
  if (!out) throw UsageError("write failed for " + (dir / "manifest.txt").string());
}

SequenceRecord read_sequence(const std::string& directory) {
  const fs::path dir(directory);
  LineReader in((dir / "manifest.txt").string());
  std::vector<std::string> f;

  in.expect(f, "stow-sequence", 2);
  if (f[1] != "1") in.fail("unsupported schema version '" + f[1] + "'");
  SequenceRecord seq;
  in.expect(f, "mode", 2);
  try {
    seq.mode = parse_mode(f[1]);
  } catch (const ConfigError& e) {
    in.fail(e.what());
  }
  in.expect(f, "seed", 2);
  seq.seed = in.number<std::uint64_t>(f[1], "seed");
  in.expect(f, "height", 2);
  const int height = in.number<int>(f[1], "height");
  in.expect(f, "width", 2);
  const int width = in.number<int>(f[1], "width");
  if (height < 1 || width < 1) in.fail("image extents must be positive");

  KeyValueConfig kv;
  kv.set("mode", to_string(seq.mode));
  std::size_t frame_count = 0;
  bool have_frames = false;
  while (in.next(f)) {
    if (f[0] == "config") {
      if (f.size() != 3) in.fail("config record needs a key and a value");
      kv.set(f[1], f[2]);
    } else if (f[0] == "group") {
      if (f.size() != 3) in.fail("group record needs an id and a group");
      const int id = in.number<int>(f[1], "object id");
      if (!seq.appearance_groups.emplace(id, in.number<int>(f[2], "group")).second)
        in.fail("duplicate group record for object " + f[1]);
    } else if (f[0] == "frames") {
      if (f.size() != 2) in.fail("frames record needs a count");
      frame_count = in.number<std::size_t>(f[1], "frame count");
      have_frames = true;
      break;
    } else {
      in.fail("unknown record '" + f[0] + "'");
    }
  }
  if (!have_frames) in.fail("missing 'frames' record");
  try {
    seq.config = SynthConfig::from_keyvalue(kv);
  } catch (const std::exception& e) {
    in.fail(std::string("config: ") + e.what());
  }

  std::set<int> seen_ids;
  for (std::size_t fi = 0; fi < frame_count; ++fi) {
    in.expect(f, "frame", 4);
    if (in.number<std::size_t>(f[1], "frame index") != fi)
      in.fail("frame " + std::to_string(fi) + " out of order (found " + f[1] + ")");
    const std::string label = "frame " + std::to_string(fi);
    const fs::path image_path = dir / f[2];
    if (!fs::exists(image_path)) in.fail(label + ": missing image file " + image_path.string());
    FrameRecord frame;
    try {
      frame.image = read_png(image_path.string());
    } catch (const ParseError& e) {
      in.fail(label + ": " + e.what());
    }
    if (frame.image.height != height || frame.image.width != width)
      in.fail(label + ": image extent differs from manifest");
    const auto n_masks = in.number<std::size_t>(f[3], "mask count");
    std::set<int> frame_ids;
    for (std::size_t m = 0; m < n_masks; ++m) {
      in.expect(f, "mask", 3);
      const int id = in.number<int>(f[1], "object id");
      const std::string mask_label = label + " mask " + f[1];
      if (!frame_ids.insert(id).second) in.fail(mask_label + ": id collision within frame");
      if (!frame.object_ids.empty() && id < frame.object_ids.back())
        in.fail(mask_label + ": object ids must ascend");
      const auto n_runs = in.number<std::size_t>(f[2], "run count");
      if (f.size() != 3 + n_runs) in.fail(mask_label + ": declared " + f[2] + " runs, found " +
                                          std::to_string(f.size() - 3));
      std::vector<std::uint32_t> counts;
      counts.reserve(n_runs);
      for (std::size_t r = 0; r < n_runs; ++r) counts.push_back(in.number<std::uint32_t>(f[3 + r], "run length"));
      try {
        frame.masks.push_back(rle_decode(counts, height, width));
      } catch (const ParseError& e) {
        in.fail(mask_label + ": " + e.what());
      }
      if (frame.masks.back().empty()) in.fail(mask_label + ": empty mask");
      frame.object_ids.push_back(id);
    }
    for (std::size_t a = 0; a < frame.masks.size(); ++a)
      for (std::size_t b = a + 1; b < frame.masks.size(); ++b)
        if (intersection_area(frame.masks[a], frame.masks[b]) > 0)
          in.fail(label + ": masks of objects " + std::to_string(frame.object_ids[a]) + " and " +
                  std::to_string(frame.object_ids[b]) + " overlap");
    seen_ids.insert(frame.object_ids.begin(), frame.object_ids.end());
    seq.frames.push_back(std::move(frame));
  }
  if (in.next(f)) in.fail("trailing record '" + f[0] + "'");
  for (int id : seen_ids) seq.appearance_groups.emplace(id, id);
  return seq;
}

void write_dataset(const std::vector<SequenceRecord>& sequences, const std::string& root,
                   const std::optional<DatasetInfo>& info) {
  fs::create_directories(root);
  std::ofstream out(fs::path(root) / "dataset.txt");
  if (!out) throw UsageError("cannot write " + (fs::path(root) / "dataset.txt").string());
  out << "stow-dataset 1\n";
  if (info) {
    out << "seed " << info->seed << "\n";
    const KeyValueConfig snapshot = info->config.to_keyvalue();
    for (const auto& [k, v] : snapshot.entries()) out << "config " << k << " " << v << "\n";
  }
  out << "sequences " << sequences.size() << "\n";
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const std::string name = sequence_directory_name(i);
    write_sequence(sequences[i], (fs::path(root) / name).string());
    out << "sequence " << name << "\n";
  }
}

std::vector<SequenceRecord> read_dataset(const std::string& root, std::vector<std::string>* names_out) {
  LineReader in((fs::path(root) / "dataset.txt").string());
  std::vector<std::string> f;
  in.expect(f, "stow-dataset", 2);
  if (f[1] != "1") in.fail("unsupported schema version '" + f[1] + "'");
  // Generation seed and config lines are informational.
  for (;;) {
    if (!in.next(f)) in.fail("unexpected end of file, wanted 'sequences'");
    if (f[0] == "sequences") break;
    if (f[0] != "seed" && f[0] != "config") in.fail("expected 'sequences', found '" + f[0] + "'");
  }
  if (f.size() < 2) in.fail("record 'sequences' has too few fields");
  const auto n = in.number<std::size_t>(f[1], "sequence count");
  std::vector<SequenceRecord> out;
  std::set<std::string> names;
  if (names_out) names_out->clear();
  for (std::size_t i = 0; i < n; ++i) {
    in.expect(f, "sequence", 2);
    if (!names.insert(f[1]).second) in.fail("sequence " + f[1] + " listed twice");
    if (names_out) names_out->push_back(f[1]);
    try {
      out.push_back(read_sequence((fs::path(root) / f[1]).string()));
    } catch (const ParseError& e) {
      throw ParseError("sequence " + std::to_string(i) + " (" + f[1] + "): " + e.what());
    }
  }
  if (in.next(f)) in.fail("trailing record '" + f[0] + "'");
  return out;
}

}  // namespace stow::synth
