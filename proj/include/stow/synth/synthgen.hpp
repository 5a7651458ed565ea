#pragma once

// Deterministic 2-D scene generator for discrete-frame segmentation and
// tracking. Shelf scenes pack elongated upright rectangles side by side with
// heavy overlap; tabletop scenes scatter ellipses and convex polygons that are
// introduced incrementally and shuffled between frames.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stow/common/keyvalue.hpp"
#include "stow/common/mask.hpp"

namespace stow::synth {

enum class SceneMode { shelf, tabletop };

[[nodiscard]] std::string to_string(SceneMode mode);
// Throws ConfigError naming the valid modes.
[[nodiscard]] SceneMode parse_mode(const std::string& text);

enum class OutlineKind { ellipse, polygon };

struct ShapeSpec {
  OutlineKind kind = OutlineKind::ellipse;
  double semi_x = 1.0;  // ellipse semi-axes, pixels
  double semi_y = 1.0;
  std::vector<std::array<double, 2>> vertices;  // convex polygon, local pixel coords, counter-clockwise
  std::array<double, 3> color{0.5, 0.5, 0.5};
  std::uint64_t texture_seed = 0;
  double texture_amplitude = 0.0;
  double texture_cell = 4.0;  // noise lattice spacing, pixels
  double scale = 0.0;  // largest extent as a fraction of the canvas

  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

struct Pose {
  double x = 0.0;  // center, canvas pixels
  double y = 0.0;
  double rotation = 0.0;  // radians

  friend bool operator==(const Pose&, const Pose&) = default;
};

struct ObjectInstance {
  int id = 0;
  ShapeSpec shape;
  Pose pose;
  int z = 0;  // higher occludes lower
  bool present = true;
};

struct Background {
  std::array<double, 3> color{0.5, 0.5, 0.5};
  std::uint64_t texture_seed = 0;
  double texture_amplitude = 0.0;
  double texture_cell = 8.0;
};

struct FrameRecord {
  ImageU8 image;
  std::vector<BinaryMask> masks;  // one per visible object, pairwise disjoint
  std::vector<int> object_ids;    // aligned with masks, ascending

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct SynthConfig {
  SceneMode mode = SceneMode::tabletop;
  int height = 64;
  int width = 64;
  int frames = 15;
  int intro_frames = 10;     // tabletop: new ids only in frames [0, intro_frames)
  int initial_objects = 2;   // tabletop objects in frame 0
  int min_objects = 1;
  int max_objects = 5;
  double new_object_probability = 0.6;
  double move_probability = 0.5;
  double flip_probability = 0.2;
  double hide_probability = 0.1;     // tabletop: tuck a moved object under a larger one
  double removal_probability = 0.1;  // shelf: retrieve one object
  double duplicate_probability = 0.0;  // new object copies an existing outline and color
  double scale_min = 0.20;
  double scale_max = 0.40;
  double texture_amplitude = 0.08;
  double texture_cell = 4.0;
  double background_amplitude = 0.05;
  double min_color_distance = 0.25;
  double shelf_overlap_max = 0.5;  // fraction of a rectangle's width hidden behind its neighbour
  double camera_jitter = 1.0;      // pixels
  int min_visible_pixels = 12;
  int max_retries = 64;

  static SynthConfig tabletop();
  static SynthConfig shelf();

  // Throws ConfigError on an invalid band or extent.
  void validate() const;

  [[nodiscard]] KeyValueConfig to_keyvalue() const;
  // Starts from the preset for `mode` (if given) and applies matching keys.
  static SynthConfig from_keyvalue(const KeyValueConfig& kv);

  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

struct SequenceRecord {
  std::vector<FrameRecord> frames;
  std::uint64_t seed = 0;
  SceneMode mode = SceneMode::tabletop;
  SynthConfig config;
  // Object id -> appearance group; objects sharing a group are visually
  // identical up to texture. Every object gets an entry.
  std::map<int, int> appearance_groups;

  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

// Record plus the per-frame scene state it was rendered from.
struct GeneratedScene {
  SequenceRecord record;
  std::vector<std::vector<ObjectInstance>> states;
};

[[nodiscard]] GeneratedScene generate_scene(const SynthConfig& config, std::uint64_t seed);
[[nodiscard]] SequenceRecord generate_sequence(const SynthConfig& config, std::uint64_t seed);

// Opaque z-ordered rendering. Objects with no visible pixel get no mask.
[[nodiscard]] FrameRecord rasterize_frame(std::span<const ObjectInstance> instances, int height, int width,
                                          const Background& background);

// Per-sequence seed for the i-th sequence of a dataset.
[[nodiscard]] std::uint64_t sequence_seed(std::uint64_t dataset_seed, std::size_t index);

}  // namespace stow::synth
