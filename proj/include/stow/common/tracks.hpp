#pragma once

#include <string>
#include <vector>

#include "stow/common/mask.hpp"

namespace stow {

// One predicted object trajectory over a whole sequence.
struct TrackPrediction {
  int id = 0;
  double score = 0.0;
  std::vector<BinaryMask> masks;     // one per frame, empty where the track has no token
  std::vector<double> frame_scores;  // token score per frame, 0 where absent

  friend bool operator==(const TrackPrediction&, const TrackPrediction&) = default;
};

// Track file: a header with the frame count and extents, then per track a
// "track <id> <score>" line followed by one "frame <t> <score> <n> runs..."
// line per frame, using the same run-length convention as sequence
// manifests.
void write_tracks(const std::string& path, const std::vector<TrackPrediction>& tracks, std::size_t frames,
                  int height, int width);
// Throws ParseError with "path:line:" on malformed input.
[[nodiscard]] std::vector<TrackPrediction> read_tracks(const std::string& path);

}  // namespace stow
