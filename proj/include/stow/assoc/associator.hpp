#pragma once

// Online association of per-frame object tokens into trajectories by
// bipartite matching on track-embedding similarity.

#include <span>
#include <vector>

#include "stow/common/keyvalue.hpp"
#include "stow/common/mask.hpp"
#include "stow/common/tracks.hpp"
#include "stow/model/model.hpp"

namespace stow::assoc {

struct TokenRecord {
  double score = 0.0;
  BinaryMask mask;
  std::vector<double> embedding;  // unit norm
};

struct TrackPoint {
  std::size_t frame = 0;
  TokenRecord token;
};

struct Trajectory {
  int id = 0;
  std::vector<TrackPoint> points;  // strictly increasing frames
};

struct TrajectoryBank {
  std::vector<Trajectory> trajectories;  // ascending id
  int next_id = 0;
};

struct AssocConfig {
  double score_threshold = 0.6;  // tokens at or below are dropped
  double match_threshold = 0.2;  // similarity of every false-alarm slot
  int false_alarm_slots = 0;     // 0: one per surviving token

  void validate() const;
  [[nodiscard]] KeyValueConfig to_keyvalue() const;
  static AssocConfig from_keyvalue(const KeyValueConfig& kv);
};

// Max dot product of the token against every stored token. Throws UsageError
// on an empty trajectory and DimensionError on a width mismatch.
[[nodiscard]] double similarity(std::span<const double> embedding, const Trajectory& trajectory);

struct FrameAssociation {
  std::vector<int> trajectory_of_token;  // per input token; -1 if dropped
  std::vector<bool> opened;              // per input token; true if it started a trajectory
  double total_similarity = 0.0;         // objective value among surviving tokens
};

FrameAssociation associate_one_frame(TrajectoryBank& bank, std::size_t frame, std::span<const TokenRecord> tokens,
                                     const AssocConfig& config);

// Surviving-token indices under the score threshold rule.
[[nodiscard]] std::vector<std::size_t> surviving_tokens(std::span<const TokenRecord> tokens, double score_threshold);

// Folds association over the frames in order. Track score is the mean of
// member token scores.
[[nodiscard]] std::vector<TrackPrediction> run_sequence(std::span<const std::vector<TokenRecord>> frames, int height,
                                                        int width, const AssocConfig& config);
[[nodiscard]] std::vector<TokenRecord> tokens_of(const model::FramePrediction& prediction);
[[nodiscard]] std::vector<TrackPrediction> run_sequence(std::span<const model::FramePrediction> frames,
                                                        const AssocConfig& config);

}  // namespace stow::assoc
