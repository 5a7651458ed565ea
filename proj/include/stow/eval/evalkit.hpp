#pragma once

// Video instance segmentation metrics: sequence-level mask IoU, greedy
// confidence-ordered matching, 101-point interpolated AP and per-frame image
// AP.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stow/common/mask.hpp"
#include "stow/common/tracks.hpp"
#include "stow/synth/synthgen.hpp"

namespace stow::eval {

struct GroundTruthTrack {
  int id = 0;
  std::vector<BinaryMask> masks;  // empty where the object is not visible
};

// Tracks of every object visible in at least one frame, ascending id.
[[nodiscard]] std::vector<GroundTruthTrack> ground_truth_tracks(const synth::SequenceRecord& sequence);

// Sum of per-frame intersections over sum of per-frame unions; 0 when both
// are empty everywhere. Throws UsageError on frame count or extent mismatch.
[[nodiscard]] double sequence_iou(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt);

struct Detection {
  double score = 0.0;
  bool true_positive = false;
};

// IoU table [pred][gt] -> detections in descending score order (ties by
// ascending prediction index); each claims its highest-IoU unclaimed GT
// with IoU >= threshold.
[[nodiscard]] std::vector<Detection> match_detections(std::span<const double> scores,
                                                      const std::vector<std::vector<double>>& iou, double threshold);

// Track-level matching; ties on score go to the lower track id.
[[nodiscard]] std::vector<Detection> match_tracks(std::span<const TrackPrediction> preds,
                                                  std::span<const GroundTruthTrack> gts, double threshold);

struct PRPoint {
  double recall = 0.0;
  double precision = 0.0;
  double threshold = 0.0;
};

// One point per detection in descending score order.
[[nodiscard]] std::vector<PRPoint> pr_curve(std::vector<Detection> detections, std::size_t gt_count);

// 101-point interpolated AP; absent when there is no ground truth.
[[nodiscard]] std::optional<double> average_precision(std::vector<Detection> detections, std::size_t gt_count);

// IoU thresholds 0.50, 0.55, ..., 0.95.
[[nodiscard]] std::vector<double> coco_thresholds();

// Evaluation inputs for one sequence.
struct SequenceEval {
  std::string name;
  std::vector<TrackPrediction> predictions;
  std::vector<GroundTruthTrack> ground_truth;
};

[[nodiscard]] double ap_at_all(std::span<const TrackPrediction> preds, std::span<const GroundTruthTrack> gts);

struct SequenceMetrics {
  std::string name;
  std::optional<double> ap50, ap_all, image_ap50, image_ap_all;
  std::size_t gt_tracks = 0, predicted_tracks = 0;
};

struct EvalReport {
  std::optional<double> ap50, ap_all, image_ap50, image_ap_all;
  std::size_t gt_tracks = 0, gt_instances = 0, predicted_tracks = 0;
  std::vector<SequenceMetrics> sequences;

  // Plain "key value" lines; absent values print as "n/a".
  [[nodiscard]] std::string format() const;
};

// Pools tracks of all sequences (video AP) and per-frame instances of all
// frames (image AP) before building PR curves. Per-frame instances are
// scored by their token score.
[[nodiscard]] EvalReport evaluate(std::span<const SequenceEval> sequences);

}  // namespace stow::eval
