#pragma once

// Set-prediction matching and the loss terms: existence classification,
// per-pixel mask cross-entropy, Dice, the contrastive tracking loss with a
// hinge on non-matching pairs, and the temperature-scaled InfoNCE loss.

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "stow/ad/tensor.hpp"

namespace stow::train {

template <typename T>
using Tensor = ad::Tensor<T>;

struct LossWeights {
  double class_weight = 2.0;
  double ce_weight = 5.0;
  double dice_weight = 5.0;
  double contrastive_weight = 1.0;
  double softmax_weight = 1.0;

  // Throws ConfigError unless all weights are >= 0 and one is positive.
  void validate() const;
};

struct ContrastiveConfig {
  double margin = 0.5;
  double negative_iou_ceiling = 0.6;
  int negatives_per_anchor = 16;  // 0 keeps every candidate

  void validate() const;
};

// Ground truth of one frame at mask resolution (H/4 x W/4); masks are
// area-averaged so values lie in [0, 1].
struct FrameTargets {
  std::vector<int> object_ids;
  std::vector<std::vector<double>> masks;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct FrameMatch {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, target index), ascending query
  std::vector<int> matched_ids;                            // object id per pair
  std::vector<std::size_t> unmatched;                      // ascending
  std::vector<double> max_iou;                             // per query, against any target
  std::size_t queries = 0;

  // Object id matched to query q, or -1.
  [[nodiscard]] int object_of(std::size_t q) const;
};

// Matching costs at mask resolution from detached values:
// class_weight * (-log s) + ce_weight * BCE + dice_weight * Dice.
[[nodiscard]] std::vector<double> matching_cost(std::span<const double> score_logits,
                                                std::span<const double> mask_logits, const FrameTargets& targets,
                                                const LossWeights& weights);

// Hungarian matching of queries to targets. Throws ConfigError if there
// are more targets than queries.
template <typename T>
FrameMatch match_predictions(const Tensor<T>& score_logits, const Tensor<T>& mask_logits, const FrameTargets& targets,
                             const LossWeights& weights);

// Mean binary cross-entropy of objectness; matched queries are positives.
template <typename T>
Tensor<T> loss_class(const Tensor<T>& score_logits, const FrameMatch& match);

// Mean per-pixel BCE between matched mask logits and their targets; zero
// without matches.
template <typename T>
Tensor<T> loss_mask_ce(const Tensor<T>& mask_logits, const FrameMatch& match, const FrameTargets& targets);

// Row-wise 1 - (2 sum(p g) + 1) / (sum(p^2) + sum(g^2) + 1), averaged over rows.
template <typename T>
Tensor<T> loss_dice(const Tensor<T>& probs, const Tensor<T>& targets);

// loss_dice over sigmoid of matched mask logits; zero without matches.
template <typename T>
Tensor<T> loss_mask_dice(const Tensor<T>& mask_logits, const FrameMatch& match, const FrameTargets& targets);

// 0.5 * (1 - a . b) for row vectors of equal width.
template <typename T>
Tensor<T> cosine_distance(const Tensor<T>& a, const Tensor<T>& b);

// Track embeddings and matches of one sample, one entry per frame.
template <typename T>
struct TrackingBatch {
  std::vector<Tensor<T>> embeddings;  // [N_q, C_r] per frame, unit rows
  std::vector<FrameMatch> matches;
  std::map<int, int> appearance_groups;  // object id -> group; missing ids are their own group
};

template <typename T>
struct ContrastiveTerms {
  Tensor<T> match_term;
  Tensor<T> nonmatch_term;
  Tensor<T> total;
  std::size_t positive_pairs = 0;
  std::size_t negative_pairs = 0;
  std::size_t hard_negatives = 0;
};

// Cross-frame pairs only. Positives share an object id; negatives pair a
// matched anchor with a query of another frame that is matched to a
// different appearance group or unmatched with max IoU below the ceiling.
// `rng` subsamples negatives per anchor; null keeps them all.
template <typename T>
ContrastiveTerms<T> loss_contrastive(const TrackingBatch<T>& batch, const ContrastiveConfig& config,
                                     std::mt19937_64* rng);

// For each matched anchor and each other frame holding its group: -log of
// the softmax probability of the positive among that frame's queries, with
// logits r_k . r_j * exp(log_temperature). Frames with several positives are
// replicated once per positive, each copy dropping the other positives.
// Averaged over all terms; zero without anchors.
template <typename T>
Tensor<T> loss_infonce(const TrackingBatch<T>& batch, const Tensor<T>& log_temperature);

template <typename T>
struct LossTerms {
  Tensor<T> class_loss, ce_loss, dice_loss, contrastive_loss, softmax_loss;
};

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& weights);

}  // namespace stow::train
