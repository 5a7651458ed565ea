#include "stow/train/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "stow/ad/ops.hpp"
#include "stow/common/errors.hpp"
#include "stow/common/hungarian.hpp"

namespace stow::train {

void LossWeights::validate() const {
  bool positive = false;
  for (double w : {class_weight, ce_weight, dice_weight, contrastive_weight, softmax_weight}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    positive = positive || w > 0.0;
  }
  if (!positive) throw ConfigError("at least one loss weight must be positive");
}

void ContrastiveConfig::validate() const {
  if (!(margin > 0.0 && margin <= 1.0)) throw ConfigError("contrastive margin must lie in (0, 1]");
  if (!(negative_iou_ceiling > 0.0 && negative_iou_ceiling < 1.0))
    throw ConfigError("negative IoU ceiling must lie in (0, 1)");
  if (negatives_per_anchor < 0) throw ConfigError("negatives_per_anchor must be non-negative");
}

int FrameMatch::object_of(std::size_t q) const {
  for (std::size_t k = 0; k < pairs.size(); ++k)
    if (pairs[k].first == q) return matched_ids[k];
  return -1;
}

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename T>
Tensor<T> zero() {
  return Tensor<T>::scalar(T(0));
}

template <typename T>
Tensor<T> stacked_targets(const FrameMatch& match, const FrameTargets& targets) {
  const std::size_t hw = targets.height * targets.width;
  std::vector<T> g;
  g.reserve(match.pairs.size() * hw);
  for (const auto& [q, k] : match.pairs)
    for (double v : targets.masks.at(k)) g.push_back(static_cast<T>(v));
  return Tensor<T>::from_values({match.pairs.size(), hw}, std::move(g));
}

template <typename T>
Tensor<T> matched_logits(const Tensor<T>& mask_logits, const FrameMatch& match) {
  std::vector<std::size_t> rows;
  for (const auto& [q, k] : match.pairs) rows.push_back(q);
  return ad::gather_rows(mask_logits, rows);
}

std::size_t group_of(const std::map<int, int>& groups, int id) {
  const auto it = groups.find(id);
  return static_cast<std::size_t>(it == groups.end() ? id : it->second);
}

}  // namespace

std::vector<double> matching_cost(std::span<const double> score_logits, std::span<const double> mask_logits,
                                  const FrameTargets& targets, const LossWeights& weights) {
  const std::size_t n = score_logits.size(), k = targets.masks.size();
  const std::size_t hw = targets.height * targets.width;
  if (mask_logits.size() != n * hw)
    throw DimensionError("mask logits hold " + std::to_string(mask_logits.size()) + " values, expected " +
                         std::to_string(n) + "x" + std::to_string(hw));
  std::vector<double> cost(n * k, 0.0);
  std::vector<double> prob(hw), sp(hw);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = mask_logits.subspan(i * hw, hw);
    double p2 = 0.0;
    for (std::size_t x = 0; x < hw; ++x) {
      prob[x] = sigmoid(row[x]);
      sp[x] = softplus(row[x]);
      p2 += prob[x] * prob[x];
    }
    const double cls = softplus(-score_logits[i]);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& g = targets.masks[j];
      double bce = 0.0, pg = 0.0, g2 = 0.0;
      for (std::size_t x = 0; x < hw; ++x) {
        bce += sp[x] - g[x] * row[x];
        pg += prob[x] * g[x];
        g2 += g[x] * g[x];
      }
      const double dice = 1.0 - (2.0 * pg + 1.0) / (p2 + g2 + 1.0);
      cost[i * k + j] = weights.class_weight * cls + weights.ce_weight * bce / static_cast<double>(hw) +
                        weights.dice_weight * dice;
    }
  }
  return cost;
}

template <typename T>
FrameMatch match_predictions(const Tensor<T>& score_logits, const Tensor<T>& mask_logits, const FrameTargets& targets,
                             const LossWeights& weights) {
  const std::size_t n = score_logits.numel(), k = targets.masks.size();
  if (k > n)
    throw ConfigError("frame has " + std::to_string(k) + " ground-truth objects but only " + std::to_string(n) +
                      " queries");
  const std::vector<double> scores(score_logits.values().begin(), score_logits.values().end());
  const std::vector<double> logits(mask_logits.values().begin(), mask_logits.values().end());
  const auto cost = matching_cost(scores, logits, targets, weights);
  const Assignment a = hungarian(cost, n, k);

  FrameMatch m;
  m.queries = n;
  std::vector<char> matched(n, 0);
  for (const auto& [q, j] : a.pairs) {
    m.pairs.emplace_back(q, j);
    m.matched_ids.push_back(targets.object_ids.at(j));
    matched[q] = 1;
  }
  for (std::size_t q = 0; q < n; ++q)
    if (!matched[q]) m.unmatched.push_back(q);

  const std::size_t hw = targets.height * targets.width;
  m.max_iou.assign(n, 0.0);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t x = 0; x < hw; ++x) {
        const bool p = logits[q * hw + x] > 0.0;
        const bool g = targets.masks[j][x] >= 0.5;
        inter += p && g;
        uni += p || g;
      }
      if (uni > 0) m.max_iou[q] = std::max(m.max_iou[q], static_cast<double>(inter) / static_cast<double>(uni));
    }
  }
  return m;
}

template <typename T>
Tensor<T> loss_class(const Tensor<T>& score_logits, const FrameMatch& match) {
  std::vector<T> labels(score_logits.numel(), T(0));
  for (const auto& [q, k] : match.pairs) labels.at(q) = T(1);
  const Tensor<T> y = Tensor<T>::from_values(score_logits.shape(), std::move(labels));
  return ad::mean(ad::sub(ad::softplus(score_logits), ad::mul(score_logits, y)));
}

template <typename T>
Tensor<T> loss_mask_ce(const Tensor<T>& mask_logits, const FrameMatch& match, const FrameTargets& targets) {
  if (match.pairs.empty()) return zero<T>();
  const Tensor<T> x = matched_logits(mask_logits, match);
  const Tensor<T> g = stacked_targets<T>(match, targets);
  return ad::mean(ad::sub(ad::softplus(x), ad::mul(x, g)));
}

template <typename T>
Tensor<T> loss_dice(const Tensor<T>& probs, const Tensor<T>& targets) {
  if (probs.shape() != targets.shape())
    throw DimensionError("dice operands differ: " + ad::shape_to_string(probs.shape()) + " vs " +
                         ad::shape_to_string(targets.shape()));
  const std::size_t axis = probs.dim() - 1;
  const Tensor<T> num = ad::add_scalar(ad::scale(ad::sum_axis(ad::mul(probs, targets), axis), T(2)), T(1));
  const Tensor<T> den =
      ad::add_scalar(ad::add(ad::sum_axis(ad::square(probs), axis), ad::sum_axis(ad::square(targets), axis)), T(1));
  return ad::add_scalar(ad::scale(ad::mean(ad::div(num, den)), T(-1)), T(1));
}

template <typename T>
Tensor<T> loss_mask_dice(const Tensor<T>& mask_logits, const FrameMatch& match, const FrameTargets& targets) {
  if (match.pairs.empty()) return zero<T>();
  return loss_dice(ad::sigmoid(matched_logits(mask_logits, match)), stacked_targets<T>(match, targets));
}

template <typename T>
Tensor<T> cosine_distance(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t axis = a.dim() - 1;
  return ad::scale(ad::add_scalar(ad::scale(ad::sum_axis(ad::mul(a, b), axis), T(-1)), T(1)), T(0.5));
}

template <typename T>
ContrastiveTerms<T> loss_contrastive(const TrackingBatch<T>& batch, const ContrastiveConfig& config,
                                     std::mt19937_64* rng) {
  ContrastiveTerms<T> out;
  out.match_term = zero<T>();
  out.nonmatch_term = zero<T>();
  const std::size_t frames = batch.embeddings.size();
  if (frames == 0) {
    out.total = zero<T>();
    return out;
  }
  const std::size_t n = batch.embeddings[0].extent(0);
  const Tensor<T> all = frames == 1 ? batch.embeddings[0] : ad::concat(batch.embeddings, 0);

  std::vector<std::size_t> pa, pb, na, nb;
  for (std::size_t t = 0; t < frames; ++t) {
    const FrameMatch& mt = batch.matches[t];
    for (std::size_t k = 0; k < mt.pairs.size(); ++k) {
      const std::size_t q = mt.pairs[k].first;
      const int id = mt.matched_ids[k];
      const std::size_t group = group_of(batch.appearance_groups, id);
      std::vector<std::size_t> candidates;
      for (std::size_t u = 0; u < frames; ++u) {
        if (u == t) continue;
        const FrameMatch& mu = batch.matches[u];
        for (std::size_t j = 0; j < n; ++j) {
          const int other = mu.object_of(j);
          if (other == id) {
            if (u > t) {
              pa.push_back(t * n + q);
              pb.push_back(u * n + j);
            }
          } else if (other >= 0) {
            if (group_of(batch.appearance_groups, other) != group) candidates.push_back(u * n + j);
          } else if (mu.max_iou[j] < config.negative_iou_ceiling) {
            candidates.push_back(u * n + j);
          }
        }
      }
      if (rng && config.negatives_per_anchor > 0 &&
          candidates.size() > static_cast<std::size_t>(config.negatives_per_anchor)) {
        std::shuffle(candidates.begin(), candidates.end(), *rng);
        candidates.resize(static_cast<std::size_t>(config.negatives_per_anchor));
        std::sort(candidates.begin(), candidates.end());
      }
      for (std::size_t c : candidates) {
        na.push_back(t * n + q);
        nb.push_back(c);
      }
    }
  }

  out.positive_pairs = pa.size();
  out.negative_pairs = na.size();
  if (!pa.empty()) {
    const Tensor<T> d = cosine_distance(ad::gather_rows(all, pa), ad::gather_rows(all, pb));
    out.match_term = ad::mean(ad::square(d));
  }
  if (!na.empty()) {
    const Tensor<T> d = cosine_distance(ad::gather_rows(all, na), ad::gather_rows(all, nb));
    const T margin = static_cast<T>(config.margin);
    for (T v : d.values()) out.hard_negatives += margin - v > T(0);
    if (out.hard_negatives > 0) {
      const Tensor<T> hinge = ad::relu(ad::add_scalar(ad::scale(d, T(-1)), margin));
      out.nonmatch_term = ad::scale(ad::sum(hinge), T(1) / static_cast<T>(out.hard_negatives));
    }
  }
  out.total = ad::add(out.match_term, out.nonmatch_term);
  return out;
}

template <typename T>
Tensor<T> loss_infonce(const TrackingBatch<T>& batch, const Tensor<T>& log_temperature) {
  const std::size_t frames = batch.embeddings.size();
  if (frames < 2) return zero<T>();
  const Tensor<T> logit_scale = ad::exp(log_temperature);
  std::vector<Tensor<T>> terms;

  for (std::size_t t = 0; t < frames; ++t) {
    const FrameMatch& mt = batch.matches[t];
    for (std::size_t u = 0; u < frames; ++u) {
      if (u == t) continue;
      const FrameMatch& mu = batch.matches[u];
      const std::size_t n = batch.embeddings[u].extent(0);
      // Anchors with exactly one positive share a single similarity matrix.
      std::vector<std::size_t> single_rows, single_targets;
      for (std::size_t k = 0; k < mt.pairs.size(); ++k) {
        const std::size_t q = mt.pairs[k].first;
        const std::size_t group = group_of(batch.appearance_groups, mt.matched_ids[k]);
        std::vector<std::size_t> positives;
        for (std::size_t j = 0; j < mu.pairs.size(); ++j)
          if (group_of(batch.appearance_groups, mu.matched_ids[j]) == group) positives.push_back(mu.pairs[j].first);
        if (positives.empty()) continue;
        if (positives.size() == 1) {
          single_rows.push_back(q);
          single_targets.push_back(positives[0]);
          continue;
        }
        const Tensor<T> anchor = ad::slice(batch.embeddings[t], 0, q, 1);
        for (std::size_t keep : positives) {
          std::vector<std::size_t> rows;
          std::size_t target = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const bool other_positive = j != keep && std::find(positives.begin(), positives.end(), j) != positives.end();
            if (other_positive) continue;
            if (j == keep) target = rows.size();
            rows.push_back(j);
          }
          const Tensor<T> logits = ad::mul(ad::matmul_nt(anchor, ad::gather_rows(batch.embeddings[u], rows)), logit_scale);
          terms.push_back(ad::slice(ad::log_softmax(logits, 1), 1, target, 1));
        }
      }
      if (single_rows.empty()) continue;
      const Tensor<T> anchors = ad::gather_rows(batch.embeddings[t], single_rows);
      const Tensor<T> logits = ad::mul(ad::matmul_nt(anchors, batch.embeddings[u]), logit_scale);
      const Tensor<T> flat = ad::reshape(ad::log_softmax(logits, 1), {single_rows.size() * n});
      std::vector<std::size_t> picks;
      for (std::size_t a = 0; a < single_rows.size(); ++a) picks.push_back(a * n + single_targets[a]);
      terms.push_back(ad::reshape(ad::gather_rows(flat, picks), {picks.size(), 1}));
    }
  }
  if (terms.empty()) return zero<T>();
  const Tensor<T> stacked = terms.size() == 1 ? terms[0] : ad::concat(terms, 0);
  return ad::scale(ad::mean(stacked), T(-1));
}

template <typename T>
Tensor<T> total_loss(const LossTerms<T>& terms, const LossWeights& weights) {
  Tensor<T> total = ad::scale(terms.class_loss, static_cast<T>(weights.class_weight));
  total = ad::add(total, ad::scale(terms.ce_loss, static_cast<T>(weights.ce_weight)));
  total = ad::add(total, ad::scale(terms.dice_loss, static_cast<T>(weights.dice_weight)));
  total = ad::add(total, ad::scale(terms.contrastive_loss, static_cast<T>(weights.contrastive_weight)));
  total = ad::add(total, ad::scale(terms.softmax_loss, static_cast<T>(weights.softmax_weight)));
  return total;
}

#define STOW_INSTANTIATE(T)                                                                                        \
  template FrameMatch match_predictions(const Tensor<T>&, const Tensor<T>&, const FrameTargets&, const LossWeights&); \
  template Tensor<T> loss_class(const Tensor<T>&, const FrameMatch&);                                              \
  template Tensor<T> loss_mask_ce(const Tensor<T>&, const FrameMatch&, const FrameTargets&);                       \
  template Tensor<T> loss_dice(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> loss_mask_dice(const Tensor<T>&, const FrameMatch&, const FrameTargets&);                     \
  template Tensor<T> cosine_distance(const Tensor<T>&, const Tensor<T>&);                                          \
  template ContrastiveTerms<T> loss_contrastive(const TrackingBatch<T>&, const ContrastiveConfig&, std::mt19937_64*); \
  template Tensor<T> loss_infonce(const TrackingBatch<T>&, const Tensor<T>&);                                      \
  template Tensor<T> total_loss(const LossTerms<T>&, const LossWeights&);

STOW_INSTANTIATE(float)
STOW_INSTANTIATE(double)

}  // namespace stow::train
