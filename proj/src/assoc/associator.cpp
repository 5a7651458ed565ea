#include "stow/assoc/associator.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "stow/common/errors.hpp"
#include "stow/common/hungarian.hpp"

namespace stow::assoc {

void AssocConfig::validate() const {
  if (!(score_threshold > 0.0 && score_threshold < 1.0))
    throw ConfigError("assoc config: score_threshold must lie in (0, 1), got " + format_double(score_threshold));
  if (!(match_threshold > -1.0 && match_threshold < 1.0))
    throw ConfigError("assoc config: match_threshold must lie in (-1, 1), got " + format_double(match_threshold));
  if (false_alarm_slots < 0) throw ConfigError("assoc config: false_alarm_slots must be non-negative");
}

KeyValueConfig AssocConfig::to_keyvalue() const {
  KeyValueConfig kv;
  kv.set("score_threshold", format_double(score_threshold));
  kv.set("match_threshold", format_double(match_threshold));
  kv.set("false_alarm_slots", std::to_string(false_alarm_slots));
  return kv;
}

AssocConfig AssocConfig::from_keyvalue(const KeyValueConfig& kv) {
  AssocConfig c;
  c.score_threshold = kv.get_double("score_threshold", c.score_threshold);
  c.match_threshold = kv.get_double("match_threshold", c.match_threshold);
  c.false_alarm_slots = static_cast<int>(kv.get_int("false_alarm_slots", c.false_alarm_slots));
  c.validate();
  return c;
}

double similarity(std::span<const double> embedding, const Trajectory& trajectory) {
  if (trajectory.points.empty())
    throw UsageError("similarity against empty trajectory " + std::to_string(trajectory.id));
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& p : trajectory.points) {
    const auto& r = p.token.embedding;
    if (r.size() != embedding.size())
      throw DimensionError("embedding width " + std::to_string(embedding.size()) + " vs stored " +
                           std::to_string(r.size()));
    best = std::max(best, std::inner_product(r.begin(), r.end(), embedding.begin(), 0.0));
  }
  return best;
}

std::vector<std::size_t> surviving_tokens(std::span<const TokenRecord> tokens, double score_threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i].score > score_threshold) out.push_back(i);
  return out;
}

FrameAssociation associate_one_frame(TrajectoryBank& bank, std::size_t frame, std::span<const TokenRecord> tokens,
                                     const AssocConfig& config) {
  FrameAssociation out;
  out.trajectory_of_token.assign(tokens.size(), -1);
  out.opened.assign(tokens.size(), false);
  const std::vector<std::size_t> alive = surviving_tokens(tokens, config.score_threshold);
  if (alive.empty()) return out;

  const std::size_t tracks = bank.trajectories.size();
  const std::size_t slots = config.false_alarm_slots > 0 ? static_cast<std::size_t>(config.false_alarm_slots) : alive.size();
  const std::size_t rows = tracks + slots, cols = alive.size();
  std::vector<double> sim(rows * cols, config.match_threshold);
  for (std::size_t r = 0; r < tracks; ++r)
    for (std::size_t c = 0; c < cols; ++c) sim[r * cols + c] = similarity(tokens[alive[c]].embedding, bank.trajectories[r]);
  std::vector<double> cost(sim.size());
  std::transform(sim.begin(), sim.end(), cost.begin(), [](double v) { return -v; });

  const Assignment a = hungarian(cost, rows, cols);
  std::vector<std::size_t> opened;
  for (const auto& [r, c] : a.pairs) {
    out.total_similarity += sim[r * cols + c];
    const std::size_t token = alive[c];
    if (r < tracks) {
      Trajectory& t = bank.trajectories[r];
      t.points.push_back({frame, tokens[token]});
      out.trajectory_of_token[token] = t.id;
    } else {
      opened.push_back(token);
    }
  }
  std::sort(opened.begin(), opened.end());
  for (std::size_t token : opened) {
    Trajectory t;
    t.id = bank.next_id++;
    t.points.push_back({frame, tokens[token]});
    bank.trajectories.push_back(std::move(t));
    out.trajectory_of_token[token] = bank.trajectories.back().id;
    out.opened[token] = true;
  }
  return out;
}

std::vector<TrackPrediction> run_sequence(std::span<const std::vector<TokenRecord>> frames, int height, int width,
                                          const AssocConfig& config) {
  config.validate();
  TrajectoryBank bank;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    for (const auto& tok : frames[f])
      if (tok.mask.height != height || tok.mask.width != width)
        throw DimensionError("frame " + std::to_string(f) + " token mask is " + std::to_string(tok.mask.height) + "x" +
                             std::to_string(tok.mask.width) + ", expected " + std::to_string(height) + "x" +
                             std::to_string(width));
    (void)associate_one_frame(bank, f, frames[f], config);
  }
  std::vector<TrackPrediction> out;
  for (const auto& t : bank.trajectories) {
    TrackPrediction p;
    p.id = t.id;
    p.masks.assign(frames.size(), BinaryMask(height, width));
    p.frame_scores.assign(frames.size(), 0.0);
    double sum = 0.0;
    for (const auto& pt : t.points) {
      p.masks[pt.frame] = pt.token.mask;
      p.frame_scores[pt.frame] = pt.token.score;
      sum += pt.token.score;
    }
    p.score = sum / static_cast<double>(t.points.size());
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<TokenRecord> tokens_of(const model::FramePrediction& prediction) {
  std::vector<TokenRecord> out;
  for (std::size_t q = 0; q < prediction.scores.size(); ++q)
    out.push_back({prediction.scores[q], prediction.masks.at(q), prediction.track_embeddings.at(q)});
  return out;
}

std::vector<TrackPrediction> run_sequence(std::span<const model::FramePrediction> frames, const AssocConfig& config) {
  std::vector<std::vector<TokenRecord>> tokens;
  for (const auto& f : frames) tokens.push_back(tokens_of(f));
  const int h = frames.empty() ? 0 : frames[0].height, w = frames.empty() ? 0 : frames[0].width;
  return run_sequence(std::span<const std::vector<TokenRecord>>(tokens), h, w, config);
}

}  // namespace stow::assoc
