#include "stow/eval/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "stow/common/errors.hpp"

namespace stow::eval {

std::vector<GroundTruthTrack> ground_truth_tracks(const synth::SequenceRecord& sequence) {
  std::map<int, GroundTruthTrack> by_id;
  const std::size_t frames = sequence.frames.size();
  for (std::size_t f = 0; f < frames; ++f) {
    const auto& fr = sequence.frames[f];
    for (std::size_t k = 0; k < fr.object_ids.size(); ++k) {
      auto [it, fresh] = by_id.try_emplace(fr.object_ids[k]);
      if (fresh) {
        it->second.id = fr.object_ids[k];
        it->second.masks.assign(frames, BinaryMask(fr.image.height, fr.image.width));
      }
      it->second.masks[f] = fr.masks[k];
    }
  }
  std::vector<GroundTruthTrack> out;
  for (auto& [id, t] : by_id)
    if (std::any_of(t.masks.begin(), t.masks.end(), [](const BinaryMask& m) { return !m.empty(); }))
      out.push_back(std::move(t));
  return out;
}

double sequence_iou(std::span<const BinaryMask> pred, std::span<const BinaryMask> gt) {
  if (pred.size() != gt.size())
    throw UsageError("sequence IoU over " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) +
                     " frames");
  std::size_t inter = 0, uni = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].height != gt[t].height || pred[t].width != gt[t].width)
      throw UsageError("frame " + std::to_string(t) + " masks differ in extent: " + std::to_string(pred[t].height) +
                       "x" + std::to_string(pred[t].width) + " vs " + std::to_string(gt[t].height) + "x" +
                       std::to_string(gt[t].width));
    inter += intersection_area(pred[t], gt[t]);
    uni += union_area(pred[t], gt[t]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<Detection> match_detections(std::span<const double> scores, const std::vector<std::vector<double>>& iou,
                                        double threshold) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t gts = iou.empty() ? 0 : iou[0].size();
  std::vector<char> claimed(gts, 0);
  std::vector<Detection> out;
  for (std::size_t p : order) {
    std::size_t best = gts;
    double best_iou = threshold;
    for (std::size_t g = 0; g < gts; ++g) {
      if (claimed[g] || iou[p][g] < best_iou) continue;
      if (best == gts || iou[p][g] > best_iou) {
        best = g;
        best_iou = iou[p][g];
      }
    }
    if (best < gts) claimed[best] = 1;
    out.push_back({scores[p], best < gts});
  }
  return out;
}

namespace {

std::vector<std::size_t> by_id_order(std::span<const TrackPrediction> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a].id < preds[b].id; });
  return order;
}

std::vector<std::vector<double>> track_ious(std::span<const TrackPrediction> preds, const std::vector<std::size_t>& order,
                                            std::span<const GroundTruthTrack> gts) {
  std::vector<std::vector<double>> iou(order.size(), std::vector<double>(gts.size(), 0.0));
  for (std::size_t i = 0; i < order.size(); ++i)
    for (std::size_t g = 0; g < gts.size(); ++g) iou[i][g] = sequence_iou(preds[order[i]].masks, gts[g].masks);
  return iou;
}

struct FrameInstances {
  std::vector<double> scores;
  std::vector<std::vector<double>> iou;
  std::size_t gt_count = 0;
};

// Per-frame instances of one sequence, predictions in ascending track id.
std::vector<FrameInstances> frame_instances(std::span<const TrackPrediction> preds, std::span<const GroundTruthTrack> gts) {
  std::size_t frames = 0;
  for (const auto& p : preds) frames = std::max(frames, p.masks.size());
  for (const auto& g : gts) frames = std::max(frames, g.masks.size());
  const auto order = by_id_order(preds);
  std::vector<FrameInstances> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<const BinaryMask*> gt_masks;
    for (const auto& g : gts)
      if (t < g.masks.size() && !g.masks[t].empty()) gt_masks.push_back(&g.masks[t]);
    out[t].gt_count = gt_masks.size();
    for (std::size_t i : order) {
      const auto& p = preds[i];
      if (t >= p.masks.size() || p.masks[t].empty()) continue;
      out[t].scores.push_back(t < p.frame_scores.size() ? p.frame_scores[t] : p.score);
      std::vector<double> row;
      for (const BinaryMask* g : gt_masks) row.push_back(mask_iou(p.masks[t], *g));
      out[t].iou.push_back(std::move(row));
    }
  }
  return out;
}

std::optional<double> mean_ap(const std::vector<std::vector<Detection>>& per_threshold, std::size_t gt_count) {
  if (gt_count == 0) return std::nullopt;
  double sum = 0.0;
  for (const auto& d : per_threshold) sum += *average_precision(d, gt_count);
  return sum / static_cast<double>(per_threshold.size());
}

}  // namespace

std::vector<Detection> match_tracks(std::span<const TrackPrediction> preds, std::span<const GroundTruthTrack> gts,
                                    double threshold) {
  const auto order = by_id_order(preds);
  std::vector<double> scores;
  for (std::size_t i : order) scores.push_back(preds[i].score);
  return match_detections(scores, track_ious(preds, order, gts), threshold);
}

std::vector<PRPoint> pr_curve(std::vector<Detection> detections, std::size_t gt_count) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<PRPoint> out;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    tp += detections[i].true_positive;
    const double recall = gt_count == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(gt_count);
    out.push_back({recall, static_cast<double>(tp) / static_cast<double>(i + 1), detections[i].score});
  }
  return out;
}

std::optional<double> average_precision(std::vector<Detection> detections, std::size_t gt_count) {
  if (gt_count == 0) return std::nullopt;
  const auto curve = pr_curve(std::move(detections), gt_count);
  // Precision envelope: best precision at any recall at or beyond each point.
  std::vector<double> envelope(curve.size());
  double best = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    best = std::max(best, curve[i].precision);
    envelope[i] = best;
  }
  double sum = 0.0;
  std::size_t i = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    while (i < curve.size() && curve[i].recall < r) ++i;
    if (i < curve.size()) sum += envelope[i];
  }
  return sum / 101.0;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back((50 + 5 * k) / 100.0);
  return t;
}

double ap_at_all(std::span<const TrackPrediction> preds, std::span<const GroundTruthTrack> gts) {
  std::vector<std::vector<Detection>> per;
  for (double thr : coco_thresholds()) per.push_back(match_tracks(preds, gts, thr));
  return mean_ap(per, gts.size()).value_or(0.0);
}

std::string EvalReport::format() const {
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "ap50 " << num(ap50) << "\n";
  out << "ap_all " << num(ap_all) << "\n";
  out << "image_ap50 " << num(image_ap50) << "\n";
  out << "image_ap_all " << num(image_ap_all) << "\n";
  out << "gt_tracks " << gt_tracks << "\n";
  out << "gt_instances " << gt_instances << "\n";
  out << "predicted_tracks " << predicted_tracks << "\n";
  out << "sequences " << sequences.size() << "\n";
  for (const auto& s : sequences)
    out << "sequence " << s.name << " ap50 " << num(s.ap50) << " ap_all " << num(s.ap_all) << " image_ap50 "
        << num(s.image_ap50) << " image_ap_all " << num(s.image_ap_all) << " gt_tracks " << s.gt_tracks
        << " predicted_tracks " << s.predicted_tracks << "\n";
  return out.str();
}

EvalReport evaluate(std::span<const SequenceEval> sequences) {
  const auto thresholds = coco_thresholds();
  const std::size_t nt = thresholds.size();
  std::vector<std::vector<Detection>> video(nt), image(nt);
  EvalReport report;
  for (const auto& s : sequences) {
    SequenceMetrics m;
    m.name = s.name;
    m.gt_tracks = s.ground_truth.size();
    m.predicted_tracks = s.predictions.size();
    const auto order = by_id_order(s.predictions);
    std::vector<double> scores;
    for (std::size_t i : order) scores.push_back(s.predictions[i].score);
    const auto iou = track_ious(s.predictions, order, s.ground_truth);
    const auto frames = frame_instances(s.predictions, s.ground_truth);
    std::size_t instances = 0;
    for (const auto& f : frames) instances += f.gt_count;

    std::vector<std::vector<Detection>> seq_video(nt), seq_image(nt);
    for (std::size_t k = 0; k < nt; ++k) {
      seq_video[k] = match_detections(scores, iou, thresholds[k]);
      for (const auto& f : frames) {
        auto d = match_detections(f.scores, f.iou, thresholds[k]);
        seq_image[k].insert(seq_image[k].end(), d.begin(), d.end());
      }
      video[k].insert(video[k].end(), seq_video[k].begin(), seq_video[k].end());
      image[k].insert(image[k].end(), seq_image[k].begin(), seq_image[k].end());
    }
    m.ap50 = average_precision(seq_video[0], m.gt_tracks);
    m.ap_all = mean_ap(seq_video, m.gt_tracks);
    m.image_ap50 = average_precision(seq_image[0], instances);
    m.image_ap_all = mean_ap(seq_image, instances);
    report.gt_tracks += m.gt_tracks;
    report.gt_instances += instances;
    report.predicted_tracks += m.predicted_tracks;
    report.sequences.push_back(std::move(m));
  }
  report.ap50 = average_precision(video[0], report.gt_tracks);
  report.ap_all = mean_ap(video, report.gt_tracks);
  report.image_ap50 = average_precision(image[0], report.gt_instances);
  report.image_ap_all = mean_ap(image, report.gt_instances);
  return report;
}

}  // namespace stow::eval
