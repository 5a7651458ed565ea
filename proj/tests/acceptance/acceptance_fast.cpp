// Criteria that run in minutes: gradient suite, multi-frame reduction,
// Hungarian and associator oracles, evaluator scenarios, loss minima and
// pipeline determinism.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_cases.hpp"
#include "loss_grad_cases.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"
#include "report.hpp"
#include "stow/assoc/associator.hpp"
#include "stow/common/hungarian.hpp"
#include "stow/eval/evalkit.hpp"
#include "stow/model/model.hpp"
#include "stow/train/losses.hpp"

using namespace stow;
using acceptance::fmt;
using TD = ad::Tensor<double>;
namespace fs = std::filesystem;

namespace {

// 1 -------------------------------------------------------------------------

void gradient_suite(acceptance::Report& report) {
  constexpr int kTrials = 100;
  acceptance::Stopwatch clock;
  std::mt19937_64 rng(1001);
  double worst_op = 0, worst_loss = 0;
  std::string detail;
  for (const auto& c : testing::op_cases()) {
    const double e = testing::worst_error(c, rng, kTrials);
    worst_op = std::max(worst_op, e);
    if (e > 1e-5) detail += " op " + c.name + fmt(" %.3g", e);
  }
  for (const auto& c : testing::loss_cases()) {
    const double e = testing::worst_error(c, rng, kTrials);
    worst_loss = std::max(worst_loss, e);
    if (e > 1e-4) detail += " loss " + c.name + fmt(" %.3g", e);
  }
  const double seconds = clock.seconds();
  const bool pass = worst_op <= 1e-5 && worst_loss <= 1e-4 && seconds <= 300;
  report.line(1, "gradient suite", pass,
              std::to_string(testing::op_cases().size()) + " ops, " + std::to_string(testing::loss_cases().size()) +
                  " losses x " + std::to_string(kTrials) + " trials; worst op " + fmt("%.3g", worst_op) +
                  " (tol 1e-5), worst loss " + fmt("%.3g", worst_loss) + " (tol 1e-4), " + fmt("%.1f s", seconds) +
                  detail);
}

// 2 -------------------------------------------------------------------------

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

model::AttentionParams<double> random_attention(std::mt19937_64& rng, std::size_t c) {
  auto lin = [&](bool bias) {
    return model::Linear<double>{testing::random_tensor(rng, {c, c}, -1, 1, false),
                                 bias ? testing::random_tensor(rng, {c}, -1, 1, false) : TD()};
  };
  return {lin(true), lin(false), lin(true), lin(true)};
}

void multi_frame_reduction(acceptance::Report& report) {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<int> heads_d(1, 3), width_d(1, 4), n_d(1, 6), t_d(2, 4);
  ad::NoTapeScope<double> no_tape;
  double worst_single = 0, worst_perm = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto heads = static_cast<std::size_t>(heads_d(rng));
    const std::size_t c = heads * static_cast<std::size_t>(width_d(rng));
    const auto n = static_cast<std::size_t>(n_d(rng));
    const bool scaled = trial % 2 == 0;
    const auto p = random_attention(rng, c);

    const std::vector<TD> one{testing::random_tensor(rng, {n, c}, -1, 1, false)};
    const auto mfa = model::multi_frame_attention(p, std::span<const TD>(one), heads, scaled);
    worst_single = std::max(worst_single, max_abs_diff(mfa[0].values(), model::self_attention(p, one[0], heads, scaled).values()));

    const auto t = static_cast<std::size_t>(t_d(rng));
    std::vector<TD> frames;
    for (std::size_t i = 0; i < t; ++i) frames.push_back(testing::random_tensor(rng, {n, c}, -1, 1, false));
    std::vector<std::size_t> order(t);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<TD> permuted;
    for (auto i : order) permuted.push_back(frames[i]);
    const auto a = model::multi_frame_attention(p, std::span<const TD>(frames), heads, scaled);
    const auto b = model::multi_frame_attention(p, std::span<const TD>(permuted), heads, scaled);
    for (std::size_t i = 0; i < t; ++i) worst_perm = std::max(worst_perm, max_abs_diff(b[i].values(), a[order[i]].values()));
  }
  report.line(2, "multi-frame reduction", worst_single <= 1e-6 && worst_perm <= 1e-5,
              "200 configs; T=1 vs self-attention " + fmt("%.3g", worst_single) +
                  " (tol 1e-6), frame permutation " + fmt("%.3g", worst_perm) + " (tol 1e-5)");
}

// 3 -------------------------------------------------------------------------

void hungarian_oracle(acceptance::Report& report) {
  std::mt19937_64 rng(1003);
  std::uniform_int_distribution<std::size_t> side(1, 7);
  std::uniform_real_distribution<double> real(-5.0, 5.0);
  std::uniform_int_distribution<int> small(0, 2);
  int mismatches = 0, instances = 0;
  for (int trial = 0; trial < 1500; ++trial, ++instances) {
    const std::size_t m = side(rng), n = side(rng);
    std::vector<double> cost(m * n);
    // Every third matrix uses a tiny integer range so ties are common.
    for (auto& v : cost) v = trial % 3 == 0 ? small(rng) : real(rng);
    const auto oracle = testing::brute_force_assignment(cost, m, n);
    const Assignment a = hungarian(cost, m, n);
    std::vector<std::size_t> col(m, testing::kUnassigned);
    double total = 0;
    for (const auto& [r, c] : a.pairs) {
      col[r] = c;
      total += cost[r * n + c];
    }
    const bool ok = a.pairs.size() == std::min(m, n) && std::abs(a.total - oracle.total) <= 1e-9 &&
                    std::abs(total - oracle.total) <= 1e-9 &&
                    std::abs(assignment_cost(cost, m, n) - oracle.total) <= 1e-9 && col == oracle.column_of_row;
    mismatches += !ok;
  }
  report.line(3, "hungarian oracle", mismatches == 0,
              std::to_string(instances) + " instances m,n<=7, " + std::to_string(mismatches) + " mismatches");
}

// 4 -------------------------------------------------------------------------

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t c) {
  std::normal_distribution<double> g;
  std::vector<double> v(c);
  double norm = 0;
  for (auto& x : v) {
    x = g(rng);
    norm += x * x;
  }
  for (auto& x : v) x /= std::sqrt(norm);
  return v;
}

assoc::TokenRecord token(double score, std::vector<double> r) { return {score, BinaryMask(4, 4), std::move(r)}; }

void associator_oracle(acceptance::Report& report) {
  std::mt19937_64 rng(1004);
  std::uniform_int_distribution<int> count(0, 6), stored(1, 3), width(2, 4);
  std::uniform_real_distribution<double> score(0.0, 1.0), thr(-0.5, 0.8);
  int mismatches = 0, violations = 0;
  const int instances = 1500;
  for (int trial = 0; trial < instances; ++trial) {
    assoc::AssocConfig cfg;
    cfg.match_threshold = thr(rng);
    const auto c = static_cast<std::size_t>(width(rng));
    assoc::TrajectoryBank bank;
    const int nt = count(rng);
    for (int i = 0; i < nt; ++i) {
      assoc::Trajectory t{i, {}};
      for (int k = stored(rng), f = 0; k > 0; --k, ++f) t.points.push_back({static_cast<std::size_t>(f), token(0.9, random_unit(rng, c))});
      bank.trajectories.push_back(t);
    }
    bank.next_id = nt;
    std::vector<assoc::TokenRecord> toks;
    for (int k = count(rng); k > 0; --k) toks.push_back(token(score(rng), random_unit(rng, c)));
    const double oracle = testing::exhaustive_association(bank, toks, cfg);
    assoc::TrajectoryBank copy = bank;
    const auto a = assoc::associate_one_frame(copy, 9, toks, cfg);
    mismatches += std::abs(a.total_similarity - oracle) > 1e-9;
    std::set<int> seen;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      const bool alive = toks[i].score > cfg.score_threshold;
      if (alive != (a.trajectory_of_token[i] >= 0) || (alive && !seen.insert(a.trajectory_of_token[i]).second))
        ++violations;
    }
  }

  // Identical embeddings: k copies of one object against k near-identical
  // trajectories must land on k distinct trajectories.
  int duplicate_failures = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto r = random_unit(rng, 4);
    const int k = 2 + trial % 4;
    assoc::TrajectoryBank bank;
    for (int i = 0; i < k; ++i) {
      auto near = r;
      near[static_cast<std::size_t>(i) % near.size()] += 1e-3 * (i + 1);
      assoc::Trajectory t{i, {}};
      t.points.push_back({0, token(0.9, near)});
      bank.trajectories.push_back(t);
    }
    bank.next_id = k;
    const std::vector<assoc::TokenRecord> toks(static_cast<std::size_t>(k) + trial % 2, token(0.95, r));
    const auto a = assoc::associate_one_frame(bank, 1, toks, assoc::AssocConfig{});
    const std::set<int> distinct(a.trajectory_of_token.begin(), a.trajectory_of_token.end());
    duplicate_failures += distinct.size() != toks.size() || distinct.count(-1) != 0;
  }
  report.line(4, "associator oracle", mismatches == 0 && violations == 0 && duplicate_failures == 0,
              std::to_string(instances) + " instances <=6x6, " + std::to_string(mismatches) + " total mismatches, " +
                  std::to_string(violations) + " injectivity violations; 200 duplicate sets, " +
                  std::to_string(duplicate_failures) + " shared trajectories");
}

// 5 -------------------------------------------------------------------------

constexpr int kH = 10, kW = 10;

BinaryMask rect(int y0, int y1, int x0, int x1) {
  BinaryMask m(kH, kW);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(y, x);
  return m;
}

BinaryMask none() { return BinaryMask(kH, kW); }

TrackPrediction pred(int id, double score, std::vector<BinaryMask> masks) {
  TrackPrediction p{id, score, std::move(masks), {}};
  for (const auto& m : p.masks) p.frame_scores.push_back(m.empty() ? 0.0 : score);
  return p;
}

eval::GroundTruthTrack gt(int id, std::vector<BinaryMask> masks) { return {id, std::move(masks)}; }

struct Expected {
  std::optional<double> ap50, ap_all, image_ap50;
};

struct Scenario {
  std::string name;
  std::vector<eval::SequenceEval> sequences;
  Expected expected;
};

eval::SequenceEval seq(std::vector<TrackPrediction> p, std::vector<eval::GroundTruthTrack> g, std::string name = "s") {
  return {std::move(name), std::move(p), std::move(g)};
}

std::vector<Scenario> scenarios() {
  const BinaryMask a = rect(0, 4, 0, 4);  // 16 pixels
  const BinaryMask b = rect(6, 10, 6, 10);
  const BinaryMask g25 = rect(0, 5, 0, 5);
  BinaryMask iou72 = rect(0, 3, 0, 5);  // 18 of 25
  iou72.set(3, 0);
  iou72.set(3, 1);
  iou72.set(3, 2);
  const double half_recall = 51.0 / 101.0;

  std::vector<Scenario> s;
  s.push_back({"perfect single", {seq({pred(0, 0.9, {a})}, {gt(1, {a})})}, {1.0, 1.0, 1.0}});
  s.push_back({"iou 0.5 exactly", {seq({pred(0, 0.9, {rect(0, 4, 0, 2)})}, {gt(1, {a})})}, {1.0, 0.1, 1.0}});
  s.push_back({"iou 0.6", {seq({pred(0, 0.9, {rect(0, 3, 0, 5)})}, {gt(1, {g25})})}, {1.0, 0.3, 1.0}});
  s.push_back({"iou 0.72", {seq({pred(0, 0.9, {iou72})}, {gt(1, {g25})})}, {1.0, 0.5, 1.0}});
  s.push_back({"iou 0.45", {seq({pred(0, 0.9, {rect(0, 3, 0, 3)})}, {gt(1, {rect(0, 4, 0, 5)})})}, {0.0, 0.0, 0.0}});
  s.push_back({"false positive ranked first",
               {seq({pred(0, 0.9, {b}), pred(1, 0.5, {a})}, {gt(1, {a})})},
               {0.5, 0.5, 0.5}});
  s.push_back({"false positive ranked last",
               {seq({pred(0, 0.2, {b}), pred(1, 0.5, {a})}, {gt(1, {a})})},
               {1.0, 1.0, 1.0}});
  // Higher-scored duplicate at IoU 0.6 wins thresholds up to 0.6 and turns
  // into a false positive above, where the exact copy is second.
  s.push_back({"worse duplicate scored higher",
               {seq({pred(0, 0.9, {rect(0, 3, 0, 5)}), pred(1, 0.5, {g25})}, {gt(1, {g25})})},
               {1.0, (3 * 1.0 + 7 * 0.5) / 10, 1.0}});
  s.push_back({"missed object", {seq({pred(0, 0.9, {a})}, {gt(1, {a}), gt(2, {b})})}, {half_recall, half_recall, half_recall}});
  s.push_back({"no predictions", {seq({}, {gt(1, {a})})}, {0.0, 0.0, 0.0}});
  s.push_back({"no ground truth", {seq({pred(0, 0.9, {a})}, {})}, {std::nullopt, std::nullopt, std::nullopt}});
  s.push_back({"three perfect objects",
               {seq({pred(0, 0.9, {a}), pred(1, 0.8, {b}), pred(2, 0.7, {g25})},
                    {gt(1, {a}), gt(2, {b}), gt(3, {g25})})},
               {1.0, 1.0, 1.0}});
  // Object hidden in the middle frame; the track is empty there too.
  s.push_back({"gap in visibility", {seq({pred(0, 0.9, {a, none(), a})}, {gt(1, {a, none(), a})})}, {1.0, 1.0, 1.0}});
  // Track covers one of two visible frames: IoU 16 / 32.
  s.push_back({"track ends early", {seq({pred(0, 0.9, {a, none()})}, {gt(1, {a, a})})}, {1.0, 0.1, half_recall}});
  // Identity split after two of three frames: IoUs 2/3 and 1/3.
  s.push_back({"broken identity",
               {seq({pred(0, 0.9, {a, a, none()}), pred(1, 0.8, {none(), none(), a})}, {gt(1, {a, a, a})})},
               {1.0, 0.4, 1.0}});
  // Identities swap between two objects: every frame is right, no track is.
  s.push_back({"identity swap",
               {seq({pred(0, 0.9, {a, b}), pred(1, 0.8, {b, a})}, {gt(1, {a, a}), gt(2, {b, b})})},
               {0.0, 0.0, 1.0}});
  {
    // Per-frame scores rank the wrong frame first.
    TrackPrediction p{0, 0.9, {a, b}, {0.2, 0.95}};
    s.push_back({"image AP uses frame scores", {seq({p}, {gt(1, {a, a})})}, {0.0, 0.0, 51 * 0.5 / 101}});
  }
  s.push_back({"equal scores, lower id hits",
               {seq({pred(5, 0.5, {b}), pred(2, 0.5, {a})}, {gt(1, {a})})},
               {1.0, 1.0, 1.0}});
  s.push_back({"equal scores, lower id misses",
               {seq({pred(5, 0.5, {a}), pred(2, 0.5, {rect(0, 4, 0, 1)})}, {gt(1, {a})})},
               {0.5, 0.5, 0.5}});
  s.push_back({"pooled across sequences",
               {seq({pred(0, 0.5, {a})}, {gt(1, {a})}, "s0"), seq({pred(0, 0.9, {b})}, {gt(1, {a})}, "s1")},
               {51 * 0.5 / 101, 51 * 0.5 / 101, 51 * 0.5 / 101}});
  s.push_back({"interleaved false positive",
               {seq({pred(0, 0.9, {a}), pred(1, 0.8, {rect(5, 6, 0, 2)}), pred(2, 0.7, {b})}, {gt(1, {a}), gt(2, {b})})},
               {(51 + 50 * 2.0 / 3) / 101, (51 + 50 * 2.0 / 3) / 101, (51 + 50 * 2.0 / 3) / 101}});
  {
    // Three of four objects, spread over two sequences.
    const BinaryMask c = rect(0, 2, 6, 10), d = rect(8, 10, 0, 3);
    s.push_back({"three of four found",
                 {seq({pred(0, 0.9, {a}), pred(1, 0.8, {b})}, {gt(1, {a}), gt(2, {b})}, "s0"),
                  seq({pred(0, 0.1, {c})}, {gt(1, {c}), gt(2, {d})}, "s1")},
                 {76.0 / 101, 76.0 / 101, 76.0 / 101}});
  }
  s.push_back({"sequence without ground truth still counts its false positives",
               {seq({pred(0, 0.5, {a})}, {gt(1, {a})}, "s0"), seq({pred(0, 0.9, {a})}, {}, "s1")},
               {0.5, 0.5, 0.5}});
  return s;
}

bool same(const std::optional<double>& got, const std::optional<double>& want) {
  if (got.has_value() != want.has_value()) return false;
  return !got || std::abs(*got - *want) <= 1e-12;
}

// Hand IoU table (three predictions, two objects) through the threshold
// sweep: AP 1 up to 0.70, 25.5/101 from 0.75 to 0.90, 0 at 0.95.
bool iou_table_scenario() {
  const std::vector<double> scores = {0.9, 0.8, 0.7};
  const std::vector<std::vector<double>> iou = {{0.6, 0.7}, {0.9, 0.1}, {0.55, 0.0}};
  double sum = 0;
  for (double t : eval::coco_thresholds()) sum += *eval::average_precision(eval::match_detections(scores, iou, t), 2);
  const double ap50 = *eval::average_precision(eval::match_detections(scores, iou, 0.5), 2);
  return std::abs(ap50 - 1.0) <= 1e-12 && std::abs(sum / 10 - (5 + 4 * 25.5 / 101) / 10) <= 1e-12;
}

void evaluator_oracle(acceptance::Report& report) {
  int passed = 0, total = 0;
  std::string failed;
  for (const auto& sc : scenarios()) {
    ++total;
    const auto r = eval::evaluate(sc.sequences);
    const bool ok = same(r.ap50, sc.expected.ap50) && same(r.ap_all, sc.expected.ap_all) &&
                    same(r.image_ap50, sc.expected.image_ap50);
    passed += ok;
    if (!ok) failed += " [" + sc.name + "]";
  }
  ++total;
  if (iou_table_scenario()) ++passed;
  else failed += " [hand IoU table]";
  report.line(5, "evaluator oracle", passed == total && total >= 20,
              std::to_string(passed) + "/" + std::to_string(total) + " scenarios exact (tol 1e-12)" + failed);
}

// 6 -------------------------------------------------------------------------

train::FrameMatch make_match(std::size_t queries, std::vector<std::pair<std::size_t, int>> matched,
                             std::vector<double> max_iou = {}) {
  train::FrameMatch m;
  m.queries = queries;
  std::vector<char> used(queries, 0);
  std::size_t k = 0;
  for (const auto& [q, id] : matched) {
    m.pairs.emplace_back(q, k++);
    m.matched_ids.push_back(id);
    used[q] = 1;
  }
  for (std::size_t q = 0; q < queries; ++q)
    if (!used[q]) m.unmatched.push_back(q);
  m.max_iou = max_iou.empty() ? std::vector<double>(queries, 0.0) : std::move(max_iou);
  return m;
}

TD rows(const std::vector<std::vector<double>>& r) {
  std::vector<double> v;
  for (const auto& x : r) v.insert(v.end(), x.begin(), x.end());
  return TD::from_values({r.size(), r[0].size()}, std::move(v));
}

void loss_minima(acceptance::Report& report) {
  ad::NoTapeScope<double> no_tape;
  struct Check {
    std::string name;
    double value, target;
  };
  std::vector<Check> checks;

  // Query 1 matched to a 2x2 binary target, queries 0 and 2 unmatched.
  train::FrameTargets gt;
  gt.height = 2;
  gt.width = 2;
  gt.object_ids = {7};
  gt.masks = {{1, 0, 0, 1}};
  const auto m = make_match(3, {{1, 7}});
  checks.push_back({"class ideal", train::loss_class(TD::from_values({3, 1}, {-40, 40, -40}), m).item(), 0.0});
  const TD logits = TD::from_values({3, 4}, {0, 0, 0, 0, 40, -40, -40, 40, 0, 0, 0, 0});
  checks.push_back({"ce ideal", train::loss_mask_ce(logits, m, gt).item(), 0.0});
  checks.push_back({"dice ideal", train::loss_mask_dice(logits, m, gt).item(), 0.0});
  const TD soft = TD::from_values({2, 3}, {0.2, 0.7, 1.0, 0.0, 0.5, 0.3});
  checks.push_back({"dice on equal soft masks", train::loss_dice(soft, soft).item(), 0.0});

  const train::ContrastiveConfig cfg;  // margin 0.5
  {
    train::TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {0, 1}, {-1, 0}}), rows({{1, 0}, {0, 1}, {0, -1}})};
    b.matches = {make_match(3, {{0, 1}, {1, 2}}, {1, 1, 0}), make_match(3, {{0, 1}, {1, 2}}, {1, 1, 0})};
    checks.push_back({"contrastive ideal", train::loss_contrastive(b, cfg, nullptr).total.item(), 0.0});
  }
  {
    train::TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {-1, 0}, {-1, 0}}), rows({{-1, 0}, {1, 0}, {-1, 0}})};
    b.matches = {make_match(3, {{0, 1}}), make_match(3, {{1, 1}})};
    checks.push_back({"softmax ideal", train::loss_infonce(b, TD::scalar(std::log(100.0))).item(), 0.0});
  }
  {
    // Positive pair at distance 0.5 * (1 - 0.4) = 0.3; squared 0.09.
    train::TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {0, 1}}), rows({{0.4, std::sqrt(1 - 0.16)}, {0, 1}})};
    b.matches = {make_match(2, {{0, 1}}, {1.0, 0.9}), make_match(2, {{0, 1}}, {1.0, 0.9})};
    checks.push_back({"match term example", train::loss_contrastive(b, cfg, nullptr).match_term.item(), 0.09});
  }
  {
    // Negative pair at distance 0 against margin 0.5.
    train::TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}}), rows({{1, 0}})};
    b.matches = {make_match(1, {{0, 1}}), make_match(1, {{0, 2}})};
    checks.push_back({"non-match term example", train::loss_contrastive(b, cfg, nullptr).nonmatch_term.item(), 0.5});
  }
  {
    const std::size_t n = 20;
    train::TrackingBatch<double> b;
    b.embeddings = {TD::full({n, 3}, 1.0 / std::sqrt(3.0)), TD::full({n, 3}, 1.0 / std::sqrt(3.0))};
    b.matches = {make_match(n, {{0, 1}}), make_match(n, {{n - 1, 1}})};
    checks.push_back({"uniform infonce ln 20", train::loss_infonce(b, TD::scalar(0.3)).item(), std::log(20.0)});
  }

  double worst = 0;
  std::string detail;
  for (const auto& c : checks) {
    const double e = std::abs(c.value - c.target);
    worst = std::max(worst, e);
    if (e > 1e-6) detail += " [" + c.name + fmt(" off by %.3g]", e);
  }
  report.line(6, "loss minima and scalar examples", worst <= 1e-6,
              std::to_string(checks.size()) + " checks, worst " + fmt("%.3g", worst) + " (tol 1e-6)" + detail);
}

// 9 -------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream bytes;
    bytes << in.rdbuf();
    files[fs::relative(e.path(), root).string()] = bytes.str();
  }
  return files;
}

std::map<std::string, std::string> run_pipeline(const fs::path& root) {
  fs::remove_all(root);
  fs::create_directories(root);
  std::ostringstream log;
  cli::RunOptions o;
  o.seed = 77;
  o.overrides = {"gen.sequences=3",     "synth.height=32",       "synth.width=32",        "synth.frames=4",
                 "synth.intro_frames=2", "synth.max_objects=3",  "model.preset=smoke",    "train.iterations=6",
                 "train.batch_size=2",   "train.workers=2",      "train.checkpoint_every=3", "train.log_every=1"};
  o.out = (root / "data").string();
  cli::cmd_gen(o, log);
  o.data = o.out;
  o.out = (root / "run").string();
  cli::cmd_train(o, log);
  o.checkpoint = (root / "run" / "final.ckpt").string();
  o.out = (root / "pred").string();
  cli::cmd_infer(o, log);
  o.tracks = o.out;
  o.out = (root / "report.txt").string();
  cli::cmd_eval(o, log);
  // Logs name the run directory; compare them relative to it.
  std::string text = log.str();
  const std::string prefix = root.string();
  for (auto at = text.find(prefix); at != std::string::npos; at = text.find(prefix, at)) text.replace(at, prefix.size(), "<root>");
  auto files = snapshot(root);
  files["<log>"] = text;
  return files;
}

void determinism(acceptance::Report& report) {
  const fs::path base = fs::temp_directory_path() / ("stow_determinism_" + std::to_string(::getpid()));
  std::string detail;
  bool pass = false;
  try {
    const auto first = run_pipeline(base / "a");
    const auto second = run_pipeline(base / "b");
    std::size_t differing = 0;
    for (const auto& [name, bytes] : first) {
      auto it = second.find(name);
      if (it == second.end() || it->second != bytes) {
        ++differing;
        detail += " [" + name + "]";
      }
    }
    differing += second.size() > first.size() ? second.size() - first.size() : 0;
    const bool covers = first.count("data/dataset.txt") && first.count("pred/seq_0000/tracks.txt") && first.count("run/final.ckpt") &&
                        first.count("run/metrics.log") && first.count("report.txt");
    pass = differing == 0 && covers && !first.empty();
    detail = std::to_string(first.size()) + " artifacts from gen/train/infer/eval, " + std::to_string(differing) +
             " differ" + (covers ? "" : ", expected artifacts missing") + detail;
  } catch (const std::exception& e) {
    detail = std::string("pipeline failed: ") + e.what();
  }
  fs::remove_all(base);
  report.line(9, "determinism", pass, detail);
}

}  // namespace

int main() {
  acceptance::Report report;
  gradient_suite(report);
  multi_frame_reduction(report);
  hungarian_oracle(report);
  associator_oracle(report);
  evaluator_oracle(report);
  loss_minima(report);
  determinism(report);
  return report.exit_code();
}
