#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "gradcheck.hpp"
#include "loss_grad_cases.hpp"
#include "oracles.hpp"
#include "stow/ad/ops.hpp"
#include "stow/common/errors.hpp"
#include "stow/common/hungarian.hpp"
#include "stow/synth/dataset.hpp"
#include "stow/train/losses.hpp"
#include "stow/train/trainer.hpp"

using namespace stow;
using namespace stow::train;
using stow::testing::gradcheck;
using stow::testing::random_tensor;
using TD = ad::Tensor<double>;

namespace {

using stow::testing::brute_force_assignment;
constexpr std::size_t kNone = stow::testing::kUnassigned;

std::vector<std::size_t> columns(const Assignment& a, std::size_t m) {
  std::vector<std::size_t> col(m, kNone);
  for (const auto& [r, c] : a.pairs) col[r] = c;
  return col;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

FrameMatch make_match(std::size_t queries, std::vector<std::pair<std::size_t, int>> matched,
                      std::vector<double> max_iou = {}) {
  FrameMatch m;
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

TD rows(std::vector<std::vector<double>> r) {
  std::vector<double> flat;
  for (const auto& v : r) flat.insert(flat.end(), v.begin(), v.end());
  return TD::from_values({r.size(), r.at(0).size()}, std::move(flat));
}

TD unit_rows(std::mt19937_64& rng, std::size_t n, std::size_t c) {
  ad::NoTapeScope<double> nt;
  return ad::l2_normalize(random_tensor(rng, {n, c}, -1, 1, false)).detach();
}

model::ModelConfig tiny_model() {
  model::ModelConfig c;
  c.layers = 2;
  c.queries = 6;
  c.token_width = 8;
  c.feature_channels = 8;
  c.mask_width = 4;
  c.track_width = 4;
  c.heads = 2;
  c.ffn_width = 8;
  c.image_height = 32;
  c.image_width = 32;
  return c;
}

synth::SynthConfig tiny_scene(std::size_t frames) {
  synth::SynthConfig s;
  s.height = 32;
  s.width = 32;
  s.frames = frames;
  s.intro_frames = frames;
  s.max_objects = 3;
  s.scale_min = 0.3;
  s.scale_max = 0.5;
  return s;
}

TrainConfig quick_train() {
  TrainConfig t;
  t.iterations = 3;
  t.batch_size = 2;
  t.frames_per_sample = 2;
  t.learning_rate = 1e-3;
  t.workers = 1;
  return t;
}

std::vector<float> flat_params(const model::StowModel<float>& m) {
  std::vector<float> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag)
      : path(std::filesystem::temp_directory_path() / ("stow_train_" + tag + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("hungarian small examples") {
  const std::vector<double> swap = {0, 1, 1, 0};
  const Assignment a = hungarian(swap, 2, 2);
  CHECK(a.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  CHECK(a.total == 0.0);

  const std::vector<double> row = {5, 2, 9};
  const Assignment b = hungarian(row, 1, 3);
  CHECK(b.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}});
  CHECK(b.total == 2.0);

  const Assignment c = hungarian(row, 3, 1);
  CHECK(c.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}});

  CHECK(hungarian(std::vector<double>{}, 0, 4).pairs.empty());
  CHECK(hungarian(std::vector<double>{}, 3, 0).pairs.empty());
  const std::vector<double> bad = {0, std::nan("")};
  CHECK_THROWS_AS((void)hungarian(bad, 1, 2), NumericError);
  CHECK_THROWS_AS((void)hungarian(row, 2, 2), DimensionError);
}

TEST_CASE("hungarian ties resolve to lowest rows and columns") {
  const std::vector<double> zeros(9, 0.0);
  CHECK(hungarian(zeros, 3, 3).pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}, {2, 2}});
  const std::vector<double> flat(6, 1.0);
  CHECK(hungarian(flat, 2, 3).pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
  CHECK(hungarian(flat, 3, 2).pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});

  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> dim(1, 5), val(0, 2);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng);
    std::vector<double> cost(m * n);
    for (auto& v : cost) v = val(rng);
    const auto oracle = brute_force_assignment(cost, m, n);
    const Assignment got = hungarian(cost, m, n);
    REQUIRE(columns(got, m) == oracle.column_of_row);
  }
}

TEST_CASE("hungarian equals exhaustive minimum on random matrices") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 7), ival(0, 20);
  std::uniform_real_distribution<double> rval(-5.0, 5.0);
  int mismatches = 0;
  for (int trial = 0; trial < 1200; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng);
    std::vector<double> cost(m * n);
    for (auto& v : cost) v = trial % 2 ? ival(rng) : rval(rng);
    const auto oracle = brute_force_assignment(cost, m, n);
    const Assignment got = hungarian(cost, m, n);
    std::set<std::size_t> rs, cs;
    double total = 0.0;
    for (const auto& [r, c] : got.pairs) {
      rs.insert(r);
      cs.insert(c);
      total += cost[r * n + c];
    }
    const bool ok = got.pairs.size() == std::min(m, n) && rs.size() == got.pairs.size() &&
                    cs.size() == got.pairs.size() && std::abs(total - oracle.total) <= 1e-9 &&
                    std::abs(got.total - total) <= 1e-9 &&
                    std::abs(assignment_cost(cost, m, n) - oracle.total) <= 1e-9;
    mismatches += !ok;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("matching examples") {
  FrameTargets gt;
  gt.height = 2;
  gt.width = 2;
  gt.object_ids = {7};
  gt.masks = {{1, 0, 0, 1}};
  const LossWeights w;

  // Query 1 reproduces the target, query 0 is its complement.
  const TD scores = TD::from_values({2, 1}, {0.0, 0.0});
  const TD logits = TD::from_values({2, 4}, {-6, 6, 6, -6, 6, -6, -6, 6});
  const FrameMatch m = match_predictions(scores, logits, gt, w);
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0].first == 1);
  CHECK(m.matched_ids[0] == 7);
  CHECK(m.object_of(1) == 7);
  CHECK(m.object_of(0) == -1);
  CHECK(m.unmatched == std::vector<std::size_t>{0});
  CHECK(m.max_iou[1] == doctest::Approx(1.0));
  CHECK(m.max_iou[0] == doctest::Approx(0.0));

  FrameTargets empty;
  empty.height = 2;
  empty.width = 2;
  const FrameMatch e = match_predictions(scores, logits, empty, w);
  CHECK(e.pairs.empty());
  CHECK(e.unmatched == std::vector<std::size_t>{0, 1});

  FrameTargets crowded = gt;
  crowded.object_ids = {1, 2, 3};
  crowded.masks = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}};
  CHECK_THROWS_AS((void)match_predictions(scores, logits, crowded, w), ConfigError);
}

TEST_CASE("matching 3 targets to 5 queries agrees with exhaustive search") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  const LossWeights w;
  for (int trial = 0; trial < 50; ++trial) {
    FrameTargets gt;
    gt.height = 3;
    gt.width = 3;
    gt.object_ids = {2, 4, 9};
    for (int j = 0; j < 3; ++j) {
      std::vector<double> mask(9);
      for (auto& v : mask) v = std::round((u(rng) + 3) / 6.0 * 4) / 4;  // quarter steps
      gt.masks.push_back(mask);
    }
    std::vector<double> s(5), x(45);
    for (auto& v : s) v = u(rng);
    for (auto& v : x) v = u(rng);

    std::vector<double> cost(15);
    for (std::size_t q = 0; q < 5; ++q) {
      for (std::size_t j = 0; j < 3; ++j) {
        double bce = 0, pg = 0, p2 = 0, g2 = 0;
        for (std::size_t i = 0; i < 9; ++i) {
          const double p = sigmoid(x[q * 9 + i]), g = gt.masks[j][i];
          bce += -(g * std::log(p) + (1 - g) * std::log(1 - p));
          pg += p * g;
          p2 += p * p;
          g2 += g * g;
        }
        cost[q * 3 + j] = 2.0 * -std::log(sigmoid(s[q])) + 5.0 * bce / 9.0 + 5.0 * (1 - (2 * pg + 1) / (p2 + g2 + 1));
      }
    }
    const auto oracle = brute_force_assignment(cost, 5, 3);
    const FrameMatch m = match_predictions(TD::from_values({5, 1}, s), TD::from_values({5, 9}, x), gt, w);
    REQUIRE(m.pairs.size() == 3);
    for (const auto& [q, j] : m.pairs) CHECK(oracle.column_of_row[q] == j);
  }
}

TEST_CASE("matching ignores the tracking head") {
  const model::ModelConfig cfg = tiny_model();
  model::StowModel<double> net(cfg, 3);
  std::mt19937_64 rng(8);
  std::vector<TD> images = {random_tensor(rng, {3, 32, 32}, -0.5, 0.5, false)};
  FrameTargets gt;
  gt.height = 8;
  gt.width = 8;
  gt.object_ids = {1, 2};
  gt.masks.assign(2, std::vector<double>(64, 0.0));
  for (int i = 0; i < 20; ++i) gt.masks[0][i] = 1.0;
  for (int i = 30; i < 64; ++i) gt.masks[1][i] = 1.0;

  ad::NoTapeScope<double> nt;
  auto before = net.forward_sequence(images, true);
  for (const char* name : {"head.track0.weight", "head.track1.weight"}) {
    auto t = net.parameter(name);
    std::vector<double> v(t.numel());
    for (auto& x : v) x = std::uniform_real_distribution<double>(-3, 3)(rng);
    net.assign(name, v);
  }
  auto after = net.forward_sequence(images, true);
  for (std::size_t l = 0; l < before[0].layers.size(); ++l) {
    const auto& hb = before[0].layers[l];
    const auto& ha = after[0].layers[l];
    CHECK(hb.track_embeddings.values()[0] != ha.track_embeddings.values()[0]);
    const FrameMatch mb = match_predictions(hb.score_logits, hb.mask_logits, gt, LossWeights{});
    const FrameMatch ma = match_predictions(ha.score_logits, ha.mask_logits, gt, LossWeights{});
    CHECK(mb.pairs == ma.pairs);
    CHECK(mb.max_iou == ma.max_iou);
  }
}

TEST_CASE("class loss examples") {
  const FrameMatch m = make_match(3, {{0, 5}});
  CHECK(loss_class(TD::from_values({3, 1}, {40, -40, -40}), m).item() <= 1e-6);
  CHECK(loss_class(TD::from_values({3, 1}, {0, 0, 0}), m).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // Mixed case: s = sigmoid(logit), labels (1, 0, 0).
  const std::vector<double> x = {0.7, -1.2, 2.5};
  const double oracle =
      (-std::log(sigmoid(x[0])) - std::log(1 - sigmoid(x[1])) - std::log(1 - sigmoid(x[2]))) / 3.0;
  CHECK(loss_class(TD::from_values({3, 1}, x), m).item() == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("dice loss examples") {
  auto dice = [](const std::vector<double>& p, const std::vector<double>& g) {
    return loss_dice(TD::from_values({1, p.size()}, p), TD::from_values({1, g.size()}, g)).item();
  };
  const std::size_t area = 2000;
  std::vector<double> a(4 * area, 0.0), b(4 * area, 0.0), c(4 * area, 0.0);
  for (std::size_t i = 0; i < area; ++i) {
    a[i] = 1;
    b[i + area / 2] = 1;
    c[i + 2 * area] = 1;
  }
  CHECK(std::abs(dice(a, a)) <= 1e-12);
  CHECK(dice(a, c) == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(dice(a, b) == doctest::Approx(0.5).epsilon(1e-3));
  // The smoothed forms exactly.
  CHECK(dice(a, c) == doctest::Approx(1.0 - 1.0 / (2.0 * area + 1)).epsilon(1e-12));
  CHECK(dice(a, b) == doctest::Approx(1.0 - (area + 1.0) / (2.0 * area + 1)).epsilon(1e-12));
  CHECK_THROWS_AS((void)loss_dice(TD::from_values({1, 2}, {0, 1}), TD::from_values({1, 3}, {0, 1, 0})),
                  DimensionError);
}

TEST_CASE("mask losses reach zero on saturated ideal predictions") {
  FrameTargets gt;
  gt.height = 2;
  gt.width = 2;
  gt.object_ids = {3};
  gt.masks = {{1, 0, 1, 0}};
  const FrameMatch m = make_match(2, {{1, 3}});
  const TD logits = TD::from_values({2, 4}, {0, 0, 0, 0, 40, -40, 40, -40});
  CHECK(loss_mask_ce(logits, m, gt).item() <= 1e-6);
  CHECK(loss_mask_dice(logits, m, gt).item() <= 1e-6);
  const FrameMatch none = make_match(2, {});
  CHECK(loss_mask_ce(logits, none, gt).item() == 0.0);
  CHECK(loss_mask_dice(logits, none, gt).item() == 0.0);
  // A soft target at logit 0: BCE ln 2 per pixel on each matched row.
  const TD flat = TD::from_values({2, 4}, std::vector<double>(8, 0.0));
  CHECK(loss_mask_ce(flat, m, gt).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("cosine distance examples") {
  const TD r = rows({{0.6, 0.8}});
  CHECK(cosine_distance(r, r).item() == doctest::Approx(0.0));
  CHECK(cosine_distance(r, rows({{-0.6, -0.8}})).item() == doctest::Approx(1.0));
  CHECK(cosine_distance(r, rows({{-0.8, 0.6}})).item() == doctest::Approx(0.5));
}

TEST_CASE("contrastive loss scalar examples") {
  const ContrastiveConfig cfg;  // margin 0.5
  SUBCASE("one positive pair at distance 0.3") {
    // Dot product 0.4 puts the pair at 0.5 * (1 - 0.4) = 0.3; the other
    // queries overlap an object too well to serve as negatives.
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {0, 1}}), rows({{0.4, std::sqrt(1 - 0.16)}, {0, 1}})};
    b.matches = {make_match(2, {{0, 1}}, {1.0, 0.9}), make_match(2, {{0, 1}}, {1.0, 0.9})};
    const auto t = loss_contrastive(b, cfg, nullptr);
    CHECK(t.positive_pairs == 1);
    CHECK(t.negative_pairs == 0);
    CHECK(t.match_term.item() == doctest::Approx(0.09).epsilon(1e-9));
    CHECK(t.nonmatch_term.item() == 0.0);
    CHECK(t.total.item() == doctest::Approx(0.09).epsilon(1e-9));
  }
  SUBCASE("one negative pair at distance 0") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}}), rows({{1, 0}})};
    b.matches = {make_match(1, {{0, 1}}), make_match(1, {{0, 2}})};
    const auto t = loss_contrastive(b, cfg, nullptr);
    CHECK(t.positive_pairs == 0);
    CHECK(t.hard_negatives == t.negative_pairs);
    CHECK(t.nonmatch_term.item() == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("ideal configuration") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {0, 1}, {-1, 0}}), rows({{1, 0}, {0, 1}, {0, -1}})};
    b.matches = {make_match(3, {{0, 1}, {1, 2}}, {1, 1, 0}), make_match(3, {{0, 1}, {1, 2}}, {1, 1, 0})};
    const auto t = loss_contrastive(b, cfg, nullptr);
    CHECK(t.positive_pairs == 2);
    CHECK(t.negative_pairs > 0);
    CHECK(t.hard_negatives == 0);
    CHECK(std::abs(t.total.item()) <= 1e-12);
  }
  SUBCASE("same appearance group is neither positive nor negative") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}}), rows({{1, 0}})};
    b.matches = {make_match(1, {{0, 1}}), make_match(1, {{0, 2}})};
    b.appearance_groups = {{1, 0}, {2, 0}};
    const auto t = loss_contrastive(b, cfg, nullptr);
    CHECK(t.positive_pairs == 0);
    CHECK(t.negative_pairs == 0);
    CHECK(t.total.item() == 0.0);
  }
  SUBCASE("unmatched queries above the overlap ceiling are skipped") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {0, 1}}), rows({{1, 0}, {0, 1}})};
    b.matches = {make_match(2, {{0, 1}}, {1, 0.59}), make_match(2, {{0, 1}}, {1, 0.61})};
    const auto t = loss_contrastive(b, cfg, nullptr);
    // Anchor in frame 1 sees frame 0's query 1 (0.59); anchor in frame 0
    // skips frame 1's query 1 (0.61).
    CHECK(t.negative_pairs == 1);
  }
  SUBCASE("negatives are subsampled per anchor") {
    std::mt19937_64 rng(1);
    TrackingBatch<double> b;
    b.embeddings = {unit_rows(rng, 10, 3), unit_rows(rng, 10, 3)};
    b.matches = {make_match(10, {{0, 1}}), make_match(10, {{0, 1}})};
    ContrastiveConfig c = cfg;
    c.negatives_per_anchor = 4;
    const auto t = loss_contrastive(b, c, &rng);
    CHECK(t.negative_pairs == 8);
    CHECK(loss_contrastive(b, c, nullptr).negative_pairs == 18);
  }
}

TEST_CASE("infonce examples") {
  SUBCASE("uniform similarities give ln N") {
    for (std::size_t n : {2u, 5u, 20u}) {
      TrackingBatch<double> b;
      b.embeddings = {TD::full({n, 3}, 1.0 / std::sqrt(3.0)), TD::full({n, 3}, 1.0 / std::sqrt(3.0))};
      b.matches = {make_match(n, {{0, 1}}), make_match(n, {{n - 1, 1}})};
      CHECK(loss_infonce(b, TD::scalar(0.3)).item() == doctest::Approx(std::log(double(n))).epsilon(1e-12));
    }
  }
  SUBCASE("separated embeddings approach zero") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}, {-1, 0}, {-1, 0}}), rows({{-1, 0}, {1, 0}, {-1, 0}})};
    b.matches = {make_match(3, {{0, 1}}), make_match(3, {{1, 1}})};
    CHECK(loss_infonce(b, TD::scalar(std::log(100.0))).item() <= 1e-6);
    CHECK(loss_infonce(b, TD::scalar(0.0)).item() > 0.1);
  }
  SUBCASE("hand similarities at zero temperature") {
    const TD f0 = rows({{1, 0}, {0, 1}, {std::sqrt(0.5), std::sqrt(0.5)}});
    const TD f1 = rows({{0.6, 0.8}, {1, 0}, {0, -1}});
    TrackingBatch<double> b;
    b.embeddings = {f0, f1};
    b.matches = {make_match(3, {{0, 4}}), make_match(3, {{1, 4}})};
    // Anchor f0[0] against frame 1: similarities 0.6, 1, 0, positive 1.
    const double a = -std::log(std::exp(1.0) / (std::exp(0.6) + std::exp(1.0) + std::exp(0.0)));
    // Anchor f1[1] against frame 0: similarities 1, 0, sqrt(.5), positive index 0.
    const double c = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(0.0) + std::exp(std::sqrt(0.5))));
    CHECK(loss_infonce(b, TD::scalar(0.0)).item() == doctest::Approx((a + c) / 2).epsilon(1e-12));
  }
  SUBCASE("identical objects replicate the frame once per positive") {
    // Frame 1 holds two copies of the anchor's appearance group.
    const TD f0 = rows({{1, 0}, {0, 1}});
    const TD f1 = rows({{0.6, 0.8}, {0.8, 0.6}, {0, 1}});
    TrackingBatch<double> b;
    b.embeddings = {f0, f1};
    b.matches = {make_match(2, {{0, 1}}), make_match(3, {{0, 1}, {1, 2}})};
    b.appearance_groups = {{1, 0}, {2, 0}};
    // Frame 0 anchor: replica keeping query 0 drops query 1 and vice versa.
    const double r0 = -std::log(std::exp(0.6) / (std::exp(0.6) + std::exp(0.0)));
    const double r1 = -std::log(std::exp(0.8) / (std::exp(0.8) + std::exp(0.0)));
    // Frame 1 anchors each see a single positive in frame 0.
    const double q0 = -std::log(std::exp(0.6) / (std::exp(0.6) + std::exp(0.8)));
    const double q1 = -std::log(std::exp(0.8) / (std::exp(0.8) + std::exp(0.6)));
    CHECK(loss_infonce(b, TD::scalar(0.0)).item() == doctest::Approx((r0 + r1 + q0 + q1) / 4).epsilon(1e-12));
  }
  SUBCASE("no cross-frame positives gives zero") {
    TrackingBatch<double> b;
    b.embeddings = {rows({{1, 0}}), rows({{1, 0}})};
    b.matches = {make_match(1, {{0, 1}}), make_match(1, {{0, 2}})};
    CHECK(loss_infonce(b, TD::scalar(1.0)).item() == 0.0);
  }
}

TEST_CASE("total loss is the weighted sum") {
  const LossTerms<double> terms{TD::scalar(0.5), TD::scalar(1.5), TD::scalar(0.25), TD::scalar(2.0), TD::scalar(3.0)};
  LossWeights zero{0, 0, 0, 0, 0};
  CHECK(total_loss(terms, zero).item() == 0.0);
  LossWeights one{0, 0, 0, 4, 0};
  CHECK(total_loss(terms, one).item() == doctest::Approx(8.0));
  CHECK(total_loss(terms, LossWeights{}).item() == doctest::Approx(2 * 0.5 + 5 * 1.5 + 5 * 0.25 + 2.0 + 3.0));
  CHECK_THROWS_AS(zero.validate(), ConfigError);
  CHECK_THROWS_AS((LossWeights{-1, 1, 1, 1, 1}.validate()), ConfigError);
}

TEST_CASE("loss terms are non-negative on random inputs") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-4, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 4;
    FrameTargets gt;
    gt.height = 2;
    gt.width = 3;
    gt.object_ids = {1, 2};
    for (int j = 0; j < 2; ++j) {
      std::vector<double> mask(6);
      for (auto& v : mask) v = (u(rng) + 4) / 8;
      gt.masks.push_back(mask);
    }
    const TD s = random_tensor(rng, {n, 1}, -4, 4, false);
    const TD x = random_tensor(rng, {n, 6}, -4, 4, false);
    const FrameMatch m = match_predictions(s, x, gt, LossWeights{});
    CHECK(loss_class(s, m).item() >= 0);
    CHECK(loss_mask_ce(x, m, gt).item() >= 0);
    CHECK(loss_mask_dice(x, m, gt).item() >= 0);
    TrackingBatch<double> b;
    b.embeddings = {unit_rows(rng, n, 3), unit_rows(rng, n, 3)};
    b.matches = {m, m};
    CHECK(loss_contrastive(b, ContrastiveConfig{}, &rng).total.item() >= 0);
    CHECK(loss_infonce(b, TD::scalar(u(rng))).item() >= 0);
  }
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(99);
  FrameTargets gt;
  gt.height = 2;
  gt.width = 2;
  gt.object_ids = {1, 2};
  gt.masks = {{1, 0.5, 0, 0.25}, {0, 0, 1, 0.75}};
  const FrameMatch m = make_match(3, {{2, 1}, {0, 2}}, {0.1, 0.2, 0.3});
  const FrameMatch m2 = make_match(3, {{1, 1}, {2, 2}}, {0.7, 0.1, 0.2});

  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_class(in[0], m); },
                  {random_tensor(rng, {3, 1})}, rng)
            .max_relative_error <= 1e-4);
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_mask_ce(in[0], m, gt); },
                  {random_tensor(rng, {3, 4})}, rng)
            .max_relative_error <= 1e-4);
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_mask_dice(in[0], m, gt); },
                  {random_tensor(rng, {3, 4})}, rng)
            .max_relative_error <= 1e-4);
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_dice(in[0], in[1]); },
                  {random_tensor(rng, {2, 5}, 0, 1), random_tensor(rng, {2, 5}, 0, 1)}, rng)
            .max_relative_error <= 1e-4);
  CHECK(gradcheck([&](const std::vector<TD>& in) { return cosine_distance(in[0], in[1]); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}, rng)
            .max_relative_error <= 1e-4);

  auto batch_of = [&](const std::vector<TD>& in) {
    TrackingBatch<double> b;
    b.embeddings = {ad::l2_normalize(in[0]), ad::l2_normalize(in[1])};
    b.matches = {m, m2};
    return b;
  };
  ContrastiveConfig cfg;
  cfg.margin = 0.9;  // keeps every negative inside the hinge
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_contrastive(batch_of(in), cfg, nullptr).total; },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})}, rng)
            .max_relative_error <= 1e-4);
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_infonce(batch_of(in), in[2]); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), TD::scalar(0.7, true)}, rng)
            .max_relative_error <= 1e-4);

  // Replicated frames: two positives share a group.
  auto dup_batch = [&](const std::vector<TD>& in) {
    TrackingBatch<double> b;
    b.embeddings = {ad::l2_normalize(in[0]), ad::l2_normalize(in[1])};
    b.matches = {make_match(3, {{0, 1}}), make_match(3, {{0, 1}, {2, 2}})};
    b.appearance_groups = {{1, 0}, {2, 0}};
    return b;
  };
  CHECK(gradcheck([&](const std::vector<TD>& in) { return loss_infonce(dup_batch(in), in[2]); },
                  {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), TD::scalar(-0.2, true)}, rng)
            .max_relative_error <= 1e-4);

  const LossWeights w{0.3, 1.1, 0.7, 2.0, 0.5};
  CHECK(gradcheck(
            [&](const std::vector<TD>& in) {
              return total_loss(LossTerms<double>{in[0], in[1], in[2], in[3], in[4]}, w);
            },
            {TD::scalar(0.1, true), TD::scalar(0.2, true), TD::scalar(0.3, true), TD::scalar(0.4, true),
             TD::scalar(0.5, true)},
            rng)
            .max_relative_error <= 1e-4);
}

TEST_CASE("train config round trip and presets") {
  TrainConfig c;
  c.seed = 42;
  c.learning_rate = 3e-4;
  c.weights.dice_weight = 2.5;
  c.rotate = false;
  const TrainConfig back = TrainConfig::from_keyvalue(KeyValueConfig::parse(c.to_keyvalue().serialize()));
  CHECK(back.to_keyvalue().serialize() == c.to_keyvalue().serialize());
  CHECK(back.learning_rate == 3e-4);
  CHECK_FALSE(back.rotate);

  const TrainConfig shelf = TrainConfig::preset("long-shelf");
  CHECK(shelf.iterations == 16000);
  CHECK(shelf.decay_step == 14000);
  CHECK(shelf.batch_size == 32);
  CHECK(shelf.frames_per_sample == 2);
  const TrainConfig table = TrainConfig::from_keyvalue(KeyValueConfig::parse("preset = long-tabletop\n"));
  CHECK(table.batch_size == 8);
  CHECK(table.frames_per_sample == 4);
  CHECK(table.learning_rate == 1e-5);
  CHECK_THROWS_AS((void)TrainConfig::preset("huge"), ConfigError);
  CHECK_THROWS_AS((void)TrainConfig::from_keyvalue(KeyValueConfig::parse("batch_size = 0\n")), ConfigError);
}

TEST_CASE("augmentation geometry") {
  BinaryMask m(4, 6);
  m.set(0, 5);
  m.set(3, 0);
  const BinaryMask r1 = rotate_mask(m, 1);
  CHECK(r1.height == 6);
  CHECK(r1.width == 4);
  CHECK(r1.at(0, 0));  // top-right corner moves to top-left
  CHECK(r1.at(5, 3));
  CHECK(rotate_mask(rotate_mask(m, 3), 1) == m);
  CHECK(rotate_mask(rotate_mask(m, 2), 2) == m);
  CHECK(rotate_mask(m, 4) == m);

  ImageU8 img(4, 6);
  img.at(0, 5, 0) = 200;
  const ImageU8 rot = augment_image(img, Augmentation{1, 0.0, 1.0, 1.0});
  CHECK(rot.at(0, 0, 0) == 200);
  CHECK(augment_image(img, Augmentation{}).rgb == img.rgb);

  // Saturation 0 collapses to gray, heavy brightness saturates.
  ImageU8 colored(2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) colored.at(y, x, 0) = 90;
  const ImageU8 gray = augment_image(colored, Augmentation{0, 0.0, 1.0, 0.0});
  CHECK(gray.at(1, 1, 0) == gray.at(1, 1, 2));
  CHECK(gray.at(1, 1, 0) == 30);
  const ImageU8 bright = augment_image(colored, Augmentation{0, 2.0, 1.0, 1.0});
  CHECK(bright.at(0, 0, 1) == 255);

  BinaryMask sq(8, 8);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) sq.set(y, x);
  const auto d = downsample_mask(sq, 4);
  REQUIRE(d.size() == 4);
  CHECK(d == std::vector<double>{0.5, 0.0, 0.0, 0.0});
  CHECK_THROWS_AS((void)downsample_mask(BinaryMask(6, 8), 4), DimensionError);
}

TEST_CASE("frames per sample are valid and distinct") {
  std::mt19937_64 rng(4);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto f = sample_frames(15, 2, rng);
    REQUIRE(f.size() == 2);
    CHECK(f[0] < f[1]);
    CHECK(f[1] < 15);
    seen.insert({f[0], f[1]});
  }
  CHECK(seen.size() > 90);  // 105 possible pairs
  CHECK_THROWS_AS((void)sample_frames(3, 4, rng), ConfigError);
}

TEST_CASE("make_sample keeps ids and rotates targets with the image") {
  const auto data = synth::generate_dataset(tiny_scene(3), 9, 1);
  const std::vector<std::size_t> frames = {0, 2};
  const TrainingSample s = make_sample(data[0], frames, Augmentation{1, 0.0, 1.0, 1.0}, 4);
  REQUIRE(s.targets.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& fr = data[0].frames[frames[i]];
    CHECK(s.targets[i].object_ids == fr.object_ids);
    CHECK(s.targets[i].height == 8);
    for (std::size_t k = 0; k < fr.masks.size(); ++k)
      CHECK(s.targets[i].masks[k] == downsample_mask(rotate_mask(fr.masks[k], 1), 4));
    CHECK(s.images[i].rgb == augment_image(fr.image, Augmentation{1, 0.0, 1.0, 1.0}).rgb);
  }
}

TEST_CASE("a training step lowers the loss on a repeated sample") {
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto data = synth::generate_dataset(tiny_scene(2), seed, 1);
    TrainConfig t = quick_train();
    t.seed = seed;
    t.batch_size = 1;
    t.rotate = false;
    t.brightness = t.contrast = t.saturation = 0.0;
    t.contrastive.negatives_per_anchor = 0;
    t.learning_rate = 1e-3;
    Trainer trainer(std::move(data), tiny_model(), t);
    const double first = trainer.step().total;
    const double second = trainer.step().total;
    decreased += second < first;
  }
  CHECK(decreased >= 8);
}

TEST_CASE("training is deterministic and independent of worker count") {
  const auto data = synth::generate_dataset(tiny_scene(3), 5, 3);
  TrainConfig t = quick_train();
  std::vector<std::string> lines[3];
  std::vector<float> params[3];
  double taus[3];
  for (int run = 0; run < 3; ++run) {
    TrainConfig c = t;
    c.workers = run == 2 ? 2 : 1;
    Trainer trainer(data, tiny_model(), c);
    for (int i = 0; i < 3; ++i) lines[run].push_back(trainer.step().log_line());
    params[run] = flat_params(trainer.model());
    taus[run] = trainer.log_temperature();
  }
  CHECK(lines[0] == lines[1]);
  CHECK(params[0] == params[1]);
  CHECK(lines[0] == lines[2]);
  CHECK(params[0] == params[2]);
  CHECK(taus[0] == taus[2]);
  CHECK(lines[0][0].rfind("step=0 class=", 0) == 0);
}

TEST_CASE("resumed training matches an uninterrupted run") {
  const auto data = synth::generate_dataset(tiny_scene(3), 6, 2);
  TempDir straight("straight"), split("split");
  TrainConfig t = quick_train();
  t.iterations = 4;
  t.log_every = 1;
  t.checkpoint_every = 2;
  const auto full = train_loop(data, tiny_model(), t, straight.path.string());
  CHECK(std::filesystem::exists(straight.path / "checkpoint_000002.ckpt"));
  CHECK(full.history.size() == 4);

  TrainConfig half = t;
  half.iterations = 2;
  const auto first = train_loop(data, tiny_model(), half, split.path.string());
  const auto second = train_loop(data, tiny_model(), t, split.path.string(), first.final_checkpoint);
  CHECK(second.history.size() == 2);
  CHECK(second.history[0].step == 2);

  const auto a = model::load_checkpoint(full.final_checkpoint);
  const auto b = model::load_checkpoint(second.final_checkpoint);
  CHECK(flat_params(a.model) == flat_params(b.model));
  REQUIRE(a.training);
  REQUIRE(b.training);
  CHECK(*a.training == *b.training);

  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(read(straight.path / "metrics.log") == read(split.path / "metrics.log"));

  TrainConfig bad = t;
  CHECK_THROWS_AS((void)train_loop(data, tiny_model(), bad, split.path.string(),
                                   (split.path / "missing.ckpt").string()),
                  std::exception);
}

TEST_CASE("trainer rejects unusable datasets") {
  TrainConfig t = quick_train();
  CHECK_THROWS_AS(Trainer({}, tiny_model(), t), UsageError);
  const auto data = synth::generate_dataset(tiny_scene(2), 1, 1);
  t.frames_per_sample = 3;
  CHECK_THROWS_AS(Trainer(data, tiny_model(), t), ConfigError);
  t.frames_per_sample = 2;
  model::ModelConfig wrong = tiny_model();
  wrong.image_height = 64;
  CHECK_THROWS_AS(Trainer(data, wrong, t), ConfigError);
}

TEST_CASE("loss gradients on random matchings") {
  std::mt19937_64 rng(515);
  for (const auto& c : stow::testing::loss_cases()) {
    const double worst = stow::testing::worst_error(c, rng, 20);
    INFO(c.name << " worst relative error " << worst);
    CHECK(worst <= 1e-4);
  }
}
