#pragma once

// Exhaustive reference solvers shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "stow/assoc/associator.hpp"

namespace stow::testing {

constexpr std::size_t kUnassigned = std::numeric_limits<std::size_t>::max();

struct BruteForce {
  double total = 0.0;
  std::vector<std::size_t> column_of_row;  // kUnassigned for rows left out
};

// Every injective map from the smaller side into the larger one. Among
// minimizers keeps the lexicographically smallest per-row column vector,
// unassigned rows ranking last.
inline BruteForce brute_force_assignment(const std::vector<double>& cost, std::size_t m, std::size_t n) {
  BruteForce best;
  best.total = std::numeric_limits<double>::infinity();
  const bool wide = m <= n;
  const std::size_t small = wide ? m : n, large = wide ? n : m;
  std::vector<std::size_t> perm(large);
  std::iota(perm.begin(), perm.end(), 0);
  do {
    std::vector<std::size_t> col(m, kUnassigned);
    double total = 0.0;
    for (std::size_t i = 0; i < small; ++i) {
      const std::size_t r = wide ? i : perm[i];
      const std::size_t c = wide ? perm[i] : i;
      col[r] = c;
      total += cost[r * n + c];
    }
    if (total < best.total - 1e-9 || (std::abs(total - best.total) <= 1e-9 && col < best.column_of_row)) {
      best.total = std::min(total, best.total);
      best.column_of_row = col;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Best total similarity when each surviving token joins a distinct
// trajectory or opens a new one worth the match threshold.
inline double exhaustive_association(const assoc::TrajectoryBank& bank, const std::vector<assoc::TokenRecord>& tokens,
                                     const assoc::AssocConfig& cfg) {
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i].score > cfg.score_threshold) alive.push_back(i);
  std::vector<double> sim(bank.trajectories.size() * alive.size());
  for (std::size_t r = 0; r < bank.trajectories.size(); ++r)
    for (std::size_t k = 0; k < alive.size(); ++k) {
      double s = -std::numeric_limits<double>::infinity();
      for (const auto& p : bank.trajectories[r].points) {
        const auto& a = p.token.embedding;
        const auto& b = tokens[alive[k]].embedding;
        s = std::max(s, std::inner_product(a.begin(), a.end(), b.begin(), 0.0));
      }
      sim[r * alive.size() + k] = s;
    }
  std::vector<char> used(bank.trajectories.size(), 0);
  std::function<double(std::size_t)> go = [&](std::size_t k) -> double {
    if (k == alive.size()) return 0.0;
    double best = cfg.match_threshold + go(k + 1);
    for (std::size_t r = 0; r < bank.trajectories.size(); ++r) {
      if (used[r]) continue;
      used[r] = 1;
      best = std::max(best, sim[r * alive.size() + k] + go(k + 1));
      used[r] = 0;
    }
    return best;
  };
  return go(0);
}

}  // namespace stow::testing
