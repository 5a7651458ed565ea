#include "stow/common/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stow/common/errors.hpp"

namespace stow {

namespace {

// Shortest augmenting path with potentials, rows <= cols. Returns the column
// of each row.
std::vector<std::size_t> solve_wide(std::span<const double> a, std::size_t n, std::size_t m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) col[p[j] - 1] = j - 1;
  return col;
}

double solve_total(std::span<const double> cost, std::size_t rows, std::size_t cols,
                   const std::vector<std::size_t>& row_ids, const std::vector<std::size_t>& col_ids) {
  const std::size_t r = row_ids.size(), c = col_ids.size();
  if (r == 0 || c == 0) return 0.0;
  std::vector<double> sub;
  const bool flip = r > c;
  const std::size_t n = flip ? c : r, m = flip ? r : c;
  sub.resize(n * m);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = cost[row_ids[i] * cols + col_ids[j]];
      if (flip)
        sub[j * m + i] = v;
      else
        sub[i * m + j] = v;
    }
  (void)rows;
  const auto col = solve_wide(sub, n, m);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += sub[i * m + col[i]];
  return total;
}

void check(std::span<const double> cost, std::size_t rows, std::size_t cols) {
  if (cost.size() != rows * cols)
    throw DimensionError("cost matrix has " + std::to_string(cost.size()) + " entries, expected " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  for (double v : cost)
    if (!std::isfinite(v)) throw NumericError("assignment cost matrix contains a non-finite entry");
}

}  // namespace

double assignment_cost(std::span<const double> cost, std::size_t rows, std::size_t cols) {
  check(cost, rows, cols);
  std::vector<std::size_t> r(rows), c(cols);
  for (std::size_t i = 0; i < rows; ++i) r[i] = i;
  for (std::size_t j = 0; j < cols; ++j) c[j] = j;
  return solve_total(cost, rows, cols, r, c);
}

Assignment hungarian(std::span<const double> cost, std::size_t rows, std::size_t cols) {
  check(cost, rows, cols);
  Assignment out;
  if (rows == 0 || cols == 0) return out;
  const double best = assignment_cost(cost, rows, cols);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));
  std::size_t remaining_pairs = std::min(rows, cols);

  // Fix rows one at a time to the smallest column that keeps the optimum.
  std::vector<char> col_used(cols, 0);
  double fixed = 0.0;
  for (std::size_t r = 0; r < rows && remaining_pairs > 0; ++r) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t i = r + 1; i < rows; ++i) rest_rows.push_back(i);
    bool placed = false;
    for (std::size_t c = 0; c < cols && !placed; ++c) {
      if (col_used[c]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t j = 0; j < cols; ++j)
        if (!col_used[j] && j != c) rest_cols.push_back(j);
      if (std::min(rest_rows.size(), rest_cols.size()) != remaining_pairs - 1) continue;
      const double total = fixed + cost[r * cols + c] + solve_total(cost, rows, cols, rest_rows, rest_cols);
      if (std::abs(total - best) <= tol) {
        fixed += cost[r * cols + c];
        col_used[c] = 1;
        out.pairs.emplace_back(r, c);
        --remaining_pairs;
        placed = true;
      }
    }
    // Otherwise row r stays unassigned, which the optimum then allows.
  }
  for (const auto& [r, c] : out.pairs) out.total += cost[r * cols + c];
  return out;
}

}  // namespace stow
