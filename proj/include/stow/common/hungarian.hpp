#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace stow {

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, column), ascending rows
  double total = 0.0;
};

// Minimum-cost injective assignment of min(rows, cols) pairs for a row-major
// cost matrix. Among optimal assignments the one whose column sequence,
// read by ascending row with unassigned rows last, is lexicographically
// smallest is returned. Throws NumericError on non-finite costs.
[[nodiscard]] Assignment hungarian(std::span<const double> cost, std::size_t rows, std::size_t cols);

// Optimal total only, without tie-breaking.
[[nodiscard]] double assignment_cost(std::span<const double> cost, std::size_t rows, std::size_t cols);

}  // namespace stow
