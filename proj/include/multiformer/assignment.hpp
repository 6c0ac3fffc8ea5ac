#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

namespace multiformer {

/// Result of a rectangular minimum-cost assignment. Exactly min(rows, cols) pairs are made.
struct Assignment {
  std::vector<int> row_to_col;  // -1 for unassigned rows
  std::vector<int> col_to_row;  // -1 for unassigned columns
  double total_cost = 0.0;
};

/// Jonker-Volgenant style shortest augmenting path solver with dual potentials.
/// `cost` is row-major rows x cols and must be finite.
Assignment solve_assignment(std::span<const double> cost, int rows, int cols);

/// Convenience overload for a 2D tensor (any floating dtype).
Assignment solve_assignment(const torch::Tensor& cost);

}  // namespace multiformer
