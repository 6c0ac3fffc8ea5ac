#include "multiformer/assignment.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace multiformer {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Requires rows <= cols. Each row is inserted by one Dijkstra-like search over reduced
// costs; potentials u (rows) and v (cols) keep reduced costs non-negative.
class ShortestAugmentingPath {
 public:
  ShortestAugmentingPath(std::span<const double> cost, int rows, int cols)
      : cost_(cost), rows_(rows), cols_(cols), u_(rows, 0.0), v_(cols, 0.0),
        dist_(cols), path_(cols, -1), col4row_(rows, -1), row4col_(cols, -1),
        scanned_row_(rows), scanned_col_(cols), remaining_(cols) {}

  void solve() {
    for (int row = 0; row < rows_; ++row) {
      double min_val = 0.0;
      const int sink = augment_from(row, min_val);
      if (sink < 0) throw std::runtime_error("assignment infeasible");

      u_[row] += min_val;
      for (int i = 0; i < rows_; ++i)
        if (scanned_row_[i] && i != row) u_[i] += min_val - dist_[col4row_[i]];
      for (int j = 0; j < cols_; ++j)
        if (scanned_col_[j]) v_[j] -= min_val - dist_[j];

      for (int j = sink;;) {
        const int i = path_[j];
        row4col_[j] = i;
        std::swap(col4row_[i], j);
        if (i == row) break;
      }
    }
  }

  const std::vector<int>& col4row() const { return col4row_; }

 private:
  double c(int i, int j) const { return cost_[static_cast<size_t>(i) * cols_ + j]; }

  int augment_from(int start, double& min_val) {
    int num_remaining = cols_;
    for (int it = 0; it < cols_; ++it) remaining_[it] = cols_ - it - 1;
    std::fill(scanned_row_.begin(), scanned_row_.end(), false);
    std::fill(scanned_col_.begin(), scanned_col_.end(), false);
    std::fill(dist_.begin(), dist_.end(), kInf);

    int sink = -1;
    int i = start;
    while (sink == -1) {
      int index = -1;
      double lowest = kInf;
      scanned_row_[i] = true;
      for (int it = 0; it < num_remaining; ++it) {
        const int j = remaining_[it];
        const double r = min_val + c(i, j) - u_[i] - v_[j];
        if (r < dist_[j]) {
          path_[j] = i;
          dist_[j] = r;
        }
        // Prefer a free column on ties: ends the search sooner.
        if (dist_[j] < lowest || (dist_[j] == lowest && row4col_[j] == -1)) {
          lowest = dist_[j];
          index = it;
        }
      }
      min_val = lowest;
      if (min_val == kInf) return -1;
      const int j = remaining_[index];
      if (row4col_[j] == -1) sink = j;
      else i = row4col_[j];
      scanned_col_[j] = true;
      remaining_[index] = remaining_[--num_remaining];
    }
    return sink;
  }

  std::span<const double> cost_;
  int rows_, cols_;
  std::vector<double> u_, v_, dist_;
  std::vector<int> path_, col4row_, row4col_;
  std::vector<char> scanned_row_, scanned_col_;
  std::vector<int> remaining_;
};

}  // namespace

Assignment solve_assignment(std::span<const double> cost, int rows, int cols) {
  if (rows < 0 || cols < 0 || cost.size() != static_cast<size_t>(rows) * cols)
    throw std::invalid_argument("solve_assignment: cost size does not match rows x cols");
  for (double x : cost)
    if (!std::isfinite(x)) throw std::invalid_argument("solve_assignment: non-finite cost");

  Assignment out;
  out.row_to_col.assign(rows, -1);
  out.col_to_row.assign(cols, -1);
  if (rows == 0 || cols == 0) return out;

  const bool transpose = rows > cols;
  std::vector<double> t;
  std::span<const double> work = cost;
  int r = rows, k = cols;
  if (transpose) {
    t.resize(cost.size());
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) t[static_cast<size_t>(j) * rows + i] = cost[static_cast<size_t>(i) * cols + j];
    work = t;
    std::swap(r, k);
  }
  ShortestAugmentingPath sap(work, r, k);
  sap.solve();
  for (int i = 0; i < r; ++i) {
    const int j = sap.col4row()[i];
    if (transpose) {
      out.row_to_col[j] = i;
      out.col_to_row[i] = j;
    } else {
      out.row_to_col[i] = j;
      out.col_to_row[j] = i;
    }
  }
  for (int i = 0; i < rows; ++i)
    if (out.row_to_col[i] >= 0) out.total_cost += cost[static_cast<size_t>(i) * cols + out.row_to_col[i]];
  return out;
}

Assignment solve_assignment(const torch::Tensor& cost) {
  if (cost.dim() != 2) throw std::invalid_argument("solve_assignment: expected a 2D cost matrix");
  auto c = cost.detach().to(torch::kFloat64).contiguous().cpu();
  return solve_assignment(std::span<const double>(c.data_ptr<double>(), static_cast<size_t>(c.numel())),
                          static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
}

}  // namespace multiformer
