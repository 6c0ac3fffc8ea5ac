#pragma once

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/heads.hpp"

namespace multiformer {

struct TrackState {
  torch::Tensor prev_queries;  // [n, N_D]; undefined before the first frame
  std::vector<int> prev_ids;
  int next_free_id = 1;
};

/// Query rows owning thing segments, in segment order.
struct Detections {
  torch::Tensor queries;                // [n, N_D]
  std::vector<size_t> segment_indices;  // into PanopticMap::segments
};

Detections select_detected(const torch::Tensor& q_final, const PanopticMap& pan);

/// Cosine similarities [|a|, |b|] (float64), row norms floored at 1e-12.
torch::Tensor similarity_matrix(const torch::Tensor& a, const torch::Tensor& b);

/// Maximum-similarity one-to-one matching; pairs with sim <= s_min are dropped.
std::vector<std::pair<int, int>> assign(const torch::Tensor& sim, double s_min);

/// Matched detections inherit ids (from row i of the previous frame), others get fresh ids.
/// matches are (prev_index, current_index). Returns ids for current detections.
std::vector<int> propagate_ids(TrackState& state, const torch::Tensor& q_now,
                               const std::vector<std::pair<int, int>>& matches);

/// Frame-by-frame tracker; rewrites thing instance indices with track ids.
class Tracker {
 public:
  explicit Tracker(TrackConfig cfg) : cfg_(cfg) {}

  /// Relabels `pan` in place and returns the ids of its thing segments.
  std::vector<int> update(const torch::Tensor& q_final, PanopticMap& pan);
  void reset() { state_ = TrackState{}; }
  const TrackState& state() const { return state_; }

 private:
  TrackConfig cfg_;
  TrackState state_;
};

}  // namespace multiformer
