#include "multiformer/tracker.hpp"

#include <map>
#include <set>
#include <stdexcept>

#include "multiformer/assignment.hpp"
#include "multiformer/errors.hpp"

namespace multiformer {

Detections select_detected(const torch::Tensor& q_final, const PanopticMap& pan) {
  Detections d;
  std::vector<int64_t> rows;
  for (size_t s = 0; s < pan.segments.size(); ++s) {
    if (!pan.segments[s].is_thing) continue;
    rows.push_back(pan.segments[s].query_index);
    d.segment_indices.push_back(s);
  }
  d.queries = rows.empty() ? torch::zeros({0, q_final.size(-1)}, q_final.options())
                           : q_final.index_select(0, torch::tensor(rows, torch::kInt64));
  return d;
}

torch::Tensor similarity_matrix(const torch::Tensor& a, const torch::Tensor& b) {
  auto a64 = a.detach().to(torch::kFloat64);
  auto b64 = b.detach().to(torch::kFloat64);
  auto na = a64 / a64.norm(2, -1, true).clamp_min(1e-12);
  auto nb = b64 / b64.norm(2, -1, true).clamp_min(1e-12);
  return torch::matmul(na, nb.t()).clamp(-1.0, 1.0);
}

std::vector<std::pair<int, int>> assign(const torch::Tensor& sim, double s_min) {
  std::vector<std::pair<int, int>> matches;
  if (sim.numel() == 0) return matches;
  const auto result = solve_assignment(1.0 - sim.to(torch::kFloat64));
  auto acc = sim.to(torch::kFloat64).contiguous();
  auto a = acc.accessor<double, 2>();
  for (size_t i = 0; i < result.row_to_col.size(); ++i) {
    const int j = result.row_to_col[i];
    if (j >= 0 && a[static_cast<int64_t>(i)][j] > s_min) matches.emplace_back(static_cast<int>(i), j);
  }
  return matches;
}

std::vector<int> propagate_ids(TrackState& state, const torch::Tensor& q_now,
                               const std::vector<std::pair<int, int>>& matches) {
  const int n = static_cast<int>(q_now.size(0));
  std::vector<int> ids(static_cast<size_t>(n), -1);
  std::set<int> seen_prev, seen_now;
  for (const auto& [i, j] : matches) {
    if (i < 0 || i >= static_cast<int>(state.prev_ids.size()) || j < 0 || j >= n)
      throw std::logic_error("propagate_ids: match index out of range");
    if (!seen_prev.insert(i).second || !seen_now.insert(j).second)
      throw std::logic_error("propagate_ids: duplicate match index");
    ids[static_cast<size_t>(j)] = state.prev_ids[static_cast<size_t>(i)];
  }
  for (auto& id : ids)
    if (id < 0) id = state.next_free_id++;
  state.prev_queries = q_now.detach().clone();
  state.prev_ids = ids;
  return ids;
}

std::vector<int> Tracker::update(const torch::Tensor& q_final, PanopticMap& pan) {
  const Detections det = select_detected(q_final, pan);
  std::vector<std::pair<int, int>> matches;
  if (state_.prev_queries.defined() && state_.prev_queries.size(0) > 0 && det.queries.size(0) > 0)
    matches = assign(similarity_matrix(state_.prev_queries, det.queries), cfg_.s_min);
  const auto ids = propagate_ids(state_, det.queries, matches);

  std::map<int32_t, int32_t> relabel;
  for (size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= kLabelDivisor)
      throw EvaluationError("track id " + std::to_string(ids[k]) + " exceeds the label divisor");
    Segment& seg = pan.segments[det.segment_indices[k]];
    const int32_t new_label = panoptic_id(seg.class_id, ids[k]);
    relabel[seg.segment_id] = new_label;
    seg.segment_id = new_label;
  }
  for (auto& v : pan.labels.data) {
    auto it = relabel.find(v);
    if (it != relabel.end()) v = it->second;
  }
  return ids;
}

}  // namespace multiformer
