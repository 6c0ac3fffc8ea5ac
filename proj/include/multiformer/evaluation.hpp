#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multiformer/config.hpp"
#include "multiformer/grid.hpp"
#include "multiformer/inference.hpp"
#include "multiformer/scene_data.hpp"

namespace multiformer {

struct PQStat {
  int64_t tp = 0, fp = 0, fn = 0;
  double iou = 0.0;  // sum over TP matches

  PQStat& operator+=(const PQStat& o);
  bool operator==(const PQStat&) const = default;
};

/// Per-class statistics. Classes that never occur are absent.
using PQStats = std::map<int, PQStat>;

/// Segment matching with the canonical PQ rules: IoU > 0.5 with equal classes, GT void removed
/// from the union, unmatched predictions more than half void are not counted as FP.
PQStats compute_pq_stats(const LabelMap& pred, const LabelMap& gt);
void accumulate(PQStats& into, const PQStats& add);

struct SplitScore {
  double all = 0.0, things = 0.0, stuff = 0.0;  // percentages
  int n_all = 0, n_things = 0, n_stuff = 0;     // classes averaged over
};

/// PQ per class averaged over classes with TP + FP + FN > 0.
SplitScore pq_score(const PQStats& stats, const std::vector<bool>& is_thing);
double class_pq(const PQStat& s);

/// PQ of one prediction / GT pair.
SplitScore compute_pq(const LabelMap& pred, const LabelMap& gt, const std::vector<bool>& is_thing);

/// Window PQ averaged over all windows of all sequences. Each window stacks kappa frames into
/// one tall map so segments become tubes keyed by their panoptic id.
SplitScore compute_vpq(const std::vector<std::vector<LabelMap>>& preds,
                       const std::vector<std::vector<LabelMap>>& gts, int kappa,
                       const std::vector<bool>& is_thing);

/// Relabels predicted pixels void where GT depth is valid and |d - d*| / d* > lambda.
LabelMap depth_filtered(const LabelMap& pred, const DepthMap& pred_depth, const DepthMap& gt_depth,
                        double lambda);

SplitScore compute_dvpq(const std::vector<std::vector<LabelMap>>& preds,
                        const std::vector<std::vector<DepthMap>>& pred_depth,
                        const std::vector<std::vector<LabelMap>>& gts,
                        const std::vector<std::vector<DepthMap>>& gt_depth, int kappa,
                        double lambda, const std::vector<bool>& is_thing);

struct DepthErrors {
  double abs_rel = 0.0;
  double rmse = 0.0;
  int64_t pixels = 0;
};

/// Pools all pixels with GT > 0. Absent when there are none.
std::optional<DepthErrors> compute_depth_errors(const std::vector<const DepthMap*>& pred,
                                                const std::vector<const DepthMap*>& gt);
std::optional<DepthErrors> compute_depth_errors(const DepthMap& pred, const DepthMap& gt);

struct DvpqCell {
  int kappa = 1;
  double lambda = 0.1;
  SplitScore score;
};

struct ClassRow {
  int id = 0;
  std::string name;
  bool is_thing = false;
  PQStat stat;
  double pq = 0.0;
};

struct MetricsReport {
  SplitScore pq;
  std::map<int, SplitScore> vpq;
  std::vector<DvpqCell> dvpq;
  std::optional<DepthErrors> depth;
  std::vector<ClassRow> per_class;
  int frames = 0;
  int sequences = 0;
  std::vector<int> skipped_kappas;  // longer than every sequence

  /// Mean DVPQ(all) over the configured grid.
  double composite() const;
  const SplitScore* dvpq_at(int kappa, double lambda) const;
  nlohmann::json to_json() const;
  std::string to_table(const std::string& method) const;
};

MetricsReport evaluate(const std::vector<std::vector<FramePrediction>>& preds,
                       const std::vector<std::vector<SceneSample>>& gts, const ClassTable& classes,
                       const EvalConfig& cfg);

}  // namespace multiformer
