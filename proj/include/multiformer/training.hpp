#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/heads.hpp"
#include "multiformer/model.hpp"
#include "multiformer/scene_data.hpp"

namespace multiformer {

/// GT segments of one frame at full resolution. Void pixels belong to no segment.
struct FrameTargets {
  std::vector<int32_t> labels;  // panoptic id per segment
  torch::Tensor classes;        // int64 [G]
  torch::Tensor masks;          // float {0,1} [G, H, W]
  torch::Tensor depth;          // float [H, W], 0 = invalid
};

FrameTargets extract_targets(const SceneSample& sample);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query_index, gt_segment_index), sorted by query
  std::vector<int> unmatched_queries;
};

struct MatchWeights {
  double lambda_mask = 5.0;
  double lambda_class = 1.0;
};

/// Pairwise cost [Q, G]: lambda_class * (-p_q(c_g)) + lambda_mask * (BCE + DICE).
/// mask_logits [Q, K] and gt_masks [G, K] are sampled at the same K points.
torch::Tensor matching_cost(const torch::Tensor& class_logits, const torch::Tensor& mask_logits,
                            const torch::Tensor& gt_masks, const torch::Tensor& gt_classes,
                            const MatchWeights& w);

/// Minimum-cost one-to-one matching of queries (rows) to GT segments (columns).
MatchResult match_targets(const torch::Tensor& cost);

/// Total cost of a match under `cost`.
double match_cost(const torch::Tensor& cost, const MatchResult& m);

/// Mean BCE over points, from logits. Shapes [..., K].
torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& gt);
/// 1 - 2|M n G| / (|M| + |G|) on probabilities, per row; 0 when both are empty.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& gt);
/// BCE + DICE averaged over matched rows. Shapes [M, K].
torch::Tensor loss_mask(const torch::Tensor& mask_logits, const torch::Tensor& gt);

/// Cross-entropy over all queries; unmatched queries target no-object with weight
/// `no_object_weight`. Plain mean over queries. logits [Q, N_C+1].
torch::Tensor loss_class(const torch::Tensor& logits, const MatchResult& match,
                         const torch::Tensor& gt_classes, double no_object_weight);

/// SILog(alpha) + RMSE per row over pixels where `weight` > 0. Rows without valid pixels give 0.
/// pred, gt, weight are [M, N]. Returns [M].
torch::Tensor depth_loss_rows(const torch::Tensor& pred, const torch::Tensor& gt,
                              const torch::Tensor& weight, double alpha = 0.85);
/// Single-map convenience form; mean of per-row losses.
torch::Tensor loss_depth(const torch::Tensor& pred, const torch::Tensor& gt,
                         const torch::Tensor& weight, double alpha = 0.85);

struct BlockLoss {
  int block = 0;
  double mask = 0, cls = 0, depth = 0;  // unweighted
};

struct LossReport {
  torch::Tensor total;  // differentiable
  double mask = 0, cls = 0, depth = 0;  // unweighted sums over supervised blocks
  double lambda_mask = 5, lambda_class = 1, lambda_depth = 1;
  std::vector<BlockLoss> blocks;
};

struct LossOptions {
  double lambda_mask = 5.0;
  double lambda_class = 1.0;
  double lambda_depth = 1.0;
  double no_object_weight = 0.1;
  int points_per_mask = 1024;  // 0 = full grid
  bool deep_supervision = true;

  static LossOptions from(const TrainConfig& t);
};

/// Uniform point indices into an H*W grid, one row per image: int64 [B, K]. K = 0 means full grid.
torch::Tensor sample_points(int64_t batch, int64_t hw, int k, std::mt19937_64& rng);

/// Eq. 14 summed over blocks 0..N_B (or the final block only without deep supervision).
/// `points[b]` holds the sampled indices for block b; an empty vector means full-grid mask losses.
LossReport total_loss(const std::vector<PerQueryPredictions>& blocks,
                      const std::vector<FrameTargets>& targets, const LossOptions& opt,
                      const std::vector<torch::Tensor>& points = {});

// ---------------------------------------------------------------- optimization loop

/// Stacks images of `samples` into [B, 3, H, W].
torch::Tensor batch_images(const std::vector<const SceneSample*>& samples);

struct TrainRecord {
  int step = 0;
  double total = 0, mask = 0, cls = 0, depth = 0, lr = 0;
};

struct Checkpoint {
  int step = 0;
  std::string config_toml;
};

void save_checkpoint(const std::filesystem::path& path, Multiformer& model,
                     torch::optim::AdamW* optimizer, const RunConfig& cfg, int step);
/// Loads weights (and optimizer state when given). Returns the stored step and config.
Checkpoint load_checkpoint(const std::filesystem::path& path, Multiformer& model,
                           torch::optim::AdamW* optimizer = nullptr);
/// Reads only the config stored in a checkpoint.
RunConfig checkpoint_config(const std::filesystem::path& path);

/// Builds a model with deterministic initialization from train.seed.
Multiformer build_model(const RunConfig& cfg);

struct TrainOptions {
  std::filesystem::path run_dir;           // checkpoints and log.jsonl; empty = no files
  std::optional<std::filesystem::path> resume;
  std::function<void(const TrainRecord&)> on_record;  // called every log_every steps
  /// Called every train.eval_every steps with the model in eval mode; returns a JSON record
  /// appended to the log.
  std::function<nlohmann::json(int step, Multiformer&)> on_eval;
  int stop_after = -1;                      // stop early after this many total steps (testing)
};

struct TrainResult {
  Multiformer model{nullptr};
  std::vector<TrainRecord> records;  // one per step
  int final_step = 0;
};

/// Deterministic frame indices for a step.
std::vector<size_t> batch_indices(uint64_t seed, int step, int batch, size_t dataset_size);

TrainResult train_loop(const RunConfig& cfg, const std::vector<SceneSample>& dataset,
                       const TrainOptions& opt = {});

}  // namespace multiformer
