#pragma once

#include <optional>
#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/feature_net.hpp"
#include "multiformer/grid.hpp"

namespace multiformer {

/// Per-scene scale r > 0 and shift mu, one value per batch element.
struct SceneScaleShift {
  torch::Tensor r;   // [B]
  torch::Tensor mu;  // [B]
};

/// Predictions emitted by one decoder block (block 0 = before any block).
struct PerQueryPredictions {
  torch::Tensor mask_logits;  // [B, N_Q, H/2, W/2]; M = sigmoid(mask_logits)
  torch::Tensor depth_raw;    // [B, N_Q, H/2, W/2]; D-hat
  torch::Tensor depth;        // [B, N_Q, H/2, W/2]; metric depth, meters
  torch::Tensor logits;       // [B, N_Q, N_C + 1]; index N_C is "no object"
  int block = 0;

  torch::Tensor masks() const { return torch::sigmoid(mask_logits); }
};

/// Pointwise convolution of per-query kernels with a feature map: [B,Q,C] x [B,C,h,w] -> [B,Q,h,w].
torch::Tensor pointwise_kernel_conv(const torch::Tensor& kernels, const torch::Tensor& features);

/// Mask probabilities sigmoid(K * F_mask).
torch::Tensor predict_masks(const torch::Tensor& kernels, const torch::Tensor& f_mask);

/// Min-max denormalized depth (d_max - d_min) * sigmoid(K * F_depth) + d_min.
torch::Tensor predict_depth_baseline(const torch::Tensor& kernels, const torch::Tensor& f_depth,
                                     double d_min, double d_max);

struct LogDepth {
  torch::Tensor raw;     // D-hat = K * F_depth
  torch::Tensor normed;  // query-wise standardized, then gamma/beta affine
  torch::Tensor metric;  // r * (exp(normed) + mu)
};

/// Log-depth path. gamma/beta are [B, Q]; std is floored at 1e-6 per query map.
LogDepth predict_depth_log(const torch::Tensor& kernels, const torch::Tensor& f_depth,
                           const torch::Tensor& gamma, const torch::Tensor& beta,
                           const SceneScaleShift& ss);

class MLPImpl : public torch::nn::Module {
 public:
  MLPImpl(int64_t in, int64_t hidden, int64_t out, int layers);
  torch::Tensor forward(torch::Tensor x);

 private:
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(MLP);

/// 2-layer CNN on F^px_2, global average pool, linear to (log r, mu).
class ScaleShiftEstimatorImpl : public torch::nn::Module {
 public:
  ScaleShiftEstimatorImpl(int64_t n_d, double init_log_scale);
  SceneScaleShift forward(const torch::Tensor& f_px_2);

  torch::nn::Linear& output() { return out_; }

 private:
  torch::nn::Sequential cnn_{nullptr};
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(ScaleShiftEstimator);

/// Mask/depth kernel MLPs, classifier, and the query-wise depth affine maps.
class PredictionHeadsImpl : public torch::nn::Module {
 public:
  PredictionHeadsImpl(const ModelConfig& model, const DepthConfig& depth);

  /// q_* are [B, N_Q, N_D]. `ss` is required in learned_log mode.
  PerQueryPredictions forward(const torch::Tensor& q_mask, const torch::Tensor& q_depth,
                              const torch::Tensor& q_class, const TaskFeatures& tf,
                              const std::optional<SceneScaleShift>& ss, int block);

  torch::Tensor classify(const torch::Tensor& q_class);

  MLP& mask_kernel() { return mask_kernel_; }
  MLP& depth_kernel() { return depth_kernel_; }
  torch::nn::Linear& classifier() { return class_; }

 private:
  DepthConfig depth_cfg_;
  torch::nn::LayerNorm norm_{nullptr};
  MLP mask_kernel_{nullptr};
  MLP depth_kernel_{nullptr};
  torch::nn::Linear class_{nullptr};
  torch::nn::Linear gamma_{nullptr};
  torch::nn::Linear beta_{nullptr};
};
TORCH_MODULE(PredictionHeads);

// ---------------------------------------------------------------- merging (inference)

struct Segment {
  int32_t segment_id = 0;  // the panoptic label written into the map
  int class_id = 0;
  int query_index = 0;
  double score = 0.0;
  bool is_thing = false;
};

struct PanopticMap {
  LabelMap labels;
  std::vector<Segment> segments;
  LabelMap owner;  // query index per pixel, -1 for void; empty when built by hand
};

/// Mask-classification panoptic merge for one image. masks [Q,H,W] probabilities,
/// logits [Q,N_C+1]. Thing segments get instance indices 1, 2, ... in query order.
PanopticMap merge_panoptic(const torch::Tensor& masks, const torch::Tensor& logits,
                           const std::vector<bool>& is_thing, const PanopticConfig& cfg);

/// Max class probability per query, no-object slot excluded. logits [Q, N_C+1] -> [Q].
torch::Tensor query_scores(const torch::Tensor& logits);

/// Depth paste from the query owning each pixel (falls back to the segment's query when
/// `owner` is empty); void pixels take the highest-scoring query's depth.
DepthMap merge_depth_copy_paste(const torch::Tensor& depth, const PanopticMap& pan,
                                const torch::Tensor& logits);

/// Softmax weights over queries of S_q * M_q / tau after the score-floor discard. [Q,H,W].
torch::Tensor dynamic_merge_weights(const torch::Tensor& masks, const torch::Tensor& logits,
                                    double tau, double score_floor);

DepthMap merge_depth_dynamic(const torch::Tensor& depth, const torch::Tensor& masks,
                             const torch::Tensor& logits, double tau, double score_floor);

DepthMap to_depth_map(const torch::Tensor& hw);
torch::Tensor to_tensor(const DepthMap& map);

}  // namespace multiformer
