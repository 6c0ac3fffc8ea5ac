#pragma once

#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/heads.hpp"
#include "multiformer/model.hpp"
#include "multiformer/scene_data.hpp"
#include "multiformer/tracker.hpp"

namespace multiformer {

struct FramePrediction {
  PanopticMap pan;  // thing instance indices are track ids after tracking
  DepthMap depth;
};

/// Full-resolution outputs of one image from the final decoder block.
struct RawFrameOutput {
  torch::Tensor masks;   // [Q, H, W] probabilities
  torch::Tensor depth;   // [Q, H, W] meters
  torch::Tensor logits;  // [Q, N_C + 1]
  torch::Tensor queries; // [Q, N_D] tracking queries
};

RawFrameOutput run_frame(Multiformer& model, const torch::Tensor& image);

/// Merges raw outputs into a panoptic map and a depth map (no tracking).
FramePrediction merge_frame(const RawFrameOutput& raw, const std::vector<bool>& is_thing,
                            const RunConfig& cfg);

/// Frame-by-frame inference with tracking state threaded through the sequence.
std::vector<FramePrediction> predict_sequence(Multiformer& model,
                                              const std::vector<SceneSample>& frames,
                                              const std::vector<bool>& is_thing,
                                              const RunConfig& cfg);

/// Debug pathway: GT panoptic maps and depth as predictions. Invalid GT depth is filled
/// with 1 m so the prediction has full coverage.
std::vector<FramePrediction> gt_as_prediction(const std::vector<SceneSample>& frames);

}  // namespace multiformer
