#pragma once

#include <optional>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/feature_net.hpp"
#include "multiformer/heads.hpp"
#include "multiformer/query_decoder.hpp"

namespace multiformer {

struct ModelOutput {
  FeatureNetOutput features;
  std::optional<SceneScaleShift> scale_shift;
  DecoderOutput decoder;

  const PerQueryPredictions& final_block() const { return decoder.blocks.back(); }
};

/// Backbone stub + pixel decoder + query decoder (any variant) + prediction heads.
class MultiformerImpl : public torch::nn::Module {
 public:
  MultiformerImpl(const ModelConfig& model, const DepthConfig& depth);

  /// image: [B, 3, H, W] in [0, 1].
  ModelOutput forward(const torch::Tensor& image);

  int64_t parameter_count();

  const ModelConfig& model_config() const { return model_cfg_; }
  FeatureNet& features() { return features_; }
  QueryDecoder& decoder() { return decoder_; }
  PredictionHeads& heads() { return heads_; }
  ScaleShiftEstimator& scale_shift() { return scale_shift_; }

 private:
  ModelConfig model_cfg_;
  DepthConfig depth_cfg_;
  FeatureNet features_{nullptr};
  QueryDecoder decoder_{nullptr};
  PredictionHeads heads_{nullptr};
  ScaleShiftEstimator scale_shift_{nullptr};
};
TORCH_MODULE(Multiformer);

int64_t count_parameters(torch::nn::Module& module);

}  // namespace multiformer
