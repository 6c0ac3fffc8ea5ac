#pragma once

#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"

namespace multiformer {

/// Backbone levels p = 1..P; level p is [B, C_p, H/2^p, W/2^p]. levels[p-1] holds level p.
struct FeaturePyramid {
  std::vector<torch::Tensor> levels;
  const torch::Tensor& level(int p) const { return levels.at(static_cast<size_t>(p - 1)); }
  int num_levels() const { return static_cast<int>(levels.size()); }
};

/// Pixel features m = 2..P, all with N_D channels. levels[m-2] holds level m.
struct PixelFeatures {
  std::vector<torch::Tensor> levels;
  const torch::Tensor& level(int m) const { return levels.at(static_cast<size_t>(m - 2)); }
  int max_level() const { return static_cast<int>(levels.size()) + 1; }
};

struct TaskFeatures {
  torch::Tensor f_mask;   // [B, N_D, H/2, W/2]
  torch::Tensor f_depth;  // [B, N_D, H/2, W/2]
  torch::Tensor f_ctx;    // [B, N_D, H/(2*ctx_stride), W/(2*ctx_stride)]
};

/// conv3x3 -> GroupNorm -> ReLU, the basic unit of the stub networks.
class ConvNormActImpl : public torch::nn::Module {
 public:
  ConvNormActImpl(int64_t in, int64_t out, int64_t stride, bool activation = true);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::GroupNorm norm_{nullptr};
  bool activation_;
};
TORCH_MODULE(ConvNormAct);

/// Small strided CNN standing in for a pretrained backbone. Honors the pyramid contract only.
class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const std::vector<int>& channels);
  FeaturePyramid forward(const torch::Tensor& image);

 private:
  std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(Backbone);

/// Multi-scale pixel decoder: 1x1 lateral projections, top-down then bottom-up additive
/// fusion, two conv layers per level.
class PixelDecoderImpl : public torch::nn::Module {
 public:
  PixelDecoderImpl(const std::vector<int>& backbone_channels, int64_t n_d);
  PixelFeatures forward(const FeaturePyramid& pyr);

 private:
  std::vector<torch::nn::Conv2d> lateral_;
  std::vector<torch::nn::Sequential> output_;
};
TORCH_MODULE(PixelDecoder);

/// FPN merge of F^bb_1 with F^px_2, task MLPs, and the context reduction CNN.
class TaskFeatureHeadImpl : public torch::nn::Module {
 public:
  TaskFeatureHeadImpl(int64_t c1, int64_t n_d, int ctx_stride);
  TaskFeatures forward(const FeaturePyramid& pyr, const PixelFeatures& px);

  torch::nn::Sequential& mask_mlp() { return mask_mlp_; }
  torch::nn::Sequential& depth_mlp() { return depth_mlp_; }

 private:
  torch::nn::Conv2d lateral_{nullptr};
  ConvNormAct fuse_{nullptr};
  torch::nn::Sequential mask_mlp_{nullptr};
  torch::nn::Sequential depth_mlp_{nullptr};
  torch::nn::Sequential ctx_{nullptr};
};
TORCH_MODULE(TaskFeatureHead);

struct FeatureNetOutput {
  FeaturePyramid pyramid;
  PixelFeatures pixels;
  TaskFeatures tasks;
};

class FeatureNetImpl : public torch::nn::Module {
 public:
  explicit FeatureNetImpl(const ModelConfig& cfg);

  FeaturePyramid extract_pyramid(const torch::Tensor& image);
  PixelFeatures pixel_decode(const FeaturePyramid& pyr);
  TaskFeatures build_task_features(const FeaturePyramid& pyr, const PixelFeatures& px);
  FeatureNetOutput forward(const torch::Tensor& image);

  Backbone& backbone() { return backbone_; }
  TaskFeatureHead& task_head() { return task_head_; }

 private:
  int P_;
  Backbone backbone_{nullptr};
  PixelDecoder pixel_decoder_{nullptr};
  TaskFeatureHead task_head_{nullptr};
};
TORCH_MODULE(FeatureNet);

}  // namespace multiformer
