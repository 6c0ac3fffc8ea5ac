#include "multiformer/feature_net.hpp"

#include "multiformer/errors.hpp"

namespace multiformer {

namespace F = torch::nn::functional;

namespace {

int64_t group_count(int64_t channels) {
  for (int64_t g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

}  // namespace

ConvNormActImpl::ConvNormActImpl(int64_t in, int64_t out, int64_t stride, bool activation)
    : activation_(activation) {
  conv_ = register_module("conv", conv(in, out, 3, stride));
  norm_ = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(group_count(out), out)));
}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) {
  auto y = norm_(conv_(x));
  return activation_ ? torch::relu(y) : y;
}

BackboneImpl::BackboneImpl(const std::vector<int>& channels) {
  int64_t in = 3;
  for (size_t p = 0; p < channels.size(); ++p) {
    torch::nn::Sequential stage(ConvNormAct(in, channels[p], 2), ConvNormAct(channels[p], channels[p], 1));
    stages_.push_back(register_module("stage" + std::to_string(p + 1), stage));
    in = channels[p];
  }
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& image) {
  FeaturePyramid pyr;
  torch::Tensor x = image;
  for (auto& stage : stages_) {
    x = stage->forward(x);
    pyr.levels.push_back(x);
  }
  return pyr;
}

PixelDecoderImpl::PixelDecoderImpl(const std::vector<int>& backbone_channels, int64_t n_d) {
  for (size_t p = 1; p < backbone_channels.size(); ++p) {
    const std::string m = std::to_string(p + 1);
    lateral_.push_back(register_module("lateral" + m, conv(backbone_channels[p], n_d, 1)));
    output_.push_back(register_module(
        "output" + m, torch::nn::Sequential(ConvNormAct(n_d, n_d, 1), ConvNormAct(n_d, n_d, 1, false))));
  }
}

PixelFeatures PixelDecoderImpl::forward(const FeaturePyramid& pyr) {
  const size_t n = lateral_.size();  // levels 2..P
  std::vector<torch::Tensor> lat(n);
  for (size_t i = 0; i < n; ++i) lat[i] = lateral_[i]->forward(pyr.levels[i + 1]);

  // Top-down: coarse context flows to fine levels.
  std::vector<torch::Tensor> td(n);
  td[n - 1] = lat[n - 1];
  for (size_t i = n - 1; i-- > 0;) {
    td[i] = lat[i] + F::interpolate(td[i + 1], F::InterpolateFuncOptions()
                                                   .size(std::vector<int64_t>{lat[i].size(2), lat[i].size(3)})
                                                   .mode(torch::kNearest));
  }
  // Bottom-up: fine detail flows back, so every output level sees every input level.
  std::vector<torch::Tensor> bu(n);
  bu[0] = td[0];
  for (size_t i = 1; i < n; ++i) bu[i] = td[i] + F::avg_pool2d(bu[i - 1], F::AvgPool2dFuncOptions(2));

  PixelFeatures px;
  for (size_t i = 0; i < n; ++i) px.levels.push_back(output_[i]->forward(bu[i]));
  return px;
}

TaskFeatureHeadImpl::TaskFeatureHeadImpl(int64_t c1, int64_t n_d, int ctx_stride) {
  lateral_ = register_module("lateral", conv(c1, n_d, 1));
  fuse_ = register_module("fuse", ConvNormAct(n_d, n_d, 1));
  mask_mlp_ = register_module(
      "mask_mlp", torch::nn::Sequential(conv(n_d, n_d, 1), torch::nn::ReLU(), conv(n_d, n_d, 1)));
  depth_mlp_ = register_module(
      "depth_mlp", torch::nn::Sequential(conv(n_d, n_d, 1), torch::nn::ReLU(), conv(n_d, n_d, 1)));
  const int64_t s1 = ctx_stride >= 2 ? 2 : 1;
  const int64_t s2 = ctx_stride / s1;
  ctx_ = register_module("ctx", torch::nn::Sequential(conv(2 * n_d, n_d, 3, s1), torch::nn::ReLU(),
                                                      conv(n_d, n_d, 3, s2)));
}

TaskFeatures TaskFeatureHeadImpl::forward(const FeaturePyramid& pyr, const PixelFeatures& px) {
  const auto& f1 = pyr.level(1);
  auto up = F::interpolate(px.level(2), F::InterpolateFuncOptions()
                                            .size(std::vector<int64_t>{f1.size(2), f1.size(3)})
                                            .mode(torch::kBilinear)
                                            .align_corners(false));
  auto fused = fuse_(lateral_(f1) + up);
  TaskFeatures tf;
  tf.f_mask = mask_mlp_->forward(fused);
  tf.f_depth = depth_mlp_->forward(fused);
  tf.f_ctx = ctx_->forward(torch::cat({tf.f_depth, tf.f_mask}, 1));
  return tf;
}

FeatureNetImpl::FeatureNetImpl(const ModelConfig& cfg) : P_(cfg.P) {
  if (static_cast<int>(cfg.backbone_channels.size()) != cfg.P)
    throw ConfigError("model.backbone_channels must have model.P entries");
  if (cfg.P < 3) throw ConfigError("model.P must be >= 3");
  backbone_ = register_module("backbone", Backbone(cfg.backbone_channels));
  pixel_decoder_ = register_module("pixel_decoder", PixelDecoder(cfg.backbone_channels, cfg.N_D));
  task_head_ = register_module("task_head",
                               TaskFeatureHead(cfg.backbone_channels.front(), cfg.N_D, cfg.ctx_stride));
}

FeaturePyramid FeatureNetImpl::extract_pyramid(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3)
    throw ShapeError("extract_pyramid expects [B, 3, H, W]");
  const int64_t div = int64_t{1} << P_;
  if (image.size(2) % div != 0 || image.size(3) % div != 0)
    throw ShapeError("image size " + std::to_string(image.size(2)) + "x" +
                     std::to_string(image.size(3)) + " not divisible by 2^P = " +
                     std::to_string(div));
  return backbone_(image);
}

PixelFeatures FeatureNetImpl::pixel_decode(const FeaturePyramid& pyr) {
  return pixel_decoder_(pyr);
}

TaskFeatures FeatureNetImpl::build_task_features(const FeaturePyramid& pyr,
                                                 const PixelFeatures& px) {
  return task_head_(pyr, px);
}

FeatureNetOutput FeatureNetImpl::forward(const torch::Tensor& image) {
  FeatureNetOutput out;
  out.pyramid = extract_pyramid(image);
  out.pixels = pixel_decode(out.pyramid);
  out.tasks = build_task_features(out.pyramid, out.pixels);
  return out;
}

}  // namespace multiformer
