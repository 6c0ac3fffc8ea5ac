#include "multiformer/model.hpp"

#include <cmath>

namespace multiformer {

int64_t count_parameters(torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

MultiformerImpl::MultiformerImpl(const ModelConfig& model, const DepthConfig& depth)
    : model_cfg_(model), depth_cfg_(depth) {
  features_ = register_module("features", FeatureNet(model));
  decoder_ = register_module("decoder", QueryDecoder(model));
  heads_ = register_module("heads", PredictionHeads(model, depth));
  if (depth.mode == DepthMode::kLearnedLog) {
    // Start r at the geometric centre of the nominal depth range.
    const double init_log_scale = 0.5 * (std::log(depth.d_min) + std::log(depth.d_max));
    scale_shift_ = register_module("scale_shift", ScaleShiftEstimator(model.N_D, init_log_scale));
  }
}

ModelOutput MultiformerImpl::forward(const torch::Tensor& image) {
  ModelOutput out;
  out.features = features_(image);
  if (!scale_shift_.is_empty()) out.scale_shift = scale_shift_(out.features.pixels.level(2));
  const auto& tf = out.features.tasks;
  const auto& ss = out.scale_shift;
  out.decoder = decoder_(out.features.pixels, tf,
                         [&](const torch::Tensor& qm, const torch::Tensor& qd,
                             const torch::Tensor& qc, int b) {
                           return heads_(qm, qd, qc, tf, ss, b);
                         });
  return out;
}

int64_t MultiformerImpl::parameter_count() { return count_parameters(*this); }

}  // namespace multiformer
