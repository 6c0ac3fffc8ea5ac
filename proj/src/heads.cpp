#include "multiformer/heads.hpp"

#include <cmath>
#include <map>

#include "multiformer/errors.hpp"

namespace multiformer {

torch::Tensor pointwise_kernel_conv(const torch::Tensor& kernels, const torch::Tensor& features) {
  if (kernels.size(-1) != features.size(1))
    throw ShapeError("kernel width does not match feature channels");
  return torch::einsum("bqc,bchw->bqhw", {kernels, features});
}

torch::Tensor predict_masks(const torch::Tensor& kernels, const torch::Tensor& f_mask) {
  return torch::sigmoid(pointwise_kernel_conv(kernels, f_mask));
}

torch::Tensor predict_depth_baseline(const torch::Tensor& kernels, const torch::Tensor& f_depth,
                                     double d_min, double d_max) {
  return (d_max - d_min) * torch::sigmoid(pointwise_kernel_conv(kernels, f_depth)) + d_min;
}

LogDepth predict_depth_log(const torch::Tensor& kernels, const torch::Tensor& f_depth,
                           const torch::Tensor& gamma, const torch::Tensor& beta,
                           const SceneScaleShift& ss) {
  LogDepth out;
  out.raw = pointwise_kernel_conv(kernels, f_depth);
  auto flat = out.raw.flatten(2);
  auto mean = flat.mean(-1, /*keepdim=*/true);
  auto var = (flat - mean).pow(2).mean(-1, /*keepdim=*/true);
  // clamp keeps the gradient finite when a map is constant (std 0 -> floor 1e-6)
  auto std = var.clamp_min(1e-12).sqrt();
  auto normed = (flat - mean) / std * gamma.unsqueeze(-1) + beta.unsqueeze(-1);
  out.normed = normed.view_as(out.raw);
  const auto r = ss.r.view({-1, 1, 1, 1});
  const auto mu = ss.mu.view({-1, 1, 1, 1});
  out.metric = r * (torch::exp(out.normed) + mu);
  return out;
}

MLPImpl::MLPImpl(int64_t in, int64_t hidden, int64_t out, int layers) {
  for (int i = 0; i < layers; ++i) {
    const int64_t a = i == 0 ? in : hidden;
    const int64_t b = i == layers - 1 ? out : hidden;
    layers_.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(a, b)));
  }
}

torch::Tensor MLPImpl::forward(torch::Tensor x) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](x);
    if (i + 1 < layers_.size()) x = torch::relu(x);
  }
  return x;
}

ScaleShiftEstimatorImpl::ScaleShiftEstimatorImpl(int64_t n_d, double init_log_scale) {
  auto conv = [](int64_t i, int64_t o) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(i, o, 3).padding(1));
  };
  cnn_ = register_module("cnn", torch::nn::Sequential(conv(n_d, n_d), torch::nn::ReLU(),
                                                      conv(n_d, n_d), torch::nn::ReLU()));
  out_ = register_module("out", torch::nn::Linear(n_d, 2));
  torch::NoGradGuard ng;
  out_->weight.mul_(0.1);
  out_->bias.zero_();
  out_->bias[0] = init_log_scale;
}

SceneScaleShift ScaleShiftEstimatorImpl::forward(const torch::Tensor& f_px_2) {
  auto pooled = cnn_->forward(f_px_2).mean({2, 3});
  auto ab = out_(pooled);
  return {torch::exp(ab.select(1, 0)), ab.select(1, 1)};
}

PredictionHeadsImpl::PredictionHeadsImpl(const ModelConfig& model, const DepthConfig& depth)
    : depth_cfg_(depth) {
  const int64_t d = model.N_D;
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
  mask_kernel_ = register_module("mask_kernel", MLP(d, d, d, 3));
  depth_kernel_ = register_module("depth_kernel", MLP(d, d, d, 3));
  class_ = register_module("classifier", torch::nn::Linear(d, model.num_classes + 1));
  if (depth.mode == DepthMode::kLearnedLog) {
    gamma_ = register_module("gamma", torch::nn::Linear(d, 1));
    beta_ = register_module("beta", torch::nn::Linear(d, 1));
  }
}

torch::Tensor PredictionHeadsImpl::classify(const torch::Tensor& q_class) {
  return class_(norm_(q_class));
}

PerQueryPredictions PredictionHeadsImpl::forward(const torch::Tensor& q_mask,
                                                 const torch::Tensor& q_depth,
                                                 const torch::Tensor& q_class,
                                                 const TaskFeatures& tf,
                                                 const std::optional<SceneScaleShift>& ss,
                                                 int block) {
  PerQueryPredictions p;
  p.block = block;
  p.mask_logits = pointwise_kernel_conv(mask_kernel_(norm_(q_mask)), tf.f_mask);
  const auto qd = norm_(q_depth);
  const auto depth_kernels = depth_kernel_(qd);
  if (depth_cfg_.mode == DepthMode::kBaselineMinMax) {
    p.depth_raw = torch::sigmoid(pointwise_kernel_conv(depth_kernels, tf.f_depth));
    p.depth = (depth_cfg_.d_max - depth_cfg_.d_min) * p.depth_raw + depth_cfg_.d_min;
  } else {
    if (!ss) throw ShapeError("learned_log depth requires a scene scale/shift estimate");
    auto ld = predict_depth_log(depth_kernels, tf.f_depth, gamma_(qd).squeeze(-1),
                                beta_(qd).squeeze(-1), *ss);
    p.depth_raw = ld.raw;
    p.depth = ld.metric;
  }
  p.logits = classify(q_class);
  return p;
}

// ---------------------------------------------------------------- merging

torch::Tensor query_scores(const torch::Tensor& logits) {
  const int64_t nc = logits.size(-1) - 1;
  return torch::softmax(logits, -1).narrow(-1, 0, nc).amax(-1);
}

PanopticMap merge_panoptic(const torch::Tensor& masks_in, const torch::Tensor& logits_in,
                           const std::vector<bool>& is_thing, const PanopticConfig& cfg) {
  torch::NoGradGuard ng;
  const auto masks = masks_in.to(torch::kFloat64).contiguous();
  const auto logits = logits_in.to(torch::kFloat64);
  const int64_t Q = masks.size(0), H = masks.size(1), W = masks.size(2);
  const int64_t nc = logits.size(1) - 1;
  PanopticMap pan;
  pan.labels = LabelMap(H, W, kVoidLabel);
  pan.owner = LabelMap(H, W, -1);

  auto [scores, labels] = torch::softmax(logits, -1).max(-1);
  std::vector<int64_t> kept;
  for (int64_t q = 0; q < Q; ++q) {
    if (labels[q].item<int64_t>() != nc && scores[q].item<double>() > cfg.score_thresh)
      kept.push_back(q);
  }
  if (kept.empty()) return pan;

  auto idx = torch::tensor(kept, torch::kInt64);
  auto cur_masks = masks.index_select(0, idx);
  auto cur_prob = scores.index_select(0, idx).view({-1, 1, 1}) * cur_masks;
  auto owner = cur_prob.argmax(0).contiguous();  // [H, W] index into kept
  auto owner_acc = owner.accessor<int64_t, 2>();
  auto mask_acc = cur_masks.accessor<double, 3>();

  std::map<int, size_t> stuff_segment;  // class -> segments index
  int next_instance = 1;
  for (size_t k = 0; k < kept.size(); ++k) {
    const int cls = static_cast<int>(labels[kept[k]].item<int64_t>());
    const bool thing = cls < static_cast<int>(is_thing.size()) && is_thing[static_cast<size_t>(cls)];
    int64_t mask_area = 0, original_area = 0, final_area = 0;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const bool own = owner_acc[y][x] == static_cast<int64_t>(k);
        const bool on = mask_acc[k][y][x] >= 0.5;
        mask_area += own;
        original_area += on;
        final_area += own && on;
      }
    if (mask_area == 0 || original_area == 0 || final_area == 0) continue;
    if (static_cast<double>(mask_area) / static_cast<double>(original_area) < cfg.overlap_thresh)
      continue;

    int32_t label;
    if (!thing) {
      label = panoptic_id(cls, 0);
      if (!stuff_segment.count(cls)) {
        stuff_segment[cls] = pan.segments.size();
        pan.segments.push_back({label, cls, static_cast<int>(kept[k]),
                                scores[kept[k]].item<double>(), false});
      }
    } else {
      if (next_instance >= kLabelDivisor) continue;
      label = panoptic_id(cls, next_instance++);
      pan.segments.push_back({label, cls, static_cast<int>(kept[k]),
                              scores[kept[k]].item<double>(), true});
    }
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        if (owner_acc[y][x] == static_cast<int64_t>(k) && mask_acc[k][y][x] >= 0.5) {
          pan.labels.at(y, x) = label;
          pan.owner.at(y, x) = static_cast<int32_t>(kept[k]);
        }
  }
  return pan;
}

DepthMap merge_depth_copy_paste(const torch::Tensor& depth_in, const PanopticMap& pan,
                                const torch::Tensor& logits) {
  torch::NoGradGuard ng;
  const auto depth = depth_in.to(torch::kFloat32).contiguous();
  auto acc = depth.accessor<float, 3>();
  const int64_t H = depth.size(1), W = depth.size(2);
  if (pan.labels.height != H || pan.labels.width != W)
    throw ShapeError("copy-paste merge: panoptic map does not match depth resolution");
  std::map<int32_t, int> owner;
  for (const auto& s : pan.segments) owner.emplace(s.segment_id, s.query_index);
  const int fallback = static_cast<int>(query_scores(logits).argmax().item<int64_t>());
  const bool per_pixel = pan.owner.same_shape(pan.labels) && pan.owner.size() > 0;
  DepthMap out(H, W);
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      int q = fallback;
      if (per_pixel) {
        if (pan.owner.at(y, x) >= 0) q = pan.owner.at(y, x);
      } else if (auto it = owner.find(pan.labels.at(y, x)); it != owner.end()) {
        q = it->second;
      }
      out.at(y, x) = acc[q][y][x];
    }
  return out;
}

torch::Tensor dynamic_merge_weights(const torch::Tensor& masks, const torch::Tensor& logits,
                                    double tau, double score_floor) {
  if (!(tau > 0)) throw ConfigError("depth.tau must be > 0");
  auto scores = query_scores(logits);  // [Q]
  auto keep = scores >= score_floor;
  if (keep.sum().item<int64_t>() == 0) keep = torch::ones_like(keep);
  auto x = scores.view({-1, 1, 1}) * masks / tau;
  x = x.masked_fill(keep.logical_not().view({-1, 1, 1}), -std::numeric_limits<double>::infinity());
  return torch::softmax(x, 0);
}

DepthMap merge_depth_dynamic(const torch::Tensor& depth, const torch::Tensor& masks,
                             const torch::Tensor& logits, double tau, double score_floor) {
  torch::NoGradGuard ng;
  auto w = dynamic_merge_weights(masks.to(torch::kFloat64), logits.to(torch::kFloat64), tau,
                                 score_floor);
  return to_depth_map((w * depth.to(torch::kFloat64)).sum(0));
}

DepthMap to_depth_map(const torch::Tensor& hw) {
  auto t = hw.detach().to(torch::kFloat32).contiguous();
  DepthMap m(t.size(0), t.size(1));
  std::memcpy(m.data.data(), t.data_ptr<float>(), m.data.size() * sizeof(float));
  return m;
}

torch::Tensor to_tensor(const DepthMap& map) {
  return torch::from_blob(const_cast<float*>(map.data.data()), {map.height, map.width},
                          torch::kFloat32)
      .clone();
}

}  // namespace multiformer
