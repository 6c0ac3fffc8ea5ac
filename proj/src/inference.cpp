#include "multiformer/inference.hpp"

#include <set>

#include "multiformer/errors.hpp"

namespace multiformer {

namespace F = torch::nn::functional;

RawFrameOutput run_frame(Multiformer& model, const torch::Tensor& image) {
  torch::NoGradGuard ng;
  const int64_t H = image.size(1), W = image.size(2);
  auto out = model->forward(image.unsqueeze(0).to(torch::kFloat32));
  const auto& p = out.final_block();
  const auto up = [&](const torch::Tensor& t) {
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{H, W})
                                 .mode(torch::kBilinear)
                                 .align_corners(false))[0];
  };
  RawFrameOutput raw;
  raw.masks = torch::sigmoid(up(p.mask_logits));
  raw.depth = up(p.depth);
  raw.logits = p.logits[0];
  raw.queries = out.decoder.final_queries[0];
  return raw;
}

FramePrediction merge_frame(const RawFrameOutput& raw, const std::vector<bool>& is_thing,
                            const RunConfig& cfg) {
  FramePrediction fp;
  fp.pan = merge_panoptic(raw.masks, raw.logits, is_thing, cfg.panoptic);
  if (cfg.depth.merge == DepthMerge::kDynamic)
    fp.depth = merge_depth_dynamic(raw.depth, raw.masks, raw.logits, cfg.depth.tau,
                                   cfg.depth.score_floor);
  else
    fp.depth = merge_depth_copy_paste(raw.depth, fp.pan, raw.logits);
  return fp;
}

std::vector<FramePrediction> predict_sequence(Multiformer& model,
                                              const std::vector<SceneSample>& frames,
                                              const std::vector<bool>& is_thing,
                                              const RunConfig& cfg) {
  model->eval();
  Tracker tracker(cfg.track);
  std::vector<FramePrediction> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    const auto raw = run_frame(model, f.image);
    FramePrediction fp = merge_frame(raw, is_thing, cfg);
    tracker.update(raw.queries, fp.pan);
    out.push_back(std::move(fp));
  }
  return out;
}

std::vector<FramePrediction> gt_as_prediction(const std::vector<SceneSample>& frames) {
  std::vector<FramePrediction> out;
  for (const auto& f : frames) {
    FramePrediction fp;
    fp.pan.labels = f.panoptic;
    std::set<int32_t> ids(f.panoptic.data.begin(), f.panoptic.data.end());
    for (int32_t id : ids) {
      if (id == kVoidLabel) continue;
      fp.pan.segments.push_back({id, class_of(id), -1, 1.0, instance_of(id) > 0});
    }
    fp.depth = f.depth;
    for (auto& d : fp.depth.data)
      if (!(d > 0)) d = 1.0f;
    out.push_back(std::move(fp));
  }
  return out;
}

}  // namespace multiformer
