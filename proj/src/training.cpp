#include "multiformer/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <cstring>

#include "multiformer/assignment.hpp"
#include "multiformer/errors.hpp"

namespace multiformer {

namespace F = torch::nn::functional;

FrameTargets extract_targets(const SceneSample& sample) {
  const auto& pan = sample.panoptic;
  std::set<int32_t> ids;
  for (int32_t v : pan.data)
    if (v != kVoidLabel) ids.insert(v);
  FrameTargets t;
  t.labels.assign(ids.begin(), ids.end());
  const int64_t g = static_cast<int64_t>(t.labels.size());
  t.masks = torch::zeros({g, pan.height, pan.width});
  std::vector<int64_t> classes;
  std::map<int32_t, int64_t> index;
  for (int64_t i = 0; i < g; ++i) {
    index[t.labels[static_cast<size_t>(i)]] = i;
    classes.push_back(class_of(t.labels[static_cast<size_t>(i)]));
  }
  t.classes = torch::tensor(classes, torch::kInt64);
  auto m = t.masks.accessor<float, 3>();
  for (int64_t y = 0; y < pan.height; ++y)
    for (int64_t x = 0; x < pan.width; ++x) {
      const int32_t v = pan.at(y, x);
      if (v != kVoidLabel) m[index[v]][y][x] = 1.0f;
    }
  t.depth = to_tensor(sample.depth);
  return t;
}

torch::Tensor matching_cost(const torch::Tensor& class_logits, const torch::Tensor& mask_logits,
                            const torch::Tensor& gt_masks, const torch::Tensor& gt_classes,
                            const MatchWeights& w) {
  torch::NoGradGuard guard;
  auto logits = class_logits.to(torch::kFloat64);
  auto x = mask_logits.to(torch::kFloat64);
  auto g = gt_masks.to(torch::kFloat64);
  const double k = static_cast<double>(x.size(1));

  auto prob = torch::softmax(logits, -1).index_select(1, gt_classes);  // [Q, G]
  auto bce = (F::softplus(x).sum(1, true) - torch::matmul(x, g.t())) / k;
  auto p = torch::sigmoid(x);
  auto num = 2.0 * torch::matmul(p, g.t());
  auto den = p.sum(1, true) + g.sum(1).unsqueeze(0);
  auto dice = torch::where(den > 0, 1.0 - num / den.clamp_min(1e-300), torch::zeros_like(num));
  return -w.lambda_class * prob + w.lambda_mask * (bce + dice);
}

MatchResult match_targets(const torch::Tensor& cost) {
  MatchResult m;
  const int q = static_cast<int>(cost.size(0));
  if (cost.size(1) == 0) {
    for (int i = 0; i < q; ++i) m.unmatched_queries.push_back(i);
    return m;
  }
  const Assignment a = solve_assignment(cost);
  for (int i = 0; i < q; ++i) {
    if (a.row_to_col[static_cast<size_t>(i)] >= 0)
      m.pairs.emplace_back(i, a.row_to_col[static_cast<size_t>(i)]);
    else
      m.unmatched_queries.push_back(i);
  }
  return m;
}

double match_cost(const torch::Tensor& cost, const MatchResult& m) {
  auto c = cost.to(torch::kFloat64).contiguous();
  auto a = c.accessor<double, 2>();
  double total = 0.0;
  for (const auto& [i, j] : m.pairs) total += a[i][j];
  return total;
}

torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& gt) {
  return F::binary_cross_entropy_with_logits(
      logits, gt, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone)).mean(-1);
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& gt) {
  auto num = 2.0 * (probs * gt).sum(-1);
  auto den = probs.sum(-1) + gt.sum(-1);
  auto safe = torch::where(den > 0, den, torch::ones_like(den));
  return torch::where(den > 0, 1.0 - num / safe, torch::zeros_like(den));
}

torch::Tensor loss_mask(const torch::Tensor& mask_logits, const torch::Tensor& gt) {
  if (mask_logits.size(0) == 0) return mask_logits.sum() * 0.0;
  return (bce_loss(mask_logits, gt) + dice_loss(torch::sigmoid(mask_logits), gt)).mean();
}

torch::Tensor loss_class(const torch::Tensor& logits, const MatchResult& match,
                         const torch::Tensor& gt_classes, double no_object_weight) {
  const int64_t q = logits.size(0);
  const int64_t no_object = logits.size(1) - 1;
  std::vector<int64_t> target(static_cast<size_t>(q), no_object);
  std::vector<double> weight(static_cast<size_t>(q), no_object_weight);
  auto cls = gt_classes.to(torch::kInt64).contiguous();
  for (const auto& [i, j] : match.pairs) {
    target[static_cast<size_t>(i)] = cls[j].item<int64_t>();
    weight[static_cast<size_t>(i)] = 1.0;
  }
  auto ce = F::cross_entropy(logits, torch::tensor(target, torch::kInt64),
                             F::CrossEntropyFuncOptions().reduction(torch::kNone));
  auto w = torch::tensor(weight, logits.options());
  return (w * ce).mean();
}

namespace {

// sqrt with a zero gradient at (and below) the origin. NaN passes through.
torch::Tensor guarded_sqrt(const torch::Tensor& x) {
  auto ok = (x > 1e-12) | x.isnan();
  auto safe = torch::where(ok, x, torch::ones_like(x));
  return torch::where(ok, torch::sqrt(safe), torch::zeros_like(x));
}

}  // namespace

torch::Tensor depth_loss_rows(const torch::Tensor& pred, const torch::Tensor& gt,
                              const torch::Tensor& weight, double alpha) {
  auto valid = (weight > 0) & (gt > 0);
  auto w = valid.to(pred.scalar_type());
  auto n = w.sum(-1);
  auto n_safe = n.clamp_min(1.0);
  auto gt_safe = torch::where(valid, gt, torch::ones_like(gt));
  auto g = torch::where(valid, torch::log(pred.clamp_min(1e-3)) - torch::log(gt_safe),
                        torch::zeros_like(pred));
  auto mean_g = g.sum(-1) / n_safe;
  auto mean_g2 = (g * g).sum(-1) / n_safe;
  auto silog = guarded_sqrt(mean_g2 - alpha * mean_g * mean_g);
  auto diff = torch::where(valid, pred - gt_safe, torch::zeros_like(pred));
  auto rmse = guarded_sqrt((diff * diff).sum(-1) / n_safe);
  return torch::where(n > 0, silog + rmse, torch::zeros_like(n));
}

torch::Tensor loss_depth(const torch::Tensor& pred, const torch::Tensor& gt,
                         const torch::Tensor& weight, double alpha) {
  auto rows = depth_loss_rows(pred.reshape({1, -1}), gt.reshape({1, -1}).to(pred.scalar_type()),
                              weight.reshape({1, -1}), alpha);
  return rows.mean();
}

LossOptions LossOptions::from(const TrainConfig& t) {
  LossOptions o;
  o.lambda_mask = t.lambda_mask;
  o.lambda_class = t.lambda_class;
  o.lambda_depth = t.lambda_depth;
  o.no_object_weight = t.no_object_weight;
  o.points_per_mask = t.points_per_mask;
  o.deep_supervision = t.deep_supervision;
  return o;
}

torch::Tensor sample_points(int64_t batch, int64_t hw, int k, std::mt19937_64& rng) {
  if (k <= 0) return {};
  std::uniform_int_distribution<int64_t> dist(0, hw - 1);
  std::vector<int64_t> idx(static_cast<size_t>(batch * k));
  for (auto& v : idx) v = dist(rng);
  return torch::tensor(idx, torch::kInt64).reshape({batch, k});
}

namespace {

void require_finite(const torch::Tensor& t, int block, const char* term) {
  const double v = t.item<double>();
  if (!std::isfinite(v))
    throw TrainingError("non-finite " + std::string(term) + " loss at block " +
                        std::to_string(block) + " (value " + std::to_string(v) + ")");
}

}  // namespace

LossReport total_loss(const std::vector<PerQueryPredictions>& blocks,
                      const std::vector<FrameTargets>& targets, const LossOptions& opt,
                      const std::vector<torch::Tensor>& points) {
  if (blocks.empty()) throw TrainingError("total_loss: no block predictions");
  LossReport rep;
  rep.lambda_mask = opt.lambda_mask;
  rep.lambda_class = opt.lambda_class;
  rep.lambda_depth = opt.lambda_depth;

  const size_t first = opt.deep_supervision ? 0 : blocks.size() - 1;
  const int64_t batch = blocks.front().mask_logits.size(0);
  if (static_cast<int64_t>(targets.size()) != batch)
    throw ShapeError("total_loss: " + std::to_string(targets.size()) + " targets for batch " +
                     std::to_string(batch));
  const int64_t H = targets.front().masks.size(1), W = targets.front().masks.size(2);

  torch::Tensor total;
  for (size_t bi = first; bi < blocks.size(); ++bi) {
    const auto& p = blocks[bi];
    const auto dtype = p.mask_logits.scalar_type();
    const auto up = [&](const torch::Tensor& t) {
      return F::interpolate(t, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{H, W})
                                   .mode(torch::kBilinear)
                                   .align_corners(false))
          .flatten(2);
    };
    auto mask_full = up(p.mask_logits);  // [B, Q, HW]
    auto depth_full = up(p.depth);
    const bool sampled = bi < points.size() && points[bi].defined();

    std::vector<torch::Tensor> pm, gm, pd, gd, wd, cls_terms;
    for (int64_t i = 0; i < batch; ++i) {
      const auto& t = targets[static_cast<size_t>(i)];
      auto gt_flat = t.masks.reshape({t.masks.size(0), -1}).to(dtype);
      auto pred_m = mask_full[i];
      torch::Tensor pred_pts = pred_m, gt_pts = gt_flat;
      if (sampled) {
        auto idx = points[bi][i];
        pred_pts = pred_m.index_select(1, idx);
        gt_pts = gt_flat.index_select(1, idx);
      }
      const MatchResult match =
          match_targets(matching_cost(p.logits[i], pred_pts, gt_pts, t.classes,
                                      MatchWeights{opt.lambda_mask, opt.lambda_class}));
      cls_terms.push_back(loss_class(p.logits[i], match, t.classes, opt.no_object_weight));
      if (match.pairs.empty()) continue;
      std::vector<int64_t> qi, gi;
      for (const auto& [q, g] : match.pairs) {
        qi.push_back(q);
        gi.push_back(g);
      }
      auto qidx = torch::tensor(qi, torch::kInt64), gidx = torch::tensor(gi, torch::kInt64);
      pm.push_back(pred_pts.index_select(0, qidx));
      gm.push_back(gt_pts.index_select(0, gidx));
      pd.push_back(depth_full[i].index_select(0, qidx));
      const int64_t m = static_cast<int64_t>(qi.size());
      gd.push_back(t.depth.reshape({1, -1}).to(dtype).expand({m, H * W}));
      wd.push_back(gt_flat.index_select(0, gidx));
    }

    BlockLoss bl;
    bl.block = p.block;
    auto l_cls = torch::stack(cls_terms).mean();
    torch::Tensor l_mask, l_depth;
    if (pm.empty()) {
      l_mask = mask_full.sum() * 0.0;
      l_depth = depth_full.sum() * 0.0;
    } else {
      l_mask = loss_mask(torch::cat(pm), torch::cat(gm));
      l_depth = depth_loss_rows(torch::cat(pd), torch::cat(gd), torch::cat(wd)).mean();
    }
    require_finite(l_mask, p.block, "mask");
    require_finite(l_cls, p.block, "class");
    require_finite(l_depth, p.block, "depth");
    bl.mask = l_mask.item<double>();
    bl.cls = l_cls.item<double>();
    bl.depth = l_depth.item<double>();
    rep.mask += bl.mask;
    rep.cls += bl.cls;
    rep.depth += bl.depth;
    rep.blocks.push_back(bl);

    auto term = opt.lambda_mask * l_mask + opt.lambda_class * l_cls + opt.lambda_depth * l_depth;
    total = total.defined() ? total + term : term;
  }
  rep.total = total;
  return rep;
}

// ---------------------------------------------------------------- optimization loop

torch::Tensor batch_images(const std::vector<const SceneSample*>& samples) {
  std::vector<torch::Tensor> imgs;
  for (const auto* s : samples) imgs.push_back(s->image.to(torch::kFloat32));
  return torch::stack(imgs);
}

namespace {

torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr<uint8_t>(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  auto c = t.contiguous();
  return std::string(reinterpret_cast<const char*>(c.data_ptr<uint8_t>()),
                     static_cast<size_t>(c.numel()));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Multiformer& model,
                     torch::optim::AdamW* optimizer, const RunConfig& cfg, int step) {
  torch::serialize::OutputArchive root;
  torch::serialize::OutputArchive weights;
  model->save(weights);
  root.write("model", weights);
  if (optimizer) {
    torch::serialize::OutputArchive opt;
    optimizer->save(opt);
    root.write("optimizer", opt);
  }
  root.write("step", torch::tensor(static_cast<int64_t>(step)));
  root.write("config", string_tensor(emit_toml(config_to_tree(cfg))));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  root.save_to(tmp.string());
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, Multiformer& model,
                           torch::optim::AdamW* optimizer) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive root;
  try {
    root.load_from(path.string());
    torch::serialize::InputArchive weights;
    root.read("model", weights);
    model->load(weights);
    if (optimizer) {
      torch::serialize::InputArchive opt;
      root.read("optimizer", opt);
      optimizer->load(opt);
    }
    Checkpoint ck;
    torch::Tensor step, config;
    root.read("step", step);
    root.read("config", config);
    ck.step = static_cast<int>(step.item<int64_t>());
    ck.config_toml = tensor_string(config);
    return ck;
  } catch (const c10::Error& e) {
    throw LoadError("cannot load checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

RunConfig checkpoint_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive root;
  torch::Tensor config;
  try {
    root.load_from(path.string());
    root.read("config", config);
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return config_from_tree(parse_toml(tensor_string(config)));
}

Multiformer build_model(const RunConfig& cfg) {
  torch::manual_seed(cfg.train.seed);
  return Multiformer(cfg.model, cfg.depth);
}

std::vector<size_t> batch_indices(uint64_t seed, int step, int batch, size_t dataset_size) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(step), 0x6261u};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<size_t> dist(0, dataset_size - 1);
  std::vector<size_t> idx(static_cast<size_t>(batch));
  for (auto& v : idx) v = dist(rng);
  return idx;
}

namespace {

std::mt19937_64 point_rng(uint64_t seed, int step) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(step), 0x7074u};
  return std::mt19937_64(seq);
}

double iso_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

}  // namespace

TrainResult train_loop(const RunConfig& cfg, const std::vector<SceneSample>& dataset,
                       const TrainOptions& opt) {
  if (dataset.empty()) throw TrainingError("training dataset is empty");
  for (const auto& s : dataset)
    if (s.panoptic.height != cfg.data.height || s.panoptic.width != cfg.data.width)
      throw ShapeError("frame " + s.sequence_id + "/" + std::to_string(s.frame_index) + " is " +
                       std::to_string(s.panoptic.height) + "x" + std::to_string(s.panoptic.width) +
                       " but data size is " + std::to_string(cfg.data.height) + "x" +
                       std::to_string(cfg.data.width));

  TrainResult result;
  result.model = build_model(cfg);
  auto& model = result.model;
  torch::optim::AdamW optimizer(
      model->parameters(), torch::optim::AdamWOptions(cfg.train.lr).weight_decay(cfg.train.weight_decay));

  int start = 0;
  if (opt.resume) start = load_checkpoint(*opt.resume, model, &optimizer).step;

  std::vector<FrameTargets> targets;
  targets.reserve(dataset.size());
  for (const auto& s : dataset) targets.push_back(extract_targets(s));

  std::ofstream log;
  const std::filesystem::path ckpt = opt.run_dir.empty() ? "" : opt.run_dir / "checkpoint.pt";
  if (!opt.run_dir.empty()) {
    std::filesystem::create_directories(opt.run_dir);
    log.open(opt.run_dir / "log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
  }

  const LossOptions lopt = LossOptions::from(cfg.train);
  const int64_t hw = static_cast<int64_t>(cfg.data.height) * cfg.data.width;
  const int n_blocks = cfg.model.N_B + 1;
  const int end = opt.stop_after >= 0 ? std::min(cfg.train.steps, opt.stop_after) : cfg.train.steps;
  model->train();

  for (int step = start; step < end; ++step) {
    const auto idx = batch_indices(cfg.train.seed, step, cfg.train.batch, dataset.size());
    std::vector<const SceneSample*> samples;
    std::vector<FrameTargets> batch_targets;
    for (size_t i : idx) {
      samples.push_back(&dataset[i]);
      batch_targets.push_back(targets[i]);
    }
    auto rng = point_rng(cfg.train.seed, step);
    std::vector<torch::Tensor> points;
    for (int b = 0; b < n_blocks; ++b)
      points.push_back(sample_points(cfg.train.batch, hw, cfg.train.points_per_mask, rng));

    double lr = cfg.train.lr;
    if (cfg.train.warmup_steps > 0)
      lr *= std::min(1.0, static_cast<double>(step + 1) / cfg.train.warmup_steps);
    for (auto& group : optimizer.param_groups())
      static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

    LossReport rep;
    try {
      auto out = model->forward(batch_images(samples));
      rep = total_loss(out.decoder.blocks, batch_targets, lopt, points);
    } catch (const TrainingError& e) {
      if (log.is_open())
        log << nlohmann::json{{"step", step}, {"error", e.what()}}.dump() << "\n" << std::flush;
      throw TrainingError("step " + std::to_string(step) + ": " + e.what() +
                          (ckpt.empty() ? "" : "; last good checkpoint kept at " + ckpt.string()));
    }
    optimizer.zero_grad();
    rep.total.backward();
    if (cfg.train.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.train.grad_clip);
    optimizer.step();

    TrainRecord r{step + 1, rep.total.item<double>(), rep.mask, rep.cls, rep.depth, lr};
    result.records.push_back(r);
    const bool log_now = cfg.train.log_every > 0 && (step + 1) % cfg.train.log_every == 0;
    if (log_now || step + 1 == end) {
      if (log.is_open())
        log << nlohmann::json{{"step", r.step},   {"loss", r.total}, {"mask", r.mask},
                              {"class", r.cls},   {"depth", r.depth}, {"lr", r.lr},
                              {"timestamp", iso_seconds()}}
                   .dump()
            << "\n"
            << std::flush;
      if (opt.on_record) opt.on_record(r);
    }
    if (opt.on_eval && cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0) {
      model->eval();
      nlohmann::json rec = opt.on_eval(step + 1, model);
      model->train();
      rec["step"] = step + 1;
      if (log.is_open()) log << rec.dump() << "\n" << std::flush;
    }
    if (!ckpt.empty() && cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0)
      save_checkpoint(ckpt, model, &optimizer, cfg, step + 1);
    result.final_step = step + 1;
  }
  if (result.final_step == 0) result.final_step = start;
  if (!ckpt.empty()) save_checkpoint(ckpt, model, &optimizer, cfg, result.final_step);
  model->eval();
  return result;
}

}  // namespace multiformer
