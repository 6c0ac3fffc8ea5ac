#include "multiformer/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_map>

#include "multiformer/errors.hpp"

namespace multiformer {

PQStat& PQStat::operator+=(const PQStat& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  iou += o.iou;
  return *this;
}

void accumulate(PQStats& into, const PQStats& add) {
  for (const auto& [c, s] : add) into[c] += s;
}

PQStats compute_pq_stats(const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_shape(gt))
    throw ShapeError("compute_pq: prediction " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + " vs GT " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width));
  std::map<int32_t, int64_t> pred_area, gt_area, pred_void;
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const int32_t p = pred.data[i], g = gt.data[i];
    if (g != kVoidLabel) ++gt_area[g];
    if (p == kVoidLabel) continue;
    ++pred_area[p];
    if (g == kVoidLabel)
      ++pred_void[p];
    else
      ++inter[{p, g}];
  }

  PQStats stats;
  std::map<int32_t, bool> pred_matched, gt_matched;
  for (const auto& [key, n] : inter) {
    const auto [p, g] = key;
    if (class_of(p) != class_of(g)) continue;
    const double uni = static_cast<double>(pred_area[p] + gt_area[g] - n - pred_void[p]);
    const double iou = static_cast<double>(n) / uni;
    if (iou > 0.5) {
      auto& s = stats[class_of(g)];
      ++s.tp;
      s.iou += iou;
      pred_matched[p] = true;
      gt_matched[g] = true;
    }
  }
  for (const auto& [g, area] : gt_area)
    if (!gt_matched.count(g)) ++stats[class_of(g)].fn;
  for (const auto& [p, area] : pred_area) {
    if (pred_matched.count(p)) continue;
    const auto it = pred_void.find(p);
    const int64_t v = it == pred_void.end() ? 0 : it->second;
    if (static_cast<double>(v) / static_cast<double>(area) > 0.5) continue;
    ++stats[class_of(p)].fp;
  }
  return stats;
}

double class_pq(const PQStat& s) {
  const double den = s.tp + 0.5 * s.fp + 0.5 * s.fn;
  return den > 0 ? s.iou / den : 0.0;
}

SplitScore pq_score(const PQStats& stats, const std::vector<bool>& is_thing) {
  SplitScore out;
  double sum_all = 0, sum_th = 0, sum_st = 0;
  for (const auto& [c, s] : stats) {
    if (s.tp + s.fp + s.fn == 0) continue;
    const double v = class_pq(s);
    const bool thing = c >= 0 && c < static_cast<int>(is_thing.size()) && is_thing[static_cast<size_t>(c)];
    sum_all += v;
    ++out.n_all;
    if (thing) {
      sum_th += v;
      ++out.n_things;
    } else {
      sum_st += v;
      ++out.n_stuff;
    }
  }
  if (out.n_all) out.all = 100.0 * sum_all / out.n_all;
  if (out.n_things) out.things = 100.0 * sum_th / out.n_things;
  if (out.n_stuff) out.stuff = 100.0 * sum_st / out.n_stuff;
  return out;
}

SplitScore compute_pq(const LabelMap& pred, const LabelMap& gt, const std::vector<bool>& is_thing) {
  return pq_score(compute_pq_stats(pred, gt), is_thing);
}

namespace {

struct WindowMean {
  double all = 0, things = 0, stuff = 0;
  int n_all = 0, n_things = 0, n_stuff = 0;

  void add(const SplitScore& s) {
    if (s.n_all) {
      all += s.all;
      ++n_all;
    }
    if (s.n_things) {
      things += s.things;
      ++n_things;
    }
    if (s.n_stuff) {
      stuff += s.stuff;
      ++n_stuff;
    }
  }
  SplitScore result() const {
    SplitScore r;
    r.n_all = n_all;
    r.n_things = n_things;
    r.n_stuff = n_stuff;
    if (n_all) r.all = all / n_all;
    if (n_things) r.things = things / n_things;
    if (n_stuff) r.stuff = stuff / n_stuff;
    return r;
  }
};

}  // namespace

SplitScore compute_vpq(const std::vector<std::vector<LabelMap>>& preds,
                       const std::vector<std::vector<LabelMap>>& gts, int kappa,
                       const std::vector<bool>& is_thing) {
  if (kappa < 1) throw EvaluationError("window size must be >= 1, got " + std::to_string(kappa));
  if (preds.size() != gts.size())
    throw EvaluationError("prediction/GT sequence count mismatch");
  WindowMean mean;
  for (size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != gts[s].size())
      throw EvaluationError("sequence " + std::to_string(s) + ": " + std::to_string(preds[s].size()) +
                            " predicted frames for " + std::to_string(gts[s].size()) + " GT frames");
    const int t_count = static_cast<int>(gts[s].size());
    for (int t = 0; t + kappa <= t_count; ++t) {
      std::vector<const LabelMap*> pw, gw;
      for (int k = 0; k < kappa; ++k) {
        pw.push_back(&preds[s][static_cast<size_t>(t + k)]);
        gw.push_back(&gts[s][static_cast<size_t>(t + k)]);
      }
      mean.add(compute_pq(stack_rows(pw), stack_rows(gw), is_thing));
    }
  }
  return mean.result();
}

LabelMap depth_filtered(const LabelMap& pred, const DepthMap& pred_depth, const DepthMap& gt_depth,
                        double lambda) {
  if (!pred_depth.same_shape(pred) || pred_depth.data.empty())
    throw EvaluationError("predicted depth missing or does not match the panoptic map");
  if (!gt_depth.same_shape(pred)) throw EvaluationError("GT depth does not match the panoptic map");
  LabelMap out = pred;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double g = gt_depth.data[i];
    if (!(g > 0)) continue;
    const double err = std::abs(static_cast<double>(pred_depth.data[i]) - g) / g;
    if (err > lambda) out.data[i] = kVoidLabel;
  }
  return out;
}

SplitScore compute_dvpq(const std::vector<std::vector<LabelMap>>& preds,
                        const std::vector<std::vector<DepthMap>>& pred_depth,
                        const std::vector<std::vector<LabelMap>>& gts,
                        const std::vector<std::vector<DepthMap>>& gt_depth, int kappa,
                        double lambda, const std::vector<bool>& is_thing) {
  if (preds.size() != pred_depth.size() || gts.size() != gt_depth.size())
    throw EvaluationError("depth maps missing for some sequences");
  std::vector<std::vector<LabelMap>> filtered(preds.size());
  for (size_t s = 0; s < preds.size(); ++s) {
    if (pred_depth[s].size() != preds[s].size() || gt_depth[s].size() != preds[s].size())
      throw EvaluationError("sequence " + std::to_string(s) + ": missing depth for some frames");
    for (size_t t = 0; t < preds[s].size(); ++t)
      filtered[s].push_back(depth_filtered(preds[s][t], pred_depth[s][t], gt_depth[s][t], lambda));
  }
  return compute_vpq(filtered, gts, kappa, is_thing);
}

std::optional<DepthErrors> compute_depth_errors(const std::vector<const DepthMap*>& pred,
                                                const std::vector<const DepthMap*>& gt) {
  if (pred.size() != gt.size()) throw EvaluationError("depth error: frame count mismatch");
  double abs_rel = 0, sq = 0;
  int64_t n = 0;
  for (size_t f = 0; f < pred.size(); ++f) {
    if (!pred[f]->same_shape(*gt[f])) throw ShapeError("depth error: shape mismatch");
    for (size_t i = 0; i < gt[f]->data.size(); ++i) {
      const double g = gt[f]->data[i];
      if (!(g > 0)) continue;
      const double d = pred[f]->data[i] - g;
      abs_rel += std::abs(d) / g;
      sq += d * d;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return DepthErrors{abs_rel / n, std::sqrt(sq / n), n};
}

std::optional<DepthErrors> compute_depth_errors(const DepthMap& pred, const DepthMap& gt) {
  return compute_depth_errors(std::vector<const DepthMap*>{&pred}, std::vector<const DepthMap*>{&gt});
}

double MetricsReport::composite() const {
  if (dvpq.empty()) return 0.0;
  double s = 0;
  for (const auto& c : dvpq) s += c.score.all;
  return s / static_cast<double>(dvpq.size());
}

const SplitScore* MetricsReport::dvpq_at(int kappa, double lambda) const {
  for (const auto& c : dvpq)
    if (c.kappa == kappa && std::abs(c.lambda - lambda) < 1e-12) return &c.score;
  return nullptr;
}

namespace {

nlohmann::json split_json(const SplitScore& s) {
  return {{"all", s.all}, {"things", s.things}, {"stuff", s.stuff},
          {"n_all", s.n_all}, {"n_things", s.n_things}, {"n_stuff", s.n_stuff}};
}

std::string fmt(double v, int prec = 1) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string pad(const std::string& s, size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

std::string lpad(const std::string& s, size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

}  // namespace

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["frames"] = frames;
  j["sequences"] = sequences;
  j["pq"] = split_json(pq);
  for (const auto& [k, s] : vpq) j["vpq"][std::to_string(k)] = split_json(s);
  j["dvpq"] = nlohmann::json::array();
  for (const auto& c : dvpq) {
    auto cell = split_json(c.score);
    cell["kappa"] = c.kappa;
    cell["lambda"] = c.lambda;
    j["dvpq"].push_back(cell);
  }
  j["composite"] = composite();
  j["skipped_kappa"] = skipped_kappas;
  if (depth) {
    j["abs_rel"] = depth->abs_rel;
    j["rmse"] = depth->rmse;
    j["depth_pixels"] = depth->pixels;
  } else {
    j["abs_rel"] = nullptr;
    j["rmse"] = nullptr;
  }
  j["per_class"] = nlohmann::json::array();
  for (const auto& r : per_class)
    j["per_class"].push_back({{"id", r.id}, {"name", r.name}, {"thing", r.is_thing},
                              {"tp", r.stat.tp}, {"fp", r.stat.fp}, {"fn", r.stat.fn},
                              {"iou_sum", r.stat.iou}, {"pq", r.pq}});
  return j;
}

std::string MetricsReport::to_table(const std::string& method) const {
  std::ostringstream os;
  std::vector<int> kappas;
  std::vector<double> lambdas;
  for (const auto& c : dvpq) {
    if (std::find(kappas.begin(), kappas.end(), c.kappa) == kappas.end()) kappas.push_back(c.kappa);
    if (std::find(lambdas.begin(), lambdas.end(), c.lambda) == lambdas.end()) lambdas.push_back(c.lambda);
  }
  const size_t wm = std::max<size_t>(method.size() + 9, 18), wc = 8;
  for (double lam : lambdas) {
    os << lpad("DVPQ lambda=" + fmt(lam, 2), wm);
    for (int k : kappas) os << pad("k=" + std::to_string(k), wc);
    os << pad("avg", wc) << "\n";
    for (int split = 0; split < 3; ++split) {
      static const char* names[] = {"all", "things", "stuff"};
      os << lpad(method + " " + names[split], wm);
      double sum = 0;
      for (int k : kappas) {
        const SplitScore* s = dvpq_at(k, lam);
        const double v = split == 0 ? s->all : split == 1 ? s->things : s->stuff;
        sum += v;
        os << pad(fmt(v), wc);
      }
      os << pad(fmt(kappas.empty() ? 0.0 : sum / kappas.size()), wc) << "\n";
    }
    os << "\n";
  }
  os << lpad("VPQ", wm);
  for (const auto& [k, s] : vpq) os << pad("k=" + std::to_string(k), wc);
  os << "\n" << lpad(method, wm);
  for (const auto& [k, s] : vpq) os << pad(fmt(s.all), wc);
  os << "\n\n";
  os << "PQ " << fmt(pq.all) << " (things " << fmt(pq.things) << ", stuff " << fmt(pq.stuff) << ")";
  if (depth)
    os << "  AbsRel " << fmt(depth->abs_rel, 4) << "  RMSE " << fmt(depth->rmse, 3) << " m";
  else
    os << "  AbsRel n/a  RMSE n/a";
  os << "\n";
  return os.str();
}

MetricsReport evaluate(const std::vector<std::vector<FramePrediction>>& preds,
                       const std::vector<std::vector<SceneSample>>& gts, const ClassTable& classes,
                       const EvalConfig& cfg) {
  if (preds.size() != gts.size()) throw EvaluationError("prediction/GT sequence count mismatch");
  const std::vector<bool> is_thing = thing_flags(classes);
  std::vector<std::vector<LabelMap>> pl(preds.size()), gl(gts.size());
  std::vector<std::vector<DepthMap>> pd(preds.size()), gd(gts.size());
  std::vector<const DepthMap*> pd_flat, gd_flat;
  MetricsReport rep;
  PQStats total;
  rep.sequences = static_cast<int>(gts.size());
  for (size_t s = 0; s < gts.size(); ++s) {
    if (preds[s].size() != gts[s].size())
      throw EvaluationError("sequence " + std::to_string(s) + ": frame count mismatch");
    for (size_t t = 0; t < gts[s].size(); ++t) {
      pl[s].push_back(preds[s][t].pan.labels);
      gl[s].push_back(gts[s][t].panoptic);
      pd[s].push_back(preds[s][t].depth);
      gd[s].push_back(gts[s][t].depth);
      accumulate(total, compute_pq_stats(pl[s].back(), gl[s].back()));
      pd_flat.push_back(&preds[s][t].depth);
      gd_flat.push_back(&gts[s][t].depth);
      ++rep.frames;
    }
  }
  rep.pq = pq_score(total, is_thing);
  for (const auto& [c, st] : total) {
    ClassRow row;
    row.id = c;
    if (c >= 0 && c < static_cast<int>(classes.size())) {
      row.name = classes[static_cast<size_t>(c)].name;
      row.is_thing = classes[static_cast<size_t>(c)].is_thing;
    }
    row.stat = st;
    row.pq = 100.0 * class_pq(st);
    rep.per_class.push_back(row);
  }
  size_t longest = 0;
  for (const auto& seq : gts) longest = std::max(longest, seq.size());
  std::vector<int> kappas;
  for (int k : cfg.kappas) {
    if (static_cast<size_t>(k) > longest)
      rep.skipped_kappas.push_back(k);  // no complete window anywhere
    else
      kappas.push_back(k);
  }
  for (int k : kappas) rep.vpq[k] = compute_vpq(pl, gl, k, is_thing);
  for (double lam : cfg.lambdas)
    for (int k : kappas) rep.dvpq.push_back({k, lam, compute_dvpq(pl, pd, gl, gd, k, lam, is_thing)});
  rep.depth = compute_depth_errors(pd_flat, gd_flat);
  return rep;
}

}  // namespace multiformer
