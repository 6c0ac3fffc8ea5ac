#include "multiformer/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "multiformer/errors.hpp"
#include "multiformer/evaluation.hpp"
#include "multiformer/experiment.hpp"
#include "multiformer/inference.hpp"
#include "multiformer/plot.hpp"
#include "multiformer/png_io.hpp"
#include "multiformer/scene_data.hpp"
#include "multiformer/training.hpp"

namespace fs = std::filesystem;

namespace multiformer {

std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (size_t i = 0; i < extras.size(); ++i) {
    std::string tok = extras[i];
    if (tok.rfind("--", 0) == 0) tok = tok.substr(2);
    else if (tok.find('=') == std::string::npos)
      throw ConfigError("unexpected argument '" + extras[i] + "'");
    if (tok.find('=') != std::string::npos) {
      out.push_back(tok);
      continue;
    }
    if (i + 1 >= extras.size()) throw ConfigError("option '--" + tok + "' needs a value");
    out.push_back(tok + "=" + extras[++i]);
  }
  return out;
}

namespace {

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw LoadError("cannot write " + p.string());
  f << s;
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  if (!config_path.empty()) return load_config(config_path, overrides);
  return config_with_overrides(RunConfig{}, overrides);
}

fs::path default_data_root() { return cache_dir() / "synthetic"; }

Dataset require_dataset(const std::string& root) {
  const fs::path p = root.empty() ? default_data_root() : fs::path(root);
  if (!fs::exists(p)) throw LoadError("dataset not found: " + p.string());
  return load_dataset(p);
}

void check_classes(const RunConfig& cfg, const Dataset& data) {
  if (cfg.model.num_classes != data.num_classes())
    throw ConfigError("class-table mismatch: model has " + std::to_string(cfg.model.num_classes) +
                      " classes, dataset has " + std::to_string(data.num_classes()));
}

void write_loss_plot(const fs::path& path, const std::vector<TrainRecord>& records,
                     const std::string& title) {
  plot::Series total{"total", {}, {}}, mask{"mask", {}, {}}, cls{"class", {}, {}}, depth{"depth", {}, {}};
  for (const auto& r : records) {
    for (auto* s : {&total, &mask, &cls, &depth}) s->x.push_back(r.step);
    total.y.push_back(r.total);
    mask.y.push_back(r.mask);
    cls.y.push_back(r.cls);
    depth.y.push_back(r.depth);
  }
  plot::write_file(path.string(), plot::line_chart({total, mask, cls, depth}, title, "step", "loss", true));
}

void write_dvpq_heatmap(const fs::path& path, const MetricsReport& rep, const std::string& title) {
  std::vector<std::string> rows, cols;
  std::vector<std::vector<double>> values;
  std::vector<int> kappas;
  std::vector<double> lambdas;
  for (const auto& c : rep.dvpq) {
    if (std::find(kappas.begin(), kappas.end(), c.kappa) == kappas.end()) kappas.push_back(c.kappa);
    if (std::find(lambdas.begin(), lambdas.end(), c.lambda) == lambdas.end()) lambdas.push_back(c.lambda);
  }
  for (int k : kappas) cols.push_back("k=" + std::to_string(k));
  for (double l : lambdas) {
    std::ostringstream name;
    name << "lambda=" << l;
    rows.push_back(name.str());
    std::vector<double> row;
    for (int k : kappas) row.push_back(rep.dvpq_at(k, l)->all);
    values.push_back(row);
  }
  plot::write_file(path.string(), plot::heatmap(rows, cols, values, title));
}

void write_report(const fs::path& dir, const MetricsReport& rep, const RunConfig& cfg,
                  const std::string& method) {
  nlohmann::json j = rep.to_json();
  j["config"] = config_to_tree(cfg);
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  write_text(dir / "metrics.txt", rep.to_table(method));
  write_dvpq_heatmap(dir / "dvpq_heatmap.svg", rep, "DVPQ (" + method + ")");
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::string out;
  uint64_t seed = 0;
  int sequences = 8, frames = 6, height = 64, width = 64, min_objects = 1, max_objects = 3;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  for (auto [flag, v] : {std::pair{"--height", a.height}, std::pair{"--width", a.width}})
    if (v < 64 || v % 16 != 0)
      throw ConfigError(std::string(flag) + " must be a multiple of 16 and >= 64, got " + std::to_string(v));
  if (a.sequences < 1) throw ConfigError("--sequences must be >= 1");
  if (a.frames < 1) throw ConfigError("--frames must be >= 1");
  if (a.min_objects < 1 || a.max_objects < a.min_objects)
    throw ConfigError("--min-objects/--max-objects must satisfy 1 <= min <= max");
  SynthConfig sc;
  sc.seed = a.seed;
  sc.num_sequences = a.sequences;
  sc.frames_per_sequence = a.frames;
  sc.height = a.height;
  sc.width = a.width;
  sc.min_objects = a.min_objects;
  sc.max_objects = a.max_objects;
  const fs::path root = a.out.empty() ? default_data_root() : fs::path(a.out);
  const auto seqs = generate_synthetic(sc);
  for (const auto& s : seqs) write_sequence(root, s.manifest, s.samples);
  out << "wrote " << seqs.size() << " sequences x " << a.frames << " frames to " << root.string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config, data, out, resume;
  std::vector<std::string> overrides;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config, a.overrides);
  if (!a.data.empty()) cfg.data.root = a.data;
  const Dataset data = require_dataset(cfg.data.root);
  check_classes(cfg, data);
  const fs::path run_dir = a.out.empty() ? fs::path(cfg.output_dir) / cfg.experiment : fs::path(a.out);
  fs::create_directories(run_dir);
  write_text(run_dir / "config.toml", emit_toml(config_to_tree(cfg)));

  TrainOptions opt;
  opt.run_dir = run_dir;
  if (!a.resume.empty()) opt.resume = a.resume;
  opt.on_record = [&](const TrainRecord& r) {
    out << "step " << r.step << "  loss " << r.total << "  mask " << r.mask << "  class " << r.cls
        << "  depth " << r.depth << "\n"
        << std::flush;
  };
  opt.on_eval = [&](int step, Multiformer& model) {
    const MetricsReport rep = evaluate_model(model, data, cfg);
    out << "eval @" << step << "  PQ " << rep.pq.all << "  composite DVPQ " << rep.composite() << "\n";
    return nlohmann::json{{"eval", rep.to_json()}};
  };
  TrainResult res = train_loop(cfg, data.frames(), opt);
  write_loss_plot(run_dir / "loss_curve.svg", res.records, cfg.experiment);
  const MetricsReport rep = evaluate_model(res.model, data, cfg);
  write_report(run_dir, rep, cfg, to_string(cfg.model.variant));
  out << rep.to_table(to_string(cfg.model.variant));
  out << "checkpoint: " << (run_dir / "checkpoint.pt").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, out;
  bool gt_as_prediction = false;
  std::vector<std::string> overrides;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Dataset data;
  RunConfig cfg;
  if (a.gt_as_prediction) {
    cfg = config_with_overrides(a.checkpoint.empty() ? RunConfig{} : checkpoint_config(a.checkpoint),
                                a.overrides);
    data = require_dataset(a.data.empty() ? cfg.data.root : a.data);
  } else {
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required unless --gt-as-prediction is set");
    cfg = config_with_overrides(checkpoint_config(a.checkpoint), a.overrides);
    data = require_dataset(a.data.empty() ? cfg.data.root : a.data);
    check_classes(cfg, data);
  }
  MetricsReport rep;
  if (a.gt_as_prediction) {
    std::vector<std::vector<FramePrediction>> preds;
    for (const auto& seq : data.sequences) preds.push_back(gt_as_prediction(seq));
    rep = evaluate(preds, data.sequences, data.classes, cfg.eval);
  } else {
    Multiformer model(cfg.model, cfg.depth);
    load_checkpoint(a.checkpoint, model);
    rep = evaluate_model(model, data, cfg);
  }
  const fs::path dir = !a.out.empty()              ? fs::path(a.out)
                       : !a.checkpoint.empty()     ? fs::path(a.checkpoint).parent_path() / "eval"
                                                   : fs::path("eval");
  const std::string method = a.gt_as_prediction ? "gt" : to_string(cfg.model.variant);
  write_report(dir, rep, cfg, method);
  out << rep.to_table(method);
  out << "report: " << (dir / "metrics.json").string() << "\n";
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint, data, out;
  std::vector<std::string> overrides;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  RunConfig cfg = config_with_overrides(checkpoint_config(a.checkpoint), a.overrides);
  const Dataset data = require_dataset(a.data.empty() ? cfg.data.root : a.data);
  check_classes(cfg, data);
  Multiformer model(cfg.model, cfg.depth);
  load_checkpoint(a.checkpoint, model);
  const auto is_thing = thing_flags(data.classes);
  const fs::path root = a.out.empty() ? fs::path(a.checkpoint).parent_path() / "predictions" : fs::path(a.out);
  int frames = 0;
  for (size_t s = 0; s < data.sequences.size(); ++s) {
    const auto& m = data.manifests[s];
    const auto preds = predict_sequence(model, data.sequences[s], is_thing, cfg);
    const fs::path dir = root / m.sequence_id;
    fs::create_directories(dir / "panoptic");
    fs::create_directories(dir / "depth");
    nlohmann::json segs = nlohmann::json::array();
    for (size_t t = 0; t < preds.size(); ++t) {
      const auto& p = preds[t];
      const int w = static_cast<int>(p.pan.labels.width), h = static_cast<int>(p.pan.labels.height);
      std::vector<uint16_t> pan(p.pan.labels.data.begin(), p.pan.labels.data.end());
      std::vector<uint16_t> dep(p.depth.data.size());
      for (size_t k = 0; k < dep.size(); ++k)
        dep[k] = static_cast<uint16_t>(
            std::clamp(std::lround(static_cast<double>(p.depth.data[k]) * m.depth_scale), 0L, 65535L));
      const std::string file = m.frames[t] + ".png";
      png::write_gray16((dir / "panoptic" / file).string(), w, h, pan);
      png::write_gray16((dir / "depth" / file).string(), w, h, dep);
      nlohmann::json fj = nlohmann::json::array();
      for (const auto& sg : p.pan.segments)
        fj.push_back({{"id", sg.segment_id}, {"class", sg.class_id}, {"score", sg.score},
                      {"thing", sg.is_thing}, {"query", sg.query_index}});
      segs.push_back({{"frame", m.frames[t]}, {"segments", fj}});
      ++frames;
    }
    write_text(dir / "segments.json", segs.dump(2) + "\n");
  }
  out << "wrote predictions for " << frames << " frames to " << root.string() << "\n";
  return kExitOk;
}

struct AblateArgs {
  std::string config, data, out, variants = "unified,parallel,concat,sequential,hybrid", seeds = "0";
  std::vector<std::string> arms;
  std::vector<std::string> overrides;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

struct Arm {
  std::string name;
  std::vector<std::string> overrides;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  const RunConfig base = resolve_config(a.config, a.overrides);
  const Dataset data = require_dataset(a.data.empty() ? base.data.root : a.data);
  check_classes(base, data);
  std::vector<Arm> arms;
  if (!a.arms.empty()) {
    for (const auto& spec : a.arms) {
      const auto colon = spec.find(':');
      Arm arm{spec.substr(0, colon), {}};
      if (colon != std::string::npos) arm.overrides = split(spec.substr(colon + 1), ',');
      arms.push_back(arm);
    }
  } else {
    for (const auto& v : split(a.variants, ',')) arms.push_back({v, {"model.variant=" + v}});
  }
  std::vector<uint64_t> seeds;
  for (const auto& s : split(a.seeds, ',')) seeds.push_back(std::stoull(s));
  if (seeds.empty()) throw ConfigError("--seeds must list at least one seed");
  // validate every arm before any training starts
  std::vector<RunConfig> arm_cfgs;
  for (const auto& arm : arms) arm_cfgs.push_back(config_with_overrides(base, arm.overrides));

  const fs::path root = a.out.empty() ? fs::path(base.output_dir) / (base.experiment + "_ablate") : fs::path(a.out);
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream table;
  table << "| arm | DVPQ | PQ | AbsRel | RMSE | params | status |\n|---|---|---|---|---|---|---|\n";
  std::vector<plot::Series> curves;
  for (size_t i = 0; i < arms.size(); ++i) {
    double dvpq = 0, pq = 0, absrel = 0, rmse = 0;
    int64_t params = 0;
    std::string status = "ok";
    nlohmann::json per_seed = nlohmann::json::array();
    try {
      for (uint64_t seed : seeds) {
        RunConfig cfg = arm_cfgs[i];
        cfg.train.seed = seed;
        TrainOptions opt;
        opt.run_dir = root / arms[i].name / ("seed" + std::to_string(seed));
        const ExperimentResult r = run_experiment(cfg, data, opt);
        write_report(opt.run_dir, r.metrics, cfg, arms[i].name);
        dvpq += r.metrics.composite();
        pq += r.metrics.pq.all;
        absrel += r.metrics.depth ? r.metrics.depth->abs_rel : NAN;
        rmse += r.metrics.depth ? r.metrics.depth->rmse : NAN;
        params = r.parameters;
        per_seed.push_back({{"seed", seed}, {"composite", r.metrics.composite()}, {"pq", r.metrics.pq.all}});
        if (seed == seeds.front()) {
          plot::Series s{arms[i].name, {}, {}};
          for (const auto& rec : r.train.records) {
            s.x.push_back(rec.step);
            s.y.push_back(rec.total);
          }
          curves.push_back(s);
        }
        out << arms[i].name << " seed " << seed << ": DVPQ " << r.metrics.composite() << "  PQ "
            << r.metrics.pq.all << "\n"
            << std::flush;
      }
      const double n = static_cast<double>(seeds.size());
      dvpq /= n;
      pq /= n;
      absrel /= n;
      rmse /= n;
    } catch (const std::exception& e) {
      status = std::string("failed: ") + e.what();
      out << arms[i].name << ": " << status << "\n";
    }
    char line[256];
    if (status == "ok")
      std::snprintf(line, sizeof line, "| %s | %.1f | %.1f | %.4f | %.3f | %lld | ok |\n", arms[i].name.c_str(),
                    dvpq, pq, absrel, rmse, static_cast<long long>(params));
    else
      std::snprintf(line, sizeof line, "| %s | - | - | - | - | - | failed |\n", arms[i].name.c_str());
    table << line;
    rows.push_back({{"arm", arms[i].name}, {"overrides", arms[i].overrides}, {"status", status},
                    {"dvpq", dvpq}, {"pq", pq}, {"abs_rel", absrel}, {"rmse", rmse},
                    {"parameters", params}, {"seeds", per_seed}});
  }
  write_text(root / "ablation.md", table.str());
  write_text(root / "ablation.json", rows.dump(2) + "\n");
  if (!curves.empty())
    plot::write_file((root / "loss_curves.svg").string(),
                     plot::line_chart(curves, "training loss", "step", "loss", true));
  out << table.str();
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Depth-aware video panoptic segmentation: data, training, evaluation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", sa.out, "dataset root (default $MULTIFORMER_CACHE/synthetic)");
  synth->add_option("--seed", sa.seed, "generator seed");
  synth->add_option("--sequences", sa.sequences, "number of sequences");
  synth->add_option("--frames", sa.frames, "frames per sequence");
  synth->add_option("--height", sa.height, "frame height");
  synth->add_option("--width", sa.width, "frame width");
  synth->add_option("--min-objects", sa.min_objects, "minimum objects per sequence");
  synth->add_option("--max-objects", sa.max_objects, "maximum objects per sequence");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model; extra --section.key value pairs override the config");
  train->add_option("--config", ta.config, "TOML config file");
  train->add_option("--data", ta.data, "dataset root");
  train->add_option("--out", ta.out, "run directory (default <output_dir>/<experiment>)");
  train->add_option("--resume", ta.resume, "checkpoint to resume from");
  train->allow_extras();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint file");
  eval->add_option("--data", ea.data, "dataset root");
  eval->add_option("--out", ea.out, "report directory");
  eval->add_flag("--gt-as-prediction", ea.gt_as_prediction, "score the GT itself (debug)");
  eval->allow_extras();

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "write predicted panoptic and depth maps");
  infer->add_option("--checkpoint", ia.checkpoint, "checkpoint file")->required();
  infer->add_option("--data", ia.data, "dataset root");
  infer->add_option("--out", ia.out, "output directory");
  infer->allow_extras();

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "train and compare decoder variants or config arms");
  ablate->add_option("--config", aa.config, "TOML config file");
  ablate->add_option("--data", aa.data, "dataset root");
  ablate->add_option("--out", aa.out, "output directory");
  ablate->add_option("--variants", aa.variants, "comma-separated decoder variants");
  ablate->add_option("--seeds", aa.seeds, "comma-separated seeds");
  ablate->add_option("--arm", aa.arms, "NAME:key=value,key=value (repeatable; replaces --variants)");
  ablate->allow_extras();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUserError;
  }

  try {
    if (*synth) return cmd_synth(sa, out);
    if (*train) {
      ta.overrides = collect_overrides(train->remaining());
      return cmd_train(ta, out);
    }
    if (*eval) {
      ea.overrides = collect_overrides(eval->remaining());
      return cmd_eval(ea, out);
    }
    if (*infer) {
      ia.overrides = collect_overrides(infer->remaining());
      return cmd_infer(ia, out);
    }
    if (*ablate) {
      aa.overrides = collect_overrides(ablate->remaining());
      return cmd_ablate(aa, out);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const LoadError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUserError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternalError;
  }
  return kExitInternalError;
}

}  // namespace multiformer
