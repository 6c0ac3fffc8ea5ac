#include "multiformer/experiment.hpp"

#include <chrono>
#include <cstdlib>

#include "multiformer/errors.hpp"
#include "multiformer/inference.hpp"

namespace multiformer {

std::vector<SceneSample> Dataset::frames() const {
  std::vector<SceneSample> out;
  for (const auto& s : sequences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::filesystem::path cache_dir() {
  if (const char* env = std::getenv("MULTIFORMER_CACHE"); env && *env) return env;
  return std::filesystem::current_path() / ".multiformer_cache";
}

Dataset load_dataset(const std::filesystem::path& root) {
  Dataset d;
  d.manifests = discover_sequences(root);
  if (d.manifests.empty()) throw LoadError("no sequences found under " + root.string());
  d.classes = d.manifests.front().class_table;
  for (const auto& m : d.manifests) {
    if (m.class_table != d.classes)
      throw LoadError("sequence " + m.sequence_id + " has a different class table");
    d.sequences.push_back(load_sequence(m));
  }
  return d;
}

Dataset dataset_from_synthetic(const std::vector<SyntheticSequence>& seqs) {
  Dataset d;
  for (const auto& s : seqs) {
    d.manifests.push_back(s.manifest);
    d.sequences.push_back(s.samples);
  }
  if (!seqs.empty()) d.classes = seqs.front().manifest.class_table;
  return d;
}

MetricsReport evaluate_model(Multiformer& model, const Dataset& data, const RunConfig& cfg) {
  const auto is_thing = thing_flags(data.classes);
  std::vector<std::vector<FramePrediction>> preds;
  for (const auto& seq : data.sequences) preds.push_back(predict_sequence(model, seq, is_thing, cfg));
  return evaluate(preds, data.sequences, data.classes, cfg.eval);
}

ExperimentResult run_experiment(const RunConfig& cfg, const Dataset& data, const TrainOptions& opt) {
  if (cfg.model.num_classes != data.num_classes())
    throw ConfigError("model.num_classes = " + std::to_string(cfg.model.num_classes) +
                      " but the dataset has " + std::to_string(data.num_classes()) + " classes");
  ExperimentResult r;
  const auto t0 = std::chrono::steady_clock::now();
  r.train = train_loop(cfg, data.frames(), opt);
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.parameters = r.train.model->parameter_count();
  r.metrics = evaluate_model(r.train.model, data, cfg);
  return r;
}

double smoothed_decrease_fraction(const std::vector<TrainRecord>& records, int window) {
  std::vector<double> means;
  for (size_t i = 0; i + static_cast<size_t>(window) <= records.size(); i += static_cast<size_t>(window)) {
    double s = 0;
    for (size_t k = i; k < i + static_cast<size_t>(window); ++k) s += records[k].total;
    means.push_back(s / window);
  }
  if (means.size() < 2) return 0.0;
  int down = 0;
  for (size_t i = 1; i < means.size(); ++i) down += means[i] < means[i - 1];
  return static_cast<double>(down) / static_cast<double>(means.size() - 1);
}

}  // namespace multiformer
