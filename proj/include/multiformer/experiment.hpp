#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "multiformer/config.hpp"
#include "multiformer/evaluation.hpp"
#include "multiformer/scene_data.hpp"
#include "multiformer/training.hpp"

namespace multiformer {

struct Dataset {
  std::vector<SequenceManifest> manifests;
  std::vector<std::vector<SceneSample>> sequences;
  ClassTable classes;

  std::vector<SceneSample> frames() const;
  int num_classes() const { return static_cast<int>(classes.size()); }
};

/// $MULTIFORMER_CACHE, or .multiformer_cache in the working directory.
std::filesystem::path cache_dir();

Dataset load_dataset(const std::filesystem::path& root);
Dataset dataset_from_synthetic(const std::vector<SyntheticSequence>& seqs);

/// Inference over every sequence (tracking restarts per sequence), then metrics.
MetricsReport evaluate_model(Multiformer& model, const Dataset& data, const RunConfig& cfg);

struct ExperimentResult {
  TrainResult train;
  MetricsReport metrics;
  int64_t parameters = 0;
  double train_seconds = 0.0;
};

ExperimentResult run_experiment(const RunConfig& cfg, const Dataset& data,
                                const TrainOptions& opt = {});

/// Fraction of 100-step smoothing windows whose mean loss is below the previous window's.
double smoothed_decrease_fraction(const std::vector<TrainRecord>& records, int window = 100);

}  // namespace multiformer
