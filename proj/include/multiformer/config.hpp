#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace multiformer {

enum class DecoderVariant { kUnified, kParallel, kConcat, kSequential, kHybrid };
enum class DepthMode { kBaselineMinMax, kLearnedLog };
enum class DepthMerge { kCopyPaste, kDynamic };

DecoderVariant parse_variant(const std::string& tag);
std::string to_string(DecoderVariant v);
const std::vector<DecoderVariant>& all_variants();

struct ModelConfig {
  int P = 4;
  int N_D = 64;
  std::vector<int> backbone_channels{32, 64, 128, 256};
  int ctx_stride = 4;
  DecoderVariant variant = DecoderVariant::kHybrid;
  int N_B = 3;
  int N_Q = 32;
  int heads = 8;
  bool context_adapter = true;
  double query_init_variance = 1e-2;
  int num_classes = 19;
};

struct DepthConfig {
  DepthMode mode = DepthMode::kLearnedLog;
  double d_min = 1.0;
  double d_max = 80.0;
  double tau = 0.1;
  DepthMerge merge = DepthMerge::kDynamic;
  double score_floor = 0.05;
};

struct PanopticConfig {
  double score_thresh = 0.8;
  double overlap_thresh = 0.8;
};

struct TrackConfig {
  double s_min = 0.0;
};

struct TrainConfig {
  int steps = 2000;
  double lr = 5e-4;
  int batch = 4;
  uint64_t seed = 0;
  double lambda_mask = 5.0;
  double lambda_class = 1.0;
  double lambda_depth = 1.0;
  int points_per_mask = 1024;  // 0 = full grid
  bool deep_supervision = true;
  double no_object_weight = 0.1;
  double weight_decay = 0.05;
  int warmup_steps = 100;
  double grad_clip = 1.0;  // global norm; 0 = off
  int log_every = 10;
  int eval_every = 0;  // 0 = only at the end
  int checkpoint_every = 500;
};

struct EvalConfig {
  std::vector<int> kappas{1, 2, 3, 4};
  std::vector<double> lambdas{0.10, 0.25, 0.50};
};

struct DataConfig {
  std::string root;
  int height = 64;
  int width = 64;
};

struct RunConfig {
  std::string experiment = "default";
  std::string output_dir = "runs";
  ModelConfig model;
  DepthConfig depth;
  PanopticConfig panoptic;
  TrackConfig track;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;
};

/// Full default key tree. Every accepted key appears here.
nlohmann::json default_config_tree();

/// Merges `overrides` into `base`. Keys absent from `base` are reported in `errors`.
void merge_config_tree(nlohmann::json& base, const nlohmann::json& overrides,
                       std::vector<std::string>& errors, const std::string& prefix = "");

/// Applies a dotted override such as `train.deep_supervision=off`.
void apply_override(nlohmann::json& tree, const std::string& dotted_key, const std::string& value,
                    std::vector<std::string>& errors);

/// Validates and converts. Throws ConfigError listing every problem found.
RunConfig config_from_tree(const nlohmann::json& tree);
nlohmann::json config_to_tree(const RunConfig& cfg);

/// Loads a TOML-subset file, applies dotted overrides, validates.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig config_with_overrides(const RunConfig& base, const std::vector<std::string>& overrides);

/// Parses the TOML subset used for run configs: [a.b] tables, key = value,
/// strings, integers, floats, booleans, flat arrays, `#` comments.
nlohmann::json parse_toml(const std::string& text);
std::string emit_toml(const nlohmann::json& tree);

}  // namespace multiformer
