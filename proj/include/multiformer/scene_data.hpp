#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "multiformer/grid.hpp"

namespace multiformer {

struct ClassInfo {
  int id = 0;
  std::string name;
  bool is_thing = false;

  bool operator==(const ClassInfo&) const = default;
};

using ClassTable = std::vector<ClassInfo>;

/// Cityscapes-style table: stuff classes first, then things.
ClassTable make_class_table(int num_stuff = 11, int num_thing = 8);
std::vector<bool> thing_flags(const ClassTable& table);

/// One annotated frame.
struct SceneSample {
  torch::Tensor image;  // float [3, H, W] in [0, 1]
  LabelMap panoptic;    // class*1000 + instance, kVoidLabel for void
  DepthMap depth;       // meters, 0 = invalid
  int frame_index = 0;
  std::string sequence_id;
};

struct SequenceManifest {
  std::string sequence_id;
  std::vector<std::string> frames;  // frame stems, e.g. "000003"
  ClassTable class_table;
  double depth_scale = 256.0;
  int num_classes = 19;
  std::filesystem::path root;  // directory holding this sequence; not serialized
};

enum class ShapeKind { kCircle, kRectangle };

/// A thing object moving at constant velocity with constant depth.
struct ObjectSpec {
  int class_id = 0;
  int instance_id = 1;
  ShapeKind shape = ShapeKind::kCircle;
  double cx = 0, cy = 0;  // centre at frame 0, pixels
  double vx = 0, vy = 0;  // pixels per frame
  double half_w = 8, half_h = 8;
  double depth = 10.0;
  float color[3] = {0.5f, 0.5f, 0.5f};
};

/// Full description of one synthetic sequence; frames are rendered from it.
struct SceneLayout {
  int height = 64;
  int width = 64;
  int horizon = 24;         // first road row
  int building_top = 12;    // first building row (sky above)
  int sky_class = 10;
  int building_class = 2;
  int road_class = 0;
  double building_depth = 50.0;
  double road_scale = 60.0;  // depth(y) = road_scale / (y - horizon + 1)
  double d_min = 1.0;
  double d_max = 80.0;
  double haze_distance = 60.0;
  double noise = 0.02;
  uint64_t noise_seed = 0;
  std::vector<ObjectSpec> objects;
};

struct SynthConfig {
  int num_sequences = 8;
  int frames_per_sequence = 6;
  int height = 64;
  int width = 64;
  int min_objects = 1;
  int max_objects = 3;
  double object_depth_min = 4.0;
  double object_depth_max = 16.0;
  double motion_amplitude = 1.5;  // max |velocity| in pixels per frame
  double d_min = 1.0;
  double d_max = 80.0;
  double noise = 0.02;
  int num_stuff_classes = 11;
  int num_thing_classes = 8;
  uint64_t seed = 0;
};

struct SyntheticSequence {
  SequenceManifest manifest;
  SceneLayout layout;
  std::vector<SceneSample> samples;
};

/// Renders frame `t` of a layout. Nearer objects occlude farther ones.
SceneSample render_frame(const SceneLayout& layout, int t, const std::string& sequence_id);

/// Throws ConfigError on invalid sizes or empty object range.
std::vector<SyntheticSequence> generate_synthetic(const SynthConfig& cfg);

// ---- on-disk layout: <root>/<seq>/{image,panoptic,depth}/<frame>.png + manifest.json

std::filesystem::path manifest_path(const std::filesystem::path& dataset_root,
                                    const std::string& sequence_id);
void write_sequence(const std::filesystem::path& dataset_root, const SequenceManifest& manifest,
                    const std::vector<SceneSample>& samples);
SequenceManifest read_manifest(const std::filesystem::path& manifest_file);
/// Manifests of every sequence under `dataset_root`, sorted by sequence id.
std::vector<SequenceManifest> discover_sequences(const std::filesystem::path& dataset_root);

SceneSample load_frame(const SequenceManifest& manifest, size_t index);
std::vector<SceneSample> load_sequence(const SequenceManifest& manifest);

}  // namespace multiformer
