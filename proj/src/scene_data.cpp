#include "multiformer/scene_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "multiformer/errors.hpp"
#include "multiformer/png_io.hpp"

namespace multiformer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Portable uniform draws; std distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed)) {}
  uint64_t next() {
    state_ = splitmix64(state_);
    return state_;
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(next() % static_cast<uint64_t>(hi - lo + 1));
  }

 private:
  uint64_t state_;
};

const char* const kCityscapesStuff[] = {"road", "sidewalk", "building", "wall",
                                        "fence", "pole", "traffic light", "traffic sign",
                                        "vegetation", "terrain", "sky"};
const char* const kCityscapesThing[] = {"person", "rider", "car", "truck",
                                        "bus", "train", "motorcycle", "bicycle"};

const float kThingPalette[8][3] = {{0.86f, 0.08f, 0.24f}, {1.00f, 0.55f, 0.00f},
                                   {0.00f, 0.00f, 0.90f}, {0.00f, 0.60f, 0.40f},
                                   {0.90f, 0.85f, 0.10f}, {0.50f, 0.00f, 0.60f},
                                   {0.00f, 0.75f, 0.85f}, {0.95f, 0.40f, 0.70f}};
const float kSky[3] = {0.55f, 0.70f, 0.95f};
const float kBuilding[3] = {0.55f, 0.40f, 0.30f};
const float kRoad[3] = {0.30f, 0.30f, 0.34f};
const float kHaze[3] = {0.80f, 0.82f, 0.85f};

bool inside(const ObjectSpec& o, double cx, double cy, double px, double py) {
  const double dx = px - cx, dy = py - cy;
  if (o.shape == ShapeKind::kCircle) {
    return (dx * dx) / (o.half_w * o.half_w) + (dy * dy) / (o.half_h * o.half_h) <= 1.0;
  }
  return std::abs(dx) <= o.half_w && std::abs(dy) <= o.half_h;
}

float quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

float quantize_depth(double meters, double scale) {
  const long q = std::clamp(std::lround(meters * scale), 0L, 65535L);
  return static_cast<float>(static_cast<double>(q) / scale);
}

std::string frame_stem(int t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", t);
  return buf;
}

}  // namespace

ClassTable make_class_table(int num_stuff, int num_thing) {
  if (num_stuff < 3 || num_thing < 1)
    throw ConfigError("class table needs >= 3 stuff and >= 1 thing classes");
  const bool cityscapes = num_stuff == 11 && num_thing == 8;
  ClassTable table;
  for (int i = 0; i < num_stuff; ++i)
    table.push_back({i, cityscapes ? kCityscapesStuff[i] : "stuff_" + std::to_string(i), false});
  for (int i = 0; i < num_thing; ++i)
    table.push_back(
        {num_stuff + i, cityscapes ? kCityscapesThing[i] : "thing_" + std::to_string(i), true});
  return table;
}

std::vector<bool> thing_flags(const ClassTable& table) {
  int n = 0;
  for (const auto& c : table) n = std::max(n, c.id + 1);
  std::vector<bool> flags(static_cast<size_t>(n), false);
  for (const auto& c : table) flags[static_cast<size_t>(c.id)] = c.is_thing;
  return flags;
}

SceneSample render_frame(const SceneLayout& L, int t, const std::string& sequence_id) {
  SceneSample s;
  s.frame_index = t;
  s.sequence_id = sequence_id;
  s.panoptic = LabelMap(L.height, L.width, kVoidLabel);
  s.depth = DepthMap(L.height, L.width, 0.0f);
  s.image = torch::zeros({3, L.height, L.width}, torch::kFloat32);
  auto img = s.image.accessor<float, 3>();

  // Draw order: farthest first so that nearer objects win; ties by instance id.
  std::vector<const ObjectSpec*> order;
  for (const auto& o : L.objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(), [](const ObjectSpec* a, const ObjectSpec* b) {
    if (a->depth != b->depth) return a->depth > b->depth;
    return a->instance_id > b->instance_id;
  });

  const uint64_t frame_noise = splitmix64(L.noise_seed ^ (static_cast<uint64_t>(t) << 32));
  for (int y = 0; y < L.height; ++y) {
    for (int x = 0; x < L.width; ++x) {
      const float* base = nullptr;
      double depth = 0.0;
      int label = kVoidLabel;
      if (y < L.building_top) {
        base = kSky;
        label = panoptic_id(L.sky_class, 0);
      } else if (y < L.horizon) {
        base = kBuilding;
        depth = L.building_depth;
        label = panoptic_id(L.building_class, 0);
      } else {
        base = kRoad;
        depth = std::clamp(L.road_scale / (y - L.horizon + 1.0), L.d_min, L.d_max);
        label = panoptic_id(L.road_class, 0);
      }
      const double px = x + 0.5, py = y + 0.5;
      for (const ObjectSpec* o : order) {
        if (inside(*o, o->cx + o->vx * t, o->cy + o->vy * t, px, py)) {
          base = o->color;
          depth = o->depth;
          label = panoptic_id(o->class_id, o->instance_id);
        }
      }
      const double transmission = depth > 0 ? std::exp(-depth / L.haze_distance) : 1.0;
      uint64_t h = splitmix64(frame_noise ^ static_cast<uint64_t>(y * L.width + x));
      for (int c = 0; c < 3; ++c) {
        h = splitmix64(h);
        const double n = L.noise * (2.0 * static_cast<double>(h >> 11) * 0x1.0p-53 - 1.0);
        const double v = base[c] * transmission + kHaze[c] * (1.0 - transmission) + n;
        img[c][y][x] = quantize8(v);
      }
      s.panoptic.at(y, x) = label;
      s.depth.at(y, x) = depth > 0 ? quantize_depth(depth, 256.0) : 0.0f;
    }
  }
  return s;
}

std::vector<SyntheticSequence> generate_synthetic(const SynthConfig& cfg) {
  if (cfg.height < 64 || cfg.width < 64)
    throw ConfigError("synthetic image size must be at least 64x64");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw ConfigError("synthetic object range must satisfy 1 <= min_objects <= max_objects");
  if (cfg.num_sequences < 1 || cfg.frames_per_sequence < 1)
    throw ConfigError("synthetic dataset needs >= 1 sequence and >= 1 frame");
  if (!(cfg.object_depth_min > 0) || cfg.object_depth_max < cfg.object_depth_min)
    throw ConfigError("synthetic object depth range invalid");

  const ClassTable table = make_class_table(cfg.num_stuff_classes, cfg.num_thing_classes);
  std::vector<SyntheticSequence> out;
  for (int s = 0; s < cfg.num_sequences; ++s) {
    Rng rng(cfg.seed * 1000003ULL + static_cast<uint64_t>(s));
    SyntheticSequence seq;
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03d", s);
    seq.manifest.sequence_id = name;
    seq.manifest.class_table = table;
    seq.manifest.num_classes = static_cast<int>(table.size());
    seq.manifest.depth_scale = 256.0;

    SceneLayout& L = seq.layout;
    L.height = cfg.height;
    L.width = cfg.width;
    L.horizon = static_cast<int>(std::lround(rng.uniform(0.35, 0.45) * cfg.height));
    L.building_top = static_cast<int>(std::lround(rng.uniform(0.15, 0.25) * cfg.height));
    L.road_class = 0;
    L.building_class = std::min(2, cfg.num_stuff_classes - 2);
    L.sky_class = cfg.num_stuff_classes - 1;
    L.building_depth = rng.uniform(55.0, 75.0);
    L.road_scale = rng.uniform(50.0, 70.0);
    L.d_min = cfg.d_min;
    L.d_max = cfg.d_max;
    L.noise = cfg.noise;
    L.noise_seed = rng.next();

    const int n_obj = rng.integer(cfg.min_objects, cfg.max_objects);
    const double span = std::max(0, cfg.frames_per_sequence - 1);
    for (int i = 0; i < n_obj; ++i) {
      ObjectSpec o;
      const int k = rng.integer(0, cfg.num_thing_classes - 1);
      o.class_id = cfg.num_stuff_classes + k;
      o.instance_id = i + 1;
      o.shape = rng.uniform() < 0.5 ? ShapeKind::kCircle : ShapeKind::kRectangle;
      o.depth = rng.uniform(cfg.object_depth_min, cfg.object_depth_max);
      const double r = std::clamp(1.25 * cfg.height / o.depth, 7.0, cfg.height / 4.0);
      o.half_w = r;
      o.half_h = r * rng.uniform(0.75, 1.25);
      o.vx = rng.uniform(-cfg.motion_amplitude, cfg.motion_amplitude);
      o.vy = rng.uniform(-cfg.motion_amplitude, cfg.motion_amplitude) * 0.3;
      const double lo_x = o.half_w + std::max(0.0, -o.vx * span);
      const double hi_x = cfg.width - o.half_w - std::max(0.0, o.vx * span);
      o.cx = hi_x > lo_x ? rng.uniform(lo_x, hi_x) : cfg.width / 2.0;
      const double lo_y = std::max<double>(L.horizon, o.half_h) + std::max(0.0, -o.vy * span);
      const double hi_y = cfg.height - o.half_h - std::max(0.0, o.vy * span);
      o.cy = hi_y > lo_y ? rng.uniform(lo_y, hi_y) : cfg.height - o.half_h;
      const float* pal = kThingPalette[k % 8];
      for (int c = 0; c < 3; ++c)
        o.color[c] = static_cast<float>(std::clamp(pal[c] + rng.uniform(-0.08, 0.08), 0.0, 1.0));
      L.objects.push_back(o);
    }

    for (int t = 0; t < cfg.frames_per_sequence; ++t) {
      seq.samples.push_back(render_frame(L, t, seq.manifest.sequence_id));
      seq.manifest.frames.push_back(frame_stem(t));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

fs::path manifest_path(const fs::path& dataset_root, const std::string& sequence_id) {
  return dataset_root / sequence_id / "manifest.json";
}

void write_sequence(const fs::path& dataset_root, const SequenceManifest& m,
                    const std::vector<SceneSample>& samples) {
  if (samples.size() != m.frames.size())
    throw ShapeError("write_sequence: manifest lists " + std::to_string(m.frames.size()) +
                     " frames but " + std::to_string(samples.size()) + " samples given");
  const fs::path dir = dataset_root / m.sequence_id;
  for (const char* sub : {"image", "panoptic", "depth"}) fs::create_directories(dir / sub);

  for (size_t i = 0; i < samples.size(); ++i) {
    const SceneSample& s = samples[i];
    const int h = static_cast<int>(s.panoptic.height), w = static_cast<int>(s.panoptic.width);
    const std::string file = m.frames[i] + ".png";
    const torch::Tensor img_t = s.image.to(torch::kFloat32).contiguous();
    auto img = img_t.accessor<float, 3>();
    std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          rgb[(static_cast<size_t>(y) * w + x) * 3 + c] = static_cast<uint8_t>(
              std::lround(std::clamp(static_cast<double>(img[c][y][x]), 0.0, 1.0) * 255.0));
    png::write_rgb8((dir / "image" / file).string(), w, h, rgb);

    std::vector<uint16_t> pan(s.panoptic.data.size()), dep(s.depth.data.size());
    for (size_t k = 0; k < pan.size(); ++k) pan[k] = static_cast<uint16_t>(s.panoptic.data[k]);
    for (size_t k = 0; k < dep.size(); ++k)
      dep[k] = static_cast<uint16_t>(
          std::clamp(std::lround(static_cast<double>(s.depth.data[k]) * m.depth_scale), 0L, 65535L));
    png::write_gray16((dir / "panoptic" / file).string(), w, h, pan);
    png::write_gray16((dir / "depth" / file).string(), w, h, dep);
  }

  json j;
  j["sequence_id"] = m.sequence_id;
  j["frames"] = m.frames;
  j["depth_scale"] = m.depth_scale;
  j["num_classes"] = m.num_classes;
  j["class_table"] = json::array();
  for (const auto& c : m.class_table)
    j["class_table"].push_back({{"id", c.id}, {"name", c.name}, {"is_thing", c.is_thing}});
  std::ofstream f(manifest_path(dataset_root, m.sequence_id));
  f << j.dump(2) << "\n";
  if (!f) throw LoadError("failed writing manifest for '" + m.sequence_id + "'");
}

SequenceManifest read_manifest(const fs::path& manifest_file) {
  std::ifstream f(manifest_file);
  if (!f) throw LoadError("missing manifest '" + manifest_file.string() + "'");
  json j;
  try {
    f >> j;
    SequenceManifest m;
    m.sequence_id = j.at("sequence_id").get<std::string>();
    m.frames = j.at("frames").get<std::vector<std::string>>();
    m.depth_scale = j.at("depth_scale").get<double>();
    m.num_classes = j.at("num_classes").get<int>();
    for (const auto& c : j.at("class_table"))
      m.class_table.push_back(
          {c.at("id").get<int>(), c.at("name").get<std::string>(), c.at("is_thing").get<bool>()});
    m.root = manifest_file.parent_path();
    if (!(m.depth_scale > 0))
      throw LoadError("manifest '" + manifest_file.string() + "': depth_scale must be > 0");
    return m;
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest '" + manifest_file.string() + "': " + e.what());
  }
}

std::vector<SequenceManifest> discover_sequences(const fs::path& dataset_root) {
  if (!fs::is_directory(dataset_root))
    throw LoadError("dataset directory '" + dataset_root.string() + "' does not exist");
  std::vector<SequenceManifest> out;
  for (const auto& entry : fs::directory_iterator(dataset_root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
      out.push_back(read_manifest(entry.path() / "manifest.json"));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.sequence_id < b.sequence_id; });
  if (out.empty())
    throw LoadError("no sequences with manifest.json under '" + dataset_root.string() + "'");
  return out;
}

SceneSample load_frame(const SequenceManifest& m, size_t index) {
  if (index >= m.frames.size()) throw LoadError("frame index out of range");
  const std::string file = m.frames[index] + ".png";
  const fs::path ip = m.root / "image" / file, pp = m.root / "panoptic" / file,
                 dp = m.root / "depth" / file;
  const auto img = png::read(ip.string());
  const auto pan = png::read(pp.string());
  const auto dep = png::read(dp.string());
  const std::string where = " (sequence " + m.sequence_id + ", frame " + m.frames[index] + ")";
  if (img.channels != 3 || img.bit_depth != 8)
    throw LoadError("image '" + ip.string() + "' must be 8-bit RGB" + where);
  if (pan.channels != 1 || dep.channels != 1)
    throw LoadError("panoptic/depth maps must be single-channel" + where);
  if (pan.width != img.width || pan.height != img.height)
    throw LoadError("shape mismatch: '" + pp.string() + "' is " + std::to_string(pan.width) + "x" +
                    std::to_string(pan.height) + ", image is " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + where);
  if (dep.width != img.width || dep.height != img.height)
    throw LoadError("shape mismatch: '" + dp.string() + "' is " + std::to_string(dep.width) + "x" +
                    std::to_string(dep.height) + ", image is " + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + where);

  SceneSample s;
  s.sequence_id = m.sequence_id;
  s.frame_index = static_cast<int>(index);
  const int h = img.height, w = img.width;
  s.image = torch::empty({3, h, w}, torch::kFloat32);
  auto acc = s.image.accessor<float, 3>();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        acc[c][y][x] = static_cast<float>(img.samples[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  s.panoptic = LabelMap(h, w);
  s.depth = DepthMap(h, w);
  for (size_t k = 0; k < s.panoptic.data.size(); ++k) {
    const int32_t v = pan.samples[k];
    if (v != kVoidLabel && class_of(v) >= m.num_classes)
      throw LoadError("class id " + std::to_string(class_of(v)) + " out of range in '" +
                      pp.string() + "'" + where);
    s.panoptic.data[k] = v;
    s.depth.data[k] = static_cast<float>(dep.samples[k] / m.depth_scale);
  }
  return s;
}

std::vector<SceneSample> load_sequence(const SequenceManifest& m) {
  std::vector<SceneSample> out;
  out.reserve(m.frames.size());
  for (size_t i = 0; i < m.frames.size(); ++i) out.push_back(load_frame(m, i));
  return out;
}

}  // namespace multiformer
