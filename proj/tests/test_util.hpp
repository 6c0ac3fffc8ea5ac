#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "multiformer/config.hpp"
#include "multiformer/grid.hpp"

namespace testutil {

/// Small model that still exercises every code path.
inline multiformer::ModelConfig tiny_model(multiformer::DecoderVariant v = multiformer::DecoderVariant::kHybrid) {
  multiformer::ModelConfig m;
  m.P = 3;
  m.N_D = 16;
  m.backbone_channels = {8, 16, 16};
  m.ctx_stride = 4;
  m.variant = v;
  m.N_B = 2;
  m.N_Q = 5;
  m.heads = 2;
  m.num_classes = 5;
  return m;
}

inline multiformer::RunConfig tiny_run(multiformer::DecoderVariant v = multiformer::DecoderVariant::kHybrid) {
  multiformer::RunConfig c;
  c.model = tiny_model(v);
  c.model.num_classes = 19;
  c.train.batch = 2;
  c.train.steps = 4;
  c.train.points_per_mask = 64;
  c.train.log_every = 1;
  c.train.checkpoint_every = 2;
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("multiformer_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

/// Random panoptic map with a few stuff classes, thing instances, and some void.
inline multiformer::LabelMap random_labels(std::mt19937_64& rng, int h, int w, int num_classes,
                                           int max_instances, double void_frac) {
  std::uniform_int_distribution<int> cls(0, num_classes - 1), inst(1, max_instances);
  std::uniform_real_distribution<double> u(0, 1);
  multiformer::LabelMap m(h, w);
  // Blocky maps so segments have meaningful overlaps.
  const int bs = 4;
  for (int by = 0; by < h; by += bs)
    for (int bx = 0; bx < w; bx += bs) {
      int32_t label;
      if (u(rng) < void_frac) {
        label = multiformer::kVoidLabel;
      } else {
        const int c = cls(rng);
        label = multiformer::panoptic_id(c, c % 2 == 1 ? inst(rng) : 0);
      }
      for (int y = by; y < std::min(h, by + bs); ++y)
        for (int x = bx; x < std::min(w, bx + bs); ++x) m.at(y, x) = label;
    }
  // Per-pixel noise so boundaries are not block aligned.
  std::uniform_int_distribution<int> pix(0, h * w - 1);
  for (int k = 0; k < h * w / 8; ++k) {
    const int a = pix(rng), b = pix(rng);
    m.data[static_cast<size_t>(a)] = m.data[static_cast<size_t>(b)];
  }
  return m;
}

/// Odd classes are things.
inline std::vector<bool> odd_things(int num_classes) {
  std::vector<bool> t(static_cast<size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) t[static_cast<size_t>(c)] = c % 2 == 1;
  return t;
}

}  // namespace testutil
