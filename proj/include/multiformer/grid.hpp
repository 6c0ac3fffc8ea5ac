#pragma once

#include <cstdint>
#include <vector>

#include "multiformer/errors.hpp"

namespace multiformer {

/// Dense row-major 2D map. Used for label and depth maps outside the network.
template <typename T>
struct Grid {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int64_t h, int64_t w, T fill = T{})
      : height(h), width(w), data(static_cast<size_t>(h * w), fill) {}

  T& at(int64_t y, int64_t x) { return data[static_cast<size_t>(y * width + x)]; }
  const T& at(int64_t y, int64_t x) const {
    return data[static_cast<size_t>(y * width + x)];
  }
  int64_t size() const { return height * width; }
  template <typename U>
  bool same_shape(const Grid<U>& o) const { return height == o.height && width == o.width; }

  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<int32_t>;
using DepthMap = Grid<float>;

/// Panoptic id = class_id * kLabelDivisor + instance_index (0 for stuff).
inline constexpr int32_t kLabelDivisor = 1000;
inline constexpr int32_t kVoidLabel = 65535;

inline constexpr int32_t panoptic_id(int32_t class_id, int32_t instance) {
  return class_id * kLabelDivisor + instance;
}
inline constexpr int32_t class_of(int32_t label) { return label / kLabelDivisor; }
inline constexpr int32_t instance_of(int32_t label) { return label % kLabelDivisor; }

/// Stack maps vertically; frames of a window become one tall map.
template <typename T>
Grid<T> stack_rows(const std::vector<const Grid<T>*>& maps) {
  if (maps.empty()) return {};
  Grid<T> out;
  out.width = maps.front()->width;
  for (const auto* m : maps) {
    if (m->width != out.width) throw ShapeError("stack_rows: width mismatch");
    out.height += m->height;
    out.data.insert(out.data.end(), m->data.begin(), m->data.end());
  }
  return out;
}

}  // namespace multiformer
