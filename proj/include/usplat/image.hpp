#pragma once

#include <cstddef>
#include <vector>

#include "usplat/pose.hpp"

namespace usplat {

/// H x W scalar image, row-major (row v, column u), with pixel spacing and probe pose.
struct SliceImage {
  int width = 0;
  int height = 0;
  double spacing = 1.0;  // mm per pixel
  ProbePose pose;
  std::vector<float> pixels;

  SliceImage() = default;
  SliceImage(int w, int h, double spacing_mm, const ProbePose& p, float fill = 0.f)
      : width(w), height(h), spacing(spacing_mm), pose(p),
        pixels(static_cast<std::size_t>(w) * h, fill) {}

  float& at(int u, int v) { return pixels[static_cast<std::size_t>(v) * width + u]; }
  float at(int u, int v) const { return pixels[static_cast<std::size_t>(v) * width + u]; }
  std::size_t size() const { return pixels.size(); }
};

}  // namespace usplat
