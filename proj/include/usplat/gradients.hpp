#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usplat/rasterizer.hpp"

namespace usplat {

template <typename T>
struct ParamGradients {
  std::vector<T> d_means;          // N x 3
  std::vector<T> d_l_raw;          // N x 6
  std::vector<T> d_intensity_raw;  // N
  std::vector<T> d_opacity_raw;    // N
  T d_bg_intensity_raw = 0;
  T d_bg_opacity_raw = 0;

  explicit ParamGradients(std::size_t n = 0)
      : d_means(3 * n, T(0)), d_l_raw(6 * n, T(0)), d_intensity_raw(n, T(0)), d_opacity_raw(n, T(0)) {}
  std::size_t size() const { return d_intensity_raw.size(); }
};

/// Gradient of sum_x d_pixels[x] * pixel(x) with respect to every raw cloud parameter.
/// Walks the same accepted footprints that `rasterize` produced in `buffers`.
template <typename T>
ParamGradients<T> backward(const GaussianCloudT<T>& cloud, const SliceSpec& spec,
                           const RenderBuffers<T>& buffers, std::span<const T> d_pixels,
                           const RenderOptions& options = {});

struct GradCheckOptions {
  double h = 1e-5;
  /// 2: (f(x+h) - f(x-h)) / 2h. 4: fourth-order central stencil over x +- h, x +- 2h.
  int stencil = 2;
  double p_mass = 0.9999;
  /// Numeric side evaluates every Gaussian on every pixel instead of the truncated footprints.
  bool untruncated_numeric = false;
  /// 0 checks every parameter; otherwise a seeded random subset of this size.
  std::size_t max_params = 0;
  std::uint64_t seed = 0;
};

/// Worst |analytic - numeric| / (|analytic| + |numeric|) per parameter group for the loss
/// sum(pixel^2). Pairs with |analytic| + |numeric| <= 1e-8 are skipped.
struct GradCheckReport {
  double means = 0, l_raw = 0, intensity = 0, opacity = 0, background = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  /// max |analytic - numeric| and max |numeric| over all checked and skipped pairs.
  double max_abs_diff = 0, max_abs_numeric = 0;

  double worst() const;
  bool operator==(const GradCheckReport&) const = default;
};

GradCheckReport grad_check(const GaussianCloudD& cloud, const SliceSpec& spec,
                           const GradCheckOptions& options = {});

}  // namespace usplat
