#pragma once

// Plane-intersection rasterizer.
//
// Phase 1 transforms every Gaussian into the probe frame, builds the axis-aligned box of
// its p-mass ellipsoid and rejects it when the box misses the plane z = 0 (or the image
// rectangle). Phase 2 walks the compacted accepted list, split evenly across workers, and
// adds alpha_i(x) and alpha_i(x) c_i into per-pixel accumulators that start from the
// background term. The rendered pixel is the ratio of the two accumulators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "usplat/image.hpp"
#include "usplat/kernels.hpp"
#include "usplat/model.hpp"
#include "usplat/parallel.hpp"

namespace usplat {

struct SliceSpec {
  int width = 0;
  int height = 0;
  double spacing = 1.0;  // mm per pixel
  ProbePose pose;

  void validate() const;
};

/// Centre-origin probe-plane coordinates (mm) of pixel (u, v).
Vec2<double> pixel_to_plane(int u, int v, const SliceSpec& spec);

/// Squared-distance threshold enclosing mass p of a 3D standard normal (chi-square, 3 dof).
double chi_square_3dof(double p);

template <typename T>
struct BoundingBox3 {
  Vec3<T> b_min;
  Vec3<T> b_max;
};

/// Box of the ellipsoid d^T Sigma^-1 d <= chi2 around `mean`, where Sigma = cov_factor cov_factor^T.
/// Half-width along axis j is sqrt(chi2 * Sigma_jj) = sqrt(chi2) * |row j of cov_factor|.
template <typename T>
BoundingBox3<T> bounding_box_chi2(const Vec3<T>& mean, const Mat3<T>& cov_factor, T chi2) {
  BoundingBox3<T> box;
  for (int j = 0; j < 3; ++j) {
    const T half = std::sqrt(chi2 * cov_factor.row(j).squaredNorm());
    box.b_min[j] = mean[j] - half;
    box.b_max[j] = mean[j] + half;
  }
  return box;
}

template <typename T>
BoundingBox3<T> bounding_box(const ProbeFrameGaussian<T>& g, double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidParameter("mass fraction p must lie in (0, 1)");
  return bounding_box_chi2<T>(g.mean_probe, g.cov_factor, T(chi_square_3dof(p)));
}

/// Inclusive pixel range; empty when u0 > u1 or v0 > v1.
struct PixelRect {
  int u0 = 0, u1 = -1, v0 = 0, v1 = -1;
  bool empty() const { return u0 > u1 || v0 > v1; }
  long long area() const { return empty() ? 0 : 1LL * (u1 - u0 + 1) * (v1 - v0 + 1); }
  bool operator==(const PixelRect&) const = default;
};

/// Pixels whose centres fall inside the box's in-plane extent, clamped to the image.
template <typename T>
PixelRect footprint(const BoundingBox3<T>& box, const SliceSpec& spec);

template <typename T>
bool straddles_plane(const BoundingBox3<T>& box) {
  return box.b_min[2] <= T(0) && box.b_max[2] >= T(0);
}

/// 1 = accepted: the box straddles z = 0 and its footprint overlaps the image.
template <typename T>
std::vector<std::uint8_t> cull(std::span<const BoundingBox3<T>> boxes, const SliceSpec& spec);

/// Ascending indices of the set entries of `mask`.
std::vector<std::uint32_t> compact(std::span<const std::uint8_t> mask);

/// Per accepted Gaussian state retained for the backward pass.
template <typename T>
struct RasterItem {
  std::uint32_t index = 0;
  PixelRect rect;
  Vec3<T> mean_probe;
  T a11, a12, a13, a22, a23, a33;  // probe-frame precision, mm^-2
  T alpha, color;
  /// Rows are clipped to q <= clip_q; +inf walks the whole rect.
  T clip_q = std::numeric_limits<T>::infinity();
};

/// The pixels [u0, u1] of row v that Phase 2 visits for `it`, with the row quadratic in
/// d = x1 - mu1 and d0 = d at u0. Forward and backward both iterate through this.
template <typename T>
struct RowSpan {
  kernels::RowQuadratic<T> q;
  T d0;
  int u0, u1;
  bool empty() const { return u0 > u1; }
};

template <typename T>
RowSpan<T> row_span(const RasterItem<T>& it, int v, const SliceSpec& spec) {
  const T sp = T(spec.spacing);
  const T cu = T(0.5 * (spec.width - 1)), cv = T(0.5 * (spec.height - 1));
  const T d2 = (T(v) - cv) * sp - it.mean_probe[1];
  const T m3 = it.mean_probe[2];
  RowSpan<T> r;
  r.q = {it.a11, T(2) * (it.a12 * d2 - it.a13 * m3), it.a22 * d2 * d2 + it.a33 * m3 * m3 - T(2) * it.a23 * d2 * m3};
  r.u0 = it.rect.u0;
  r.u1 = it.rect.u1;
  if (std::isfinite(it.clip_q)) {
    const double a = r.q.a, b = r.q.b, c = double(r.q.c) - double(it.clip_q);
    const double disc = b * b - 4.0 * a * c;
    if (!(disc >= 0.0) || !(a > 0.0)) {
      r.u1 = r.u0 - 1;
    } else {
      const double root = std::sqrt(disc);
      const double shift = double(it.mean_probe[0]) / double(sp) + double(cu);
      const double lo = (-b - root) / (2.0 * a) / double(sp) + shift;
      const double hi = (-b + root) / (2.0 * a) / double(sp) + shift;
      r.u0 = std::max(r.u0, static_cast<int>(std::ceil(std::clamp(lo, double(r.u0), double(r.u1) + 1.0))));
      r.u1 = std::min(r.u1, static_cast<int>(std::floor(std::clamp(hi, double(r.u0) - 1.0, double(r.u1)))));
    }
  }
  r.d0 = (T(r.u0) - cu) * sp - it.mean_probe[0];
  return r;
}

template <typename T>
struct RenderBuffers {
  int width = 0;
  int height = 0;
  double spacing = 1.0;
  ProbePose pose;
  double p_mass = 0.95;
  std::size_t n_gaussians = 0;
  T bg_alpha = 0, bg_color = 0;
  std::vector<T> intensity_num;  // sum alpha_i(x) c_i + alpha_BG c_BG
  std::vector<T> opacity_sum;    // sum alpha_i(x) + alpha_BG
  std::vector<std::uint32_t> accepted;
  std::vector<RasterItem<T>> items;  // parallel to `accepted`

  std::size_t pixel_count() const { return opacity_sum.size(); }
  T pixel(std::size_t i) const {
    const T v = intensity_num[i] / opacity_sum[i];
    return v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
  }
  std::vector<T> pixels() const {
    std::vector<T> out(pixel_count());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = pixel(i);
    return out;
  }
};

struct Footprint {
  std::uint32_t index;
  PixelRect rect;
};

enum class KernelPath { Auto, Reference };

struct RenderOptions {
  double p_mass = 0.95;
  Execution execution = Execution::Parallel;
  int threads = 0;  // 0 = hardware concurrency
  KernelPath kernels = KernelPath::Auto;
  /// Visit only pixels inside the p-mass ellipse of each Gaussian instead of its whole box
  /// footprint. Ignored for frozen footprints.
  bool ellipse_rows = true;
  /// Parallel Phase 2 splits pixel rows across workers instead of Gaussians. Every pixel then
  /// sums in accepted order, so the image is bitwise equal to the sequential one.
  bool row_bands = false;
  /// Skip Phase 1 and rasterize exactly these (Gaussian, rect) pairs. Used to take finite
  /// differences of the truncated renderer with its footprints held fixed.
  const std::vector<Footprint>* frozen = nullptr;
};

template <typename T>
RenderBuffers<T> rasterize(const GaussianCloudT<T>& cloud, const SliceSpec& spec,
                           const RenderOptions& options = {});

template <typename T>
std::vector<Footprint> footprints_of(const RenderBuffers<T>& buffers);

SliceImage render_slice(const GaussianCloud& cloud, const SliceSpec& spec,
                        const RenderOptions& options = {});

template <typename T>
SliceImage to_image(const RenderBuffers<T>& buffers);

}  // namespace usplat
