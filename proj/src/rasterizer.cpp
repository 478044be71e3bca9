#include "usplat/rasterizer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <type_traits>

#include "usplat/kernels.hpp"

namespace usplat {

void SliceSpec::validate() const {
  if (width < 1 || height < 1) throw InvalidParameter("slice width and height must be >= 1");
  if (!(spacing > 0.0) || !std::isfinite(spacing)) throw InvalidParameter("slice spacing must be > 0");
}

Vec2<double> pixel_to_plane(int u, int v, const SliceSpec& spec) {
  if (u < 0 || u >= spec.width || v < 0 || v >= spec.height) {
    throw ContractViolation("pixel index outside the slice");
  }
  return {(u - 0.5 * (spec.width - 1)) * spec.spacing, (v - 0.5 * (spec.height - 1)) * spec.spacing};
}

double chi_square_3dof(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidParameter("mass fraction p must lie in (0, 1)");
  auto cdf = [](double x) {
    return std::erf(std::sqrt(0.5 * x)) - std::sqrt(2.0 * x / std::numbers::pi) * std::exp(-0.5 * x);
  };
  double lo = 0.0, hi = 1.0;
  while (cdf(hi) < p) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

template <typename T>
PixelRect footprint(const BoundingBox3<T>& box, const SliceSpec& spec) {
  const double cu = 0.5 * (spec.width - 1), cv = 0.5 * (spec.height - 1);
  auto lo = [](double x, int n) { return static_cast<int>(std::clamp(std::ceil(x), -1.0, double(n))); };
  auto hi = [](double x, int n) { return static_cast<int>(std::clamp(std::floor(x), -1.0, double(n))); };
  PixelRect r;
  r.u0 = std::max(0, lo(double(box.b_min[0]) / spec.spacing + cu, spec.width));
  r.u1 = std::min(spec.width - 1, hi(double(box.b_max[0]) / spec.spacing + cu, spec.width));
  r.v0 = std::max(0, lo(double(box.b_min[1]) / spec.spacing + cv, spec.height));
  r.v1 = std::min(spec.height - 1, hi(double(box.b_max[1]) / spec.spacing + cv, spec.height));
  return r;
}

template <typename T>
std::vector<std::uint8_t> cull(std::span<const BoundingBox3<T>> boxes, const SliceSpec& spec) {
  std::vector<std::uint8_t> mask(boxes.size(), 0);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    mask[i] = straddles_plane(boxes[i]) && !footprint(boxes[i], spec).empty();
  }
  return mask;
}

std::vector<std::uint32_t> compact(std::span<const std::uint8_t> mask) {
  std::vector<std::uint32_t> out;
  out.reserve(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

namespace {

template <typename T>
struct FrameTransform {
  Mat3<T> rw;  // world -> probe rotation
  Vec3<T> tw;
};

template <typename T>
FrameTransform<T> world_to_probe(const ProbePose& pose) {
  const ProbePose w = pose.inverse();
  return {w.rotation().template cast<T>(), w.translation().template cast<T>()};
}

// Phase 1 for a single Gaussian. Returns the item with its box-derived footprint.
template <typename T>
RasterItem<T> prepare_item(const GaussianCloudT<T>& cloud, std::size_t i, const FrameTransform<T>& w,
                           T chi2, const SliceSpec& spec, bool* accepted) {
  const TriangularPrecision<T> l = cloud.factor(i);
  RasterItem<T> item;
  item.index = static_cast<std::uint32_t>(i);
  item.mean_probe = w.rw * cloud.mean(i) + w.tw;
  const Mat3<T> f = w.rw * l.matrix() / cloud.length_scale;
  const Mat3<T> a = f * f.transpose();
  item.a11 = a(0, 0);
  item.a12 = a(0, 1);
  item.a13 = a(0, 2);
  item.a22 = a(1, 1);
  item.a23 = a(1, 2);
  item.a33 = a(2, 2);
  item.alpha = cloud.alpha(i);
  item.color = cloud.color(i);
  if (accepted) {
    const Mat3<T> cov_factor =
        cloud.length_scale * w.rw * invert_lower_triangular(l.matrix()).transpose();
    const BoundingBox3<T> box = bounding_box_chi2<T>(item.mean_probe, cov_factor, chi2);
    *accepted = straddles_plane(box);
    if (*accepted) {
      item.rect = footprint(box, spec);
      *accepted = !item.rect.empty();
    }
  }
  return item;
}

template <typename T>
void weights_row(const kernels::RowQuadratic<T>& q, T d0, T dd, int n, T alpha, T* out,
                 KernelPath path) {
  if constexpr (std::is_same_v<T, float>) {
    const kernels::KernelTable& table =
        path == KernelPath::Reference ? kernels::scalar_kernels() : kernels::active_kernels();
    table.row_weights(q, d0, dd, n, alpha, out);
  } else {
    kernels::row_weights_ref<T>(q, d0, dd, n, alpha, out);
  }
}

// Phase 2 for one accepted Gaussian.
template <typename T, bool Atomic>
void splat_item(const RasterItem<T>& it, const SliceSpec& spec, KernelPath path, std::vector<T>& scratch,
                T* num, T* den, int row_lo = 0, int row_hi = std::numeric_limits<int>::max()) {
  const T sp = T(spec.spacing);
  const int v_end = std::min(it.rect.v1, row_hi);
  for (int v = std::max(it.rect.v0, row_lo); v <= v_end; ++v) {
    const RowSpan<T> r = row_span(it, v, spec);
    if (r.empty()) continue;
    const int n = r.u1 - r.u0 + 1;
    if (static_cast<int>(scratch.size()) < n) scratch.resize(n);
    weights_row<T>(r.q, r.d0, sp, n, it.alpha, scratch.data(), path);
    const std::size_t row = static_cast<std::size_t>(v) * spec.width + r.u0;
    if constexpr (Atomic) {
      for (int k = 0; k < n; ++k) {
        std::atomic_ref<T>(num[row + k]).fetch_add(scratch[k] * it.color, std::memory_order_relaxed);
        std::atomic_ref<T>(den[row + k]).fetch_add(scratch[k], std::memory_order_relaxed);
      }
    } else {
      for (int k = 0; k < n; ++k) {
        num[row + k] += scratch[k] * it.color;
        den[row + k] += scratch[k];
      }
    }
  }
}

}  // namespace

template <typename T>
RenderBuffers<T> rasterize(const GaussianCloudT<T>& cloud, const SliceSpec& spec,
                           const RenderOptions& options) {
  spec.validate();
  const std::size_t n = cloud.size();
  if (cloud.means.size() != 3 * n || cloud.l_raw.size() != 6 * n || cloud.opacity_raw.size() != n) {
    throw InvalidParameter("gaussian cloud arrays have inconsistent lengths");
  }
  if (!(cloud.beta > T(0))) throw InvalidParameter("beta must be strictly positive");

  RenderBuffers<T> buf;
  buf.width = spec.width;
  buf.height = spec.height;
  buf.spacing = spec.spacing;
  buf.pose = spec.pose;
  buf.p_mass = options.p_mass;
  buf.n_gaussians = n;
  buf.bg_alpha = cloud.bg_alpha();
  buf.bg_color = cloud.bg_color();
  const std::size_t npix = static_cast<std::size_t>(spec.width) * spec.height;
  buf.intensity_num.assign(npix, buf.bg_alpha * buf.bg_color);
  buf.opacity_sum.assign(npix, buf.bg_alpha);

  const int workers = resolve_threads(options.execution, options.threads);
  const FrameTransform<T> w = world_to_probe<T>(spec.pose);

  if (options.frozen) {
    for (const Footprint& fp : *options.frozen) {
      if (fp.index >= n) throw ContractViolation("frozen footprint refers to a missing gaussian");
      RasterItem<T> item = prepare_item(cloud, fp.index, w, T(0), spec, nullptr);
      item.rect = fp.rect;
      buf.accepted.push_back(fp.index);
      buf.items.push_back(item);
    }
  } else {
    const T chi2 = T(chi_square_3dof(options.p_mass));
    std::vector<std::uint8_t> mask(n, 0);
    std::vector<RasterItem<T>> all(n);
    parallel_chunks(n, workers, [&](std::size_t b, std::size_t e, int) {
      for (std::size_t i = b; i < e; ++i) {
        bool ok = false;
        all[i] = prepare_item(cloud, i, w, chi2, spec, &ok);
        if (options.ellipse_rows) all[i].clip_q = chi2;
        mask[i] = ok;
      }
    });
    buf.accepted = compact(mask);
    buf.items.reserve(buf.accepted.size());
    for (std::uint32_t i : buf.accepted) buf.items.push_back(all[i]);
  }

  T* num = buf.intensity_num.data();
  T* den = buf.opacity_sum.data();
  if (workers == 1) {
    std::vector<T> scratch;
    for (const RasterItem<T>& it : buf.items) splat_item<T, false>(it, spec, options.kernels, scratch, num, den);
  } else if (options.row_bands) {
    parallel_chunks(static_cast<std::size_t>(spec.height), workers, [&](std::size_t b, std::size_t e, int) {
      if (b >= e) return;
      std::vector<T> scratch;
      const int lo = static_cast<int>(b), hi = static_cast<int>(e) - 1;
      for (const RasterItem<T>& it : buf.items) {
        if (it.rect.v1 < lo || it.rect.v0 > hi) continue;
        splat_item<T, false>(it, spec, options.kernels, scratch, num, den, lo, hi);
      }
    });
  } else {
    parallel_chunks(buf.items.size(), workers, [&](std::size_t b, std::size_t e, int) {
      std::vector<T> scratch;
      for (std::size_t k = b; k < e; ++k) splat_item<T, true>(buf.items[k], spec, options.kernels, scratch, num, den);
    });
  }
  return buf;
}

template <typename T>
std::vector<Footprint> footprints_of(const RenderBuffers<T>& buffers) {
  std::vector<Footprint> out;
  out.reserve(buffers.items.size());
  for (const RasterItem<T>& it : buffers.items) out.push_back({it.index, it.rect});
  return out;
}

template <typename T>
SliceImage to_image(const RenderBuffers<T>& buffers) {
  SliceImage img(buffers.width, buffers.height, buffers.spacing, buffers.pose);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(buffers.pixel(i));
  return img;
}

SliceImage render_slice(const GaussianCloud& cloud, const SliceSpec& spec, const RenderOptions& options) {
  return to_image(rasterize(cloud, spec, options));
}

#define USPLAT_INSTANTIATE(T)                                                                  \
  template PixelRect footprint<T>(const BoundingBox3<T>&, const SliceSpec&);                   \
  template std::vector<std::uint8_t> cull<T>(std::span<const BoundingBox3<T>>, const SliceSpec&); \
  template RenderBuffers<T> rasterize<T>(const GaussianCloudT<T>&, const SliceSpec&,           \
                                         const RenderOptions&);                                \
  template std::vector<Footprint> footprints_of<T>(const RenderBuffers<T>&);                   \
  template SliceImage to_image<T>(const RenderBuffers<T>&);

USPLAT_INSTANTIATE(float)
USPLAT_INSTANTIATE(double)
#undef USPLAT_INSTANTIATE

}  // namespace usplat
