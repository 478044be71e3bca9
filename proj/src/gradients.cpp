#include "usplat/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <type_traits>

#include "usplat/kernels.hpp"

namespace usplat {

namespace {

template <typename T>
kernels::RowGradSums<T> backward_row(const kernels::RowQuadratic<T>& q, T d0, T dd, int n, T alpha,
                                     T color, const T* g, const T* chat, KernelPath path) {
  if constexpr (std::is_same_v<T, float>) {
    const kernels::KernelTable& table =
        path == KernelPath::Reference ? kernels::scalar_kernels() : kernels::active_kernels();
    return table.row_backward(q, d0, dd, n, alpha, color, g, chat);
  } else {
    return kernels::row_backward_ref<T>(q, d0, dd, n, alpha, color, g, chat);
  }
}

// Per-Gaussian moments of k(x) over the footprint, with d = x - mu in the probe plane:
// s0 = sum k, s1 = sum k d1, s2 = sum k d2, s11 = sum k d1^2, s12 = sum k d1 d2, s22 = sum k d2^2.
struct Moments {
  double s0 = 0, s1 = 0, s2 = 0, s11 = 0, s12 = 0, s22 = 0, ga = 0;
};

template <typename T>
Moments gather(const RasterItem<T>& it, const SliceSpec& spec, const T* g, const T* chat, KernelPath path) {
  const T sp = T(spec.spacing);
  const T cv = T(0.5 * (spec.height - 1));
  Moments m;
  for (int v = it.rect.v0; v <= it.rect.v1; ++v) {
    const RowSpan<T> r = row_span(it, v, spec);
    if (r.empty()) continue;
    const T d2 = (T(v) - cv) * sp - it.mean_probe[1];
    const std::size_t row = static_cast<std::size_t>(v) * spec.width + r.u0;
    const kernels::RowGradSums<T> s =
        backward_row<T>(r.q, r.d0, sp, r.u1 - r.u0 + 1, it.alpha, it.color, g + row, chat + row, path);
    const double dd2 = double(d2);
    m.s0 += s.k;
    m.s1 += s.kd;
    m.s2 += dd2 * s.k;
    m.s11 += s.kdd;
    m.s12 += dd2 * s.kd;
    m.s22 += dd2 * dd2 * s.k;
    m.ga += s.ga;
  }
  return m;
}

}  // namespace

template <typename T>
ParamGradients<T> backward(const GaussianCloudT<T>& cloud, const SliceSpec& spec,
                           const RenderBuffers<T>& buffers, std::span<const T> d_pixels,
                           const RenderOptions& options) {
  const std::size_t npix = static_cast<std::size_t>(spec.width) * spec.height;
  if (buffers.width != spec.width || buffers.height != spec.height || buffers.pixel_count() != npix) {
    throw ContractViolation("render buffers do not match the slice spec");
  }
  if (buffers.n_gaussians != cloud.size()) {
    throw ContractViolation("render buffers were produced from a different cloud");
  }
  if (d_pixels.size() != npix) throw ContractViolation("upstream gradient has the wrong size");

  ParamGradients<T> grads(cloud.size());
  std::vector<T> g(npix), chat(npix);
  double bg_color_acc = 0, bg_alpha_acc = 0;
  const T bg_a = buffers.bg_alpha, bg_c = buffers.bg_color;
  for (std::size_t p = 0; p < npix; ++p) {
    g[p] = d_pixels[p] / buffers.opacity_sum[p];
    chat[p] = buffers.intensity_num[p] / buffers.opacity_sum[p];
    bg_color_acc += double(g[p]) * double(bg_a);
    bg_alpha_acc += double(g[p]) * (double(bg_c) - double(chat[p]));
  }
  grads.d_bg_intensity_raw = T(bg_color_acc * double(sigmoid_grad_from_value(bg_c)));
  grads.d_bg_opacity_raw = T(bg_alpha_acc * double(sigmoid_grad_from_value(bg_a)));

  const ProbePose w = spec.pose.inverse();
  const Mat3d rw = w.rotation();
  const double inv_scale = 1.0 / double(cloud.length_scale);

  auto process = [&](const RasterItem<T>& it) {
    const Moments m = gather(it, spec, g.data(), chat.data(), options.kernels);
    const double m3 = double(it.mean_probe[2]);
    const Vec3d v(m.s1, m.s2, -m3 * m.s0);
    Mat3d mm;
    mm << m.s11, m.s12, -m3 * m.s1,  //
        m.s12, m.s22, -m3 * m.s2,    //
        -m3 * m.s1, -m3 * m.s2, m3 * m3 * m.s0;
    Mat3d a;
    a << it.a11, it.a12, it.a13, it.a12, it.a22, it.a23, it.a13, it.a23, it.a33;

    const std::size_t i = it.index;
    // dq/dm = -2 A d, mean_probe = R_W mu + t_W.
    const Vec3d d_mu = rw.transpose() * (-2.0 * (a * v));
    for (int k = 0; k < 3; ++k) grads.d_means[3 * i + k] = T(d_mu[k]);

    // dq/dF = 2 d w^T with w = F^T d, F = R_W L / s.
    const auto raw = cloud.raw(i);
    const Mat3d l = cloud.factor(i).matrix().template cast<double>();
    const Mat3d f = rw * l * inv_scale;
    const Mat3d d_l = rw.transpose() * (2.0 * mm * f) * inv_scale;
    T* dr = grads.d_l_raw.data() + 6 * i;
    dr[0] = T(d_l(0, 0) * 2.0 * double(raw[0]));
    dr[1] = T(d_l(1, 1) * 2.0 * double(raw[1]));
    dr[2] = T(d_l(2, 2) * 2.0 * double(raw[2]));
    dr[3] = T(d_l(1, 0));
    dr[4] = T(d_l(2, 0));
    dr[5] = T(d_l(2, 1));

    // sum_x g (c - chat) a = -2 s0; d alpha / d raw = alpha (1 - alpha).
    grads.d_opacity_raw[i] = T(-2.0 * m.s0 * (1.0 - double(it.alpha)));
    grads.d_intensity_raw[i] = T(m.ga * double(sigmoid_grad_from_value(it.color)));
  };

  const int workers = resolve_threads(options.execution, options.threads);
  parallel_chunks(buffers.items.size(), workers, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t k = b; k < e; ++k) process(buffers.items[k]);
  });
  return grads;
}

template ParamGradients<float> backward<float>(const GaussianCloudT<float>&, const SliceSpec&,
                                               const RenderBuffers<float>&, std::span<const float>,
                                               const RenderOptions&);
template ParamGradients<double> backward<double>(const GaussianCloudT<double>&, const SliceSpec&,
                                                 const RenderBuffers<double>&, std::span<const double>,
                                                 const RenderOptions&);

double GradCheckReport::worst() const {
  return std::max({means, l_raw, intensity, opacity, background});
}

namespace {

enum class Group { Means, LRaw, Intensity, Opacity, Background };

struct ParamRef {
  Group group;
  std::size_t offset;  // index into the group's array (or 0/1 for background)
};

double& param(GaussianCloudD& c, const ParamRef& r) {
  switch (r.group) {
    case Group::Means: return c.means[r.offset];
    case Group::LRaw: return c.l_raw[r.offset];
    case Group::Intensity: return c.intensity_raw[r.offset];
    case Group::Opacity: return c.opacity_raw[r.offset];
    case Group::Background: return r.offset == 0 ? c.bg_intensity_raw : c.bg_opacity_raw;
  }
  return c.beta;
}

double analytic(const ParamGradients<double>& g, const ParamRef& r) {
  switch (r.group) {
    case Group::Means: return g.d_means[r.offset];
    case Group::LRaw: return g.d_l_raw[r.offset];
    case Group::Intensity: return g.d_intensity_raw[r.offset];
    case Group::Opacity: return g.d_opacity_raw[r.offset];
    case Group::Background: return r.offset == 0 ? g.d_bg_intensity_raw : g.d_bg_opacity_raw;
  }
  return 0;
}

double sum_squares(const RenderBuffers<double>& b) {
  long double acc = 0;
  for (std::size_t p = 0; p < b.pixel_count(); ++p) {
    const long double v = b.pixel(p);
    acc += v * v;
  }
  return static_cast<double>(acc);
}

}  // namespace

GradCheckReport grad_check(const GaussianCloudD& cloud, const SliceSpec& spec, const GradCheckOptions& options) {
  if (options.stencil != 2 && options.stencil != 4) throw InvalidParameter("stencil must be 2 or 4");
  if (!(options.h > 0)) throw InvalidParameter("finite-difference step must be > 0");
  RenderOptions ro;
  ro.p_mass = options.p_mass;
  ro.execution = Execution::Sequential;
  // Frozen footprints are whole rects, so the analytic side must walk whole rects too.
  ro.ellipse_rows = false;
  const RenderBuffers<double> base = rasterize(cloud, spec, ro);
  std::vector<double> d_pixels(base.pixel_count());
  for (std::size_t p = 0; p < d_pixels.size(); ++p) d_pixels[p] = 2.0 * base.pixel(p);
  const ParamGradients<double> grads = backward<double>(cloud, spec, base, d_pixels, ro);

  std::vector<Footprint> frozen;
  if (options.untruncated_numeric) {
    const PixelRect full{0, spec.width - 1, 0, spec.height - 1};
    for (std::size_t i = 0; i < cloud.size(); ++i) frozen.push_back({static_cast<std::uint32_t>(i), full});
  } else {
    frozen = footprints_of(base);
  }
  RenderOptions fo = ro;
  fo.frozen = &frozen;

  std::vector<ParamRef> refs;
  for (std::size_t k = 0; k < cloud.means.size(); ++k) refs.push_back({Group::Means, k});
  for (std::size_t k = 0; k < cloud.l_raw.size(); ++k) refs.push_back({Group::LRaw, k});
  for (std::size_t k = 0; k < cloud.size(); ++k) refs.push_back({Group::Intensity, k});
  for (std::size_t k = 0; k < cloud.size(); ++k) refs.push_back({Group::Opacity, k});
  refs.push_back({Group::Background, 0});
  refs.push_back({Group::Background, 1});
  if (options.max_params > 0 && options.max_params < refs.size()) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(refs.begin(), refs.end(), rng);
    refs.resize(options.max_params);
  }

  GradCheckReport report;
  GaussianCloudD work = cloud;
  for (const ParamRef& r : refs) {
    double& x = param(work, r);
    const double x0 = x;
    auto at = [&](double offset) {
      x = x0 + offset;
      return sum_squares(rasterize(work, spec, fo));
    };
    const double h = options.h;
    double numeric = 0;
    if (options.stencil == 4) {
      numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
    } else {
      numeric = (at(h) - at(-h)) / (2 * h);
    }
    x = x0;
    const double a = analytic(grads, r);
    report.max_abs_diff = std::max(report.max_abs_diff, std::abs(a - numeric));
    report.max_abs_numeric = std::max(report.max_abs_numeric, std::abs(numeric));
    const double denom = std::abs(a) + std::abs(numeric);
    if (denom <= 1e-8) {
      ++report.skipped;
      continue;
    }
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    double* slot = nullptr;
    switch (r.group) {
      case Group::Means: slot = &report.means; break;
      case Group::LRaw: slot = &report.l_raw; break;
      case Group::Intensity: slot = &report.intensity; break;
      case Group::Opacity: slot = &report.opacity; break;
      case Group::Background: slot = &report.background; break;
    }
    *slot = std::max(*slot, rel);
  }
  return report;
}

}  // namespace usplat
