#include "usplat/metrics.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <ctime>
#include <limits>

#include <json.hpp>

#include "usplat/errors.hpp"

namespace usplat {

namespace {

constexpr int kR = kSsimWindow / 2;

const std::array<double, kSsimWindow>& window_taps() {
  static const std::array<double, kSsimWindow> taps = [] {
    std::array<double, kSsimWindow> t{};
    double sum = 0;
    for (int k = 0; k < kSsimWindow; ++k) {
      t[k] = std::exp(-0.5 * (k - kR) * (k - kR) / (kSsimSigma * kSsimSigma));
      sum += t[k];
    }
    for (double& v : t) v /= sum;
    return t;
  }();
  return taps;
}

// out(p) = sum_ij g_i g_j in(p + (i, j)), p over the (w - 10) x (h - 10) valid region.
std::vector<double> filter_valid(const std::vector<double>& in, int w, int h) {
  const auto& g = window_taps();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * in[static_cast<std::size_t>(y) * w + x + k];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kSsimWindow; ++k) acc += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

// Adjoint of filter_valid: scatters each valid-region value back over its window.
std::vector<double> filter_valid_adjoint(const std::vector<double>& m, int w, int h) {
  const auto& g = window_taps();
  const int ow = w - kSsimWindow + 1, oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = m[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < kSsimWindow; ++k) tmp[static_cast<std::size_t>(y + k) * ow + x] += g[k] * v;
    }
  std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      for (int k = 0; k < kSsimWindow; ++k) out[static_cast<std::size_t>(y) * w + x + k] += g[k] * v;
    }
  return out;
}

void check_dims(std::span<const float> a, std::span<const float> b, int w, int h) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(w) * h) {
    throw InvalidParameter("image dimensions do not match");
  }
  if (w < kSsimWindow || h < kSsimWindow) throw InvalidParameter("images are smaller than the 11x11 SSIM window");
}

double ssim_impl(std::span<const float> a, std::span<const float> b, int w, int h, std::vector<double>* d_a) {
  check_dims(a, b, w, h);
  const std::size_t n = a.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, w, h), my = filter_valid(y, w, h);
  const auto exx = filter_valid(xx, w, h), eyy = filter_valid(yy, w, h), exy = filter_valid(xy, w, h);
  const std::size_t p_count = mx.size();
  const double inv_p = 1.0 / double(p_count);

  std::vector<double> g_mu, g_xx, g_xy;
  if (d_a) {
    g_mu.resize(p_count);
    g_xx.resize(p_count);
    g_xy.resize(p_count);
  }
  double total = 0;
  for (std::size_t p = 0; p < p_count; ++p) {
    const double sxx = exx[p] - mx[p] * mx[p], syy = eyy[p] - my[p] * my[p], sxy = exy[p] - mx[p] * my[p];
    const double a1 = 2 * mx[p] * my[p] + kSsimC1, a2 = 2 * sxy + kSsimC2;
    const double b1 = mx[p] * mx[p] + my[p] * my[p] + kSsimC1, b2 = sxx + syy + kSsimC2;
    const double s = a1 * a2 / (b1 * b2);
    total += s;
    if (d_a) {
      g_mu[p] = inv_p * (2 * my[p] * (a2 - a1) / (b1 * b2) - 2 * mx[p] * s * (1 / b1 - 1 / b2));
      g_xx[p] = inv_p * (-s / b2);
      g_xy[p] = inv_p * (2 * a1 / (b1 * b2));
    }
  }
  if (d_a) {
    const auto f_mu = filter_valid_adjoint(g_mu, w, h);
    const auto f_xx = filter_valid_adjoint(g_xx, w, h);
    const auto f_xy = filter_valid_adjoint(g_xy, w, h);
    d_a->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*d_a)[i] = f_mu[i] + 2 * x[i] * f_xx[i] + y[i] * f_xy[i];
  }
  return total * inv_p;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / double(v.size());
}

double std_of(const std::vector<double>& v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return v.empty() ? 0.0 : std::sqrt(s / double(v.size()));
}

FamilyStats summarize(ViewFamily family, const std::vector<double>& ssims, const std::vector<double>& psnrs) {
  FamilyStats st;
  st.family = family;
  st.count = static_cast<int>(ssims.size());
  st.ssim_mean = mean_of(ssims);
  st.ssim_std = std_of(ssims, st.ssim_mean);
  std::vector<double> finite;
  for (double p : psnrs) {
    if (std::isfinite(p)) finite.push_back(p);
    else ++st.psnr_infinite;
  }
  st.psnr_mean = finite.empty() ? std::numeric_limits<double>::infinity() : mean_of(finite);
  st.psnr_std = std_of(finite, st.psnr_mean);
  return st;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, int width, int height) {
  return ssim_impl(a, b, width, height, nullptr);
}

double ssim(const SliceImage& a, const SliceImage& b) {
  if (a.width != b.width || a.height != b.height) throw InvalidParameter("image dimensions do not match");
  return ssim(a.pixels, b.pixels, a.width, a.height);
}

double ssim_with_grad(std::span<const float> a, std::span<const float> b, int width, int height,
                      std::vector<double>& d_a) {
  return ssim_impl(a, b, width, height, &d_a);
}

double psnr(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw InvalidParameter("image dimensions do not match");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  const double mse = se / double(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double psnr(const SliceImage& a, const SliceImage& b) {
  if (a.width != b.width || a.height != b.height) throw InvalidParameter("image dimensions do not match");
  return psnr(a.pixels, b.pixels);
}

const FamilyStats& EvalReport::family(ViewFamily f) const {
  for (const FamilyStats& s : families)
    if (s.family == f) return s;
  throw ContractViolation("family " + to_string(f) + " was not evaluated");
}

double EvalReport::mean_ssim() const {
  double s = 0;
  for (const FamilyStats& f : families) s += f.ssim_mean;
  return families.empty() ? 0.0 : s / double(families.size());
}

std::string EvalReport::to_json() const {
  // ordered_json keeps insertion order so the schema reads top-down.
  using nlohmann::ordered_json;
  auto num = [](double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); };
  ordered_json fams = ordered_json::array();
  for (const FamilyStats& f : families) {
    fams.push_back({{"family", to_string(f.family)},
                    {"count", f.count},
                    {"ssim_mean", f.ssim_mean},
                    {"ssim_std", f.ssim_std},
                    {"psnr_mean", num(f.psnr_mean)},
                    {"psnr_std", num(f.psnr_std)},
                    {"psnr_infinite", f.psnr_infinite}});
  }
  ordered_json j = {{"version", 1}, {"timestamp", timestamp}, {"mean_ssim", mean_ssim()}, {"families", fams}};
  return j.dump(2);
}

FamilyStats evaluate_slices(const GaussianCloud& cloud, const std::vector<SliceImage>& references,
                            const RenderOptions& options) {
  std::vector<double> ssims, psnrs;
  for (const SliceImage& ref : references) {
    const SliceImage pred = render_slice(cloud, SliceSpec{ref.width, ref.height, ref.spacing, ref.pose}, options);
    ssims.push_back(ssim(pred, ref));
    psnrs.push_back(psnr(pred, ref));
  }
  return summarize(ViewFamily::Axial, ssims, psnrs);
}

EvalReport evaluate_views(const GaussianCloud& cloud, const Volume& volume, int n_per_axis,
                          const EvalOptions& options) {
  if (n_per_axis < 1) throw InvalidParameter("views per axis must be >= 1");
  EvalReport report;
  report.timestamp = utc_timestamp();
  for (ViewFamily fam : options.families) {
    const int planes = fam == ViewFamily::Axial ? volume.depth : fam == ViewFamily::Coronal ? volume.height : volume.width;
    std::vector<double> ssims, psnrs;
    for (int k : linear_plane_indices(planes, n_per_axis)) {
      const SliceSpec spec = orthogonal_view(volume, fam, k);
      const SliceImage gt = sample_slice(volume, spec);
      const SliceImage pred = render_slice(cloud, spec, options.render);
      ssims.push_back(ssim(pred, gt));
      psnrs.push_back(psnr(pred, gt));
    }
    report.families.push_back(summarize(fam, ssims, psnrs));
  }
  return report;
}

}  // namespace usplat
