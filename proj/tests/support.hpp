#pragma once

// Independent oracles shared by the unit and acceptance tests. Nothing here calls into the
// rasterizer: the naive renderer evaluates every Gaussian at every pixel directly in the
// world frame.

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "usplat/model.hpp"
#include "usplat/rasterizer.hpp"

namespace usplat::testing {

inline Mat3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline ProbePose random_pose(std::mt19937_64& rng, double translation) {
  std::uniform_real_distribution<double> u(-translation, translation);
  return ProbePose(random_rotation(rng), Vec3d(u(rng), u(rng), u(rng)));
}

/// Raw factor entries with a moderate condition number.
inline std::array<double, 6> random_raw(std::mt19937_64& rng, double diag_lo = 0.7, double diag_hi = 1.3,
                                        double off = 0.3) {
  std::uniform_real_distribution<double> d(diag_lo, diag_hi), o(-off, off);
  return {d(rng), d(rng), d(rng), o(rng), o(rng), o(rng)};
}

struct SceneOptions {
  int n = 30;
  double lateral = 4.0;  // means ~ U(+-lateral) in x, y (mm)
  double depth = 1.5;    // means ~ U(+-depth) in z (mm)
  double length_scale = 1.0;
  double diag_lo = 0.7, diag_hi = 1.3, off = 0.3;
};

/// Random cloud around the world origin; pair with a pose near identity.
inline GaussianCloudD random_scene(std::uint64_t seed, const SceneOptions& o = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  GaussianCloudD c;
  c.length_scale = o.length_scale;
  for (int i = 0; i < o.n; ++i) {
    const Vec3<double> m(u(rng) * o.lateral, u(rng) * o.lateral, u(rng) * o.depth);
    const auto r = random_raw(rng, o.diag_lo, o.diag_hi, o.off);
    c.push_back(m, std::span<const double, 6>(r), 2.0 * u(rng), 2.0 * u(rng));
  }
  c.bg_intensity_raw = 0.3;
  c.bg_opacity_raw = -2.0;
  return c;
}

/// Every Gaussian at every pixel, no truncation, 64-bit, evaluated in the world frame with
/// the precision rebuilt from the raw entries.
inline std::vector<double> naive_render(const GaussianCloudD& c, const SliceSpec& spec) {
  std::vector<double> out(static_cast<std::size_t>(spec.width) * spec.height);
  const double s2 = c.length_scale * c.length_scale;
  std::vector<Mat3d> prec(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto r = c.raw(i);
    Mat3d l = Mat3d::Zero();
    l << r[0] * r[0] + c.beta, 0, 0, r[3], r[1] * r[1] + c.beta, 0, r[4], r[5], r[2] * r[2] + c.beta;
    prec[i] = l * l.transpose() / s2;
  }
  const double bga = 1.0 / (1.0 + std::exp(-c.bg_opacity_raw));
  const double bgc = 1.0 / (1.0 + std::exp(-c.bg_intensity_raw));
  for (int v = 0; v < spec.height; ++v) {
    for (int u = 0; u < spec.width; ++u) {
      const double x1 = (u - 0.5 * (spec.width - 1)) * spec.spacing;
      const double x2 = (v - 0.5 * (spec.height - 1)) * spec.spacing;
      const Vec3d w = spec.pose.rotation() * Vec3d(x1, x2, 0.0) + spec.pose.translation();
      double num = bga * bgc, den = bga;
      for (std::size_t i = 0; i < c.size(); ++i) {
        const Vec3d d = w - c.mean(i);
        const double a = (1.0 / (1.0 + std::exp(-c.opacity_raw[i]))) * std::exp(-0.5 * d.dot(prec[i] * d));
        num += a / (1.0 + std::exp(-c.intensity_raw[i]));
        den += a;
      }
      out[static_cast<std::size_t>(v) * spec.width + u] = std::clamp(num / den, 0.0, 1.0);
    }
  }
  return out;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("usplat_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace usplat::testing
