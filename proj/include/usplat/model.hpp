#pragma once

// Gaussian cloud representation with a lower-triangular precision factor.
//
// Each Gaussian i carries a mean (mm, world frame) and six raw values that build
//
//        | r0^2 + b     0          0      |
//    L = | r3        r1^2 + b      0      |      precision (model units) = L L^T
//        | r4           r5      r2^2 + b  |
//
// so the precision is positive definite for every raw input when b > 0. Spatial
// quantities in mm relate to model units through `length_scale` (mm per model
// unit): precision in mm^-2 is L L^T / length_scale^2.

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "usplat/errors.hpp"
#include "usplat/pose.hpp"

namespace usplat {

template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

inline constexpr double kDefaultBeta = 0.01;
inline constexpr int kRawPerGaussian = 6;

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Derivative of sigmoid expressed through its value s.
template <typename T>
T sigmoid_grad_from_value(T s) {
  return s * (T(1) - s);
}

template <typename T>
T logit(T p) {
  return std::log(p / (T(1) - p));
}

/// Lower-triangular factor with diagonal >= beta.
template <typename T>
class TriangularPrecision {
 public:
  TriangularPrecision() = default;
  explicit TriangularPrecision(const Mat3<T>& lower) : m_(lower) {}

  const Mat3<T>& matrix() const { return m_; }
  T operator()(int r, int c) const { return m_(r, c); }
  Mat3<T> precision() const { return m_ * m_.transpose(); }
  T determinant() const { return m_(0, 0) * m_(1, 1) * m_(2, 2); }

 private:
  Mat3<T> m_ = Mat3<T>::Identity();
};

/// Materializes L from raw values ordered (L11, L22, L33, L21, L31, L32).
template <typename T>
TriangularPrecision<T> build_L(std::span<const T, 6> raw, T beta) {
  if (!(beta > T(0))) throw InvalidParameter("beta must be strictly positive");
  Mat3<T> l = Mat3<T>::Zero();
  l(0, 0) = raw[0] * raw[0] + beta;
  l(1, 1) = raw[1] * raw[1] + beta;
  l(2, 2) = raw[2] * raw[2] + beta;
  l(1, 0) = raw[3];
  l(2, 0) = raw[4];
  l(2, 1) = raw[5];
  return TriangularPrecision<T>(l);
}

/// Inverse of build_L. Diagonal entries below beta cannot be represented.
template <typename T>
std::array<T, 6> raw_from_L(const Mat3<T>& l, T beta) {
  std::array<T, 6> raw{};
  for (int j = 0; j < 3; ++j) {
    const T d = l(j, j) - beta;
    if (d < T(0)) throw InvalidParameter("diagonal of L is below the precision floor beta");
    raw[j] = std::sqrt(d);
  }
  raw[3] = l(1, 0);
  raw[4] = l(2, 0);
  raw[5] = l(2, 1);
  return raw;
}

/// Forward substitution against the identity. Result is lower triangular.
template <typename T>
Mat3<T> invert_lower_triangular(const Mat3<T>& l) {
  if (!(l(0, 0) > T(0) && l(1, 1) > T(0) && l(2, 2) > T(0))) {
    throw SingularMatrix("lower-triangular factor has a non-positive diagonal entry");
  }
  Mat3<T> x = Mat3<T>::Zero();
  for (int col = 0; col < 3; ++col) {
    for (int row = col; row < 3; ++row) {
      T acc = row == col ? T(1) : T(0);
      for (int k = col; k < row; ++k) acc -= l(row, k) * x(k, col);
      x(row, col) = acc / l(row, row);
    }
  }
  return x;
}

template <typename T>
Mat3<T> invert_lower_triangular(const TriangularPrecision<T>& l) {
  return invert_lower_triangular(l.matrix());
}

/// Sigma = (L^-1)^T L^-1, in model units.
template <typename T>
Mat3<T> covariance_from_L(const TriangularPrecision<T>& l) {
  const Mat3<T> inv = invert_lower_triangular(l);
  return inv.transpose() * inv;
}

/// mu + scale * L^-T z. With z ~ N(0, I) the result is distributed N(mu, scale^2 Sigma).
template <typename T>
Vec3<T> sample_gaussian(const Vec3<T>& mean, const TriangularPrecision<T>& l, const Vec3<T>& z,
                        T length_scale = T(1)) {
  const Mat3<T> inv = invert_lower_triangular(l);
  return mean + length_scale * (inv.transpose() * z);
}

template <typename T>
struct ProbeFrameGaussian {
  Vec3<T> mean_probe;
  Mat3<T> l_probe;          // R_W * L / length_scale, not triangular in general
  Mat3<T> precision_probe;  // l_probe * l_probe^T, mm^-2
  Mat3<T> cov_factor;       // length_scale * R_W * L^-T, covariance = cov_factor * cov_factor^T
};

template <typename T>
ProbeFrameGaussian<T> to_probe_frame(const Vec3<T>& mean, const TriangularPrecision<T>& l,
                                     const ProbePose& pose, T length_scale = T(1)) {
  const ProbePose w = pose.inverse();
  const Mat3<T> rw = w.rotation().cast<T>();
  ProbeFrameGaussian<T> g;
  g.mean_probe = rw * mean + w.translation().cast<T>();
  g.l_probe = rw * l.matrix() / length_scale;
  g.precision_probe = g.l_probe * g.l_probe.transpose();
  g.cov_factor = length_scale * rw * invert_lower_triangular(l).transpose();
  return g;
}

/// alpha * exp(-0.5 * d^T A d) with d = [x1, x2, 0] - mean_probe.
template <typename T>
T evaluate_opacity(const Vec2<T>& x, const ProbeFrameGaussian<T>& g, T alpha) {
  const Vec3<T> d(x[0] - g.mean_probe[0], x[1] - g.mean_probe[1], -g.mean_probe[2]);
  const T q = d.dot(g.precision_probe * d);
  return alpha * std::exp(T(-0.5) * q);
}

/// Structure-of-arrays parameter store.
template <typename T>
struct GaussianCloudT {
  std::vector<T> means;          // N x 3, mm
  std::vector<T> l_raw;          // N x 6
  std::vector<T> intensity_raw;  // N
  std::vector<T> opacity_raw;    // N
  T bg_intensity_raw = T(0);
  T bg_opacity_raw = T(-4);
  T beta = T(kDefaultBeta);
  T length_scale = T(1);  // mm per model unit

  std::size_t size() const { return intensity_raw.size(); }
  bool empty() const { return size() == 0; }

  Vec3<T> mean(std::size_t i) const { return {means[3 * i], means[3 * i + 1], means[3 * i + 2]}; }
  std::span<const T, 6> raw(std::size_t i) const {
    return std::span<const T, 6>(l_raw.data() + 6 * i, 6);
  }
  TriangularPrecision<T> factor(std::size_t i) const { return build_L<T>(raw(i), beta); }
  T alpha(std::size_t i) const { return sigmoid(opacity_raw[i]); }
  T color(std::size_t i) const { return sigmoid(intensity_raw[i]); }
  T bg_alpha() const { return sigmoid(bg_opacity_raw); }
  T bg_color() const { return sigmoid(bg_intensity_raw); }

  void resize(std::size_t n) {
    means.resize(3 * n);
    l_raw.resize(6 * n);
    intensity_raw.resize(n);
    opacity_raw.resize(n);
  }

  void push_back(const Vec3<T>& mean, std::span<const T, 6> raw_values, T intensity, T opacity) {
    for (int k = 0; k < 3; ++k) means.push_back(mean[k]);
    for (T v : raw_values) l_raw.push_back(v);
    intensity_raw.push_back(intensity);
    opacity_raw.push_back(opacity);
  }

  /// Throws InvalidParameter on inconsistent lengths, beta <= 0 or non-finite values.
  void validate() const {
    const std::size_t n = size();
    if (means.size() != 3 * n || l_raw.size() != 6 * n || opacity_raw.size() != n) {
      throw InvalidParameter("gaussian cloud arrays have inconsistent lengths");
    }
    if (!(beta > T(0))) throw InvalidParameter("beta must be strictly positive");
    if (!(length_scale > T(0))) throw InvalidParameter("length_scale must be strictly positive");
    auto finite = [](const std::vector<T>& v) {
      for (T x : v)
        if (!std::isfinite(x)) return false;
      return true;
    };
    if (!finite(means) || !finite(l_raw) || !finite(intensity_raw) || !finite(opacity_raw) ||
        !std::isfinite(bg_intensity_raw) || !std::isfinite(bg_opacity_raw)) {
      throw InvalidParameter("gaussian cloud contains non-finite parameters");
    }
  }

  template <typename U>
  GaussianCloudT<U> cast() const {
    GaussianCloudT<U> out;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    out.means = conv(means);
    out.l_raw = conv(l_raw);
    out.intensity_raw = conv(intensity_raw);
    out.opacity_raw = conv(opacity_raw);
    out.bg_intensity_raw = U(bg_intensity_raw);
    out.bg_opacity_raw = U(bg_opacity_raw);
    out.beta = U(beta);
    out.length_scale = U(length_scale);
    return out;
  }

  bool operator==(const GaussianCloudT&) const = default;
};

using GaussianCloud = GaussianCloudT<float>;
using GaussianCloudD = GaussianCloudT<double>;

}  // namespace usplat
