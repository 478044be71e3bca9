#pragma once

#include <array>

#include <Eigen/Core>
#include <Eigen/LU>

namespace usplat {

using Vec3d = Eigen::Vector3d;
using Mat3d = Eigen::Matrix3d;

/// Rigid probe->world transform in mm. The world->probe map (W) is `inverse()`.
class ProbePose {
 public:
  ProbePose() = default;

  /// Throws InvalidParameter unless `rotation` is orthonormal with det +1 (1e-9).
  ProbePose(const Mat3d& rotation, const Vec3d& translation);

  static ProbePose identity() { return {}; }
  static ProbePose translation_only(const Vec3d& t) { return ProbePose(Mat3d::Identity(), t); }

  /// Intrinsic Z-Y-X Euler angles in degrees: R = Rz(rz) * Ry(ry) * Rx(rx).
  static ProbePose from_euler_zyx_deg(double rx, double ry, double rz, const Vec3d& t);

  /// Row-major rotation (9) followed by translation (3).
  static ProbePose from_array(const std::array<double, 12>& values);
  std::array<double, 12> to_array() const;

  /// Inverse of from_euler_zyx_deg: returns (rx, ry, rz). Ill-conditioned at ry = +-90 deg.
  std::array<double, 3> euler_zyx_deg() const;

  const Mat3d& rotation() const { return rotation_; }
  const Vec3d& translation() const { return translation_; }

  ProbePose inverse() const;
  /// (this * other)(x) = this(other(x)).
  ProbePose compose(const ProbePose& other) const;

  Vec3d apply(const Vec3d& p) const { return rotation_ * p + translation_; }

  static bool is_rotation(const Mat3d& r, double tol = 1e-9);

 private:
  Mat3d rotation_ = Mat3d::Identity();
  Vec3d translation_ = Vec3d::Zero();
};

Mat3d rotation_x_deg(double deg);
Mat3d rotation_y_deg(double deg);
Mat3d rotation_z_deg(double deg);

}  // namespace usplat
