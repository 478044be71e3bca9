#include "usplat/pose.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "usplat/errors.hpp"

namespace usplat {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
}

ProbePose::ProbePose(const Mat3d& rotation, const Vec3d& translation)
    : rotation_(rotation), translation_(translation) {
  if (!is_rotation(rotation)) {
    throw InvalidParameter("probe pose rotation is not orthonormal with det +1");
  }
  if (!translation.allFinite()) throw InvalidParameter("probe pose translation is not finite");
}

bool ProbePose::is_rotation(const Mat3d& r, double tol) {
  if (!r.allFinite()) return false;
  const double ortho = (r.transpose() * r - Mat3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

Mat3d rotation_x_deg(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3d r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Mat3d rotation_y_deg(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3d r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Mat3d rotation_z_deg(double deg) {
  const double c = std::cos(deg * kDegToRad), s = std::sin(deg * kDegToRad);
  Mat3d r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

ProbePose ProbePose::from_euler_zyx_deg(double rx, double ry, double rz, const Vec3d& t) {
  if (!std::isfinite(rx) || !std::isfinite(ry) || !std::isfinite(rz)) {
    throw InvalidParameter("euler angles must be finite");
  }
  return ProbePose(rotation_z_deg(rz) * rotation_y_deg(ry) * rotation_x_deg(rx), t);
}

ProbePose ProbePose::from_array(const std::array<double, 12>& v) {
  Mat3d r;
  r << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
  return ProbePose(r, Vec3d(v[9], v[10], v[11]));
}

std::array<double, 12> ProbePose::to_array() const {
  std::array<double, 12> out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[3 * i + j] = rotation_(i, j);
  for (int i = 0; i < 3; ++i) out[9 + i] = translation_[i];
  return out;
}

std::array<double, 3> ProbePose::euler_zyx_deg() const {
  const Mat3d& r = rotation_;
  const double ry = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double rx = std::atan2(r(2, 1), r(2, 2));
  const double rz = std::atan2(r(1, 0), r(0, 0));
  return {rx / kDegToRad, ry / kDegToRad, rz / kDegToRad};
}

ProbePose ProbePose::inverse() const {
  ProbePose out;
  out.rotation_ = rotation_.transpose();
  out.translation_ = -(out.rotation_ * translation_);
  return out;
}

ProbePose ProbePose::compose(const ProbePose& other) const {
  ProbePose out;
  out.rotation_ = rotation_ * other.rotation_;
  out.translation_ = rotation_ * other.translation_ + translation_;
  return out;
}

}  // namespace usplat
