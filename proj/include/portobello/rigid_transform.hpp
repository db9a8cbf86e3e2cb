#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace portobello {

using Vec3 = Eigen::Vector3d;
using Quat = Eigen::Quaterniond;

/// SE(3) pose: unit quaternion plus translation in meters.
///
/// Stored quaternions are canonical: unit norm (renormalized whenever the
/// norm drifts by more than 1e-12) and w >= 0. For w == 0 the first non-zero
/// vector component is made positive, so every rotation has one
/// representation and equality is bitwise on canonical values.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Quat::Identity()), translation_(Vec3::Zero()) {}
  RigidTransform(const Quat& rotation, const Vec3& translation)
      : rotation_(canonical(rotation)), translation_(translation) {}

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Quat::Identity(), t}; }
  static RigidTransform from_yaw(double yaw, const Vec3& t = Vec3::Zero()) {
    return {Quat(Eigen::AngleAxisd(yaw, Vec3::UnitZ())), t};
  }
  static RigidTransform from_axis_angle(const Vec3& axis_angle, const Vec3& t = Vec3::Zero()) {
    const double angle = axis_angle.norm();
    if (angle == 0.0) return from_translation(t);
    return {Quat(Eigen::AngleAxisd(angle, axis_angle / angle)), t};
  }
  /// Quaternion given as (w, x, y, z).
  static RigidTransform from_components(double qw, double qx, double qy, double qz,
                                        const Vec3& t) {
    return {Quat(qw, qx, qy, qz), t};
  }

  const Quat& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Eigen::Matrix3d rotation_matrix() const { return rotation_.toRotationMatrix(); }

  RigidTransform inverse() const {
    const Quat inv = rotation_.conjugate();
    return {inv, -(inv * translation_)};
  }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }

  /// Rotation about +Z after projecting the forward axis onto the XY plane.
  double yaw() const {
    const Vec3 fwd = rotation_ * Vec3::UnitX();
    return std::atan2(fwd.y(), fwd.x());
  }

  /// Rotation angle in [0, pi].
  double angle() const {
    const double w = std::min(1.0, std::abs(rotation_.w()));
    return 2.0 * std::atan2(rotation_.vec().norm(), w);
  }

  /// Rotation as an axis-angle vector.
  Vec3 log_rotation() const {
    const double s = rotation_.vec().norm();
    if (s < 1e-15) return 2.0 * rotation_.vec();
    return rotation_.vec() / s * angle();
  }

  bool operator==(const RigidTransform& o) const {
    return rotation_.coeffs() == o.rotation_.coeffs() && translation_ == o.translation_;
  }

  static Quat canonical(Quat q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) return Quat::Identity();
    if (std::abs(n - 1.0) > 1e-12) q.coeffs() /= n;
    bool flip = q.w() < 0.0;
    if (q.w() == 0.0) {
      for (int i = 0; i < 3; ++i) {
        if (q.vec()[i] != 0.0) {
          flip = q.vec()[i] < 0.0;
          break;
        }
      }
    }
    if (flip) q.coeffs() = -q.coeffs();
    return q;
  }

 private:
  Quat rotation_;
  Vec3 translation_;
};

/// Applies b, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  // The constructor renormalizes once the product drifts off the unit sphere.
  return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  return compose(a, b);
}

/// Angle of the relative rotation between two transforms.
inline double rotation_distance(const RigidTransform& a, const RigidTransform& b) {
  return (a.inverse() * b).angle();
}

inline double translation_distance(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation() - b.translation()).norm();
}

inline bool approx_equal(const RigidTransform& a, const RigidTransform& b, double tol) {
  return translation_distance(a, b) <= tol && rotation_distance(a, b) <= tol;
}

/// Linear interpolation of translation, spherical interpolation of rotation.
inline RigidTransform interpolate(const RigidTransform& a, const RigidTransform& b, double ratio) {
  if (ratio <= 0.0) return a;
  if (ratio >= 1.0) return b;
  return {a.rotation().slerp(ratio, b.rotation()),
          a.translation() + ratio * (b.translation() - a.translation())};
}

inline std::ostream& operator<<(std::ostream& os, const RigidTransform& t) {
  const auto& q = t.rotation();
  const auto& p = t.translation();
  return os << "RigidTransform{q=(" << q.w() << ", " << q.x() << ", " << q.y() << ", " << q.z()
            << "), t=(" << p.x() << ", " << p.y() << ", " << p.z() << ")}";
}

}  // namespace portobello
