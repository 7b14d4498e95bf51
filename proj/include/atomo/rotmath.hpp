#pragma once

// Rotation representations: continuous 6D encoding (first two columns of
// the rotation matrix, column-major), rotation matrices, axis-angle, and
// the conversions between them. All functions are pure.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

#include "atomo/common.hpp"

namespace atomo::rotmath {

// 6D rotation encoding. Layout: a[0..2] = first column of R,
// a[3..5] = second column (before orthonormalization).
struct Rot6D {
  Eigen::Matrix<double, 6, 1> a;
};

struct RotMatrix {
  Mat3 m;
};

// radians * unit axis; norm in [0, pi] after canonicalization
struct AxisAngle {
  Vec3 v;
};

inline constexpr double kOrthoTol = 1e-6;
inline constexpr double kDegenerateTol = 1e-8;

inline bool is_rotation(const Mat3& m, double tol = 1e-4) {
  return (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(m.determinant() - 1.0) <= tol;
}

// Gram-Schmidt reconstruction of R from its first two (possibly unscaled)
// columns.
inline RotMatrix rot6d_to_matrix(const Rot6D& r) {
  Vec3 a = r.a.head<3>();
  Vec3 b = r.a.tail<3>();
  double na = a.norm();
  if (!(na > kDegenerateTol) || !(b.norm() > kDegenerateTol))
    throw DegenerateInput("rot6d_to_matrix: near-zero column");
  Vec3 c1 = a / na;
  Vec3 w = b - c1.dot(b) * c1;
  double nw = w.norm();
  if (!(nw > kDegenerateTol))
    throw DegenerateInput("rot6d_to_matrix: columns are parallel");
  Vec3 c2 = w / nw;
  Vec3 c3 = c1.cross(c2);
  RotMatrix out;
  out.m.col(0) = c1;
  out.m.col(1) = c2;
  out.m.col(2) = c3;
  return out;
}

inline Rot6D matrix_to_rot6d(const RotMatrix& R) {
  if (!is_rotation(R.m))
    throw InvalidRotation("matrix_to_rot6d: input is not a rotation");
  Rot6D r;
  r.a.head<3>() = R.m.col(0);
  r.a.tail<3>() = R.m.col(1);
  return r;
}

// Rodrigues' formula; v = 0 maps to the identity.
inline RotMatrix axis_angle_to_matrix(const AxisAngle& aa) {
  double angle = aa.v.norm();
  RotMatrix out;
  if (angle < 1e-12) {
    out.m = Mat3::Identity();
    return out;
  }
  Vec3 axis = aa.v / angle;
  out.m = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  return out;
}

// Inverse of Rodrigues. The pi-angle ambiguity is resolved by forcing the
// first nonzero axis component positive.
inline AxisAngle matrix_to_axis_angle(const RotMatrix& R) {
  double c = std::clamp((R.m.trace() - 1.0) * 0.5, -1.0, 1.0);
  double angle = std::acos(c);
  AxisAngle out;
  if (angle < 1e-12) {
    out.v.setZero();
    return out;
  }
  if (angle < M_PI - 1e-6) {
    Vec3 w(R.m(2, 1) - R.m(1, 2), R.m(0, 2) - R.m(2, 0), R.m(1, 0) - R.m(0, 1));
    out.v = angle / (2.0 * std::sin(angle)) * w;
    return out;
  }
  // near pi: axis from the symmetric part, sign fixed by convention
  Mat3 s = 0.5 * (R.m + Mat3::Identity());
  Vec3 axis(std::sqrt(std::max(0.0, s(0, 0))), std::sqrt(std::max(0.0, s(1, 1))),
            std::sqrt(std::max(0.0, s(2, 2))));
  // off-diagonal signs relative to the dominant component
  int k = 0;
  if (axis(1) > axis(k)) k = 1;
  if (axis(2) > axis(k)) k = 2;
  for (int i = 0; i < 3; ++i) {
    if (i == k) continue;
    if (s(k, i) < 0.0) axis(i) = -axis(i);
  }
  axis.normalize();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(axis(i)) > 1e-12) {
      if (axis(i) < 0.0) axis = -axis;
      break;
    }
  }
  out.v = angle * axis;
  return out;
}

// Geodesic distance on SO(3): arccos((trace(R1^T R2) - 1) / 2), in [0, pi].
inline double geodesic_angle(const RotMatrix& r1, const RotMatrix& r2) {
  double t = (r1.m.transpose() * r2.m).trace();
  return std::acos(std::clamp((t - 1.0) * 0.5, -1.0, 1.0));
}

// Per-frame delta rotation R_{t-1}^T R_t in 6D. dt is kept by callers as
// metadata; it is not divided into the encoding (a 6D slot cannot hold a
// scaled Lie-algebra vector).
inline Rot6D angular_velocity_6d(const Rot6D& cur, const Rot6D& prev, double dt) {
  if (!(dt > 0.0)) throw DegenerateInput("angular_velocity_6d: dt must be > 0");
  Mat3 rc = rot6d_to_matrix(cur).m;
  Mat3 rp = rot6d_to_matrix(prev).m;
  return matrix_to_rot6d(RotMatrix{rp.transpose() * rc});
}

}  // namespace atomo::rotmath
