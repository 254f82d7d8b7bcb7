#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "marepo/errors.hpp"

namespace marepo::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Pinhole parameters in coordinate-map grid units (focal length and principal
// point expressed at the 1/8-resolution grid, not full-image pixels).
struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;

    bool valid() const {
        return fx > 0.0 && fy > 0.0 && std::isfinite(fx) && std::isfinite(fy) &&
               std::isfinite(cx) && std::isfinite(cy);
    }
};

// Rigid camera-to-scene transform: x_scene = R * x_cam + t. The camera center
// in the scene frame is t.
struct Pose {
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    static Pose identity() { return {}; }

    // R'R = I and det(R) = +1, both within tol.
    bool is_valid_rotation(double tol = 1e-9) const {
        const Mat3 err = R.transpose() * R - Mat3::Identity();
        return err.cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
    }
};

// Two un-normalized axes; mapped onto SO(3) by Gram-Schmidt + cross product.
struct Rotation6D {
    Vec3 a1 = Vec3::UnitX();
    Vec3 a2 = Vec3::UnitY();
};

// Arbitrary 3x3 matrix; mapped onto SO(3) by SVD orthogonalization.
struct Rotation9D {
    Mat3 m = Mat3::Identity();
};

struct PoseError {
    double trans_err = 0.0;  // meters
    double rot_err = 0.0;    // degrees
};

// Ray components of Eq-style camera-aware embedding input:
//   X_ray = lambda * (u - cx - eps) / fx,  Y_ray = lambda * (v - cy - eps) / fy.
inline constexpr double kRayScale = 400.0;   // lambda
inline constexpr double kHalfPixel = 0.5;    // eps

inline void ray_xy(const Intrinsics& k, double u, double v, double& x_ray, double& y_ray) {
    x_ray = kRayScale * (u - k.cx - kHalfPixel) / k.fx;
    y_ray = kRayScale * (v - k.cy - kHalfPixel) / k.fy;
}

// Camera-frame direction of the ray through the center of grid cell (u, v),
// z component fixed to 1. Grid cell (u, v) has center (u + 0.5, v + 0.5).
inline Vec3 cell_ray_dir(const Intrinsics& k, int u, int v) {
    return {(u + kHalfPixel - k.cx) / k.fx, (v + kHalfPixel - k.cy) / k.fy, 1.0};
}

namespace detail {

// Gram-Schmidt basis shared by the double API and the autodiff path.
template <class S>
bool rot6d_basis(const Eigen::Matrix<S, 3, 1>& a1, const Eigen::Matrix<S, 3, 1>& a2,
                 Eigen::Matrix<S, 3, 1>& b1, Eigen::Matrix<S, 3, 1>& b2,
                 Eigen::Matrix<S, 3, 1>& b3, S& n1, S& dot12, S& n2) {
    n1 = a1.norm();
    if (n1 < S(1e-9)) return false;
    b1 = a1 / n1;
    dot12 = b1.dot(a2);
    const Eigen::Matrix<S, 3, 1> u = a2 - dot12 * b1;
    n2 = u.norm();
    if (n2 < S(1e-9)) return false;
    b2 = u / n2;
    b3 = b1.cross(b2);
    return true;
}

template <class S>
S softplus(S x) {
    // log(1 + e^x), stable in both tails.
    const S zero(0);
    return std::log1p(std::exp(-std::abs(x))) + std::max(x, zero);
}

}  // namespace detail

// Two un-normalized axes -> first two columns of R, third by cross product.
inline Mat3 rot6d_to_matrix(const Rotation6D& r) {
    Vec3 b1, b2, b3;
    double n1, d, n2;
    if (!detail::rot6d_basis<double>(r.a1, r.a2, b1, b2, b3, n1, d, n2))
        throw DegenerateAxes("rot6d_to_matrix: axes degenerate (zero or parallel)");
    Mat3 out;
    out.col(0) = b1;
    out.col(1) = b2;
    out.col(2) = b3;
    return out;
}

// Nearest rotation to M under the Frobenius norm, via SVD with det correction.
inline Mat3 rot9d_to_matrix(const Rotation9D& r) {
    if (!r.m.allFinite()) throw DegenerateMatrix("rot9d_to_matrix: non-finite entries");
    Eigen::JacobiSVD<Mat3> svd(r.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.singularValues()(2) < 1e-9)
        throw DegenerateMatrix("rot9d_to_matrix: smallest singular value below 1e-9");
    const Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    const double s = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return u * Vec3(1.0, 1.0, s).asDiagonal() * v.transpose();
}

// Homogeneous 4-vector -> metric translation, t = (q1,q2,q3) / softplus(q4).
// Softplus keeps the divisor positive for every input.
inline Vec3 homog_to_translation(const Eigen::Vector4d& q) {
    const double w = detail::softplus(q(3));
    return q.head<3>() / w;
}

inline Pose pose_compose(const Pose& a, const Pose& b) {
    return {a.R * b.R, a.R * b.t + a.t};
}

inline Pose pose_inverse(const Pose& p) {
    return {p.R.transpose(), -(p.R.transpose() * p.t)};
}

inline Vec3 transform_point(const Pose& p, const Vec3& x) { return p.R * x + p.t; }

// Camera-frame point -> continuous grid coordinates.
inline void project(const Intrinsics& k, const Vec3& p_cam, double& u, double& v) {
    if (p_cam.z() <= 1e-6) throw BehindCamera("project: z <= 1e-6");
    u = k.fx * p_cam.x() / p_cam.z() + k.cx;
    v = k.fy * p_cam.y() / p_cam.z() + k.cy;
}

inline PoseError pose_error(const Pose& estimate, const Pose& truth) {
    PoseError e;
    e.trans_err = (estimate.t - truth.t).norm();
    const double c = ((estimate.R.transpose() * truth.R).trace() - 1.0) / 2.0;
    e.rot_err = std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / EIGEN_PI;
    return e;
}

// Rodrigues formula; axis need not be normalized unless angle is taken from it.
inline Mat3 axis_angle_to_matrix(const Vec3& axis_unit, double angle_rad) {
    Mat3 k;
    k << 0.0, -axis_unit.z(), axis_unit.y(),
         axis_unit.z(), 0.0, -axis_unit.x(),
         -axis_unit.y(), axis_unit.x(), 0.0;
    return Mat3::Identity() + std::sin(angle_rad) * k + (1.0 - std::cos(angle_rad)) * k * k;
}

}  // namespace marepo::geometry
