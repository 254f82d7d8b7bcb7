#include "marepo/oracle.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <limits>

#include "marepo/errors.hpp"

namespace marepo::oracle {

using geometry::Mat3;

namespace {

// Squared reprojection error in grid units; points at or behind the camera
// count as infinite.
double reproj_err_sq(const Pose& cam_to_scene, const Correspondence& c, const Intrinsics& k) {
    const Vec3 q = cam_to_scene.R.transpose() * (c.p - cam_to_scene.t);
    if (q.z() <= 1e-6) return std::numeric_limits<double>::infinity();
    const double du = k.fx * q.x() / q.z() + k.cx - c.u;
    const double dv = k.fy * q.y() / q.z() + k.cy - c.v;
    return du * du + dv * dv;
}

double total_cost(const Pose& cam_to_scene, const std::vector<Correspondence>& corrs,
                  const Intrinsics& k) {
    double cost = 0.0;
    for (const auto& c : corrs) {
        const double e = reproj_err_sq(cam_to_scene, c, k);
        if (std::isfinite(e)) cost += e;
    }
    return cost;
}

}  // namespace

Pose dlt_pnp(const std::vector<Correspondence>& corrs, const Intrinsics& k) {
    const int n = static_cast<int>(corrs.size());
    if (n < 6) throw TooFewPoints("dlt_pnp: need at least 6 correspondences");

    // Hartley normalization of the 3D points.
    Vec3 centroid = Vec3::Zero();
    for (const auto& c : corrs) centroid += c.p;
    centroid /= n;
    double mean_dist = 0.0;
    for (const auto& c : corrs) mean_dist += (c.p - centroid).norm();
    mean_dist /= n;
    const double scale = mean_dist > 1e-12 ? std::sqrt(3.0) / mean_dist : 1.0;

    Eigen::MatrixXd a(2 * n, 12);
    for (int i = 0; i < n; ++i) {
        const Vec3 pn = scale * (corrs[static_cast<std::size_t>(i)].p - centroid);
        const double x = (corrs[static_cast<std::size_t>(i)].u - k.cx) / k.fx;
        const double y = (corrs[static_cast<std::size_t>(i)].v - k.cy) / k.fy;
        const Eigen::RowVector4d xh(pn.x(), pn.y(), pn.z(), 1.0);
        a.row(2 * i).setZero();
        a.row(2 * i).segment<4>(0) = xh;
        a.row(2 * i).segment<4>(8) = -x * xh;
        a.row(2 * i + 1).setZero();
        a.row(2 * i + 1).segment<4>(4) = xh;
        a.row(2 * i + 1).segment<4>(8) = -y * xh;
    }

    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
    const auto& sig = svd.singularValues();
    // The solution itself lives in the (near-)null space; degeneracy means a
    // second vanishing direction.
    if (sig(10) <= 1e-8 * sig(0))
        throw DegenerateConfiguration("dlt_pnp: design matrix has a degenerate null space");

    Eigen::VectorXd p = svd.matrixV().col(11);
    Eigen::Matrix<double, 3, 4> pm;
    pm.row(0) = p.segment<4>(0).transpose();
    pm.row(1) = p.segment<4>(4).transpose();
    pm.row(2) = p.segment<4>(8).transpose();

    // Fix the global sign so that the majority of depths are positive.
    int pos = 0, neg = 0;
    for (int i = 0; i < n; ++i) {
        const Vec3 pn = scale * (corrs[static_cast<std::size_t>(i)].p - centroid);
        const double d = pm.row(2).head<3>().dot(pn) + pm(2, 3);
        (d > 0.0 ? pos : neg) += 1;
    }
    if (neg > pos) pm = -pm;

    // Undo the normalization: P acts on original points via X' = s(X - c).
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.topLeftCorner<3, 3>() *= scale;
    t.topRightCorner<3, 1>() = -scale * centroid;
    pm = pm * t;

    const Mat3 m = pm.leftCols<3>();
    Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (msvd.singularValues()(2) < 1e-12 * msvd.singularValues()(0))
        throw DegenerateConfiguration("dlt_pnp: rotation part nearly singular");
    const Mat3 u = msvd.matrixU();
    const Mat3 v = msvd.matrixV();
    const double det = (u * v.transpose()).determinant();
    const Mat3 r_sc = u * Vec3(1.0, 1.0, det < 0.0 ? -1.0 : 1.0).asDiagonal() * v.transpose();
    const double sigma = msvd.singularValues().mean();
    const Vec3 t_sc = pm.col(3) / sigma;

    // pm is scene-to-camera; return the camera-to-scene inverse.
    Pose out;
    out.R = r_sc.transpose();
    out.t = -(r_sc.transpose() * t_sc);
    return out;
}

Pose refine_pnp(const Pose& init, const std::vector<Correspondence>& corrs, const Intrinsics& k,
                int iters) {
    if (corrs.size() < 6) throw TooFewPoints("refine_pnp: need at least 6 correspondences");
    Mat3 r_sc = init.R.transpose();
    Vec3 t_sc = -(r_sc * init.t);

    auto cost_of = [&](const Mat3& r, const Vec3& t) {
        Pose p;
        p.R = r.transpose();
        p.t = -(r.transpose() * t);
        return total_cost(p, corrs, k);
    };
    double cost = cost_of(r_sc, t_sc);
    // below this the residuals are double-precision noise; stepping would
    // only wander by ulps
    const double cost_floor = 1e-16 * static_cast<double>(corrs.size());

    for (int it = 0; it < iters && cost > cost_floor; ++it) {
        Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
        for (const auto& c : corrs) {
            const Vec3 q = r_sc * c.p + t_sc;
            if (q.z() <= 1e-6) continue;
            const double iz = 1.0 / q.z();
            Eigen::Matrix<double, 2, 3> d_r_d_q;
            d_r_d_q << k.fx * iz, 0.0, -k.fx * q.x() * iz * iz,
                       0.0, k.fy * iz, -k.fy * q.y() * iz * iz;
            // Left perturbation: q(w, d) = exp([w]x) q + d.
            Eigen::Matrix<double, 3, 6> d_q;
            d_q.leftCols<3>() << 0.0, q.z(), -q.y(),
                                 -q.z(), 0.0, q.x(),
                                 q.y(), -q.x(), 0.0;  // -[q]x
            d_q.rightCols<3>().setIdentity();
            const Eigen::Matrix<double, 2, 6> j = d_r_d_q * d_q;
            Eigen::Vector2d r;
            r << k.fx * q.x() * iz + k.cx - c.u, k.fy * q.y() * iz + k.cy - c.v;
            h += j.transpose() * j;
            b += j.transpose() * r;
        }
        Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(h);
        if (ldlt.info() != Eigen::Success) break;  // singular normal equations: keep current
        Eigen::Matrix<double, 6, 1> delta = ldlt.solve(-b);
        if (!delta.allFinite()) break;

        // step halving keeps the cost non-increasing
        double step = 1.0;
        bool improved = false;
        for (int half = 0; half < 24; ++half) {
            const Vec3 w = step * delta.head<3>();
            const Vec3 d = step * delta.tail<3>();
            const double angle = w.norm();
            const Mat3 rot = angle > 0.0
                                 ? geometry::axis_angle_to_matrix(w / angle, angle)
                                 : Mat3::Identity();
            const Mat3 r_new = rot * r_sc;
            const Vec3 t_new = rot * t_sc + d;
            const double c_new = cost_of(r_new, t_new);
            if (c_new < cost) {
                const double decrease = cost - c_new;
                r_sc = r_new;
                t_sc = t_new;
                cost = c_new;
                improved = true;
                if (decrease < 1e-12) it = iters;  // converged
                break;
            }
            step *= 0.5;
        }
        if (!improved) break;
    }

    Pose out;
    out.R = r_sc.transpose();
    out.t = -(r_sc.transpose() * t_sc);
    return out;
}

RansacResult ransac_pnp(const std::vector<Correspondence>& corrs, const Intrinsics& k,
                        const RansacConfig& cfg) {
    const int n = static_cast<int>(corrs.size());
    if (n < 6) throw TooFewPoints("ransac_pnp: need at least 6 correspondences");
    if (cfg.reproj_threshold <= 0.0 || cfg.max_iterations < 1)
        throw DataError("ransac_pnp: invalid config");

    Rng rng(cfg.seed);
    const double thr_sq = cfg.reproj_threshold * cfg.reproj_threshold;

    auto count_inliers = [&](const Pose& pose, std::vector<std::uint8_t>* flags) {
        int count = 0;
        if (flags) flags->assign(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < n; ++i) {
            if (reproj_err_sq(pose, corrs[static_cast<std::size_t>(i)], k) <= thr_sq) {
                ++count;
                if (flags) (*flags)[static_cast<std::size_t>(i)] = 1;
            }
        }
        return count;
    };

    Pose best_pose;
    int best_count = -1;
    double needed = cfg.max_iterations;
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;

    for (int it = 0; it < cfg.max_iterations && it < needed; ++it) {
        // 6 distinct indices by partial shuffle
        for (int j = 0; j < 6; ++j) {
            const int pick = j + static_cast<int>(rng.uniform_index(pool.size() - j));
            std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick)]);
        }
        std::vector<Correspondence> minimal;
        for (int j = 0; j < 6; ++j) minimal.push_back(corrs[static_cast<std::size_t>(pool[j])]);

        Pose hyp;
        try {
            hyp = dlt_pnp(minimal, k);
        } catch (const NumericError&) {
            continue;
        }
        const int count = count_inliers(hyp, nullptr);
        if (count > best_count) {
            best_count = count;
            best_pose = hyp;
            const double w = static_cast<double>(count) / n;
            const double denom = std::log(1.0 - std::min(0.999999, std::pow(w, 6)));
            if (denom < 0.0)
                needed = std::min<double>(cfg.max_iterations,
                                          std::log(1.0 - cfg.confidence) / denom);
        }
    }
    if (best_count < 6) throw NoConsensus("ransac_pnp: fewer than 6 inliers");

    RansacResult result;
    std::vector<std::uint8_t> flags;
    count_inliers(best_pose, &flags);
    std::vector<Correspondence> inliers;
    for (int i = 0; i < n; ++i)
        if (flags[static_cast<std::size_t>(i)]) inliers.push_back(corrs[static_cast<std::size_t>(i)]);

    Pose refined = best_pose;
    if (static_cast<int>(inliers.size()) >= 6) {
        try {
            refined = dlt_pnp(inliers, k);
        } catch (const NumericError&) {
            refined = best_pose;
        }
        refined = refine_pnp(refined, inliers, k);
    }
    result.pose = refined;
    result.inlier_count = count_inliers(refined, &result.inliers);
    return result;
}

std::vector<Correspondence> correspondences_from_scm(const SceneCoordinateMap& scm) {
    std::vector<Correspondence> corrs;
    corrs.reserve(static_cast<std::size_t>(scm.valid_count()));
    for (int v = 0; v < scm.h; ++v) {
        for (int u = 0; u < scm.w; ++u) {
            if (!scm.valid(v, u)) continue;
            Correspondence c;
            c.u = u + geometry::kHalfPixel;
            c.v = v + geometry::kHalfPixel;
            c.p = scm.coords.row(scm.index(v, u)).transpose();
            corrs.push_back(c);
        }
    }
    return corrs;
}

}  // namespace marepo::oracle
