#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "marepo/errors.hpp"
#include "marepo/geometry.hpp"

namespace marepo::model {

enum class RotationRepr { k6d, k9d };

inline int rotation_dims(RotationRepr r) { return r == RotationRepr::k6d ? 6 : 9; }
inline int pose_vector_dims(RotationRepr r) { return 4 + rotation_dims(r); }

// Differentiable decoding of the head output vector into (R, t):
//   t = q(0:3) / softplus(q(3)),
//   R = Gram-Schmidt of two axes (6d) or SVD orthogonalization (9d).
// The cache keeps what the analytic reverse pass needs.
template <class S>
struct DecodeCache {
    using V3 = Eigen::Matrix<S, 3, 1>;
    using M3 = Eigen::Matrix<S, 3, 3>;

    RotationRepr repr = RotationRepr::k6d;
    // translation
    V3 t_num = V3::Zero();
    S w_raw = S(0);
    S w_pos = S(1);
    // 6d
    V3 a2 = V3::Zero();
    V3 b1 = V3::Zero(), b2 = V3::Zero(), b3 = V3::Zero();
    S n1 = S(1), dot12 = S(0), n2 = S(1);
    // 9d
    M3 u_adj = M3::Identity();
    M3 v_adj = M3::Identity();
    V3 sigma_adj = V3::Ones();
};

template <class S>
void decode_pose(const Eigen::Matrix<S, Eigen::Dynamic, 1>& vec, RotationRepr repr,
                 Eigen::Matrix<S, 3, 3>& r_out, Eigen::Matrix<S, 3, 1>& t_out,
                 DecodeCache<S>* cache) {
    using V3 = Eigen::Matrix<S, 3, 1>;
    using M3 = Eigen::Matrix<S, 3, 3>;
    if (vec.size() != pose_vector_dims(repr))
        throw ShapeMismatch("decode_pose: vector size does not match rotation representation");

    const V3 num = vec.template head<3>();
    const S w_raw = vec(3);
    const S w_pos = geometry::detail::softplus(w_raw);
    t_out = num / w_pos;

    DecodeCache<S> local;
    DecodeCache<S>& c = cache ? *cache : local;
    c.repr = repr;
    c.t_num = num;
    c.w_raw = w_raw;
    c.w_pos = w_pos;

    if (repr == RotationRepr::k6d) {
        const V3 a1 = vec.template segment<3>(4);
        const V3 a2 = vec.template segment<3>(7);
        if (!geometry::detail::rot6d_basis<S>(a1, a2, c.b1, c.b2, c.b3, c.n1, c.dot12, c.n2))
            throw DegenerateAxes("decode_pose: degenerate 6d axes");
        c.a2 = a2;
        r_out.col(0) = c.b1;
        r_out.col(1) = c.b2;
        r_out.col(2) = c.b3;
    } else {
        M3 m;
        m << vec(4), vec(5), vec(6), vec(7), vec(8), vec(9), vec(10), vec(11), vec(12);
        Eigen::JacobiSVD<M3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
        if (svd.singularValues()(2) < S(1e-9))
            throw DegenerateMatrix("decode_pose: 9d matrix nearly singular");
        M3 u = svd.matrixU();
        const M3 v = svd.matrixV();
        V3 sig = svd.singularValues();
        if ((u * v.transpose()).determinant() < S(0)) {
            u.col(2) *= S(-1);
            sig(2) *= S(-1);
        }
        c.u_adj = u;
        c.v_adj = v;
        c.sigma_adj = sig;
        r_out = u * v.transpose();
    }
}

// Reverse pass of decode_pose. g_vec accumulates d(loss)/d(vec).
template <class S>
void decode_pose_backward(const DecodeCache<S>& c, const Eigen::Matrix<S, 3, 3>& g_r,
                          const Eigen::Matrix<S, 3, 1>& g_t,
                          Eigen::Matrix<S, Eigen::Dynamic, 1>& g_vec) {
    using V3 = Eigen::Matrix<S, 3, 1>;
    using M3 = Eigen::Matrix<S, 3, 3>;

    // translation: t = num / w_pos, dw_pos/dw_raw = sigmoid(w_raw)
    g_vec.template head<3>() += g_t / c.w_pos;
    const S g_wpos = -g_t.dot(c.t_num) / (c.w_pos * c.w_pos);
    const S sigmoid = S(1) / (S(1) + std::exp(-c.w_raw));
    g_vec(3) += g_wpos * sigmoid;

    if (c.repr == RotationRepr::k6d) {
        const V3 g1 = g_r.col(0);
        const V3 g2 = g_r.col(1);
        const V3 g3 = g_r.col(2);
        // b3 = b1 x b2
        V3 gb1 = g1 + c.b2.cross(g3);
        V3 gb2 = g2 + g3.cross(c.b1);
        // b2 = u / n2 with u = a2 - dot12 * b1
        const V3 gu = (gb2 - gb2.dot(c.b2) * c.b2) / c.n2;
        V3 ga2 = gu;
        const S gdot = -gu.dot(c.b1);
        gb1 += -c.dot12 * gu;
        // dot12 = b1 . a2
        gb1 += gdot * c.a2;
        ga2 += gdot * c.b1;
        // b1 = a1 / n1
        const V3 ga1 = (gb1 - gb1.dot(c.b1) * c.b1) / c.n1;
        g_vec.template segment<3>(4) += ga1;
        g_vec.template segment<3>(7) += ga2;
    } else {
        // R = U' V'^T from the sign-adjusted SVD; dL/dM = U' B V'^T with
        // B antisymmetric, B_ij = (G~_ij - G~_ji) / (sigma'_i + sigma'_j).
        const M3 gt = c.u_adj.transpose() * g_r * c.v_adj;
        M3 b = M3::Zero();
        for (int i = 0; i < 3; ++i) {
            for (int j = i + 1; j < 3; ++j) {
                S denom = c.sigma_adj(i) + c.sigma_adj(j);
                if (std::abs(denom) < S(1e-9)) denom = denom < S(0) ? S(-1e-9) : S(1e-9);
                const S val = (gt(i, j) - gt(j, i)) / denom;
                b(i, j) = val;
                b(j, i) = -val;
            }
        }
        const M3 gm = c.u_adj * b * c.v_adj.transpose();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) g_vec(4 + 3 * i + j) += gm(i, j);
    }
}

}  // namespace marepo::model
