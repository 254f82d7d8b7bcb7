#pragma once

#include <cstdint>
#include <vector>

#include "marepo/geometry.hpp"
#include "marepo/rng.hpp"
#include "marepo/scm.hpp"

namespace marepo::oracle {

using geometry::Intrinsics;
using geometry::Pose;
using geometry::Vec3;

struct Correspondence {
    double u = 0.0, v = 0.0;  // grid coordinates (cell centers)
    Vec3 p = Vec3::Zero();    // scene point, meters
};

struct RansacConfig {
    double reproj_threshold = 2.0;  // grid units
    int max_iterations = 1000;
    double confidence = 0.999;
    std::uint64_t seed = 0;
};

// Direct linear transform over >= 6 correspondences: pixels normalized by
// K^-1, the 2n x 12 homogeneous system solved by SVD, rotation recovered by
// SVD orthogonalization with the sign fixed by majority-positive depths.
// Returns the camera-to-scene pose.
Pose dlt_pnp(const std::vector<Correspondence>& corrs, const Intrinsics& k);

// Gauss-Newton on squared reprojection residuals over an axis-angle (+)
// translation local parameterization, with step halving; the cost sequence
// is non-increasing. Singular normal equations return init unchanged.
Pose refine_pnp(const Pose& init, const std::vector<Correspondence>& corrs, const Intrinsics& k,
                int iters = 20);

struct RansacResult {
    Pose pose;
    std::vector<std::uint8_t> inliers;
    int inlier_count = 0;
};

// Minimal 6-point DLT hypotheses, inlier scoring by reprojection threshold,
// confidence-based early exit, final refinement on the best inlier set.
// Deterministic given cfg.seed.
RansacResult ransac_pnp(const std::vector<Correspondence>& corrs, const Intrinsics& k,
                        const RansacConfig& cfg);

// One correspondence per valid cell, at the cell center.
std::vector<Correspondence> correspondences_from_scm(const SceneCoordinateMap& scm);

}  // namespace marepo::oracle
