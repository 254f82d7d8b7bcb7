#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "marepo/geometry.hpp"
#include "marepo/rng.hpp"
#include "marepo/scm.hpp"

namespace marepo::sim {

using geometry::Intrinsics;
using geometry::Pose;
using geometry::Vec3;

enum class SurfaceKind { kHeightfield, kBoxRoom };

struct SceneSpec {
    std::uint64_t seed = 1;
    double extent = 4.0;  // axis-aligned bounding box edge, meters
    SurfaceKind surface = SurfaceKind::kHeightfield;
    int n_map = 300;
    int n_query = 100;
    int h = 60;
    int w = 80;
    // Per-frame fx = fy drawn uniformly from [400, 800] * (w / 640) grid
    // units when on; fixed at 600 * (w / 640) otherwise.
    bool randomize_k = true;
    // Offline map-level variants per mapping frame (in-plane rotation up to
    // 15 degrees, rescale 0.67-1.5, principal-point crop shift).
    int augment_variants = 0;

    void check() const;
};

struct NoiseSpec {
    double fraction = 0.0;   // of valid cells, in [0, 1]
    double magnitude = 0.0;  // meters, uniform per component in [-m, m]
};

// Analytic scene surface with deterministic construction from a seed.
class Scene {
  public:
    Scene() = default;

    SurfaceKind kind() const { return kind_; }
    double extent() const { return extent_; }

    // Heightfield value z = f(x, y); zero for box rooms.
    double height(double x, double y) const;

    // First intersection of origin + s * dir with the surface, s > 0.
    bool intersect(const Vec3& origin, const Vec3& dir, double& s_hit) const;

    // Whether a camera center placed here is admissible (inside the extent,
    // clear of the surface).
    bool admissible_center(const Vec3& c) const;

    // Hash of the surface sampled on a fixed grid; used for determinism checks.
    std::uint64_t surface_hash() const;

  private:
    friend Scene generate_scene(const SceneSpec& spec);

    struct Bump {
        double x, y, sigma, amp;
    };

    SurfaceKind kind_ = SurfaceKind::kHeightfield;
    double extent_ = 4.0;
    std::vector<Bump> bumps_;
    double amp_scale_ = 1.0;
};

Scene generate_scene(const SceneSpec& spec);

// Draws per-frame intrinsics for the scene spec.
Intrinsics sample_intrinsics(const SceneSpec& spec, Rng& rng);

// Camera in a shell around the surface, looking at a random surface point
// with up-vector jitter up to 20 degrees. Guarantees that at least 30% of
// the rendered grid hits the surface; throws UnviewableScene after 100
// failed attempts.
Pose sample_pose(const Scene& scene, const Intrinsics& k, int h, int w, Rng& rng);

// Casts a ray through each grid cell center and stores the scene-frame hit
// point; misses are masked invalid.
SceneCoordinateMap render_scm(const Scene& scene, const Pose& pose, const Intrinsics& k, int h,
                              int w);

// Adds uniform per-component offsets to floor(fraction * n_valid) uniformly
// chosen valid cells. The mask never changes.
SceneCoordinateMap inject_noise(const SceneCoordinateMap& scm, const NoiseSpec& spec, Rng& rng);

// Writes mapping/ and query/ splits plus a manifest; deterministic in the
// spec seed, byte for byte.
void make_dataset(const SceneSpec& spec, const std::string& out_dir);

// key=value scene description; unknown keys rejected.
SceneSpec spec_from_kv(const std::map<std::string, std::string>& kv);

}  // namespace marepo::sim
