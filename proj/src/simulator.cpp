#include "marepo/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "marepo/errors.hpp"
#include "marepo/io.hpp"
#include "marepo/parallel.hpp"

namespace marepo::sim {

namespace fs = std::filesystem;

void SceneSpec::check() const {
    if (extent <= 0.0) throw DataError("SceneSpec: extent must be positive");
    if (h < 8 || w < 8) throw DataError("SceneSpec: map resolution must be at least 8x8");
    if (n_map < 1 || n_query < 1) throw DataError("SceneSpec: frame counts must be >= 1");
    if (augment_variants < 0) throw DataError("SceneSpec: augment_variants must be >= 0");
}

// ---------------------------------------------------------------------------
// Scene

double Scene::height(double x, double y) const {
    if (kind_ == SurfaceKind::kBoxRoom) return 0.0;
    double z = 0.0;
    for (const auto& b : bumps_) {
        const double dx = x - b.x, dy = y - b.y;
        z += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
    }
    return z * amp_scale_;
}

bool Scene::admissible_center(const Vec3& c) const {
    const double half = 0.5 * extent_;
    if (c.cwiseAbs().maxCoeff() > half * 0.95) return false;
    if (kind_ == SurfaceKind::kHeightfield)
        return c.z() > height(c.x(), c.y()) + 0.05 * extent_;
    return true;
}

bool Scene::intersect(const Vec3& origin, const Vec3& dir, double& s_hit) const {
    const double half = 0.5 * extent_;
    if (kind_ == SurfaceKind::kBoxRoom) {
        // Exit point of the axis-aligned box, seen from inside.
        double best = std::numeric_limits<double>::infinity();
        for (int a = 0; a < 3; ++a) {
            if (dir(a) == 0.0) continue;
            const double wall = dir(a) > 0.0 ? half : -half;
            const double s = (wall - origin(a)) / dir(a);
            if (s > 1e-9 && s < best) {
                const Vec3 p = origin + s * dir;
                bool inside = true;
                for (int b = 0; b < 3; ++b)
                    if (b != a && std::abs(p(b)) > half + 1e-12) inside = false;
                if (inside) best = s;
            }
        }
        if (!std::isfinite(best)) return false;
        s_hit = best;
        return true;
    }

    // Heightfield: march until the ray dips below the surface, then bisect.
    const double step = extent_ / 256.0;
    const double s_max = 3.0 * extent_;
    double s_prev = 1e-4;
    Vec3 p = origin + s_prev * dir;
    double g_prev = p.z() - height(p.x(), p.y());
    if (g_prev <= 0.0) return false;  // starting below the surface
    for (double s = s_prev + step; s <= s_max; s += step) {
        p = origin + s * dir;
        if (std::abs(p.x()) > half || std::abs(p.y()) > half || p.z() > half || p.z() < -half)
            return false;
        const double g = p.z() - height(p.x(), p.y());
        if (g <= 0.0) {
            double lo = s_prev, hi = s;
            for (int it = 0; it < 80; ++it) {
                const double mid = 0.5 * (lo + hi);
                const Vec3 q = origin + mid * dir;
                if (q.z() - height(q.x(), q.y()) > 0.0)
                    lo = mid;
                else
                    hi = mid;
            }
            s_hit = 0.5 * (lo + hi);
            return true;
        }
        s_prev = s;
        g_prev = g;
    }
    return false;
}

std::uint64_t Scene::surface_hash() const {
    // FNV-1a over a fixed 64x64 sampling of the surface.
    std::uint64_t h = 1469598103934665603ull;
    const double half = 0.5 * extent_;
    for (int i = 0; i < 64; ++i) {
        for (int j = 0; j < 64; ++j) {
            const double x = -half + extent_ * (i + 0.5) / 64.0;
            const double y = -half + extent_ * (j + 0.5) / 64.0;
            const double z = height(x, y);
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(z));
            std::memcpy(&bits, &z, sizeof(bits));
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xff;
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

Scene generate_scene(const SceneSpec& spec) {
    spec.check();
    Scene scene;
    scene.kind_ = spec.surface;
    scene.extent_ = spec.extent;
    if (spec.surface == SurfaceKind::kBoxRoom) return scene;

    Rng rng = Rng::derive(spec.seed, 0x5ce9e);
    const double e = spec.extent;
    const int n_bumps = 8;
    for (int i = 0; i < n_bumps; ++i) {
        Scene::Bump b;
        b.x = rng.uniform(-0.35 * e, 0.35 * e);
        b.y = rng.uniform(-0.35 * e, 0.35 * e);
        b.sigma = rng.uniform(0.08 * e, 0.2 * e);
        b.amp = rng.uniform(-0.18 * e, 0.18 * e);
        scene.bumps_.push_back(b);
    }
    // Keep the surface within a central slab of the extent.
    double peak = 0.0;
    scene.amp_scale_ = 1.0;
    for (int i = 0; i < 64; ++i)
        for (int j = 0; j < 64; ++j) {
            const double x = -0.5 * e + e * (i + 0.5) / 64.0;
            const double y = -0.5 * e + e * (j + 0.5) / 64.0;
            peak = std::max(peak, std::abs(scene.height(x, y)));
        }
    if (peak > 0.22 * e) scene.amp_scale_ = 0.22 * e / peak;
    return scene;
}

// ---------------------------------------------------------------------------
// Pose sampling and rendering

Intrinsics sample_intrinsics(const SceneSpec& spec, Rng& rng) {
    Intrinsics k;
    const double scale = spec.w / 640.0;
    const double f = spec.randomize_k ? rng.uniform(400.0, 800.0) : 600.0;
    k.fx = k.fy = f * scale;
    k.cx = spec.w / 2.0;
    k.cy = spec.h / 2.0;
    return k;
}

namespace {

// Camera-to-scene rotation looking from center toward target, y axis down.
geometry::Mat3 look_at(const Vec3& center, const Vec3& target, const Vec3& up) {
    const Vec3 z = (target - center).normalized();
    Vec3 y0 = -up;
    Vec3 x = y0.cross(z);
    if (x.norm() < 1e-9) {
        // forward parallel to up; fall back to a fixed horizontal axis
        x = Vec3::UnitX().cross(z);
        if (x.norm() < 1e-9) x = Vec3::UnitY().cross(z);
    }
    x.normalize();
    const Vec3 y = z.cross(x);
    geometry::Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    return r;
}

double validity_fraction(const SceneCoordinateMap& scm) {
    return static_cast<double>(scm.valid_count()) / static_cast<double>(scm.size());
}

}  // namespace

Pose sample_pose(const Scene& scene, const Intrinsics& k, int h, int w, Rng& rng) {
    const double e = scene.extent();
    for (int attempt = 0; attempt < 100; ++attempt) {
        Vec3 target, center;
        if (scene.kind() == SurfaceKind::kHeightfield) {
            target.x() = rng.uniform(-0.3 * e, 0.3 * e);
            target.y() = rng.uniform(-0.3 * e, 0.3 * e);
            target.z() = scene.height(target.x(), target.y());
            // shell above the surface, elevation bounded away from grazing
            const double az = rng.uniform(0.0, 2.0 * EIGEN_PI);
            const double elev_z = rng.uniform(0.35, 0.95);
            const double rxy = std::sqrt(1.0 - elev_z * elev_z);
            const Vec3 dir(rxy * std::cos(az), rxy * std::sin(az), elev_z);
            const double radius = rng.uniform(0.3 * e, 0.55 * e);
            center = target + radius * dir;
        } else {
            for (int i = 0; i < 3; ++i) center(i) = rng.uniform(-0.25 * e, 0.25 * e);
            for (int i = 0; i < 3; ++i) target(i) = rng.uniform(-0.45 * e, 0.45 * e);
            if ((target - center).norm() < 0.1 * e) continue;
        }
        if (!scene.admissible_center(center)) continue;

        // up-vector jitter <= 20 degrees
        const double jitter = rng.uniform(0.0, 20.0) * EIGEN_PI / 180.0;
        const double jaz = rng.uniform(0.0, 2.0 * EIGEN_PI);
        const Vec3 jitter_axis(std::cos(jaz), std::sin(jaz), 0.0);
        const Vec3 up = geometry::axis_angle_to_matrix(jitter_axis, jitter) * Vec3::UnitZ();

        Pose pose;
        pose.R = look_at(center, target, up);
        pose.t = center;
        const SceneCoordinateMap scm = render_scm(scene, pose, k, h, w);
        if (validity_fraction(scm) >= 0.30) return pose;
    }
    throw UnviewableScene("sample_pose: no viewpoint with >= 30% surface coverage in 100 tries");
}

SceneCoordinateMap render_scm(const Scene& scene, const Pose& pose, const Intrinsics& k, int h,
                              int w) {
    SceneCoordinateMap scm(h, w);
    const double half = 0.5 * scene.extent();
    for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
            const Vec3 dir_cam = geometry::cell_ray_dir(k, u, v);
            const Vec3 dir = pose.R * dir_cam;
            double s;
            if (!scene.intersect(pose.t, dir, s)) continue;
            const Vec3 p = pose.t + s * dir;
            if (p.cwiseAbs().maxCoeff() > half + 1e-9) continue;
            const int idx = scm.index(v, u);
            scm.coords.row(idx) = p.transpose();
            scm.mask[static_cast<std::size_t>(idx)] = 1;
        }
    }
    return scm;
}

SceneCoordinateMap inject_noise(const SceneCoordinateMap& scm, const NoiseSpec& spec, Rng& rng) {
    if (spec.fraction < 0.0 || spec.fraction > 1.0)
        throw DataError("inject_noise: fraction must be in [0, 1]");
    if (spec.magnitude < 0.0) throw DataError("inject_noise: magnitude must be >= 0");
    SceneCoordinateMap out = scm;
    std::vector<int> valid;
    for (int i = 0; i < scm.size(); ++i)
        if (scm.mask[static_cast<std::size_t>(i)]) valid.push_back(i);
    const int n_pick = static_cast<int>(std::floor(spec.fraction * valid.size()));
    // Partial Fisher-Yates: the first n_pick entries are a uniform subset.
    for (int i = 0; i < n_pick; ++i) {
        const int j = i + static_cast<int>(rng.uniform_index(valid.size() - i));
        std::swap(valid[static_cast<std::size_t>(i)], valid[static_cast<std::size_t>(j)]);
        const int idx = valid[static_cast<std::size_t>(i)];
        for (int c = 0; c < 3; ++c)
            out.coords(idx, c) += rng.uniform(-spec.magnitude, spec.magnitude);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

namespace {

struct FrameJob {
    std::string name;
    std::uint64_t stream = 0;
    bool is_variant = false;
    int base_index = 0;   // index of the base frame within its split
    int variant = 0;
};

struct RenderedFrame {
    SceneCoordinateMap scm;
    Intrinsics k;
    Pose pose;
};

std::string frame_name(int idx) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d", idx);
    return buf;
}

RenderedFrame render_base_frame(const Scene& scene, const SceneSpec& spec, std::uint64_t stream) {
    Rng rng = Rng::derive(spec.seed, stream);
    RenderedFrame f;
    f.k = sample_intrinsics(spec, rng);
    f.pose = sample_pose(scene, f.k, spec.h, spec.w, rng);
    f.scm = render_scm(scene, f.pose, f.k, spec.h, spec.w);
    return f;
}

// Map-level analog of the offline augmentation: in-plane rotation (<= 15
// degrees, realized as a roll of the camera), focal rescale in [0.67, 1.5],
// and a principal-point crop shift. The variant is re-rendered so every
// stored coordinate stays exactly on its cell ray; the rotation border is
// masked the way a resampled image would be.
RenderedFrame render_variant(const Scene& scene, const SceneSpec& spec, const RenderedFrame& base,
                             std::uint64_t stream) {
    Rng rng = Rng::derive(spec.seed, stream);
    const double theta = rng.uniform(-15.0, 15.0) * EIGEN_PI / 180.0;
    const double scale = rng.uniform(0.67, 1.5);
    const double dx = rng.uniform(-0.15, 0.15) * spec.w;
    const double dy = rng.uniform(-0.15, 0.15) * spec.h;

    RenderedFrame f;
    f.k = base.k;
    f.k.fx *= scale;
    f.k.fy *= scale;
    f.k.cx += dx;
    f.k.cy += dy;
    f.pose = base.pose;
    f.pose.R = base.pose.R * geometry::axis_angle_to_matrix(Vec3::UnitZ(), theta);
    f.scm = render_scm(scene, f.pose, f.k, spec.h, spec.w);

    // cells whose rotated position falls outside the grid become invalid
    const double cu = spec.w / 2.0, cv = spec.h / 2.0;
    for (int v = 0; v < spec.h; ++v) {
        for (int u = 0; u < spec.w; ++u) {
            const double ru = cu + std::cos(theta) * (u + 0.5 - cu) - std::sin(theta) * (v + 0.5 - cv);
            const double rv = cv + std::sin(theta) * (u + 0.5 - cu) + std::cos(theta) * (v + 0.5 - cv);
            if (ru < 0.0 || ru >= spec.w || rv < 0.0 || rv >= spec.h)
                f.scm.mask[static_cast<std::size_t>(f.scm.index(v, u))] = 0;
        }
    }
    return f;
}

}  // namespace

void make_dataset(const SceneSpec& spec, const std::string& out_dir) {
    spec.check();
    const Scene scene = generate_scene(spec);

    fs::create_directories(fs::path(out_dir) / "mapping");
    fs::create_directories(fs::path(out_dir) / "query");

    std::vector<FrameJob> jobs;
    for (int i = 0; i < spec.n_map; ++i)
        jobs.push_back({"mapping/" + frame_name(i), static_cast<std::uint64_t>(1 + i), false, i, 0});
    for (int i = 0; i < spec.n_query; ++i)
        jobs.push_back({"query/" + frame_name(i),
                        static_cast<std::uint64_t>(1 + spec.n_map + i), false, i, 0});

    std::vector<RenderedFrame> frames(jobs.size());
    parallel_for(static_cast<int>(jobs.size()), [&](int i) {
        frames[static_cast<std::size_t>(i)] =
            render_base_frame(scene, spec, jobs[static_cast<std::size_t>(i)].stream);
    });

    // offline variants of the mapping frames
    std::vector<FrameJob> vjobs;
    const std::uint64_t vbase = static_cast<std::uint64_t>(1 + spec.n_map + spec.n_query);
    for (int i = 0; i < spec.n_map && spec.augment_variants > 0; ++i) {
        for (int v = 0; v < spec.augment_variants; ++v) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "_v%02d", v);
            vjobs.push_back({"mapping/" + frame_name(i) + buf,
                             vbase + static_cast<std::uint64_t>(i) * spec.augment_variants + v,
                             true, i, v});
        }
    }
    std::vector<RenderedFrame> vframes(vjobs.size());
    parallel_for(static_cast<int>(vjobs.size()), [&](int i) {
        const auto& job = vjobs[static_cast<std::size_t>(i)];
        vframes[static_cast<std::size_t>(i)] =
            render_variant(scene, spec, frames[static_cast<std::size_t>(job.base_index)],
                           job.stream);
    });

    auto write_frame = [&](const FrameJob& job, const RenderedFrame& f) {
        const std::string base = (fs::path(out_dir) / job.name).string();
        io::write_scm(base + ".scm", f.scm);
        io::write_pose(base + ".pose.txt", f.pose);
        io::write_intrinsics(base + ".intr.txt", f.k);
    };
    for (std::size_t i = 0; i < jobs.size(); ++i) write_frame(jobs[i], frames[i]);
    for (std::size_t i = 0; i < vjobs.size(); ++i) write_frame(vjobs[i], vframes[i]);

    std::ofstream manifest(fs::path(out_dir) / "manifest.txt", std::ios::binary);
    if (!manifest) throw IoError("make_dataset: cannot write manifest");
    manifest << "seed=" << spec.seed << "\n";
    manifest << "extent=" << io::format_double(spec.extent) << "\n";
    manifest << "surface=" << (spec.surface == SurfaceKind::kHeightfield ? "heightfield" : "box")
             << "\n";
    manifest << "n_map=" << spec.n_map << "\n";
    manifest << "n_query=" << spec.n_query << "\n";
    manifest << "h=" << spec.h << "\n";
    manifest << "w=" << spec.w << "\n";
    manifest << "randomize_k=" << (spec.randomize_k ? 1 : 0) << "\n";
    manifest << "augment_variants=" << spec.augment_variants << "\n";
    for (std::size_t i = 0; i < jobs.size(); ++i)
        manifest << jobs[i].name << " " << jobs[i].stream << "\n";
    for (std::size_t i = 0; i < vjobs.size(); ++i)
        manifest << vjobs[i].name << " " << vjobs[i].stream << "\n";
}

SceneSpec spec_from_kv(const std::map<std::string, std::string>& kv) {
    SceneSpec spec;
    auto to_int = [](const std::string& key, const std::string& value) {
        try {
            std::size_t used = 0;
            const long v = std::stol(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return static_cast<int>(v);
        } catch (const std::exception&) {
            throw DataError("scene spec value for '" + key + "' is not an integer: " + value);
        }
    };
    auto to_double = [](const std::string& key, const std::string& value) {
        try {
            std::size_t used = 0;
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return v;
        } catch (const std::exception&) {
            throw DataError("scene spec value for '" + key + "' is not a number: " + value);
        }
    };
    for (const auto& [key, value] : kv) {
        if (key == "seed")
            spec.seed = static_cast<std::uint64_t>(std::stoull(value));
        else if (key == "extent")
            spec.extent = to_double(key, value);
        else if (key == "surface") {
            if (value == "heightfield")
                spec.surface = SurfaceKind::kHeightfield;
            else if (value == "box")
                spec.surface = SurfaceKind::kBoxRoom;
            else
                throw DataError("surface must be heightfield or box, got " + value);
        } else if (key == "n_map")
            spec.n_map = to_int(key, value);
        else if (key == "n_query")
            spec.n_query = to_int(key, value);
        else if (key == "h")
            spec.h = to_int(key, value);
        else if (key == "w")
            spec.w = to_int(key, value);
        else if (key == "randomize_k")
            spec.randomize_k = to_int(key, value) != 0;
        else if (key == "augment_variants")
            spec.augment_variants = to_int(key, value);
        else
            throw DataError("unknown scene spec key: " + key);
    }
    spec.check();
    return spec;
}

}  // namespace marepo::sim
