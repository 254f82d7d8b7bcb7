#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "marepo/io.hpp"
#include "marepo/model.hpp"
#include "marepo/simulator.hpp"
#include "marepo/training.hpp"
#include "test_util.hpp"

using namespace marepo;
using namespace marepo::training;
using geometry::Mat3;
using geometry::Pose;
using geometry::Vec3;
using marepo::testutil::random_params;
using model::ModelParams;
using model::RegressorConfig;

namespace {

RegressorConfig tiny_config() {
    RegressorConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.n_blocks = 4;
    cfg.group_size = 2;
    return cfg;
}

TrainSample random_sample(Rng& rng, int h = 4, int w = 5) {
    TrainSample s;
    s.scm = testutil::random_scm(rng, h, w);
    s.k.fx = rng.uniform(50, 100);
    s.k.fy = rng.uniform(50, 100);
    s.k.cx = w / 2.0;
    s.k.cy = h / 2.0;
    s.gt = testutil::random_pose(rng);
    return s;
}

// Loss value only, same reduction as gradients(): mean over the batch of
// the per-head L1 sums.
double batch_loss(const ModelParams<double>& params, const std::vector<TrainSample>& batch,
                  const RegressorConfig& cfg) {
    double total = 0.0;
    for (const auto& s : batch) {
        model::ForwardCache<double> cache;
        const auto outs = model::forward_cached<double>(s.scm, s.k, cfg, params, true, cache);
        for (const auto& o : outs) {
            model::VecX<double> g;
            total += training::detail::head_loss_grad<double>(o, s.gt, cfg.rotation_repr, g);
        }
    }
    return total / static_cast<double>(batch.size());
}

std::vector<double*> flat_ptrs(ModelParams<double>& p, std::vector<Eigen::Index>& sizes) {
    std::vector<double*> ptrs;
    model::for_each_tensor(p, [&](const std::string&, auto& t) {
        ptrs.push_back(t.data());
        sizes.push_back(t.size());
    });
    return ptrs;
}

bool params_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
    std::vector<const float*> pa, pb;
    std::vector<Eigen::Index> sizes;
    model::for_each_tensor(a, [&](const std::string&, const auto& t) {
        pa.push_back(t.data());
        sizes.push_back(t.size());
    });
    model::for_each_tensor(b, [&](const std::string&, const auto& t) { pb.push_back(t.data()); });
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (Eigen::Index j = 0; j < sizes[i]; ++j)
            if (pa[i][j] != pb[i][j]) return false;
    return true;
}

}  // namespace

TEST_CASE("pose_loss hand values") {
    Rng rng(1);
    const Pose p = testutil::random_pose(rng);
    CHECK(pose_loss(p, p) == 0.0);

    Pose a, b;
    a.R = geometry::axis_angle_to_matrix(Vec3::UnitZ(), EIGEN_PI / 2.0);
    b.R = Mat3::Identity();
    a.t = b.t = Vec3(0.5, -0.5, 2.0);
    CHECK(pose_loss(a, b) == doctest::Approx(4.0).epsilon(1e-12));

    Pose c = p, d = p;
    c.t = d.t + Vec3(0.1, -0.2, 0.3);
    CHECK(pose_loss(c, d) == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("total_loss") {
    Rng rng(2);
    const Pose p = testutil::random_pose(rng);
    CHECK(total_loss(p, p, p, p) == 0.0);

    Pose off = p;
    off.t += Vec3(0.1, -0.2, 0.3);
    CHECK(total_loss(p, p, off, p) == doctest::Approx(0.6).epsilon(1e-12));

    Pose off2 = p;
    off2.t += Vec3(0.2, -0.4, 0.6);
    CHECK(total_loss(p, p, off2, p) == doctest::Approx(1.2).epsilon(1e-12));
}

TEST_CASE("augment with zero jitter is the identity") {
    Rng srng(3);
    const TrainSample s = random_sample(srng);
    Rng rng(4);
    const TrainSample out = augment(s, {0.0, 0.0}, rng);
    CHECK((out.scm.coords - s.scm.coords).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.gt.R - s.gt.R).cwiseAbs().maxCoeff() == 0.0);
    CHECK((out.gt.t - s.gt.t).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("augment by a pure translation shifts coords and gt together") {
    Rng srng(5);
    const TrainSample s = random_sample(srng);
    Pose t;
    t.t = Vec3(1, 0, 0);
    const TrainSample out = apply_rigid_jitter(s, t);
    for (int i = 0; i < s.scm.size(); ++i) {
        if (!s.scm.mask[static_cast<std::size_t>(i)]) continue;
        CHECK(out.scm.coords(i, 0) == doctest::Approx(s.scm.coords(i, 0) + 1.0));
        CHECK(out.scm.coords(i, 1) == s.scm.coords(i, 1));
    }
    CHECK((out.gt.t - (s.gt.t + Vec3(1, 0, 0))).norm() == 0.0);
    CHECK((out.gt.R - s.gt.R).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("augmentation preserves reprojection consistency") {
    // Rendered frames satisfy project(K, gt^-1 p) = cell center; the jitter
    // must preserve that exactly (within fp noise).
    sim::SceneSpec spec;
    spec.seed = 99;
    spec.n_map = 1;
    spec.n_query = 1;
    spec.h = 12;
    spec.w = 16;
    const sim::Scene scene = sim::generate_scene(spec);
    Rng rng(6);
    const sim::Intrinsics k = sim::sample_intrinsics(spec, rng);
    const Pose pose = sim::sample_pose(scene, k, spec.h, spec.w, rng);
    TrainSample s;
    s.scm = sim::render_scm(scene, pose, k, spec.h, spec.w);
    s.k = k;
    s.gt = pose;

    for (int trial = 0; trial < 10; ++trial) {
        Rng arng(100 + trial);
        const TrainSample aug = augment(s, {1.0, 180.0}, arng);
        const Pose inv = geometry::pose_inverse(aug.gt);
        for (int v = 0; v < s.scm.h; ++v) {
            for (int u = 0; u < s.scm.w; ++u) {
                if (!aug.scm.valid(v, u)) continue;
                const Vec3 p = aug.scm.coords.row(aug.scm.index(v, u)).transpose();
                double pu, pv;
                geometry::project(aug.k, geometry::transform_point(inv, p), pu, pv);
                CHECK(std::abs(pu - (u + 0.5)) <= 1e-6);
                CHECK(std::abs(pv - (v + 0.5)) <= 1e-6);
            }
        }
    }
}

TEST_CASE("gradients are exactly zero at an exact fit") {
    RegressorConfig cfg = tiny_config();
    ModelParams<double> params = random_params<double>(cfg, 11, 0.3);
    for (auto& h : params.heads) {
        h.m3.setZero();
        h.e3 = model::identity_pose_bias<double>(cfg.rotation_repr);
    }
    Rng rng(12);
    TrainSample s = random_sample(rng);
    s.gt = Pose::identity();

    ModelParams<double> grads;
    const double loss = gradients<double>(params, {s}, cfg, grads);
    CHECK(loss == 0.0);
    model::for_each_tensor(grads, [&](const std::string&, const auto& t) {
        CHECK(t.cwiseAbs().maxCoeff() == 0.0);
    });
}

TEST_CASE("analytic gradients match central finite differences") {
    RegressorConfig cfg = tiny_config();
    const ModelParams<double> base = random_params<double>(cfg, 21, 0.3);
    Rng rng(22);
    std::vector<TrainSample> batch = {random_sample(rng), random_sample(rng)};

    ModelParams<double> grads;
    gradients<double>(base, batch, cfg, grads);

    ModelParams<double> probe = base;
    std::vector<Eigen::Index> sizes;
    const auto ptrs = flat_ptrs(probe, sizes);
    std::vector<const double*> g_ptrs;
    model::for_each_tensor(grads, [&](const std::string&, const auto& t) {
        g_ptrs.push_back(t.data());
    });

    Eigen::Index total = 0;
    for (const auto s : sizes) total += s;
    const double h = 1e-5;
    double max_rel = 0.0;
    int checked = 0;
    for (int trial = 0; trial < 240; ++trial) {
        Eigen::Index flat = static_cast<Eigen::Index>(rng.uniform_index(
            static_cast<std::uint64_t>(total)));
        std::size_t tensor = 0;
        while (flat >= sizes[tensor]) {
            flat -= sizes[tensor];
            ++tensor;
        }
        double* slot = ptrs[tensor] + flat;
        const double saved = *slot;
        *slot = saved + h;
        const double up = batch_loss(probe, batch, cfg);
        *slot = saved - h;
        const double down = batch_loss(probe, batch, cfg);
        *slot = saved;
        const double fd = (up - down) / (2.0 * h);
        const double analytic = g_ptrs[tensor][flat];
        const double rel = std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
        max_rel = std::max(max_rel, rel);
        ++checked;
    }
    CHECK(checked >= 200);
    CHECK(max_rel < 1e-4);
}

TEST_CASE("batch gradients are the mean of single-sample gradients") {
    RegressorConfig cfg = tiny_config();
    const ModelParams<double> params = random_params<double>(cfg, 31, 0.3);
    Rng rng(32);
    const TrainSample a = random_sample(rng), b = random_sample(rng);

    ModelParams<double> g_batch, g_a, g_b;
    gradients<double>(params, {a, b}, cfg, g_batch);
    gradients<double>(params, {a}, cfg, g_a);
    gradients<double>(params, {b}, cfg, g_b);

    std::vector<const double*> pb, pa2, pb2;
    std::vector<Eigen::Index> sizes;
    model::for_each_tensor(g_batch, [&](const std::string&, const auto& t) {
        pb.push_back(t.data());
        sizes.push_back(t.size());
    });
    model::for_each_tensor(g_a, [&](const std::string&, const auto& t) { pa2.push_back(t.data()); });
    model::for_each_tensor(g_b, [&](const std::string&, const auto& t) { pb2.push_back(t.data()); });
    for (std::size_t i = 0; i < pb.size(); ++i)
        for (Eigen::Index j = 0; j < sizes[i]; ++j)
            CHECK(std::abs(pb[i][j] - 0.5 * (pa2[i][j] + pb2[i][j])) <= 1e-12);
}

TEST_CASE("gradients reject empty batches and non-finite losses") {
    RegressorConfig cfg = tiny_config();
    ModelParams<double> params = random_params<double>(cfg, 41, 0.3);
    ModelParams<double> grads;
    CHECK_THROWS_AS(gradients<double>(params, {}, cfg, grads), EmptySequence);

    params.blocks[0].w1(0, 0) = std::numeric_limits<double>::infinity();
    Rng rng(42);
    const TrainSample s = random_sample(rng);
    CHECK_THROWS_AS(gradients<double>(params, {s}, cfg, grads), NonFiniteLoss);
}

TEST_CASE("adamw zero-gradient no-op and single-step hand value") {
    RegressorConfig cfg = tiny_config();
    OptimConfig ocfg;
    ocfg.weight_decay = 0.0;

    ModelParams<float> params = random_params<float>(cfg, 51, 0.3);
    const ModelParams<float> before = params;
    ModelParams<float> zeros = model::make_zero_params<float>(cfg);
    auto state = make_optim_state<float>(cfg);
    adamw_step<float>(params, zeros, state, ocfg, 0.1);
    CHECK(params_equal(params, before));

    // g = 1 everywhere, lr = 0.1 -> every parameter moves by ~-0.1
    ModelParams<float> ones = model::make_zero_params<float>(cfg);
    model::for_each_tensor(ones, [&](const std::string&, auto& t) { t.setOnes(); });
    auto state2 = make_optim_state<float>(cfg);
    ModelParams<float> params2 = before;
    adamw_step<float>(params2, ones, state2, ocfg, 0.1);
    std::vector<const float*> pa, pc;
    std::vector<Eigen::Index> sizes;
    model::for_each_tensor(before, [&](const std::string&, const auto& t) {
        pa.push_back(t.data());
        sizes.push_back(t.size());
    });
    model::for_each_tensor(params2, [&](const std::string&, const auto& t) { pc.push_back(t.data()); });
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (Eigen::Index j = 0; j < sizes[i]; ++j)
            CHECK(pc[i][j] == doctest::Approx(pa[i][j] - 0.1f).epsilon(1e-5));
}

TEST_CASE("one_cycle_lr endpoints") {
    OptimConfig ocfg;
    ocfg.lr_min = 3e-4;
    ocfg.lr_max = 2e-3;
    const std::int64_t total = 1000;
    CHECK(one_cycle_lr(0, total, ocfg) == doctest::Approx(3e-4));
    CHECK(one_cycle_lr(300, total, ocfg) == doctest::Approx(2e-3));
    CHECK(one_cycle_lr(total, total, ocfg) == doctest::Approx(3e-5));
    CHECK(one_cycle_lr(150, total, ocfg) > 3e-4);
    CHECK(one_cycle_lr(150, total, ocfg) < 2e-3);
}

TEST_CASE("training overfits a single sample without augmentation") {
    RegressorConfig cfg = tiny_config();
    Rng rng(61);
    TrainSample s = random_sample(rng, 4, 5);

    OptimConfig ocfg;
    ocfg.epochs = 1200;
    ocfg.batch_size = 1;
    ocfg.seed = 7;
    ocfg.weight_decay = 0.0;
    const AugmentConfig no_aug{0.0, 0.0};
    const TrainResult result =
        train_in_memory({s}, {}, cfg, ocfg, no_aug, model::init_params<float>(cfg, ocfg.seed),
                        true, 0.0);
    REQUIRE(!result.epochs.empty());
    CHECK(result.epochs.back().train_loss < 1e-2);
}

TEST_CASE("identical seeds give bit-identical trained parameters") {
    RegressorConfig cfg = tiny_config();
    Rng rng(71);
    std::vector<TrainSample> samples;
    for (int i = 0; i < 5; ++i) samples.push_back(random_sample(rng));

    OptimConfig ocfg;
    ocfg.epochs = 3;
    ocfg.batch_size = 2;
    ocfg.seed = 1234;
    const AugmentConfig acfg{0.5, 90.0};
    const TrainResult a = train_in_memory(samples, {}, cfg, ocfg, acfg,
                                          model::init_params<float>(cfg, ocfg.seed), true, 0.0);
    const TrainResult b = train_in_memory(samples, {}, cfg, ocfg, acfg,
                                          model::init_params<float>(cfg, ocfg.seed), true, 0.0);
    CHECK(params_equal(a.params, b.params));
    CHECK(a.metrics_csv == b.metrics_csv);
}

TEST_CASE("training aborts on non-finite loss and keeps the last good params") {
    RegressorConfig cfg = tiny_config();
    Rng rng(81);
    std::vector<TrainSample> samples = {random_sample(rng)};
    ModelParams<float> bad = model::init_params<float>(cfg, 1);
    bad.pe_w(0, 0) = std::numeric_limits<float>::infinity();
    const ModelParams<float> snapshot = bad;

    OptimConfig ocfg;
    ocfg.epochs = 2;
    ocfg.batch_size = 1;
    const TrainResult r =
        train_in_memory(samples, {}, cfg, ocfg, {0.0, 0.0}, std::move(bad), true, 0.0);
    CHECK(r.aborted_non_finite);
    CHECK(params_equal(r.params, snapshot));
}

TEST_CASE("finetune epochs=0 returns the parameters unchanged") {
    RegressorConfig cfg = tiny_config();
    const ModelParams<float> params = model::init_params<float>(cfg, 5);
    const auto out = finetune(params, "/nonexistent-dir", cfg, {}, {}, 0);
    CHECK(params_equal(out, params));
}

TEST_CASE("finetune runs passes over a dataset directory") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "marepo_test_finetune";
    fs::remove_all(dir);
    sim::SceneSpec spec;
    spec.seed = 5;
    spec.n_map = 4;
    spec.n_query = 1;
    spec.h = 10;
    spec.w = 12;
    sim::make_dataset(spec, dir.string());

    RegressorConfig cfg = tiny_config();
    OptimConfig ocfg;
    ocfg.batch_size = 2;
    ocfg.seed = 3;
    const ModelParams<float> params = model::init_params<float>(cfg, 3);
    const auto tuned = finetune(params, dir.string(), cfg, ocfg, {0.1, 10.0}, 2);
    CHECK(!params_equal(tuned, params));
    fs::remove_all(dir);
}
