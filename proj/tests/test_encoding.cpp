#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "marepo/encoding.hpp"
#include "marepo/rng.hpp"
#include "test_util.hpp"

using namespace marepo;
using namespace marepo::encoding;
using geometry::Intrinsics;

TEST_CASE("pe2d principal-ray cell alternates 0,1") {
    // X_ray = Y_ray = 0 at cell (4, 3) for cx = u - 0.5, cy = v - 0.5.
    const Intrinsics k{100, 100, 3.5, 2.5};
    EncodingConfig cfg;
    cfg.d_model = 16;
    const auto grid = pe2d<double>(k, 8, 8, cfg);
    const auto row = grid.data.row(3 * 8 + 4);
    for (int i = 0; i < 16; i += 2) {
        CHECK(row(i) == 0.0);
        CHECK(row(i + 1) == 1.0);
    }
    CHECK(grid.mask == std::vector<std::uint8_t>(64, 1));
}

TEST_CASE("pe2d hand-evaluated vector for d_model=8") {
    // fx = 400 makes X_ray = u - cx - 0.5; cx chosen so X_ray = pi/2, Y_ray = 0.
    Intrinsics k;
    k.fx = 400.0;
    k.fy = 400.0;
    k.cx = 9.5 - EIGEN_PI / 2.0;
    k.cy = 4.5;
    EncodingConfig cfg;
    cfg.d_model = 8;
    const auto grid = pe2d<double>(k, 6, 12, cfg);
    const auto row = grid.data.row(5 * 12 + 10);  // cell u=10, v=5

    // omega_0 = 1, omega_1 = 10000^(-1/4) = 0.1 exactly
    CHECK(row(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(row(1)) < 1e-9);  // cos(pi/2)
    CHECK(row(2) == 0.0);
    CHECK(row(3) == 1.0);
    CHECK(row(4) == doctest::Approx(0.15643446504023087).epsilon(1e-9));
    CHECK(row(5) == doctest::Approx(0.9876883405951378).epsilon(1e-9));
    CHECK(row(6) == 0.0);
    CHECK(row(7) == 1.0);
}

TEST_CASE("pe2d camera invariance is bit-exact for identical rays") {
    EncodingConfig cfg;
    cfg.d_model = 32;
    const Intrinsics k1{400, 400, 32, 32};
    const Intrinsics k2{800, 800, 10.5, 10.5};
    const auto g1 = pe2d<double>(k1, 64, 64, cfg);
    const auto g2 = pe2d<double>(k2, 64, 64, cfg);
    // (u,v) = (32,32) under k1 and (10,10) under k2 both give rays (-0.5,-0.5).
    const auto r1 = g1.data.row(32 * 64 + 32);
    const auto r2 = g2.data.row(10 * 64 + 10);
    for (int i = 0; i < cfg.d_model; ++i) CHECK(r1(i) == r2(i));
}

TEST_CASE("pe2d channels stay in [-1, 1]") {
    Rng rng(5);
    EncodingConfig cfg;
    cfg.d_model = 24;
    for (int trial = 0; trial < 20; ++trial) {
        Intrinsics k;
        k.fx = rng.uniform(20, 900);
        k.fy = rng.uniform(20, 900);
        k.cx = rng.uniform(-10, 90);
        k.cy = rng.uniform(-10, 90);
        const auto grid = pe2d<double>(k, 12, 16, cfg);
        CHECK(grid.data.maxCoeff() <= 1.0);
        CHECK(grid.data.minCoeff() >= -1.0);
    }
}

TEST_CASE("pe3d_raw patterns") {
    SceneCoordinateMap scm(1, 2);
    scm.mask[0] = 1;  // p = (0,0,0)
    scm.mask[1] = 1;
    scm.coords.row(1) << 0.5, 0.0, 0.0;

    const auto g5 = pe3d_raw<double>(scm, 5);
    CHECK(g5.channels() == 33);  // 3(2m+1)
    const auto zero_row = g5.data.row(0);
    for (int c = 0; c < 3; ++c) CHECK(zero_row(c) == 0.0);
    for (int j = 0; j < 5; ++j) {
        for (int c = 0; c < 3; ++c) {
            CHECK(zero_row(3 + 6 * j + c) == 0.0);  // sin block
            CHECK(zero_row(6 + 6 * j + c) == 1.0);  // cos block
        }
    }

    const auto g2 = pe3d_raw<double>(scm, 2);
    CHECK(g2.channels() == 15);
    const auto row = g2.data.row(1);
    CHECK(row(0) == 0.5);
    CHECK(row(3) == doctest::Approx(1.0).epsilon(1e-12));   // sin(pi/2)
    CHECK(std::abs(row(6)) < 1e-9);                          // cos(pi/2)
    CHECK(std::abs(row(9)) < 1e-9);                          // sin(pi)
    CHECK(row(12) == doctest::Approx(-1.0).epsilon(1e-12));  // cos(pi)
}

TEST_CASE("pe3d_raw invalid cells are zero-filled and masked") {
    SceneCoordinateMap scm(2, 2);
    scm.mask = {1, 0, 0, 1};
    scm.coords.row(0) << 1.0, 2.0, 3.0;
    scm.coords.row(1) << 9.0, 9.0, 9.0;  // garbage on an invalid cell
    scm.coords.row(3) << -1.0, 0.5, 0.25;
    const auto g = pe3d_raw<double>(scm, 3);
    CHECK(g.mask == scm.mask);
    CHECK(g.data.row(1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.data.row(2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.data.row(0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("pe3d_raw sinusoidal channels are 2-periodic") {
    Rng rng(9);
    SceneCoordinateMap a(1, 4), b(1, 4);
    for (int i = 0; i < 4; ++i) {
        a.mask[static_cast<std::size_t>(i)] = b.mask[static_cast<std::size_t>(i)] = 1;
        for (int c = 0; c < 3; ++c) a.coords(i, c) = rng.uniform(-2.0, 2.0);
        b.coords.row(i) = a.coords.row(i);
        b.coords(i, 0) += 2.0;
    }
    const auto ga = pe3d_raw<double>(a, 4);
    const auto gb = pe3d_raw<double>(b, 4);
    CHECK((ga.data.rightCols(ga.channels() - 3) - gb.data.rightCols(gb.channels() - 3))
              .cwiseAbs()
              .maxCoeff() <= 1e-9);
    CHECK((ga.data.col(0) - gb.data.col(0)).cwiseAbs().minCoeff() > 1.0);
}

TEST_CASE("pe3d conv lift") {
    Rng rng(11);
    const SceneCoordinateMap scm = testutil::random_scm(rng, 3, 4);
    EncodingConfig cfg;
    cfg.d_model = 8;
    cfg.freq_bands = 2;
    const int raw = cfg.raw3d_channels();

    // zero conv -> zero grid
    const auto zero = pe3d<double>(scm, cfg, MatX<double>::Zero(8, raw), VecX<double>::Zero(8));
    CHECK(zero.data.cwiseAbs().maxCoeff() == 0.0);

    // selector of the first 3 channels -> coordinates pass through
    MatX<double> sel = MatX<double>::Zero(8, raw);
    sel(0, 0) = sel(1, 1) = sel(2, 2) = 1.0;
    const auto passthrough = pe3d<double>(scm, cfg, sel, VecX<double>::Zero(8));
    for (int i = 0; i < scm.size(); ++i) {
        if (!scm.mask[static_cast<std::size_t>(i)]) continue;
        for (int c = 0; c < 3; ++c)
            CHECK(passthrough.data(i, c) == doctest::Approx(scm.coords(i, c)).epsilon(1e-12));
    }

    // random conv matches an explicit matvec oracle
    MatX<double> w(8, raw);
    VecX<double> b(8);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
    for (int i = 0; i < 8; ++i) b(i) = rng.uniform(-1, 1);
    const auto raw_grid = pe3d_raw<double>(scm, cfg.freq_bands);
    const auto lifted = pe3d<double>(scm, cfg, w, b);
    for (int i = 0; i < scm.size(); ++i) {
        if (!scm.mask[static_cast<std::size_t>(i)]) {
            CHECK(lifted.data.row(i).cwiseAbs().maxCoeff() == 0.0);
            continue;
        }
        for (int o = 0; o < 8; ++o) {
            double acc = b(o);
            for (int c = 0; c < raw; ++c) acc += w(o, c) * raw_grid.data(i, c);
            CHECK(lifted.data(i, o) == doctest::Approx(acc).epsilon(1e-6));
        }
    }

    // shape mismatch
    CHECK_THROWS_AS(pe3d<double>(scm, cfg, MatX<double>::Zero(8, raw + 1), b), ShapeMismatch);
}

TEST_CASE("fuse") {
    Rng rng(13);
    TokenGrid<double> a(2, 3, 4), b(2, 3, 4);
    for (int i = 0; i < a.data.size(); ++i) {
        a.data.data()[i] = rng.uniform(-1, 1);
        b.data.data()[i] = rng.uniform(-1, 1);
    }

    TokenGrid<double> zeros(2, 3, 4);
    CHECK((fuse(a, zeros).data - a.data).cwiseAbs().maxCoeff() == 0.0);

    TokenGrid<double> neg = a;
    neg.data = -neg.data;
    CHECK(fuse(a, neg).data.cwiseAbs().maxCoeff() == 0.0);

    const auto sum = fuse(a, b);
    for (int i = 0; i < 6; ++i)
        for (int c = 0; c < 4; ++c)
            CHECK(sum.data(i, c) == a.data(i, c) + b.data(i, c));

    const auto ba = fuse(b, a);
    CHECK((sum.data - ba.data).cwiseAbs().maxCoeff() == 0.0);

    TokenGrid<double> wrong(2, 3, 6);
    CHECK_THROWS_AS(fuse(a, wrong), ShapeMismatch);
    TokenGrid<double> masked = b;
    masked.mask[2] = 0;
    CHECK_THROWS_AS(fuse(a, masked), ShapeMismatch);
}

TEST_CASE("apply_mask zeroes newly invalid rows") {
    TokenGrid<double> g(1, 3, 2);
    g.data << 1, 2, 3, 4, 5, 6;
    const std::vector<std::uint8_t> mask = {1, 0, 1};
    const auto masked = encoding::apply_mask(g, mask);
    CHECK(masked.mask == mask);
    CHECK(masked.data.row(1).cwiseAbs().maxCoeff() == 0.0);
    CHECK(masked.data(0, 1) == 2.0);
}
