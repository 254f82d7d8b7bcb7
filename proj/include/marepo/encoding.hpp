#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "marepo/errors.hpp"
#include "marepo/geometry.hpp"
#include "marepo/scm.hpp"

namespace marepo::encoding {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct EncodingConfig {
    int d_model = 32;        // channels, divisible by 4
    int freq_bands = 5;      // m, frequency bands of the 3D embedding
    static constexpr double kLambda = geometry::kRayScale;
    static constexpr double kEpsilon = geometry::kHalfPixel;

    void check() const {
        if (d_model <= 0 || d_model % 4 != 0)
            throw ShapeMismatch("EncodingConfig: d_model must be positive and divisible by 4");
        if (freq_bands < 1) throw ShapeMismatch("EncodingConfig: freq_bands must be >= 1");
    }

    int raw3d_channels() const { return 3 * (2 * freq_bands + 1); }
};

// One token per grid cell; masked-out rows are zero and ignored downstream.
template <class S>
struct TokenGrid {
    int h = 0;
    int w = 0;
    MatX<S> data;                     // (h*w) x d_model
    std::vector<std::uint8_t> mask;   // 1 = valid

    TokenGrid() = default;
    TokenGrid(int h_, int w_, int d) : h(h_), w(w_) {
        data.setZero(static_cast<Eigen::Index>(h) * w, d);
        mask.assign(static_cast<std::size_t>(h) * w, 1);
    }

    int channels() const { return static_cast<int>(data.cols()); }
    int size() const { return h * w; }
};

namespace detail {

// Fills one token row with the camera-aware channels of a single cell:
// groups of four (sin wX, cos wX, sin wY, cos wY) with w_k = 10000^(-2k/d).
template <class S>
void pe2d_cell(double x_ray, double y_ray, int d_model, S* out) {
    for (int k = 0; k < d_model / 4; ++k) {
        const double omega = std::pow(10000.0, -2.0 * k / d_model);
        out[4 * k + 0] = static_cast<S>(std::sin(omega * x_ray));
        out[4 * k + 1] = static_cast<S>(std::cos(omega * x_ray));
        out[4 * k + 2] = static_cast<S>(std::sin(omega * y_ray));
        out[4 * k + 3] = static_cast<S>(std::cos(omega * y_ray));
    }
}

}  // namespace detail

// Camera-aware 2D embedding: each cell's channels depend only on the ray
// through it, so cameras with different intrinsics but identical rays
// produce identical tokens. All tokens are valid.
template <class S>
TokenGrid<S> pe2d(const geometry::Intrinsics& k, int h, int w, const EncodingConfig& cfg) {
    cfg.check();
    TokenGrid<S> grid(h, w, cfg.d_model);
    std::vector<double> x_rays(w), y_rays(h);
    for (int u = 0; u < w; ++u) {
        double xr, yr;
        geometry::ray_xy(k, u, 0.0, xr, yr);
        x_rays[u] = xr;
    }
    for (int v = 0; v < h; ++v) {
        double xr, yr;
        geometry::ray_xy(k, 0.0, v, xr, yr);
        y_rays[v] = yr;
    }
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u)
            detail::pe2d_cell(x_rays[u], y_rays[v], cfg.d_model, grid.data.row(v * w + u).data());
    return grid;
}

// Intrinsics-free substitute used by the dynamic-PE ablation: rays replaced by
// lambda * (u - w/2) / w and lambda * (v - h/2) / h.
template <class S>
TokenGrid<S> pe2d_normalized_grid(int h, int w, const EncodingConfig& cfg) {
    cfg.check();
    TokenGrid<S> grid(h, w, cfg.d_model);
    for (int v = 0; v < h; ++v) {
        const double yr = EncodingConfig::kLambda * (v - h / 2.0) / h;
        for (int u = 0; u < w; ++u) {
            const double xr = EncodingConfig::kLambda * (u - w / 2.0) / w;
            detail::pe2d_cell(xr, yr, cfg.d_model, grid.data.row(v * w + u).data());
        }
    }
    return grid;
}

// Sinusoidal part of the 3D embedding: [p, sin(2^0 pi p), cos(2^0 pi p), ...,
// sin(2^(m-1) pi p), cos(2^(m-1) pi p)], 3(2m+1) channels. Invalid cells are
// zero-filled and masked.
template <class S>
TokenGrid<S> pe3d_raw(const SceneCoordinateMap& scm, int m) {
    if (m < 1) throw ShapeMismatch("pe3d_raw: m must be >= 1");
    scm.check_consistent();
    TokenGrid<S> grid(scm.h, scm.w, 3 * (2 * m + 1));
    grid.mask = scm.mask;
    for (int i = 0; i < scm.size(); ++i) {
        if (!scm.mask[static_cast<std::size_t>(i)]) continue;
        S* out = grid.data.row(i).data();
        for (int c = 0; c < 3; ++c) out[c] = static_cast<S>(scm.coords(i, c));
        double scale = std::numbers::pi;
        for (int j = 0; j < m; ++j) {
            for (int c = 0; c < 3; ++c) {
                out[3 + 6 * j + c] = static_cast<S>(std::sin(scale * scm.coords(i, c)));
                out[6 + 6 * j + c] = static_cast<S>(std::cos(scale * scm.coords(i, c)));
            }
            scale *= 2.0;
        }
    }
    return grid;
}

// Per-cell affine lift of the raw channels to d_model (the 1x1 convolution).
// weight is d_model x 3(2m+1); invalid cells stay zero.
template <class S>
TokenGrid<S> pe3d(const SceneCoordinateMap& scm, const EncodingConfig& cfg,
                  const MatX<S>& weight, const VecX<S>& bias) {
    cfg.check();
    if (weight.rows() != cfg.d_model || weight.cols() != cfg.raw3d_channels() ||
        bias.size() != cfg.d_model)
        throw ShapeMismatch("pe3d: conv shape does not match 3(2m+1) -> d_model");
    const TokenGrid<S> raw = pe3d_raw<S>(scm, cfg.freq_bands);
    TokenGrid<S> grid(scm.h, scm.w, cfg.d_model);
    grid.mask = scm.mask;
    for (int i = 0; i < scm.size(); ++i) {
        if (!grid.mask[static_cast<std::size_t>(i)]) continue;
        grid.data.row(i) = (weight * raw.data.row(i).transpose() + bias).transpose();
    }
    return grid;
}

// Elementwise sum of the 2D and 3D embeddings.
template <class S>
TokenGrid<S> fuse(const TokenGrid<S>& a, const TokenGrid<S>& b) {
    if (a.h != b.h || a.w != b.w || a.channels() != b.channels())
        throw ShapeMismatch("fuse: token grids differ in shape");
    if (a.mask != b.mask) throw ShapeMismatch("fuse: token grids differ in mask");
    TokenGrid<S> out = a;
    out.data += b.data;
    return out;
}

// Restricts a grid to a mask: rows outside the mask are zeroed and marked
// invalid. Used to align the all-valid pe2d output with the map's mask.
template <class S>
TokenGrid<S> apply_mask(const TokenGrid<S>& grid, const std::vector<std::uint8_t>& mask) {
    if (mask.size() != grid.mask.size()) throw ShapeMismatch("apply_mask: mask size mismatch");
    TokenGrid<S> out = grid;
    for (int i = 0; i < out.size(); ++i) {
        if (!mask[static_cast<std::size_t>(i)]) out.data.row(i).setZero();
    }
    out.mask = mask;
    return out;
}

}  // namespace marepo::encoding
