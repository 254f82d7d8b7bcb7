#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

#include "marepo/errors.hpp"

namespace marepo {

// Dense grid of per-cell 3D scene-frame points plus a validity mask.
// Cells are stored row-major: index(v, u) = v * w + u.
struct SceneCoordinateMap {
    int h = 0;
    int w = 0;
    Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> coords;  // (h*w) x 3, meters
    std::vector<std::uint8_t> mask;                                    // 1 = valid

    SceneCoordinateMap() = default;
    SceneCoordinateMap(int h_, int w_) : h(h_), w(w_) {
        coords.setZero(static_cast<Eigen::Index>(h) * w, 3);
        mask.assign(static_cast<std::size_t>(h) * w, 0);
    }

    int size() const { return h * w; }
    int index(int v, int u) const { return v * w + u; }
    bool valid(int v, int u) const { return mask[static_cast<std::size_t>(index(v, u))] != 0; }

    int valid_count() const {
        int n = 0;
        for (auto m : mask) n += (m != 0);
        return n;
    }

    void check_consistent() const {
        if (coords.rows() != static_cast<Eigen::Index>(h) * w ||
            mask.size() != static_cast<std::size_t>(h) * w)
            throw ShapeMismatch("SceneCoordinateMap: coords/mask size does not match h*w");
    }
};

}  // namespace marepo
