#pragma once

// SE(2) conventions used throughout:
//   * maps are indexed (row, col) with row 0 at the north edge;
//   * x is east, y is north, both in meters relative to the map center;
//   * heading theta is measured clockwise from north, in [0, 2pi);
//   * a camera-local BEV map has "forward" pointing up (decreasing row) and
//     "right" pointing along increasing column.

#include <cbev/error.hpp>
#include <cbev/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace cbev {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double normalize_angle(double theta) {
    double t = std::fmod(theta, kTwoPi);
    if (t < 0) t += kTwoPi;
    if (t >= kTwoPi) t = 0.0;
    return t;
}

/// Smallest absolute difference between two angles, in [0, pi].
inline double angle_difference(double a, double b) {
    double d = std::fmod(std::abs(a - b), kTwoPi);
    return d > std::numbers::pi ? kTwoPi - d : d;
}

/// cos/sin that are exact at multiples of a right angle.
inline std::pair<double, double> exact_cos_sin(double theta) {
    const double quarter = theta / (std::numbers::pi / 2);
    const double r = std::round(quarter);
    if (std::abs(quarter - r) < 1e-12) {
        switch (((static_cast<long>(r) % 4) + 4) % 4) {
        case 0: return {1.0, 0.0};
        case 1: return {0.0, 1.0};
        case 2: return {-1.0, 0.0};
        default: return {0.0, -1.0};
        }
    }
    return {std::cos(theta), std::sin(theta)};
}

struct Pose2 {
    double x = 0.0;      // meters east of the map center
    double y = 0.0;      // meters north of the map center
    double theta = 0.0;  // radians clockwise from north

    Pose2() = default;
    Pose2(double x_, double y_, double theta_) : x(x_), y(y_), theta(normalize_angle(theta_)) {
        if (!std::isfinite(x_) || !std::isfinite(y_) || !std::isfinite(theta_))
            throw DomainError("Pose2 requires finite components");
    }
};

struct GridSpec {
    std::size_t n_t = 28;
    std::size_t n_theta = 32;
    double search_extent = 28.0;  // meters, side of the square search region
    double pixel_size = 1.0;      // meters per feature-map cell
    std::size_t l_A = 48;
    std::size_t l_B = 19;

    double spacing() const { return search_extent / static_cast<double>(n_t); }
};

struct FitCheck {
    bool ok = true;
    std::string message;
};

/// n_t <= l_A - l_B + 1: every hypothesis keeps the whole BEV footprint on the aerial map.
inline FitCheck check_fit_constraint(const GridSpec& spec) {
    if (spec.n_t >= 1 && spec.l_B <= spec.l_A && spec.n_t <= spec.l_A - spec.l_B + 1) return {};
    std::ostringstream os;
    os << "fit constraint violated: n_t=" << spec.n_t << " > l_A - l_B + 1 with l_A=" << spec.l_A
       << ", l_B=" << spec.l_B;
    if (spec.l_B <= spec.l_A) os << " (limit " << spec.l_A - spec.l_B + 1 << ")";
    return {false, os.str()};
}

inline void validate_grid_spec(const GridSpec& spec) {
    if (spec.n_t < 1 || spec.n_theta < 1) throw FitConstraintError("grid needs n_t >= 1 and n_theta >= 1");
    if (!(spec.pixel_size > 0) || !(spec.search_extent > 0))
        throw FitConstraintError("grid needs positive pixel_size and search_extent");
    if (auto fit = check_fit_constraint(spec); !fit.ok) throw FitConstraintError(fit.message);
}

struct PoseGrid {
    GridSpec spec;
    std::vector<Pose2> poses;  // (ty, tx, theta) order; ty = 0 is the northmost row

    std::size_t size() const { return poses.size(); }

    std::size_t index(std::size_t ty, std::size_t tx, std::size_t k) const {
        return (ty * spec.n_t + tx) * spec.n_theta + k;
    }

    double translation_x(std::size_t tx) const {
        return -spec.search_extent / 2 + (static_cast<double>(tx) + 0.5) * spec.spacing();
    }
    double translation_y(std::size_t ty) const {
        return spec.search_extent / 2 - (static_cast<double>(ty) + 0.5) * spec.spacing();
    }
    double angle(std::size_t k) const { return kTwoPi * static_cast<double>(k) / static_cast<double>(spec.n_theta); }

    const Pose2& index_to_pose(std::size_t i) const { return poses.at(i); }

    /// Nearest hypothesis to an arbitrary pose (translation clamped into the grid).
    std::size_t pose_to_index(const Pose2& p) const {
        auto nearest = [&](double coord, bool north_axis) {
            double f = north_axis ? (spec.search_extent / 2 - coord) / spec.spacing() - 0.5
                                  : (coord + spec.search_extent / 2) / spec.spacing() - 0.5;
            long i = std::lround(f);
            return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(spec.n_t) - 1));
        };
        const std::size_t ty = nearest(p.y, true);
        const std::size_t tx = nearest(p.x, false);
        const auto k = static_cast<std::size_t>(std::lround(normalize_angle(p.theta) / kTwoPi *
                                                            static_cast<double>(spec.n_theta))) %
                       spec.n_theta;
        return index(ty, tx, k);
    }
};

/// Regular cell-centered translation grid over the search region times uniform headings.
inline PoseGrid build_pose_grid(const GridSpec& spec) {
    validate_grid_spec(spec);
    PoseGrid grid{spec, {}};
    grid.poses.reserve(spec.n_t * spec.n_t * spec.n_theta);
    for (std::size_t ty = 0; ty < spec.n_t; ++ty)
        for (std::size_t tx = 0; tx < spec.n_t; ++tx)
            for (std::size_t k = 0; k < spec.n_theta; ++k)
                grid.poses.emplace_back(grid.translation_x(tx), grid.translation_y(ty), grid.angle(k));
    return grid;
}

/// Row/column of the aerial map where the BEV map's top-left cell lands for
/// translation index 0. Throws if hypotheses do not fall on whole cells.
inline std::size_t placement_offset(const GridSpec& spec) {
    validate_grid_spec(spec);
    if (std::abs(spec.spacing() - spec.pixel_size) > 1e-9 * spec.pixel_size)
        throw FitConstraintError("translation spacing (search_extent / n_t) must equal pixel_size");
    const std::size_t slack = spec.l_A - spec.l_B + 1 - spec.n_t;
    if (slack % 2 != 0)
        throw FitConstraintError("l_A - l_B - n_t + 1 must be even so hypotheses land on cell centers");
    return slack / 2;
}

struct ValidityMask {
    std::size_t side = 0;
    std::vector<std::uint8_t> values;  // row-major side x side

    bool operator()(std::size_t r, std::size_t c) const { return values[r * side + c] != 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : values) n += v;
        return n;
    }

    Tensor to_tensor() const {
        std::vector<float> d(values.begin(), values.end());
        return Tensor({side, side}, std::move(d));
    }
};

inline double map_center(std::size_t side) { return (static_cast<double>(side) - 1.0) / 2.0; }

/// Cells within side/2 of the map center.
inline ValidityMask circular_mask(std::size_t side) {
    if (side < 1) throw DimensionError("circular_mask: side must be >= 1");
    ValidityMask m{side, std::vector<std::uint8_t>(side * side, 0)};
    const double c0 = map_center(side);
    const double radius = static_cast<double>(side) / 2.0;
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const double dr = static_cast<double>(r) - c0, dc = static_cast<double>(c) - c0;
            m.values[r * side + c] = std::sqrt(dr * dr + dc * dc) <= radius ? 1 : 0;
        }
    return m;
}

/// Source (column, row) in a camera-local map for output cell (row, col) of the same
/// map rotated into the world frame by heading theta.
inline std::pair<double, double> rotation_source(std::size_t side, double theta, double row, double col) {
    const auto [c, s] = exact_cos_sin(theta);
    const double c0 = map_center(side);
    const double east = col - c0, north = c0 - row;
    const double u = east * c - north * s;
    const double v = east * s + north * c;
    return {c0 + u, c0 - v};
}

/// Coordinate field [side, side, 2] for bilinear_sample that rotates a camera-local
/// map by heading theta about its center.
inline Tensor rotation_coords(std::size_t side, double theta) {
    if (side < 1) throw DimensionError("rotation_coords: side must be >= 1");
    std::vector<float> d(side * side * 2);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const auto [x, y] = rotation_source(side, theta, static_cast<double>(r), static_cast<double>(c));
            d[(r * side + c) * 2] = static_cast<float>(x);
            d[(r * side + c) * 2 + 1] = static_cast<float>(y);
        }
    return Tensor({side, side, 2}, std::move(d));
}

struct PolarField {
    Tensor coords;        // [side, side, 2]: (angle coordinate, depth coordinate)
    ValidityMask valid;   // cells with a usable polar sample
    std::size_t depth_bins = 0;
    std::size_t angle_bins = 0;
};

/// Maps cartesian BEV cells to samples in a polar map [d, w + 1, c] whose last column
/// repeats column 0 (see wrap_columns). Depth bin k sits at (k + 1) * (side / 2) / d
/// cells from the camera; angle bin j at bearing j * 360 / w degrees clockwise from forward.
inline PolarField polar_coords(std::size_t d, std::size_t w, std::size_t side) {
    if (d < 2 || w < 2) throw DimensionError("polar_coords: need at least 2 depth and 2 angle bins");
    if (side < 1) throw DimensionError("polar_coords: side must be >= 1");
    PolarField f{Tensor::zeros({side, side, 2}), {side, std::vector<std::uint8_t>(side * side, 0)}, d, w};
    auto coords = f.coords.mutable_data();
    const double c0 = map_center(side);
    const double radius = static_cast<double>(side) / 2.0;
    const double bin = radius / static_cast<double>(d);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const double right = static_cast<double>(c) - c0;
            const double forward = c0 - static_cast<double>(r);
            const double rho = std::sqrt(right * right + forward * forward);
            const double depth = rho / bin - 1.0;
            float* out = &coords[(r * side + c) * 2];
            if (rho > radius || depth < 0.0) {
                out[0] = -1.0f;
                out[1] = -1.0f;
                continue;
            }
            const double bearing = normalize_angle(std::atan2(right, forward));
            out[0] = static_cast<float>(bearing / kTwoPi * static_cast<double>(w));
            out[1] = static_cast<float>(depth);
            f.valid.values[r * side + c] = 1;
        }
    return f;
}

} // namespace cbev
