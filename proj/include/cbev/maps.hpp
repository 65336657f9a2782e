#pragma once

#include <cbev/geometry.hpp>
#include <cbev/ops.hpp>
#include <cbev/tensor.hpp>

namespace cbev {

/// Camera-centered bird's-eye-view feature map [l_B, l_B, c] with its validity disc.
struct BEVMap {
    Tensor tensor;
    ValidityMask mask;
    double pixel_size = 1.0;
};

/// Aerial feature map [l_A, l_A, c].
struct AerialMap {
    Tensor tensor;
    double pixel_size = 1.0;
    double search_extent = 28.0;
};

/// Camera-local view of a map: samples `map` [H, W, c] (pixel_size meters per cell,
/// origin at the map center) around `pose` into a side x side grid, forward up.
/// Cells outside the validity disc are zero. Differentiable with respect to `map`.
inline Tensor crop_local_map(const Tensor& map, const Pose2& pose, std::size_t side, double pixel_size) {
    require_rank(map, 3, "crop_local_map");
    const double rows0 = map_center(map.dim(0)), cols0 = map_center(map.dim(1));
    const double c0 = map_center(side);
    const auto [cs, sn] = exact_cos_sin(pose.theta);
    std::vector<float> coords(side * side * 2);
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) {
            const double right = (static_cast<double>(c) - c0) * pixel_size;
            const double forward = (c0 - static_cast<double>(r)) * pixel_size;
            const double east = pose.x + right * cs + forward * sn;
            const double north = pose.y - right * sn + forward * cs;
            coords[(r * side + c) * 2] = static_cast<float>(cols0 + east / pixel_size);
            coords[(r * side + c) * 2 + 1] = static_cast<float>(rows0 - north / pixel_size);
        }
    auto sampled = bilinear_sample(map, Tensor({side, side, 2}, std::move(coords)));
    return apply_mask(sampled.values, circular_mask(side).to_tensor());
}

} // namespace cbev
