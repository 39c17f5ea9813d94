#pragma once

#include <vector>

#include "vmaseg/volume.hpp"

namespace vmaseg {

/// Exact squared Euclidean distance from every voxel center to the nearest
/// seed voxel center, in world units (spacing-aware) or index units when
/// `world_units` is false. Voxels are +inf when there are no seeds.
std::vector<double> squared_distance_transform(const std::vector<char>& seeds, const GridGeometry& g,
                                               bool world_units = true);

}  // namespace vmaseg
