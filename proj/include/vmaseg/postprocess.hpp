#pragma once

#include <vector>

#include "vmaseg/volume.hpp"

namespace vmaseg {

/// Per label: keep only the largest 26-connected component, and drop it too
/// when smaller than `min_island_voxels`. Then fill 6-connected background
/// cavities that do not reach the grid border and touch exactly one label.
LabelVolume morph_cleanup(const LabelVolume& labels, int min_island_voxels);

/// Island threshold for a grid, from a physical size.
int island_voxels(double min_island_mm3, const GridGeometry& g);

struct VertebraInstance {
  Label label = 0;
  Vec3 center = Vec3::Zero();  // world mm
  double mean_intensity = 0.0;
};

/// Centroid and mean intensity of a binary mask.
VertebraInstance describe_instance(Label label, const LabelVolume& mask, const ScalarVolume& intensity);

struct CollisionPolicy {
  double w_intensity = 1.0;
  double w_distance = 1.0;

  void validate() const;
};

struct CollisionResult {
  LabelVolume labels;
  std::size_t contested = 0;
};

/// Masks are binary and parallel to `instances`. Voxels claimed by one mask
/// take that instance's label; voxels claimed by several go to the candidate
/// with the highest score -w_i * z(|I - mean|) - w_d * z(|x - center|), the
/// features standardized over all contested (voxel, candidate) pairs.
CollisionResult resolve_collisions(const std::vector<LabelVolume>& masks, const ScalarVolume& intensity,
                                   const std::vector<VertebraInstance>& instances,
                                   const CollisionPolicy& policy);

struct LevelSetConfig {
  double smoothing_voxels = 1.0;  // Gaussian sigma before the Laplacian
  double curvature_weight = 0.1;
};

/// Edge-seeking evolution of a signed distance initialised from the mask:
/// phi += step * clamp(s * lap(G * I) / max|lap| + w * curvature, -1, 1),
/// s = +1 when the mask is brighter than its surroundings. Index units.
LabelVolume levelset_refine(const LabelVolume& mask, const ScalarVolume& intensity, int iters,
                            double step = 0.25, const LevelSetConfig& cfg = {});

}  // namespace vmaseg
