#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vmaseg/volume.hpp"

namespace vmaseg {

/// One atlas after registration, resampled onto the target grid.
struct RegisteredAtlas {
  ScalarVolume image;
  LabelVolume labels;
  std::string atlas_id;
};

using AtlasSet = std::vector<RegisteredAtlas>;

struct FusionConfig {
  int patch_radius = 2;
  int search_radius = 0;
  double beta = 2.0;
  double epsilon = 0.1;

  void validate() const;
};

using DependencyMatrix = Eigen::MatrixXd;

/// Pairwise error dependency for one voxel:
///   M(i,j) = ( mean_y |T(y) - A_i(y)| * |T(y) - A_j(y)| )^beta, then M += epsilon * I.
DependencyMatrix dependency_matrix(std::span<const double> target_patch,
                                   const std::vector<std::vector<double>>& atlas_patches,
                                   double beta, double epsilon);

/// w = M^-1 1 / (1^T M^-1 1), renormalized so the weights sum to one.
Eigen::VectorXd jlf_weights(const DependencyMatrix& m);

struct FusionOutput {
  LabelVolume consensus;
  ScalarVolume probability;  // score of the winning label clamped to [0, 1]
};

/// Scores within this distance count as tied; ties go to the lower label.
inline constexpr double kScoreTieTolerance = 1e-12;

/// Joint label fusion against the target intensities.
FusionOutput fuse(const ScalarVolume& target, const AtlasSet& atlases, const FusionConfig& cfg);
FusionOutput majority_vote(const AtlasSet& atlases);

/// Per-voxel weights used by fuse (exposed for inspection and testing).
Eigen::VectorXd fusion_weights_at(const ScalarVolume& target, const AtlasSet& atlases,
                                  const FusionConfig& cfg, int i, int j, int k);

}  // namespace vmaseg
