#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmaseg/volume.hpp"

namespace vmaseg {

// Masks are LabelVolumes where any nonzero voxel is foreground.

/// Voxels equal to `label` become 1, everything else 0.
LabelVolume binary_mask(const LabelVolume& labels, Label label);

/// 2|GT ∩ S| / (|GT| + |S|) in percent; 100 when both are empty.
double dice(const LabelVolume& gt, const LabelVolume& s);

/// Foreground voxel centers (world mm) with at least one in-grid 6-neighbour
/// in the background.
struct SurfaceVoxelSet {
  std::vector<Vec3> points;
  std::vector<std::size_t> voxels;  // linear indices, ascending
};
SurfaceVoxelSet surface_voxels(const LabelVolume& mask);

enum class AsdMode {
  directed,   // mean over S-surface voxels of the distance to the GT surface
  symmetric,  // mean of both directed distances
};

double asd(const LabelVolume& gt, const LabelVolume& s, AsdMode mode = AsdMode::directed);

struct VolumeDensity {
  double volume_cm3 = 0.0;
  double density_hu = 0.0;
};
VolumeDensity volume_and_density(const LabelVolume& mask, const ScalarVolume& intensity);

struct EvalRow {
  std::string case_id;
  std::string vertebra_id;
  std::map<std::string, std::string> tags;
  double volume_cm3 = 0.0;
  double density_hu = 0.0;
  double dice = 0.0;
  double asd = 0.0;
};

struct ColumnStats {
  double mean = 0.0;
  std::optional<double> sd;  // sample SD; absent for a single row
};

struct GroupSummary {
  std::string group;
  std::size_t count = 0;
  ColumnStats volume_cm3, density_hu, dice, asd;
};

/// Groups rows by a tag (or "case" / "vertebra"; an empty name puts every
/// row in one group "all"). Groups are ordered by first appearance.
std::vector<GroupSummary> report(const std::vector<EvalRow>& rows, const std::string& group_by);

std::string report_csv(const std::vector<GroupSummary>& groups, const std::string& group_by);
std::string report_text(const std::vector<GroupSummary>& groups, const std::string& group_by);
std::string rows_csv(const std::vector<EvalRow>& rows);

}  // namespace vmaseg
