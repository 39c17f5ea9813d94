#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vmaseg/transform.hpp"
#include "vmaseg/volume.hpp"

namespace vmaseg {

/// Synthetic spine: a column of ellipsoidal vertebral bodies, each with a
/// posterior box process, separated by disc tissue and surrounded by air.
struct PhantomSpec {
  int n_vertebrae = 5;
  Vec3 body_radii_mm{10.0, 8.0, 11.0};
  double disc_gap_mm = 6.0;
  std::vector<double> height_scale;  // per vertebra in (0, 1]; empty = all 1
  double bone_hu = 400.0;
  double disc_hu = 40.0;
  double air_hu = -1000.0;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;
  GridGeometry grid{{96, 96, 160}, {0.4, 0.4, 1.0}, {0.0, 0.0, 0.0}};
  double process_length_mm = 9.0;
  double process_half_width_mm = 2.5;
  int box_margin_voxels = 2;

  void validate() const;
  [[nodiscard]] double height(int v) const { return height_scale.empty() ? 1.0 : height_scale[v]; }
};

struct Phantom {
  ScalarVolume image;
  LabelVolume labels;             // vertebra v carries label v + 1
  std::vector<BoundingBox> boxes;  // per vertebra, label bounds plus margin
};

Phantom make_phantom(const PhantomSpec& spec);

enum class DeformationKind { translation, affine, smooth_ffd };

DeformationKind parse_deformation_kind(const std::string& name);
std::string to_string(DeformationKind kind);

struct DeformedPhantom {
  ScalarVolume image;
  LabelVolume labels;
  ComposedTransform truth;  // maps deformed-space points to original-space points
};

/// Draws a random transform of the requested family with displacement
/// magnitude `magnitude_mm` and pulls the pair back through it.
DeformedPhantom deform_phantom(const ScalarVolume& image, const LabelVolume& labels,
                               DeformationKind kind, double magnitude_mm, std::uint64_t seed);

/// Control spacing of the ground-truth smooth_ffd lattice.
inline constexpr double kTruthControlSpacingMm = 20.0;

}  // namespace vmaseg
