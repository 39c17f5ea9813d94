#pragma once

#include <filesystem>

#include "vmaseg/volume.hpp"

namespace vmaseg::nifti {

// Single-file NIfTI-1 (.nii, optionally .nii.gz) with axis-aligned geometry.
// Orientation matrices with rotation or axis permutation are rejected; axis
// flips are undone by reordering voxels so world coordinates are preserved.

ScalarVolume read_scalar(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);

/// Intensities are rounded to int16; values outside the int16 range throw.
void write_scalar(const std::filesystem::path& path, const ScalarVolume& vol);
/// Lossless float32 output (probability maps and other non-integer data).
void write_float(const std::filesystem::path& path, const ScalarVolume& vol);
void write_labels(const std::filesystem::path& path, const LabelVolume& vol);

/// int16 when every value is an in-range integer, float32 otherwise.
void write_image(const std::filesystem::path& path, const ScalarVolume& vol);

/// Geometry as it survives a write/read cycle (single-precision header fields).
GridGeometry storable(const GridGeometry& g);

/// Rounds every intensity the way write_scalar stores it.
ScalarVolume quantize_int16(const ScalarVolume& vol);

}  // namespace vmaseg::nifti
