#pragma once

#include <utility>
#include <vector>

#include "vmaseg/similarity.hpp"
#include "vmaseg/transform.hpp"
#include "vmaseg/volume.hpp"

namespace vmaseg {

struct RegistrationConfig {
  double alpha = 0.005;  // weight of the bending penalty in (1 - alpha) * NMI - alpha * P
  int pyramid_levels = 3;
  double control_spacing_mm = 5.0;
  int max_iters_per_level = 100;
  double step_tolerance = 1e-3;       // mm
  double objective_tolerance = 1e-6;
  IntensityWindow window;
  /// Number of pyramid levels, coarsest first, the affine stage runs on; 0 = all.
  int affine_levels = 0;

  void validate() const;
};

struct TraceRow {
  int level = 0;  // 0 = coarsest
  int iteration = 0;
  double objective = 0.0;
  double nmi = 0.0;
  double penalty = 0.0;
};

struct RegistrationResult {
  ComposedTransform transform;
  double final_objective = 0.0;
  double final_nmi = 0.0;
  double final_penalty = 0.0;
  std::vector<TraceRow> trace;  // accepted iterates only, grouped by level
};

/// Forward affine registration maximizing NMI; starts from the translation
/// that aligns the two domain centers.
AffineTransform register_affine(const ScalarVolume& target, const ScalarVolume& floating,
                                const RegistrationConfig& cfg,
                                std::vector<TraceRow>* trace = nullptr);

/// Coarse-to-fine FFD optimization over the fixed affine pre-alignment.
RegistrationResult register_ffd(const ScalarVolume& target, const ScalarVolume& floating,
                                const AffineTransform& affine, const RegistrationConfig& cfg);

/// Value of (1 - alpha) * NMI - alpha * P for a composed transform at full resolution.
TraceRow evaluate_objective(const ScalarVolume& target, const ScalarVolume& floating,
                            const ComposedTransform& t, const RegistrationConfig& cfg);

/// Image by trilinear pull-back, labels by nearest-neighbour pull-back.
std::pair<ScalarVolume, LabelVolume> warp_atlas(const ScalarVolume& atlas_image,
                                                const LabelVolume& atlas_labels,
                                                const ComposedTransform& t,
                                                const GridGeometry& target);

}  // namespace vmaseg
