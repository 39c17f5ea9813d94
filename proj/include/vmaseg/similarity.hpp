#pragma once

#include <functional>
#include <vector>

#include "vmaseg/transform.hpp"
#include "vmaseg/volume.hpp"

namespace vmaseg {

/// Intensities are clamped to [lo, hi] and mapped linearly onto bin
/// coordinates [0, bins - 1].
struct IntensityWindow {
  double lo = -1024.0;
  double hi = 2048.0;
  int bins = 64;

  void validate() const;
  [[nodiscard]] double scale() const { return (bins - 1) / (hi - lo); }
  /// Continuous bin coordinate; `slope` receives d(bin)/d(intensity), 0 when clamped.
  [[nodiscard]] double bin_position(double v, double* slope = nullptr) const;
  [[nodiscard]] int nearest_bin(double v) const;
};

// Parzen window over the floating-image bin axis: the interpolating C1 cubic
// 1 - 3t^2 + 2|t|^3 on |t| < 1. Non-negative, partition of unity, and a
// value sitting on a bin center deposits all of its mass in that bin.
namespace parzen {
inline double kernel(double t) {
  const double a = t < 0 ? -t : t;
  return a >= 1.0 ? 0.0 : 1.0 - a * a * (3.0 - 2.0 * a);
}
inline double derivative(double t) {
  const double a = t < 0 ? -t : t;
  return a >= 1.0 ? 0.0 : 6.0 * t * (a - 1.0);
}
}  // namespace parzen

/// Rows index the target (I1) bin, columns the floating (I2) bin.
class JointHistogram {
 public:
  explicit JointHistogram(int bins) : bins_(bins), counts_(static_cast<std::size_t>(bins) * bins, 0.0) {}

  [[nodiscard]] int bins() const { return bins_; }
  double& at(int target_bin, int floating_bin) { return counts_[target_bin * bins_ + floating_bin]; }
  [[nodiscard]] double at(int target_bin, int floating_bin) const {
    return counts_[target_bin * bins_ + floating_bin];
  }
  [[nodiscard]] const std::vector<double>& counts() const { return counts_; }
  std::vector<double>& counts() { return counts_; }
  [[nodiscard]] double total() const;
  [[nodiscard]] std::vector<double> target_marginal() const;
  [[nodiscard]] std::vector<double> floating_marginal() const;

  /// Adds one sample: nearest bin on the target axis, Parzen mass on the floating axis.
  void deposit(int target_bin, double floating_position);
  JointHistogram& operator+=(const JointHistogram& other);

 private:
  int bins_;
  std::vector<double> counts_;
};

JointHistogram joint_histogram(const ScalarVolume& target, const ScalarVolume& floating_warped,
                               const IntensityWindow& window, const BoundingBox& mask);

/// Shannon entropies in nats: target marginal, floating marginal, joint.
struct Entropies {
  double target = 0.0;
  double floating = 0.0;
  double joint = 0.0;
};
Entropies entropies(const JointHistogram& h);

/// (H1 + H2) / H12, or 2 when the joint entropy vanishes.
double nmi(const JointHistogram& h);
double nmi(const ScalarVolume& target, const ScalarVolume& floating_warped,
           const IntensityWindow& window, const BoundingBox& mask);

/// NMI of the floating image pulled back through `map` over the target mask,
/// with optional dNMI/d(mapped point) per mask voxel (x-fastest over the box).
/// Voxels whose mapped point leaves the floating image do not contribute.
/// `map` returns false when the point cannot be mapped.
using MaskPointMap = std::function<bool(const Vec3& target_world, Vec3& floating_world)>;
double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const MaskPointMap& map, std::vector<Vec3>* forces);

/// Same, specialised for the composed and affine warps.
double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const ComposedTransform& t, std::vector<Vec3>* forces);
double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const AffineTransform& a, std::vector<Vec3>* forces);

double nmi(const ScalarVolume& target, const ScalarVolume& floating, const ComposedTransform& t,
           const IntensityWindow& window, const BoundingBox& mask);

/// Analytic dNMI/d(FFD coefficient) for the composed warp.
std::vector<Vec3> nmi_gradient(const ScalarVolume& target, const ScalarVolume& floating,
                               const ComposedTransform& t, const IntensityWindow& window,
                               const BoundingBox& mask, double* value = nullptr);

/// Scatters per-voxel forces through the B-spline basis at A(x).
std::vector<Vec3> scatter_forces(const ComposedTransform& t, const GridGeometry& target,
                                 const BoundingBox& mask, const std::vector<Vec3>& forces);

/// Mean local Pearson correlation over the mask; cubic windows of the given
/// radius clipped to the volume, zero-variance windows contribute 0.
double lncc(const ScalarVolume& target, const ScalarVolume& floating_warped, int radius_voxels,
            const BoundingBox& mask);

}  // namespace vmaseg
