#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "vmaseg/volume.hpp"

namespace vmaseg {

struct AffineTransform {
  Mat3 matrix = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static AffineTransform identity() { return {}; }
  void validate() const;
  [[nodiscard]] Vec3 apply(const Vec3& x) const { return matrix * x + translation; }
};

inline Vec3 affine_apply(const AffineTransform& a, const Vec3& x) { return a.apply(x); }

namespace bspline {

// Uniform cubic B-spline segment weights for local coordinate u in [0, 1].
inline void weights(double u, double w[4]) {
  const double u2 = u * u, u3 = u2 * u, v = 1.0 - u;
  w[0] = v * v * v / 6.0;
  w[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
  w[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
  w[3] = u3 / 6.0;
}
inline void first_derivatives(double u, double w[4]) {
  const double u2 = u * u;
  w[0] = -0.5 * (1.0 - u) * (1.0 - u);
  w[1] = 1.5 * u2 - 2.0 * u;
  w[2] = -1.5 * u2 + u + 0.5;
  w[3] = 0.5 * u2;
}
inline void second_derivatives(double u, double w[4]) {
  w[0] = 1.0 - u;
  w[1] = 3.0 * u - 2.0;
  w[2] = -3.0 * u + 1.0;
  w[3] = u;
}

}  // namespace bspline

/// Control points touching one location: indices base[a] .. base[a] + 3 per axis.
struct SupportWeights {
  std::array<int, 3> base{};
  double w[3][4]{};
};

/// Cubic B-spline free-form deformation. Coefficients are displacements in mm,
/// stored x-fastest over the control lattice.
class FFDTransform {
 public:
  FFDTransform() = default;
  explicit FFDTransform(const GridGeometry& lattice);
  FFDTransform(const GridGeometry& lattice, std::vector<Vec3> coefficients);

  /// Lattice with the given control spacing whose support covers the box
  /// [lo, hi] (world mm) with one extra control point outside each face.
  static FFDTransform covering(const Vec3& lo, const Vec3& hi, const Vec3& control_spacing);

  [[nodiscard]] const GridGeometry& lattice() const { return lattice_; }
  [[nodiscard]] std::span<Vec3> coefficients() { return coefficients_; }
  [[nodiscard]] std::span<const Vec3> coefficients() const { return coefficients_; }
  [[nodiscard]] std::size_t control_count() const { return coefficients_.size(); }
  /// A default-constructed transform has no lattice and acts as zero displacement.
  [[nodiscard]] bool empty() const { return coefficients_.empty(); }
  Vec3& coefficient(int i, int j, int k) { return coefficients_[lattice_.linear(i, j, k)]; }
  [[nodiscard]] const Vec3& coefficient(int i, int j, int k) const {
    return coefficients_[lattice_.linear(i, j, k)];
  }

  [[nodiscard]] bool in_support(const Vec3& x) const;
  /// Fills the support weights; false outside the lattice support.
  bool support_weights(const Vec3& x, SupportWeights& sw) const;
  [[nodiscard]] Vec3 displacement(const SupportWeights& sw) const;
  /// Throws outside the lattice support.
  [[nodiscard]] Vec3 displacement(const Vec3& x) const;

  /// Same field on a lattice with half the control spacing (exact dyadic refinement).
  [[nodiscard]] FFDTransform refined() const;

  [[nodiscard]] double max_coefficient_norm() const;

 private:
  GridGeometry lattice_;
  std::vector<Vec3> coefficients_;
};

inline Vec3 ffd_displace(const FFDTransform& t, const Vec3& x) { return t.displacement(x); }

struct BendingEnergy {
  double value = 0.0;
  std::vector<Vec3> gradient;  // dP / d coefficient, same layout as the coefficients
};

/// Mean over the sample grid of the summed squared second derivatives of
/// the displacement (cross terms doubled), summed over the three components.
/// Derivatives are taken analytically in lattice index units, so a field
/// bent over one control spacing costs the same at any spacing.
BendingEnergy bending_energy(const FFDTransform& ffd, const GridGeometry& samples,
                             bool with_gradient = true);

/// x -> A(x) + u(A(x)), with the FFD lattice living in the affinely aligned space.
struct ComposedTransform {
  AffineTransform affine;
  FFDTransform ffd;

  [[nodiscard]] Vec3 apply(const Vec3& x) const {
    const Vec3 y = affine.apply(x);
    return ffd.empty() ? y : y + ffd.displacement(y);
  }
};

inline Vec3 compose_apply(const ComposedTransform& c, const Vec3& x) { return c.apply(x); }

/// Axis-aligned box enclosing A applied to the voxel-center hull of `grid`.
void affine_image_bounds(const AffineTransform& a, const GridGeometry& grid, Vec3& lo, Vec3& hi);

/// Zero FFD over the affinely mapped target domain.
ComposedTransform make_composed(const AffineTransform& a, const GridGeometry& target,
                                double control_spacing_mm);

/// Regular grid with the target's spacing covering A(target domain); the
/// sample set for the bending penalty.
GridGeometry penalty_grid(const AffineTransform& a, const GridGeometry& target);

// Text serialization (17 significant digits, round-trip exact).
void write_transform(std::ostream& out, const ComposedTransform& t);
ComposedTransform read_transform(std::istream& in);
void save_transform(const std::filesystem::path& path, const ComposedTransform& t);
ComposedTransform load_transform(const std::filesystem::path& path);

}  // namespace vmaseg
