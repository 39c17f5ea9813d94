#include "vmaseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "vmaseg/registration.hpp"

namespace vmaseg {

void PhantomSpec::validate() const {
  grid.validate();
  if (n_vertebrae < 1) throw Error("phantom needs at least one vertebra");
  if ((body_radii_mm.array() <= 0.0).any()) throw Error("phantom radii must be positive");
  if (disc_gap_mm < 0.0) throw Error("phantom disc gap must be >= 0");
  if (!height_scale.empty() && static_cast<int>(height_scale.size()) != n_vertebrae) {
    throw Error("phantom height_scale needs one entry per vertebra");
  }
  for (double h : height_scale)
    if (!(h > 0.0 && h <= 1.0)) throw Error("phantom height_scale must lie in (0, 1]");
  if (noise_sd < 0.0) throw Error("phantom noise_sd must be >= 0");
  if (n_vertebrae > 254) throw Error("phantom supports at most 254 vertebrae");
}

Phantom make_phantom(const PhantomSpec& spec) {
  spec.validate();
  const GridGeometry& g = spec.grid;
  const Vec3 lo = g.origin, hi = g.extent_max();
  const Vec3 r = spec.body_radii_mm;
  const double pitch = 2.0 * r.z() + spec.disc_gap_mm;
  const double column = spec.n_vertebrae * 2.0 * r.z() + (spec.n_vertebrae - 1) * spec.disc_gap_mm;
  const double cx = 0.5 * (lo.x() + hi.x());
  const double cy = 0.5 * (lo.y() + hi.y()) + 0.5 * spec.process_length_mm;
  const double z_first = 0.5 * (lo.z() + hi.z()) - 0.5 * column + r.z();
  const Vec3 pad = g.spacing;
  if (cx - r.x() < lo.x() + pad.x() || cx + r.x() > hi.x() - pad.x() ||
      cy - r.y() - spec.process_length_mm < lo.y() + pad.y() || cy + r.y() > hi.y() - pad.y() ||
      column > (hi.z() - lo.z()) - 2.0 * pad.z()) {
    throw Error("phantom grid is too small for the requested vertebra stack");
  }

  Phantom out{ScalarVolume(g, spec.air_hu), LabelVolume(g, 0), {}};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 p = g.to_world(i, j, k);
        const double ex = (p.x() - cx) / r.x(), ey = (p.y() - cy) / r.y();
        const double planar = ex * ex + ey * ey;
        Label label = 0;
        for (int v = 0; v < spec.n_vertebrae && label == 0; ++v) {
          const double cz = z_first + v * pitch;
          const double rz = r.z() * spec.height(v);
          const double ez = (p.z() - cz) / rz;
          const bool body = planar + ez * ez <= 1.0;
          const bool process = std::abs(p.x() - cx) <= spec.process_half_width_mm &&
                               p.y() >= cy - r.y() - spec.process_length_mm &&
                               p.y() <= cy - 0.5 * r.y() && std::abs(p.z() - cz) <= 0.4 * rz;
          if (body || process) label = static_cast<Label>(v + 1);
        }
        if (label != 0) {
          out.labels(i, j, k) = label;
          out.image(i, j, k) = spec.bone_hu;
          continue;
        }
        const bool in_column = p.z() > z_first && p.z() < z_first + (spec.n_vertebrae - 1) * pitch;
        if (in_column && planar <= 0.81) out.image(i, j, k) = spec.disc_hu;
      }

  if (spec.noise_sd > 0.0) {
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sd);
    for (auto& v : out.image.data()) v += noise(rng);
  }

  const Index3 margin{spec.box_margin_voxels, spec.box_margin_voxels, spec.box_margin_voxels};
  for (int v = 0; v < spec.n_vertebrae; ++v) {
    const BoundingBox b = label_bounds(out.labels, static_cast<Label>(v + 1));
    if (!b.valid()) throw Error("phantom vertebra vanished on the grid; increase resolution");
    out.boxes.push_back(b.expanded(margin).clamped(g));
  }
  return out;
}

DeformationKind parse_deformation_kind(const std::string& name) {
  if (name == "translation") return DeformationKind::translation;
  if (name == "affine") return DeformationKind::affine;
  if (name == "smooth_ffd") return DeformationKind::smooth_ffd;
  throw Error("unknown deformation kind '" + name + "'");
}

std::string to_string(DeformationKind kind) {
  switch (kind) {
    case DeformationKind::translation: return "translation";
    case DeformationKind::affine: return "affine";
    case DeformationKind::smooth_ffd: return "smooth_ffd";
  }
  return "?";
}

DeformedPhantom deform_phantom(const ScalarVolume& image, const LabelVolume& labels,
                               DeformationKind kind, double magnitude_mm, std::uint64_t seed) {
  if (!(magnitude_mm >= 0.0)) throw Error("deformation magnitude must be >= 0");
  const GridGeometry& g = image.geometry();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const auto random_unit = [&] {
    Vec3 d;
    do {
      d = Vec3(uni(rng), uni(rng), uni(rng));
    } while (d.norm() < 1e-3 || d.norm() > 1.0);
    return d.normalized();
  };

  AffineTransform affine;
  if (kind == DeformationKind::translation) {
    affine.translation = magnitude_mm * random_unit();
  } else if (kind == DeformationKind::affine) {
    // Linear part about the grid center, scaled so the largest corner
    // displacement of the linear part plus the translation equals the magnitude.
    const Vec3 c = 0.5 * (g.origin + g.extent_max());
    Mat3 d;
    for (int r = 0; r < 3; ++r)
      for (int s = 0; s < 3; ++s) d(r, s) = uni(rng);
    const Vec3 half = 0.5 * (g.extent_max() - g.origin);
    double corner = 0.0;
    for (int k = 0; k < 8; ++k) {
      const Vec3 off((k & 1) ? half.x() : -half.x(), (k & 2) ? half.y() : -half.y(),
                     (k & 4) ? half.z() : -half.z());
      corner = std::max(corner, (d * off).norm());
    }
    const Vec3 t = random_unit();
    if (corner > 0.0) d *= 0.5 * magnitude_mm / corner;
    affine.matrix = Mat3::Identity() + d;
    affine.translation = c - affine.matrix * c + 0.5 * magnitude_mm * t;
  }

  Vec3 lo, hi;
  affine_image_bounds(affine, g, lo, hi);
  const double spacing = kind == DeformationKind::smooth_ffd ? kTruthControlSpacingMm : 20.0;
  ComposedTransform truth{affine, FFDTransform::covering(lo, hi, Vec3::Constant(spacing))};
  if (kind == DeformationKind::smooth_ffd && magnitude_mm > 0.0) {
    auto coeffs = truth.ffd.coefficients();
    double largest = 0.0;
    for (auto& c : coeffs) {
      c = Vec3(uni(rng), uni(rng), uni(rng));
      largest = std::max(largest, c.norm());
    }
    // The field is a convex combination of coefficients, so it never exceeds them.
    for (auto& c : coeffs) c *= magnitude_mm / largest;
  }

  if (magnitude_mm == 0.0) return {image, labels, truth};
  // Pull back relative to the darkest value so uncovered voxels read as air, not 0.
  const double air = *std::min_element(image.data().begin(), image.data().end());
  ScalarVolume shifted = image;
  for (auto& v : shifted.data()) v -= air;
  auto [warped_image, warped_labels] = warp_atlas(shifted, labels, truth, g);
  for (auto& v : warped_image.data()) v += air;
  return {std::move(warped_image), std::move(warped_labels), std::move(truth)};
}

}  // namespace vmaseg
