#pragma once

// Brute-force reference implementations, written without the library's
// internals, that the fast paths are checked against.

#include <cmath>
#include <limits>
#include <vector>

#include "vmaseg/fusion.hpp"
#include "vmaseg/similarity.hpp"
#include "vmaseg/volume.hpp"

namespace oracle {

using namespace vmaseg;

// Determinant by cofactor expansion along the first row.
inline double det(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  if (n == 1) return m[0][0];
  double d = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<std::vector<double>> minor;
    for (std::size_t r = 1; r < n; ++r) {
      std::vector<double> row;
      for (std::size_t cc = 0; cc < n; ++cc)
        if (cc != c) row.push_back(m[r][cc]);
      minor.push_back(row);
    }
    d += (c % 2 ? -1.0 : 1.0) * m[0][c] * det(minor);
  }
  return d;
}

// Inverse as adjugate / determinant.
inline std::vector<std::vector<double>> inverse(const std::vector<std::vector<double>>& m) {
  const std::size_t n = m.size();
  const double d = det(m);
  std::vector<std::vector<double>> inv(n, std::vector<double>(n));
  if (n == 1) {
    inv[0][0] = 1.0 / d;
    return inv;
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<std::vector<double>> minor;
      for (std::size_t rr = 0; rr < n; ++rr) {
        if (rr == r) continue;
        std::vector<double> row;
        for (std::size_t cc = 0; cc < n; ++cc)
          if (cc != c) row.push_back(m[rr][cc]);
        minor.push_back(row);
      }
      inv[c][r] = ((r + c) % 2 ? -1.0 : 1.0) * det(minor) / d;  // transposed cofactor
    }
  return inv;
}

struct JlfVoxel {
  std::vector<double> weights;
  Label label = 0;
  double score = 0.0;
};

// Joint label fusion at one voxel from first principles: patch error
// products, regularized dependency matrix, cofactor inverse, label enumeration.
inline JlfVoxel jlf(const ScalarVolume& target, const AtlasSet& atlases, const FusionConfig& cfg, int i, int j,
                    int k) {
  const GridGeometry& g = target.geometry();
  const std::size_t n = atlases.size();
  std::vector<std::vector<double>> err(n);
  for (int dz = -cfg.patch_radius; dz <= cfg.patch_radius; ++dz)
    for (int dy = -cfg.patch_radius; dy <= cfg.patch_radius; ++dy)
      for (int dx = -cfg.patch_radius; dx <= cfg.patch_radius; ++dx) {
        if (!g.contains(i + dx, j + dy, k + dz)) continue;
        for (std::size_t a = 0; a < n; ++a)
          err[a].push_back(std::abs(target(i + dx, j + dy, k + dz) - atlases[a].image(i + dx, j + dy, k + dz)));
      }
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double s = 0.0;
      for (std::size_t y = 0; y < err[a].size(); ++y) s += err[a][y] * err[b][y];
      m[a][b] = std::pow(s / static_cast<double>(err[a].size()), cfg.beta) + (a == b ? cfg.epsilon : 0.0);
    }
  const auto inv = inverse(m);
  JlfVoxel out;
  out.weights.assign(n, 0.0);
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) out.weights[a] += inv[a][b];
    total += out.weights[a];
  }
  for (auto& w : out.weights) w /= total;
  out.score = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < 256; ++l) {
    bool present = false;
    double s = 0.0;
    for (std::size_t a = 0; a < n; ++a)
      if (atlases[a].labels(i, j, k) == l) {
        present = true;
        s += out.weights[a];
      }
    if (present && s > out.score + kScoreTieTolerance) {
      out.score = s;
      out.label = static_cast<Label>(l);
    }
  }
  return out;
}

// Foreground voxels with a background 6-neighbour inside the grid, as world points.
inline std::vector<Vec3> surface(const LabelVolume& m) {
  const GridGeometry& g = m.geometry();
  std::vector<Vec3> pts;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!m(i, j, k)) continue;
        bool edge = false;
        for (const auto& o : off) {
          const int a = i + o[0], b = j + o[1], c = k + o[2];
          if (g.contains(a, b, c) && !m(a, b, c)) edge = true;
        }
        if (edge) pts.push_back(g.to_world(i, j, k));
      }
  return pts;
}

// Mean over S-surface points of the distance to the nearest GT-surface point (all pairs).
inline double asd_directed(const LabelVolume& gt, const LabelVolume& s) {
  const auto a = surface(s), b = surface(gt);
  double sum = 0.0;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) best = std::min(best, (p - q).norm());
    sum += best;
  }
  return sum / static_cast<double>(a.size());
}

inline double dice(const LabelVolume& gt, const LabelVolume& s) {
  double inter = 0, ng = 0, ns = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ng += gt[i] != 0;
    ns += s[i] != 0;
    inter += gt[i] != 0 && s[i] != 0;
  }
  return ng + ns == 0 ? 100.0 : 200.0 * inter / (ng + ns);
}

// Relative L2 error of the analytic NMI gradient against central differences.
// The mask stays 2 voxels inside the grid so no sample crosses the floating
// image border, where NMI jumps as voxels enter or leave the histogram.
// Trilinear sampling kinks wherever a sample crosses a voxel face, so each
// coefficient's step is capped at half the distance to the nearest crossing;
// a difference straddling a kink averages two one-sided slopes.
inline double nmi_gradient_error(const ScalarVolume& t, const ScalarVolume& f, const ComposedTransform& ct,
                                 const IntensityWindow& w, double h) {
  const GridGeometry& g = t.geometry();
  const GridGeometry& fg = f.geometry();
  const Index3 d = g.dims;
  const BoundingBox all{{2, 2, 2}, {d[0] - 3, d[1] - 3, d[2] - 3}};
  const auto grad = nmi_gradient(t, f, ct, w, all);

  std::vector<Vec3> pos;
  for (int k = all.min_index[2]; k <= all.max_index[2]; ++k)
    for (int j = all.min_index[1]; j <= all.max_index[1]; ++j)
      for (int i = all.min_index[0]; i <= all.max_index[0]; ++i) pos.push_back(g.to_world(i, j, k));

  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    // The displacement is linear in the coefficient, so a unit bump gives its weight.
    ComposedTransform bumped = ct;
    bumped.ffd.coefficients()[i] += Vec3(1, 1, 1);
    Vec3 room = Vec3::Constant(std::numeric_limits<double>::infinity());
    for (const Vec3& x : pos) {
      const Vec3 y = ct.apply(x);
      const double weight = (bumped.apply(x) - y).x();
      if (weight == 0.0) continue;
      for (int a = 0; a < 3; ++a) {
        const double q = (y[a] - fg.origin[a]) / fg.spacing[a];
        const double gap = std::min(q - std::floor(q), std::ceil(q) - q) * fg.spacing[a];
        room[a] = std::min(room[a], gap / std::abs(weight));
      }
    }
    for (int a = 0; a < 3; ++a) {
      const double step = std::min(h, 0.5 * room[a]);
      ComposedTransform p = ct, m = ct;
      p.ffd.coefficients()[i][a] += step;
      m.ffd.coefficients()[i][a] -= step;
      const double fd = (nmi(t, f, p, w, all) - nmi(t, f, m, w, all)) / (2 * step);
      num += (fd - grad[i][a]) * (fd - grad[i][a]);
      den += grad[i][a] * grad[i][a];
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

}  // namespace oracle
