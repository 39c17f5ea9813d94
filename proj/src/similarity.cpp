#include "vmaseg/similarity.hpp"

#include <algorithm>
#include <cmath>

#include "vmaseg/parallel.hpp"

namespace vmaseg {

void IntensityWindow::validate() const {
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw Error("intensity window needs finite lo < hi");
  }
  if (bins < 8) throw Error("intensity window needs at least 8 bins");
}

double IntensityWindow::bin_position(double v, double* slope) const {
  if (v <= lo) {
    if (slope) *slope = 0.0;
    return 0.0;
  }
  if (v >= hi) {
    if (slope) *slope = 0.0;
    return bins - 1.0;
  }
  if (slope) *slope = scale();
  return (v - lo) * scale();
}

int IntensityWindow::nearest_bin(double v) const {
  return static_cast<int>(std::lround(bin_position(v)));
}

double JointHistogram::total() const {
  double t = 0.0;
  for (double c : counts_) t += c;
  return t;
}

std::vector<double> JointHistogram::target_marginal() const {
  std::vector<double> m(bins_, 0.0);
  for (int a = 0; a < bins_; ++a)
    for (int b = 0; b < bins_; ++b) m[a] += at(a, b);
  return m;
}

std::vector<double> JointHistogram::floating_marginal() const {
  std::vector<double> m(bins_, 0.0);
  for (int a = 0; a < bins_; ++a)
    for (int b = 0; b < bins_; ++b) m[b] += at(a, b);
  return m;
}

void JointHistogram::deposit(int target_bin, double position) {
  int k0 = static_cast<int>(position);
  if (k0 > bins_ - 2) k0 = bins_ - 2;
  const double f = position - k0;
  const double w1 = f * f * (3.0 - 2.0 * f);
  double* row = &counts_[target_bin * bins_];
  row[k0] += 1.0 - w1;
  row[k0 + 1] += w1;
}

JointHistogram& JointHistogram::operator+=(const JointHistogram& other) {
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

namespace {

void check_mask(const BoundingBox& mask, const GridGeometry& g) {
  if (!mask.valid() || mask.clamped(g) != mask) {
    throw Error("similarity mask must be a non-empty box inside the target grid");
  }
}

// Slices of the mask handled per tile; the tiling is fixed so reductions are
// independent of the worker count.
constexpr int kSlicesPerTile = 2;

int tile_count(const BoundingBox& mask) {
  const int nz = mask.max_index[2] - mask.min_index[2] + 1;
  return (nz + kSlicesPerTile - 1) / kSlicesPerTile;
}

double entropy_of(const std::vector<double>& counts, double total) {
  double h = 0.0;
  for (double c : counts) {
    if (c <= 0.0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

JointHistogram joint_histogram(const ScalarVolume& target, const ScalarVolume& floating_warped,
                               const IntensityWindow& window, const BoundingBox& mask) {
  window.validate();
  check_mask(mask, target.geometry());
  if (floating_warped.dims() != target.dims()) {
    throw Error("joint histogram inputs must share the target grid");
  }
  JointHistogram h(window.bins);
  for (int k = mask.min_index[2]; k <= mask.max_index[2]; ++k)
    for (int j = mask.min_index[1]; j <= mask.max_index[1]; ++j)
      for (int i = mask.min_index[0]; i <= mask.max_index[0]; ++i) {
        h.deposit(window.nearest_bin(target(i, j, k)), window.bin_position(floating_warped(i, j, k)));
      }
  return h;
}

Entropies entropies(const JointHistogram& h) {
  const double total = h.total();
  if (!(total > 0.0)) throw Error("entropies of an empty histogram");
  return {entropy_of(h.target_marginal(), total), entropy_of(h.floating_marginal(), total),
          entropy_of(h.counts(), total)};
}

double nmi(const JointHistogram& h) {
  const Entropies e = entropies(h);
  if (e.joint <= 0.0) return 2.0;
  return (e.target + e.floating) / e.joint;
}

double nmi(const ScalarVolume& target, const ScalarVolume& floating_warped,
           const IntensityWindow& window, const BoundingBox& mask) {
  return nmi(joint_histogram(target, floating_warped, window, mask));
}

namespace {

// `map(x, y)` sends target world point x to floating world point y.
template <typename Map>
double nmi_forces_impl(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask, const Map& map,
                       std::vector<Vec3>* forces) {
  window.validate();
  const GridGeometry& tg = target.geometry();
  const GridGeometry& fg = floating.geometry();
  check_mask(mask, tg);
  const int nx = mask.max_index[0] - mask.min_index[0] + 1;
  const int ny = mask.max_index[1] - mask.min_index[1] + 1;
  const int nz = mask.max_index[2] - mask.min_index[2] + 1;
  const std::size_t count = static_cast<std::size_t>(nx) * ny * nz;
  const bool want_forces = forces != nullptr;

  // Per mask voxel: floating bin position (negative = excluded), target bin,
  // d(bin)/d(intensity) and the floating image gradient in world units.
  std::vector<double> position(count, -1.0);
  std::vector<int> target_bin(count, 0);
  std::vector<double> slope;
  std::vector<Vec3> grad;
  if (want_forces) {
    slope.assign(count, 0.0);
    grad.assign(count, Vec3::Zero());
  }
  const Vec3 inv_spacing = fg.spacing.cwiseInverse();

  const int tiles = tile_count(mask);
  std::vector<JointHistogram> partial(tiles, JointHistogram(window.bins));
  parallel_for(tiles, [&](std::int64_t tile) {
    const int z0 = static_cast<int>(tile) * kSlicesPerTile;
    const int z1 = std::min(nz, z0 + kSlicesPerTile);
    JointHistogram& h = partial[tile];
    Vec3 y, g;
    for (int kz = z0; kz < z1; ++kz)
      for (int jy = 0; jy < ny; ++jy)
        for (int ix = 0; ix < nx; ++ix) {
          const std::size_t m = (static_cast<std::size_t>(kz) * ny + jy) * nx + ix;
          const int i = ix + mask.min_index[0], j = jy + mask.min_index[1], k = kz + mask.min_index[2];
          if (!map(tg.to_world(i, j, k), y)) continue;
          double v;
          if (!trilinear_index(floating, fg.to_index(y), v, want_forces ? &g : nullptr)) continue;
          double s;
          const double b = window.bin_position(v, &s);
          const int a = window.nearest_bin(target(i, j, k));
          position[m] = b;
          target_bin[m] = a;
          if (want_forces) {
            slope[m] = s;
            grad[m] = g.cwiseProduct(inv_spacing);
          }
          h.deposit(a, b);
        }
  });
  JointHistogram h(window.bins);
  for (const auto& p : partial) h += p;
  const double total = h.total();
  if (want_forces) forces->assign(count, Vec3::Zero());
  if (!(total > 0.0)) return 0.0;

  const std::vector<double> m1 = h.target_marginal();
  const std::vector<double> m2 = h.floating_marginal();
  const double h1 = entropy_of(m1, total);
  const double h2 = entropy_of(m2, total);
  const double h12 = entropy_of(h.counts(), total);
  if (h12 <= 0.0) return 2.0;
  const double value = (h1 + h2) / h12;
  if (!want_forces) return value;

  const int bins = window.bins;
  std::vector<double> log_m2(bins, 0.0), log_joint(h.counts().size(), 0.0);
  for (int b = 0; b < bins; ++b)
    if (m2[b] > 0.0) log_m2[b] = std::log(m2[b] / total);
  for (std::size_t c = 0; c < log_joint.size(); ++c)
    if (h.counts()[c] > 0.0) log_joint[c] = std::log(h.counts()[c] / total);

  // dNMI/dv = (dH2 * H12 - (H1 + H2) * dH12) / H12^2, where each entropy
  // derivative only involves the two bins touched by the Parzen window.
  const double inv_h12_sq = 1.0 / (h12 * h12);
  parallel_for(tiles, [&](std::int64_t tile) {
    const std::size_t begin = static_cast<std::size_t>(tile) * kSlicesPerTile * nx * ny;
    const std::size_t end = std::min(count, begin + static_cast<std::size_t>(kSlicesPerTile) * nx * ny);
    for (std::size_t m = begin; m < end; ++m) {
      const double b = position[m];
      if (b < 0.0 || slope[m] == 0.0) continue;
      int k0 = static_cast<int>(b);
      if (k0 > bins - 2) k0 = bins - 2;
      const double f = b - k0;
      const double dw = 6.0 * f * (f - 1.0);  // d(weight of k0)/d(bin); k0+1 gets -dw
      if (dw == 0.0) continue;
      const double ds = slope[m] / total;
      const double dh2 = -ds * dw * (log_m2[k0] - log_m2[k0 + 1]);
      const std::size_t row = static_cast<std::size_t>(target_bin[m]) * bins;
      const double dh12 = -ds * dw * (log_joint[row + k0] - log_joint[row + k0 + 1]);
      const double dnmi = (dh2 * h12 - (h1 + h2) * dh12) * inv_h12_sq;
      (*forces)[m] = dnmi * grad[m];
    }
  });
  return value;
}

// Composed warp with the lattice strides hoisted out of the voxel loop.
struct ComposedMap {
  const ComposedTransform& t;
  bool operator()(const Vec3& x, Vec3& y) const {
    const Vec3 ax = t.affine.apply(x);
    SupportWeights sw;
    if (!t.ffd.support_weights(ax, sw)) return false;
    y = ax + t.ffd.displacement(sw);
    return true;
  }
};

struct AffineMap {
  const AffineTransform& a;
  bool operator()(const Vec3& x, Vec3& y) const {
    y = a.apply(x);
    return true;
  }
};

}  // namespace

double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const MaskPointMap& map, std::vector<Vec3>* forces) {
  return nmi_forces_impl(target, floating, window, mask, map, forces);
}

double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const ComposedTransform& t, std::vector<Vec3>* forces) {
  return nmi_forces_impl(target, floating, window, mask, ComposedMap{t}, forces);
}

double nmi_with_forces(const ScalarVolume& target, const ScalarVolume& floating,
                       const IntensityWindow& window, const BoundingBox& mask,
                       const AffineTransform& a, std::vector<Vec3>* forces) {
  return nmi_forces_impl(target, floating, window, mask, AffineMap{a}, forces);
}

double nmi(const ScalarVolume& target, const ScalarVolume& floating, const ComposedTransform& t,
           const IntensityWindow& window, const BoundingBox& mask) {
  return nmi_with_forces(target, floating, window, mask, t, nullptr);
}

std::vector<Vec3> scatter_forces(const ComposedTransform& t, const GridGeometry& target,
                                 const BoundingBox& mask, const std::vector<Vec3>& forces) {
  const int nx = mask.max_index[0] - mask.min_index[0] + 1;
  const int ny = mask.max_index[1] - mask.min_index[1] + 1;
  const int nz = mask.max_index[2] - mask.min_index[2] + 1;
  const GridGeometry& lat = t.ffd.lattice();
  const std::size_t controls = t.ffd.control_count();
  const int tiles = tile_count(mask);
  // One partial gradient per group of tiles keeps memory bounded.
  constexpr int kTilesPerGroup = 8;
  const int groups = (tiles + kTilesPerGroup - 1) / kTilesPerGroup;
  std::vector<std::vector<Vec3>> partial(groups);
  parallel_for(groups, [&](std::int64_t group) {
    auto& acc = partial[group];
    acc.assign(controls, Vec3::Zero());
    const int z0 = static_cast<int>(group) * kTilesPerGroup * kSlicesPerTile;
    const int z1 = std::min(nz, z0 + kTilesPerGroup * kSlicesPerTile);
    SupportWeights sw;
    for (int kz = z0; kz < z1; ++kz)
      for (int jy = 0; jy < ny; ++jy)
        for (int ix = 0; ix < nx; ++ix) {
          const std::size_t m = (static_cast<std::size_t>(kz) * ny + jy) * nx + ix;
          const Vec3& f = forces[m];
          if (f.isZero(0.0)) continue;
          const Vec3 x = target.to_world(ix + mask.min_index[0], jy + mask.min_index[1],
                                         kz + mask.min_index[2]);
          if (!t.ffd.support_weights(t.affine.apply(x), sw)) continue;
          for (int c = 0; c < 4; ++c)
            for (int b = 0; b < 4; ++b) {
              const double wbc = sw.w[1][b] * sw.w[2][c];
              Vec3* row = &acc[lat.linear(sw.base[0], sw.base[1] + b, sw.base[2] + c)];
              for (int a = 0; a < 4; ++a) row[a] += (sw.w[0][a] * wbc) * f;
            }
        }
  });
  std::vector<Vec3> gradient(controls, Vec3::Zero());
  for (const auto& p : partial)
    for (std::size_t c = 0; c < controls; ++c) gradient[c] += p[c];
  return gradient;
}

std::vector<Vec3> nmi_gradient(const ScalarVolume& target, const ScalarVolume& floating,
                               const ComposedTransform& t, const IntensityWindow& window,
                               const BoundingBox& mask, double* value) {
  std::vector<Vec3> forces;
  const double v = nmi_with_forces(target, floating, window, mask, t, &forces);
  if (value) *value = v;
  return scatter_forces(t, target.geometry(), mask, forces);
}

double lncc(const ScalarVolume& target, const ScalarVolume& floating_warped, int radius_voxels,
            const BoundingBox& mask) {
  if (radius_voxels < 1) throw Error("lncc radius must be >= 1");
  const GridGeometry& g = target.geometry();
  check_mask(mask, g);
  if (floating_warped.dims() != target.dims()) throw Error("lncc inputs must share the target grid");

  // Summed-volume tables over mean-centered intensities.
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    mean_a += target[i];
    mean_b += floating_warped[i];
  }
  mean_a /= static_cast<double>(target.size());
  mean_b /= static_cast<double>(target.size());
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const auto sidx = [&](int i, int j, int k) {
    return (static_cast<std::size_t>(k) * (ny + 1) + j) * (nx + 1) + i;
  };
  const std::size_t n_tables = static_cast<std::size_t>(nx + 1) * (ny + 1) * (nz + 1);
  std::array<std::vector<double>, 5> tables;
  for (auto& t : tables) t.assign(n_tables, 0.0);
  for (int k = 1; k <= nz; ++k)
    for (int j = 1; j <= ny; ++j)
      for (int i = 1; i <= nx; ++i) {
        const double a = target(i - 1, j - 1, k - 1) - mean_a;
        const double b = floating_warped(i - 1, j - 1, k - 1) - mean_b;
        const double vals[5] = {a, b, a * a, b * b, a * b};
        for (int t = 0; t < 5; ++t) {
          auto& s = tables[t];
          s[sidx(i, j, k)] = vals[t] + s[sidx(i - 1, j, k)] + s[sidx(i, j - 1, k)] +
                             s[sidx(i, j, k - 1)] - s[sidx(i - 1, j - 1, k)] -
                             s[sidx(i - 1, j, k - 1)] - s[sidx(i, j - 1, k - 1)] +
                             s[sidx(i - 1, j - 1, k - 1)];
        }
      }
  const auto box_sum = [&](const std::vector<double>& s, int i0, int j0, int k0, int i1, int j1, int k1) {
    return s[sidx(i1, j1, k1)] - s[sidx(i0, j1, k1)] - s[sidx(i1, j0, k1)] - s[sidx(i1, j1, k0)] +
           s[sidx(i0, j0, k1)] + s[sidx(i0, j1, k0)] + s[sidx(i1, j0, k0)] - s[sidx(i0, j0, k0)];
  };

  double total = 0.0;
  for (int k = mask.min_index[2]; k <= mask.max_index[2]; ++k)
    for (int j = mask.min_index[1]; j <= mask.max_index[1]; ++j)
      for (int i = mask.min_index[0]; i <= mask.max_index[0]; ++i) {
        const int i0 = std::max(0, i - radius_voxels), i1 = std::min(nx, i + radius_voxels + 1);
        const int j0 = std::max(0, j - radius_voxels), j1 = std::min(ny, j + radius_voxels + 1);
        const int k0 = std::max(0, k - radius_voxels), k1 = std::min(nz, k + radius_voxels + 1);
        const double n = static_cast<double>(i1 - i0) * (j1 - j0) * (k1 - k0);
        const double sa = box_sum(tables[0], i0, j0, k0, i1, j1, k1);
        const double sb = box_sum(tables[1], i0, j0, k0, i1, j1, k1);
        const double saa = box_sum(tables[2], i0, j0, k0, i1, j1, k1);
        const double sbb = box_sum(tables[3], i0, j0, k0, i1, j1, k1);
        const double sab = box_sum(tables[4], i0, j0, k0, i1, j1, k1);
        const double va = saa - sa * sa / n;
        const double vb = sbb - sb * sb / n;
        const double cov = sab - sa * sb / n;
        const double tol_a = 1e-10 * std::max(1.0, saa);
        const double tol_b = 1e-10 * std::max(1.0, sbb);
        if (va <= tol_a || vb <= tol_b) continue;
        total += std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
      }
  return total / static_cast<double>(mask.voxel_count());
}

}  // namespace vmaseg
