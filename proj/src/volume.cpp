#include "vmaseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vmaseg/parallel.hpp"

namespace vmaseg {

void GridGeometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw Error("grid dimensions must be >= 1");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw Error("grid spacing must be positive and finite");
    }
    if (!std::isfinite(origin[a])) throw Error("grid origin must be finite");
  }
}

BoundingBox BoundingBox::clamped(const GridGeometry& geom) const {
  BoundingBox out;
  for (int a = 0; a < 3; ++a) {
    out.min_index[a] = std::max(min_index[a], 0);
    out.max_index[a] = std::min(max_index[a], geom.dims[a] - 1);
  }
  return out;
}

BoundingBox BoundingBox::expanded(const Index3& margin) const {
  BoundingBox out = *this;
  for (int a = 0; a < 3; ++a) {
    out.min_index[a] -= margin[a];
    out.max_index[a] += margin[a];
  }
  return out;
}

BoundingBox BoundingBox::united(const BoundingBox& other) const {
  if (!valid()) return other;
  if (!other.valid()) return *this;
  BoundingBox out;
  for (int a = 0; a < 3; ++a) {
    out.min_index[a] = std::min(min_index[a], other.min_index[a]);
    out.max_index[a] = std::max(max_index[a], other.max_index[a]);
  }
  return out;
}

namespace {

void require_finite(const Vec3& p) {
  if (!p.allFinite()) throw Error("sample point is not finite");
}

struct AxisStencil {
  int lo = 0;    // lower node
  int hi = 0;    // upper node (== lo on degenerate axes)
  int prev = 0;  // node below lo, for node-centered slopes
  double frac = 0.0;
  bool at_node = false;
};

// Returns false when t lies outside [0, n-1].
bool make_stencil(double t, int n, AxisStencil& s) {
  if (n == 1) {
    if (t != 0.0) return false;
    s = {0, 0, 0, 0.0, false};
    return true;
  }
  if (!(t >= 0.0) || t > static_cast<double>(n - 1)) return false;
  int lo = static_cast<int>(std::floor(t));
  if (lo > n - 2) lo = n - 2;
  s.lo = lo;
  s.hi = lo + 1;
  s.frac = t - lo;
  s.at_node = (s.frac == 0.0 && lo > 0);
  s.prev = s.at_node ? lo - 1 : lo;
  return true;
}

}  // namespace

bool trilinear_index(const ScalarVolume& vol, const Vec3& idx, double& value, Vec3* gradient) {
  const auto& g = vol.geometry();
  AxisStencil sx, sy, sz;
  if (!make_stencil(idx.x(), g.dims[0], sx) || !make_stencil(idx.y(), g.dims[1], sy) ||
      !make_stencil(idx.z(), g.dims[2], sz)) {
    value = 0.0;
    if (gradient) gradient->setZero();
    return false;
  }
  const auto at = [&](int i, int j, int k) { return vol[g.linear(i, j, k)]; };
  const double fx = sx.frac, fy = sy.frac, fz = sz.frac;

  // Bilinear interpolation over two axes at a fixed node of the third.
  const auto bil_yz = [&](int i) {
    const double a = at(i, sy.lo, sz.lo) * (1 - fy) + at(i, sy.hi, sz.lo) * fy;
    const double b = at(i, sy.lo, sz.hi) * (1 - fy) + at(i, sy.hi, sz.hi) * fy;
    return a * (1 - fz) + b * fz;
  };
  const double x0 = bil_yz(sx.lo);
  const double x1 = bil_yz(sx.hi);
  value = x0 * (1 - fx) + x1 * fx;
  if (!gradient) return true;

  (*gradient)(0) = sx.at_node ? 0.5 * (x1 - bil_yz(sx.prev)) : x1 - x0;

  const auto bil_xz = [&](int j) {
    const double a = at(sx.lo, j, sz.lo) * (1 - fx) + at(sx.hi, j, sz.lo) * fx;
    const double b = at(sx.lo, j, sz.hi) * (1 - fx) + at(sx.hi, j, sz.hi) * fx;
    return a * (1 - fz) + b * fz;
  };
  const double y0 = bil_xz(sy.lo), y1 = bil_xz(sy.hi);
  (*gradient)(1) = sy.at_node ? 0.5 * (y1 - bil_xz(sy.prev)) : y1 - y0;

  const auto bil_xy = [&](int k) {
    const double a = at(sx.lo, sy.lo, k) * (1 - fx) + at(sx.hi, sy.lo, k) * fx;
    const double b = at(sx.lo, sy.hi, k) * (1 - fx) + at(sx.hi, sy.hi, k) * fx;
    return a * (1 - fy) + b * fy;
  };
  const double z0 = bil_xy(sz.lo), z1 = bil_xy(sz.hi);
  (*gradient)(2) = sz.at_node ? 0.5 * (z1 - bil_xy(sz.prev)) : z1 - z0;
  return true;
}

double trilinear_sample(const ScalarVolume& vol, const Vec3& p) {
  require_finite(p);
  double v = 0.0;
  trilinear_index(vol, vol.geometry().to_index(p), v, nullptr);
  return v;
}

Label nearest_sample(const LabelVolume& vol, const Vec3& p) {
  require_finite(p);
  const auto& g = vol.geometry();
  const Vec3 t = g.to_index(p);
  Index3 n{};
  for (int a = 0; a < 3; ++a) {
    // ceil(t - 0.5) rounds halves down: ties go to the lower index.
    const double r = std::ceil(t[a] - 0.5);
    if (r < 0.0 || r > g.dims[a] - 1) return 0;
    n[a] = static_cast<int>(r);
  }
  return vol(n[0], n[1], n[2]);
}

namespace {

template <typename T>
Volume<T> crop_impl(const Volume<T>& vol, const BoundingBox& box, const Index3& margin) {
  if (!box.valid()) throw Error("crop: bounding box has min > max");
  const BoundingBox b = box.expanded(margin).clamped(vol.geometry());
  if (!b.valid() || !box.clamped(vol.geometry()).valid()) {
    throw Error("crop: bounding box does not intersect the volume");
  }
  GridGeometry g = vol.geometry();
  for (int a = 0; a < 3; ++a) g.dims[a] = b.max_index[a] - b.min_index[a] + 1;
  g.origin = vol.geometry().to_world(b.min_index[0], b.min_index[1], b.min_index[2]);
  Volume<T> out(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        out(i, j, k) = vol(i + b.min_index[0], j + b.min_index[1], k + b.min_index[2]);
  return out;
}

}  // namespace

ScalarVolume crop(const ScalarVolume& vol, const BoundingBox& box, const Index3& margin) {
  return crop_impl(vol, box, margin);
}

LabelVolume crop(const LabelVolume& vol, const BoundingBox& box, const Index3& margin) {
  return crop_impl(vol, box, margin);
}

ScalarVolume resample(const ScalarVolume& src, const GridGeometry& target, const PointMap& map) {
  ScalarVolume out(target);
  parallel_for(target.dims[2], [&](std::int64_t k) {
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i)
        out(i, j, static_cast<int>(k)) =
            trilinear_sample(src, map(target.to_world(i, j, static_cast<int>(k))));
  });
  return out;
}

LabelVolume resample(const LabelVolume& src, const GridGeometry& target, const PointMap& map) {
  LabelVolume out(target);
  parallel_for(target.dims[2], [&](std::int64_t k) {
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i)
        out(i, j, static_cast<int>(k)) =
            nearest_sample(src, map(target.to_world(i, j, static_cast<int>(k))));
  });
  return out;
}

namespace {

int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int d = -radius; d <= radius; ++d) {
    k[d + radius] = std::exp(-0.5 * d * d / (sigma * sigma));
    sum += k[d + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

void smooth_axis(ScalarVolume& vol, int axis, double sigma) {
  if (sigma <= 0.0) return;
  const auto& g = vol.geometry();
  const int n = g.dims[axis];
  if (n == 1) return;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
  ScalarVolume src = vol;
  parallel_for(g.dims[a2], [&](std::int64_t outer) {
    std::vector<double> line(n);
    Index3 idx{};
    idx[a2] = static_cast<int>(outer);
    for (int inner = 0; inner < g.dims[a1]; ++inner) {
      idx[a1] = inner;
      for (int t = 0; t < n; ++t) {
        idx[axis] = t;
        line[t] = src(idx[0], idx[1], idx[2]);
      }
      for (int t = 0; t < n; ++t) {
        double acc = 0.0;
        for (int d = -radius; d <= radius; ++d) acc += kernel[d + radius] * line[mirror_index(t + d, n)];
        idx[axis] = t;
        vol(idx[0], idx[1], idx[2]) = acc;
      }
    }
  });
}

void check_factor(const Index3& factor) {
  for (int f : factor)
    if (f < 1) throw Error("downsample factor must be >= 1");
}

}  // namespace

ScalarVolume gaussian_smooth(const ScalarVolume& vol, const Vec3& sigma_voxels) {
  ScalarVolume out = vol;
  for (int a = 0; a < 3; ++a) smooth_axis(out, a, sigma_voxels[a]);
  return out;
}

GridGeometry decimated_geometry(const GridGeometry& geom, const Index3& factor) {
  check_factor(factor);
  GridGeometry g = geom;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = geom.dims[a] / factor[a];
    if (g.dims[a] < 1) throw Error("downsample would produce an empty axis");
    g.spacing[a] = geom.spacing[a] * factor[a];
  }
  return g;
}

ScalarVolume downsample(const ScalarVolume& vol, const Index3& factor) {
  const GridGeometry g = decimated_geometry(vol.geometry(), factor);
  Vec3 sigma;
  for (int a = 0; a < 3; ++a) sigma[a] = factor[a] > 1 ? 0.5 * factor[a] : 0.0;
  const ScalarVolume smooth = gaussian_smooth(vol, sigma);
  ScalarVolume out(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        out(i, j, k) = smooth(i * factor[0], j * factor[1], k * factor[2]);
  return out;
}

LabelVolume downsample(const LabelVolume& vol, const Index3& factor) {
  const GridGeometry g = decimated_geometry(vol.geometry(), factor);
  LabelVolume out(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        out(i, j, k) = vol(i * factor[0], j * factor[1], k * factor[2]);
  return out;
}

BoundingBox label_bounds(const LabelVolume& vol, Label label) {
  const auto& g = vol.geometry();
  BoundingBox b{{std::numeric_limits<int>::max(), std::numeric_limits<int>::max(),
                 std::numeric_limits<int>::max()},
                {-1, -1, -1}};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (vol(i, j, k) != label) continue;
        b.min_index = {std::min(b.min_index[0], i), std::min(b.min_index[1], j),
                       std::min(b.min_index[2], k)};
        b.max_index = {std::max(b.max_index[0], i), std::max(b.max_index[1], j),
                       std::max(b.max_index[2], k)};
      }
  return b;
}

std::vector<Label> label_set(const LabelVolume& vol) {
  std::array<bool, 256> seen{};
  for (Label l : vol.data()) seen[l] = true;
  std::vector<Label> out;
  for (int l = 0; l < 256; ++l)
    if (seen[l]) out.push_back(static_cast<Label>(l));
  return out;
}

}  // namespace vmaseg
