#include "vmaseg/transform.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include <Eigen/LU>

namespace vmaseg {

namespace {
constexpr double kSupportSlack = 1e-9;
}

void AffineTransform::validate() const {
  if (!matrix.allFinite() || !translation.allFinite()) {
    throw Error("affine transform has non-finite entries");
  }
  if (std::abs(matrix.determinant()) <= 1e-12) throw Error("affine matrix is singular");
}

FFDTransform::FFDTransform(const GridGeometry& lattice)
    : lattice_(lattice), coefficients_(lattice.voxel_count(), Vec3::Zero()) {
  lattice_.validate();
  for (int d : lattice_.dims)
    if (d < 4) throw Error("FFD lattice needs at least 4 control points per axis");
}

FFDTransform::FFDTransform(const GridGeometry& lattice, std::vector<Vec3> coefficients)
    : FFDTransform(lattice) {
  if (coefficients.size() != coefficients_.size()) {
    throw Error("FFD coefficient count does not match the lattice");
  }
  coefficients_ = std::move(coefficients);
}

FFDTransform FFDTransform::covering(const Vec3& lo, const Vec3& hi, const Vec3& control_spacing) {
  GridGeometry g;
  for (int a = 0; a < 3; ++a) {
    if (!(control_spacing[a] > 0.0)) throw Error("control spacing must be positive");
    if (!(hi[a] >= lo[a])) throw Error("FFD domain has hi < lo");
    const double cells = std::floor((hi[a] - lo[a]) / control_spacing[a] + 1e-9);
    g.dims[a] = static_cast<int>(cells) + 4;
    g.spacing[a] = control_spacing[a];
    g.origin[a] = lo[a] - control_spacing[a];
  }
  return FFDTransform(g);
}

bool FFDTransform::support_weights(const Vec3& x, SupportWeights& sw) const {
  for (int a = 0; a < 3; ++a) {
    const int n = lattice_.dims[a];
    double t = (x[a] - lattice_.origin[a]) / lattice_.spacing[a];
    // Tolerate round-off on the support faces.
    if (!(t >= 1.0 - kSupportSlack) || t > n - 2 + kSupportSlack) return false;
    t = std::clamp(t, 1.0, static_cast<double>(n - 2));
    int cell = static_cast<int>(t);
    if (cell > n - 3) cell = n - 3;
    sw.base[a] = cell - 1;
    bspline::weights(t - cell, sw.w[a]);
  }
  return true;
}

bool FFDTransform::in_support(const Vec3& x) const {
  SupportWeights sw;
  return support_weights(x, sw);
}

Vec3 FFDTransform::displacement(const SupportWeights& sw) const {
  const std::size_t sy = static_cast<std::size_t>(lattice_.dims[0]);
  const std::size_t sz = sy * lattice_.dims[1];
  const double* base = coefficients_[lattice_.linear(sw.base[0], sw.base[1], sw.base[2])].data();
  const double* wx = sw.w[0];
  double ax = 0.0, ay = 0.0, az = 0.0;
  for (int c = 0; c < 4; ++c) {
    for (int b = 0; b < 4; ++b) {
      const double wbc = sw.w[1][b] * sw.w[2][c];
      const double* r = base + 3 * (c * sz + b * sy);
      ax += wbc * (wx[0] * r[0] + wx[1] * r[3] + wx[2] * r[6] + wx[3] * r[9]);
      ay += wbc * (wx[0] * r[1] + wx[1] * r[4] + wx[2] * r[7] + wx[3] * r[10]);
      az += wbc * (wx[0] * r[2] + wx[1] * r[5] + wx[2] * r[8] + wx[3] * r[11]);
    }
  }
  return {ax, ay, az};
}

Vec3 FFDTransform::displacement(const Vec3& x) const {
  if (!x.allFinite()) throw Error("FFD query point is not finite");
  SupportWeights sw;
  if (!support_weights(x, sw)) throw Error("point lies outside the FFD lattice support");
  return displacement(sw);
}

FFDTransform FFDTransform::refined() const {
  GridGeometry g;
  for (int a = 0; a < 3; ++a) {
    g.spacing[a] = 0.5 * lattice_.spacing[a];
    // Same domain start (origin + spacing), one half-spacing control point outside.
    g.origin[a] = lattice_.origin[a] + lattice_.spacing[a] - g.spacing[a];
    g.dims[a] = 2 * lattice_.dims[a] - 3;
  }
  FFDTransform fine(g);
  const auto& cd = lattice_.dims;
  // Fine index k sits at coarse coordinate (k + 1) / 2.
  const auto stencil = [&](int k, int axis, int idx[3], double w[3]) {
    const auto clamp = [&](int i) { return std::clamp(i, 0, cd[axis] - 1); };
    if (k % 2 == 1) {
      const int i = (k + 1) / 2;
      idx[0] = clamp(i - 1), idx[1] = clamp(i), idx[2] = clamp(i + 1);
      w[0] = 0.125, w[1] = 0.75, w[2] = 0.125;
    } else {
      const int i = k / 2;
      idx[0] = clamp(i), idx[1] = clamp(i + 1), idx[2] = clamp(i + 1);
      w[0] = 0.5, w[1] = 0.5, w[2] = 0.0;
    }
  };
  for (int k = 0; k < g.dims[2]; ++k) {
    int iz[3];
    double wz[3];
    stencil(k, 2, iz, wz);
    for (int j = 0; j < g.dims[1]; ++j) {
      int iy[3];
      double wy[3];
      stencil(j, 1, iy, wy);
      for (int i = 0; i < g.dims[0]; ++i) {
        int ix[3];
        double wx[3];
        stencil(i, 0, ix, wx);
        Vec3 acc = Vec3::Zero();
        for (int c = 0; c < 3; ++c)
          for (int b = 0; b < 3; ++b)
            for (int a = 0; a < 3; ++a) {
              const double w = wx[a] * wy[b] * wz[c];
              if (w != 0.0) acc += w * coefficient(ix[a], iy[b], iz[c]);
            }
        fine.coefficient(i, j, k) = acc;
      }
    }
  }
  return fine;
}

double FFDTransform::max_coefficient_norm() const {
  double m = 0.0;
  for (const auto& c : coefficients_) m = std::max(m, c.norm());
  return m;
}

namespace {

using Mat4 = Eigen::Matrix4d;

// Per-axis accumulation of basis outer products over the samples in each cell.
struct AxisMoments {
  std::vector<Mat4> m00, m11, m22;
  std::vector<bool> used;
};

AxisMoments axis_moments(const GridGeometry& lattice, const GridGeometry& samples, int axis) {
  const int cells = lattice.dims[axis] - 3;
  AxisMoments m;
  m.m00.assign(cells, Mat4::Zero());
  m.m11.assign(cells, Mat4::Zero());
  m.m22.assign(cells, Mat4::Zero());
  m.used.assign(cells, false);
  const double s = lattice.spacing[axis];
  for (int idx = 0; idx < samples.dims[axis]; ++idx) {
    const double x = samples.origin[axis] + idx * samples.spacing[axis];
    double t = (x - lattice.origin[axis]) / s;
    if (!(t >= 1.0 - kSupportSlack) || t > lattice.dims[axis] - 2.0 + kSupportSlack) {
      throw Error("bending energy sample grid leaves the FFD lattice support");
    }
    t = std::clamp(t, 1.0, lattice.dims[axis] - 2.0);
    int cell = static_cast<int>(t);
    if (cell > lattice.dims[axis] - 3) cell = lattice.dims[axis] - 3;
    const double u = t - cell;
    Eigen::Vector4d b0, b1, b2;
    bspline::weights(u, b0.data());
    bspline::first_derivatives(u, b1.data());
    bspline::second_derivatives(u, b2.data());
    const int c = cell - 1;
    m.m00[c] += b0 * b0.transpose();
    m.m11[c] += b1 * b1.transpose();
    m.m22[c] += b2 * b2.transpose();
    m.used[c] = true;
  }
  return m;
}

// out += scale * (A kron B kron C) applied to a 4x4x4 block (x fastest).
void apply_kron(const Mat4& a, const Mat4& b, const Mat4& c, const Vec3 (&in)[64], double scale,
                Vec3 (&out)[64]) {
  Vec3 t1[64], t2[64];
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        Vec3 acc = Vec3::Zero();
        for (int ii = 0; ii < 4; ++ii) acc += a(i, ii) * in[(k * 4 + j) * 4 + ii];
        t1[(k * 4 + j) * 4 + i] = acc;
      }
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        Vec3 acc = Vec3::Zero();
        for (int jj = 0; jj < 4; ++jj) acc += b(j, jj) * t1[(k * 4 + jj) * 4 + i];
        t2[(k * 4 + j) * 4 + i] = acc;
      }
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        Vec3 acc = Vec3::Zero();
        for (int kk = 0; kk < 4; ++kk) acc += c(k, kk) * t2[(kk * 4 + j) * 4 + i];
        out[(k * 4 + j) * 4 + i] += scale * acc;
      }
}

}  // namespace

BendingEnergy bending_energy(const FFDTransform& ffd, const GridGeometry& samples,
                             bool with_gradient) {
  samples.validate();
  const double n = static_cast<double>(samples.voxel_count());
  if (n <= 0) throw Error("bending energy needs a non-empty sample grid");
  const GridGeometry& lat = ffd.lattice();
  const AxisMoments mx = axis_moments(lat, samples, 0);
  const AxisMoments my = axis_moments(lat, samples, 1);
  const AxisMoments mz = axis_moments(lat, samples, 2);

  BendingEnergy out;
  if (with_gradient) out.gradient.assign(ffd.control_count(), Vec3::Zero());
  double total = 0.0;
  const auto coeffs = ffd.coefficients();
  // The energy is a sum over lattice cells of c^T Q c with Q a sum of
  // Kronecker products of the per-axis moment matrices.
  for (std::size_t cz = 0; cz < mz.used.size(); ++cz) {
    if (!mz.used[cz]) continue;
    for (std::size_t cy = 0; cy < my.used.size(); ++cy) {
      if (!my.used[cy]) continue;
      for (std::size_t cx = 0; cx < mx.used.size(); ++cx) {
        if (!mx.used[cx]) continue;
        Vec3 block[64];
        for (int k = 0; k < 4; ++k)
          for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i)
              block[(k * 4 + j) * 4 + i] = coeffs[lat.linear(static_cast<int>(cx) + i,
                                                             static_cast<int>(cy) + j,
                                                             static_cast<int>(cz) + k)];
        Vec3 q[64];
        for (auto& v : q) v.setZero();
        apply_kron(mx.m22[cx], my.m00[cy], mz.m00[cz], block, 1.0, q);
        apply_kron(mx.m00[cx], my.m22[cy], mz.m00[cz], block, 1.0, q);
        apply_kron(mx.m00[cx], my.m00[cy], mz.m22[cz], block, 1.0, q);
        apply_kron(mx.m11[cx], my.m11[cy], mz.m00[cz], block, 2.0, q);
        apply_kron(mx.m00[cx], my.m11[cy], mz.m11[cz], block, 2.0, q);
        apply_kron(mx.m11[cx], my.m00[cy], mz.m11[cz], block, 2.0, q);
        double cell = 0.0;
        for (int e = 0; e < 64; ++e) cell += block[e].dot(q[e]);
        total += cell;
        if (with_gradient) {
          for (int k = 0; k < 4; ++k)
            for (int j = 0; j < 4; ++j)
              for (int i = 0; i < 4; ++i)
                out.gradient[lat.linear(static_cast<int>(cx) + i, static_cast<int>(cy) + j,
                                        static_cast<int>(cz) + k)] +=
                    (2.0 / n) * q[(k * 4 + j) * 4 + i];
        }
      }
    }
  }
  out.value = std::max(0.0, total / n);
  return out;
}

void affine_image_bounds(const AffineTransform& a, const GridGeometry& grid, Vec3& lo, Vec3& hi) {
  lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  hi = -lo;
  const Vec3 p0 = grid.origin, p1 = grid.extent_max();
  for (int corner = 0; corner < 8; ++corner) {
    const Vec3 p((corner & 1) ? p1.x() : p0.x(), (corner & 2) ? p1.y() : p0.y(),
                 (corner & 4) ? p1.z() : p0.z());
    const Vec3 q = a.apply(p);
    lo = lo.cwiseMin(q);
    hi = hi.cwiseMax(q);
  }
}

ComposedTransform make_composed(const AffineTransform& a, const GridGeometry& target,
                                double control_spacing_mm) {
  Vec3 lo, hi;
  affine_image_bounds(a, target, lo, hi);
  return {a, FFDTransform::covering(lo, hi, Vec3::Constant(control_spacing_mm))};
}

GridGeometry penalty_grid(const AffineTransform& a, const GridGeometry& target) {
  Vec3 lo, hi;
  affine_image_bounds(a, target, lo, hi);
  GridGeometry g;
  g.spacing = target.spacing;
  g.origin = lo;
  for (int ax = 0; ax < 3; ++ax) {
    g.dims[ax] = 1 + static_cast<int>(std::floor((hi[ax] - lo[ax]) / g.spacing[ax] + 1e-9));
  }
  return g;
}

namespace {

constexpr const char* kMagic = "vmaseg-transform";

void expect(std::istream& in, const std::string& token) {
  std::string got;
  if (!(in >> got) || got != token) {
    throw Error("transform file: expected '" + token + "', found '" + got + "'");
  }
}

}  // namespace

void write_transform(std::ostream& out, const ComposedTransform& t) {
  out << std::setprecision(17);
  out << kMagic << " 1\n";
  out << "affine\n";
  for (int r = 0; r < 3; ++r) {
    out << t.affine.matrix(r, 0) << ' ' << t.affine.matrix(r, 1) << ' ' << t.affine.matrix(r, 2)
        << ' ' << t.affine.translation[r] << '\n';
  }
  if (t.ffd.empty()) {
    out << "ffd none\n";
    if (!out) throw Error("transform file: write failed");
    return;
  }
  const auto& g = t.ffd.lattice();
  out << "ffd\n";
  out << "dims " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
  out << "spacing " << g.spacing[0] << ' ' << g.spacing[1] << ' ' << g.spacing[2] << '\n';
  out << "origin " << g.origin[0] << ' ' << g.origin[1] << ' ' << g.origin[2] << '\n';
  out << "coefficients " << t.ffd.control_count() << '\n';
  for (const auto& c : t.ffd.coefficients()) out << c[0] << ' ' << c[1] << ' ' << c[2] << '\n';
  if (!out) throw Error("transform file: write failed");
}

ComposedTransform read_transform(std::istream& in) {
  expect(in, kMagic);
  int version = 0;
  if (!(in >> version) || version != 1) throw Error("transform file: unsupported version");
  ComposedTransform t;
  expect(in, "affine");
  for (int r = 0; r < 3; ++r) {
    in >> t.affine.matrix(r, 0) >> t.affine.matrix(r, 1) >> t.affine.matrix(r, 2) >>
        t.affine.translation[r];
  }
  if (!in) throw Error("transform file: malformed affine block");
  t.affine.validate();
  GridGeometry g;
  expect(in, "ffd");
  std::string next;
  in >> next;
  if (next == "none") return t;
  if (next != "dims") throw Error("transform file: expected 'dims', found '" + next + "'");
  in >> g.dims[0] >> g.dims[1] >> g.dims[2];
  expect(in, "spacing");
  in >> g.spacing[0] >> g.spacing[1] >> g.spacing[2];
  expect(in, "origin");
  in >> g.origin[0] >> g.origin[1] >> g.origin[2];
  expect(in, "coefficients");
  std::size_t count = 0;
  in >> count;
  if (!in) throw Error("transform file: malformed lattice block");
  g.validate();
  if (count != g.voxel_count()) throw Error("transform file: coefficient count mismatch");
  std::vector<Vec3> coeffs(count);
  for (auto& c : coeffs) in >> c[0] >> c[1] >> c[2];
  if (!in) throw Error("transform file: truncated coefficient array");
  t.ffd = FFDTransform(g, std::move(coeffs));
  return t;
}

void save_transform(const std::filesystem::path& path, const ComposedTransform& t) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write transform file " + path.string());
  write_transform(out, t);
}

ComposedTransform load_transform(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open transform file " + path.string());
  return read_transform(in);
}

}  // namespace vmaseg
