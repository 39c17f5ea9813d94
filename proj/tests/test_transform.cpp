#include "doctest.h"

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "vmaseg/transform.hpp"

using namespace vmaseg;

namespace {

// Centered cubic B-spline, written out piecewise (independent of the library's segment weights).
double beta3(double t) {
  const double a = std::abs(t);
  if (a < 1.0) return 2.0 / 3.0 - a * a + 0.5 * a * a * a;
  if (a < 2.0) return (2.0 - a) * (2.0 - a) * (2.0 - a) / 6.0;
  return 0.0;
}

FFDTransform random_ffd(const GridGeometry& lattice, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  FFDTransform t(lattice);
  for (auto& c : t.coefficients()) c = Vec3(u(rng), u(rng), u(rng));
  return t;
}

// Sample grid strictly inside the lattice support, `inset` mm from its faces.
GridGeometry inner_samples(const GridGeometry& lattice, int n, double inset) {
  GridGeometry g;
  g.dims = {n, n, n};
  for (int a = 0; a < 3; ++a) {
    const double lo = lattice.origin[a] + lattice.spacing[a] + inset;
    const double hi = lattice.origin[a] + (lattice.dims[a] - 2) * lattice.spacing[a] - inset;
    g.origin[a] = lo;
    g.spacing[a] = (hi - lo) / (n - 1);
  }
  return g;
}

// Bending energy by central finite differences of the displacement field,
// differenced in mm and rescaled to lattice index units.
double bending_fd(const FFDTransform& t, const GridGeometry& samples, double h) {
  const Vec3 s = t.lattice().spacing;
  double total = 0.0;
  for (int k = 0; k < samples.dims[2]; ++k)
    for (int j = 0; j < samples.dims[1]; ++j)
      for (int i = 0; i < samples.dims[0]; ++i) {
        const Vec3 x = samples.to_world(i, j, k);
        const Vec3 u0 = t.displacement(x);
        for (int a = 0; a < 3; ++a)
          for (int b = a; b < 3; ++b) {
            Vec3 d2;
            if (a == b) {
              Vec3 e = Vec3::Zero();
              e[a] = h;
              d2 = (t.displacement(x + e) - 2.0 * u0 + t.displacement(x - e)) / (h * h);
            } else {
              Vec3 ea = Vec3::Zero(), eb = Vec3::Zero();
              ea[a] = h;
              eb[b] = h;
              d2 = (t.displacement(x + ea + eb) - t.displacement(x + ea - eb) - t.displacement(x - ea + eb) +
                    t.displacement(x - ea - eb)) /
                   (4.0 * h * h);
            }
            total += (a == b ? 1.0 : 2.0) * s[a] * s[a] * s[b] * s[b] * d2.squaredNorm();
          }
      }
  return total / static_cast<double>(samples.voxel_count());
}

const GridGeometry kLattice{{6, 6, 6}, {2.0, 3.0, 2.5}, {-1.0, 0.5, 2.0}};

}  // namespace

TEST_CASE("affine_apply") {
  AffineTransform a;
  CHECK(a.apply(Vec3(1, 2, 3)) == Vec3(1, 2, 3));
  a.translation = Vec3(1, 2, 3);
  CHECK(a.apply(Vec3::Zero()) == Vec3(1, 2, 3));
  AffineTransform s;
  s.matrix = 2.0 * Mat3::Identity();
  CHECK(s.apply(Vec3(1, 1, 1)) == Vec3(2, 2, 2));
}

TEST_CASE("ffd displacement: zero, constant, single coefficient against scalar B-spline") {
  FFDTransform zero(kLattice);
  const Vec3 x(4.0, 7.0, 6.0);
  CHECK(zero.displacement(x) == Vec3::Zero());

  FFDTransform c(kLattice);
  for (auto& v : c.coefficients()) v = Vec3(0.5, -1.5, 2.0);
  CHECK((c.displacement(x) - Vec3(0.5, -1.5, 2.0)).norm() <= 1e-14);

  FFDTransform one(kLattice);
  one.coefficient(2, 3, 2) = Vec3(1.0, 0.0, 0.0);
  const Vec3 at = kLattice.to_world(2, 3, 2);
  CHECK(one.displacement(at).x() == doctest::Approx(std::pow(2.0 / 3.0, 3)).epsilon(1e-14));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  for (int n = 0; n < 100; ++n) {
    const Vec3 t(u(rng), u(rng), u(rng));
    const Vec3 p = kLattice.to_world(t);
    const double expect = beta3(t.x() - 2) * beta3(t.y() - 3) * beta3(t.z() - 2);
    CHECK(one.displacement(p).x() == doctest::Approx(expect).epsilon(1e-13));
  }
  CHECK_THROWS_AS((void)one.displacement(kLattice.to_world(Vec3(0.5, 2, 2))), Error);
}

TEST_CASE("support weights form a partition of unity") {
  FFDTransform t(kLattice);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  for (int n = 0; n < 200; ++n) {
    SupportWeights sw;
    REQUIRE(t.support_weights(kLattice.to_world(Vec3(u(rng), u(rng), u(rng))), sw));
    double sum = 0.0;
    for (int c = 0; c < 4; ++c)
      for (int b = 0; b < 4; ++b)
        for (int a = 0; a < 4; ++a) sum += sw.w[0][a] * sw.w[1][b] * sw.w[2][c];
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("ffd field is C2: second differences of first differences stay O(h^2)") {
  const FFDTransform t = random_ffd(kLattice, 3, 1.0);
  const double h = 1e-3;
  const Vec3 p0 = kLattice.to_world(Vec3(1.2, 2.5, 2.5));
  // Walk across the knot at lattice index 2 along x; the first difference must not jump.
  double worst = 0.0;
  for (int s = -20; s < 20; ++s) {
    const Vec3 a = p0 + Vec3((0.8 + s * h) * kLattice.spacing.x(), 0, 0);
    const Vec3 e(h, 0, 0);
    const Vec3 d1 = t.displacement(a + e) - t.displacement(a);
    const Vec3 d0 = t.displacement(a) - t.displacement(a - e);
    worst = std::max(worst, (d1 - d0).norm());
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("dyadic refinement reproduces the field") {
  const FFDTransform t = random_ffd(kLattice, 9, 2.0);
  const FFDTransform r = t.refined();
  CHECK(r.lattice().dims == Index3{9, 9, 9});
  CHECK(r.lattice().spacing.isApprox(kLattice.spacing / 2.0));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  for (int n = 0; n < 200; ++n) {
    const Vec3 p = kLattice.to_world(Vec3(u(rng), u(rng), u(rng)));
    CHECK((t.displacement(p) - r.displacement(p)).norm() <= 1e-12);
  }
}

TEST_CASE("covering lattice supports its box") {
  const Vec3 lo(-3, 0, 10), hi(17.2, 9.9, 33.3);
  const FFDTransform t = FFDTransform::covering(lo, hi, Vec3(5, 5, 5));
  CHECK(t.in_support(lo));
  CHECK(t.in_support(hi));
  CHECK(t.in_support(0.5 * (lo + hi)));
}

TEST_CASE("bending energy: zero field, affine nullspace, quadratic and finite-difference oracles") {
  const GridGeometry samples = inner_samples(kLattice, 21, 0.01);
  FFDTransform zero(kLattice);
  const BendingEnergy z = bending_energy(zero, samples);
  CHECK(z.value == 0.0);
  for (const auto& g : z.gradient) CHECK(g == Vec3::Zero());

  Mat3 b;
  b << 0.1, 0.02, -0.03, 0.05, -0.2, 0.01, 0.0, 0.07, 0.15;
  FFDTransform aff(kLattice);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 6; ++i) aff.coefficient(i, j, k) = b * kLattice.to_world(i, j, k) + Vec3(1, 2, 3);
  CHECK(bending_energy(aff, samples).value <= 1e-9);

  // Control points sampling u_x = x^2 give an exactly quadratic field: d2u_x/dt2 = 2 s_x^2, so P = 4 s_x^4 = 64.
  FFDTransform quad(kLattice);
  for (int k = 0; k < 6; ++k)
    for (int j = 0; j < 6; ++j)
      for (int i = 0; i < 6; ++i) {
        const double x = kLattice.to_world(i, j, k).x();
        quad.coefficient(i, j, k) = Vec3(x * x, 0, 0);
      }
  const double pq = bending_energy(quad, samples).value;
  CHECK(pq == doctest::Approx(64.0).epsilon(1e-10));
  CHECK(bending_fd(quad, samples, 1e-3) == doctest::Approx(pq).epsilon(1e-4));

  const FFDTransform r = random_ffd(kLattice, 21, 1.0);
  const GridGeometry off = inner_samples(kLattice, 21, 0.0137);
  const double pr = bending_energy(r, off).value;
  CHECK(pr > 0.0);
  CHECK(bending_fd(r, off, 1e-4) == doctest::Approx(pr).epsilon(1e-4));

  FFDTransform shifted = r;
  for (auto& c : shifted.coefficients()) c += Vec3(3, -2, 7);
  CHECK(bending_energy(shifted, off).value == doctest::Approx(pr).epsilon(1e-12));
  CHECK_THROWS_AS(bending_energy(r, GridGeometry{{3, 3, 3}, {1, 1, 1}, {-50, -50, -50}}), Error);
}

TEST_CASE("bending energy gradient matches central differences") {
  const GridGeometry lattice{{6, 6, 6}, {4.0, 4.0, 5.0}, {0, 0, 0}};
  const GridGeometry samples = inner_samples(lattice, 9, 0.0);
  FFDTransform t = random_ffd(lattice, 4, 1.0);
  const BendingEnergy be = bending_energy(t, samples);
  const double h = 1e-3;
  double worst = 0.0;
  for (std::size_t c = 0; c < t.control_count(); c += 7)
    for (int a = 0; a < 3; ++a) {
      FFDTransform p = t, m = t;
      p.coefficients()[c][a] += h;
      m.coefficients()[c][a] -= h;
      const double fd = (bending_energy(p, samples, false).value - bending_energy(m, samples, false).value) / (2 * h);
      const double an = be.gradient[c][a];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-12, std::abs(an)));
    }
  CHECK(worst <= 1e-6);
}

TEST_CASE("composed transform") {
  const Vec3 x(4, 7, 6);
  ComposedTransform c{AffineTransform{}, FFDTransform(kLattice)};
  CHECK(c.apply(x) == x);
  c.affine.translation = Vec3(0.5, 0.25, -1);
  CHECK(c.apply(x) == c.affine.apply(x));
  ComposedTransform k{AffineTransform{}, FFDTransform(kLattice)};
  for (auto& v : k.ffd.coefficients()) v = Vec3(1, -2, 0.5);
  CHECK((k.apply(x) - (x + Vec3(1, -2, 0.5))).norm() <= 1e-14);
  ComposedTransform empty;
  CHECK(empty.apply(x) == x);
}

TEST_CASE("transform text round trip is exact") {
  ComposedTransform t{AffineTransform{}, random_ffd(kLattice, 77, 3.0)};
  t.affine.matrix << 1.01, 0.002, -1e-5, 0.3, 0.97, 1.0 / 3.0, 0, 0, 1.1;
  t.affine.translation = Vec3(M_PI, -std::exp(1.0), 1e-300);
  std::stringstream ss;
  write_transform(ss, t);
  const ComposedTransform back = read_transform(ss);
  CHECK(back.affine.matrix == t.affine.matrix);
  CHECK(back.affine.translation == t.affine.translation);
  CHECK(back.ffd.lattice() == t.ffd.lattice());
  for (std::size_t i = 0; i < t.ffd.control_count(); ++i) CHECK(back.ffd.coefficients()[i] == t.ffd.coefficients()[i]);

  std::stringstream se;
  write_transform(se, ComposedTransform{});
  CHECK(read_transform(se).ffd.empty());
  std::stringstream bad("not a transform");
  CHECK_THROWS_AS(read_transform(bad), Error);
}
