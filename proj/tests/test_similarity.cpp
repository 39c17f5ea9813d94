#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"
#include "vmaseg/similarity.hpp"

using namespace vmaseg;
using testing::cube_grid;

namespace {

const IntensityWindow kWindow{0.0, 63.0, 64};  // one intensity unit per bin

double entropy_of(const std::vector<double>& p) {
  double total = 0.0, h = 0.0;
  for (double x : p) total += x;
  for (double x : p)
    if (x > 0) h -= x / total * std::log(x / total);
  return h;
}

}  // namespace

TEST_CASE("joint histogram of constant and two-valued images") {
  const GridGeometry g = cube_grid(4);
  const BoundingBox all = BoundingBox::full(g);
  const JointHistogram same = joint_histogram(ScalarVolume(g, 10), ScalarVolume(g, 10), kWindow, all);
  CHECK(same.at(10, 10) == doctest::Approx(64.0));
  CHECK(same.total() == doctest::Approx(64.0));

  const JointHistogram off = joint_histogram(ScalarVolume(g, 3), ScalarVolume(g, 40), kWindow, all);
  CHECK(off.at(3, 40) == doctest::Approx(64.0));

  // Direct count oracle: values on bin centers, perfectly correlated halves.
  ScalarVolume a(g), b(g);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = i % 2 ? 20.0 : 5.0;
    b[i] = i % 2 ? 50.0 : 12.0;
  }
  const JointHistogram h = joint_histogram(a, b, kWindow, all);
  CHECK(std::abs(h.at(5, 12) - 32.0) <= 1e-6);
  CHECK(std::abs(h.at(20, 50) - 32.0) <= 1e-6);
  CHECK(std::abs(h.total() - 64.0) <= 1e-6);
  CHECK_THROWS_AS(joint_histogram(a, b, kWindow, BoundingBox{{2, 2, 2}, {1, 1, 1}}), Error);
}

TEST_CASE("entropies: single cell, uniform 2x2, independence") {
  JointHistogram one(4);
  one.at(1, 2) = 7;
  const Entropies e1 = entropies(one);
  CHECK(e1.target == 0.0);
  CHECK(e1.floating == 0.0);
  CHECK(e1.joint == 0.0);

  JointHistogram u(2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) u.at(i, j) = 1;
  const Entropies e2 = entropies(u);
  CHECK(e2.joint == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(e2.target == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(e2.floating == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  const std::vector<double> p{0.1, 0.2, 0.3, 0.4}, q{0.5, 0.25, 0.25};
  JointHistogram ind(4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) ind.at(i, j) = p[i] * q[j];
  const Entropies e3 = entropies(ind);
  CHECK(e3.joint == doctest::Approx(e3.target + e3.floating).epsilon(1e-13));
  CHECK(e3.target == doctest::Approx(entropy_of(p)).epsilon(1e-13));
  CHECK(nmi(ind) == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("nmi: identical, bijective remap, independent") {
  const GridGeometry g = cube_grid(8);
  ScalarVolume a(g);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> bin(0, 63);
  for (auto& x : a.data()) x = bin(rng);
  const BoundingBox all = BoundingBox::full(g);
  CHECK(nmi(a, a, kWindow, all) == doctest::Approx(2.0).epsilon(1e-12));

  ScalarVolume remap = a;
  for (auto& x : remap.data()) x = 63.0 - x;
  CHECK(nmi(a, remap, kWindow, all) == doctest::Approx(2.0).epsilon(1e-12));

  // Two images whose joint histogram factorizes: a varies along x only, b along y only.
  ScalarVolume x(g), y(g);
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 8; ++i) {
        x(i, j, k) = 3.0 * i;
        y(i, j, k) = 5.0 * j;
      }
  CHECK(nmi(x, y, kWindow, all) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("nmi gradient: stationary at alignment, zero on constants, finite differences") {
  const GridGeometry g{{12, 12, 12}, {1.0, 1.0, 1.0}, {0, 0, 0}};
  const BoundingBox all = BoundingBox::full(g);
  const IntensityWindow w{-1.0, 1.0, 16};

  // Blob symmetric about the grid center: at identity the net translational force cancels.
  ScalarVolume blob(g);
  const Vec3 c(5.5, 5.5, 5.5);
  for (int k = 0; k < 12; ++k)
    for (int j = 0; j < 12; ++j)
      for (int i = 0; i < 12; ++i) blob(i, j, k) = std::exp(-(Vec3(i, j, k) - c).squaredNorm() / 8.0) - 0.5;
  const ComposedTransform id = make_composed(AffineTransform{}, g, 4.0);
  Vec3 net = Vec3::Zero();
  double scale = 0.0;
  for (const auto& v : nmi_gradient(blob, blob, id, w, all)) {
    net += v;
    scale += v.norm();
  }
  CHECK(net.norm() <= 1e-10 * std::max(1.0, scale));

  for (const auto& v : nmi_gradient(blob, ScalarVolume(g, 0.25), id, w, all)) CHECK(v.norm() == 0.0);

  const ScalarVolume t = gaussian_smooth(testing::random_volume(g, 12, -1, 1), Vec3(1, 1, 1));
  const ScalarVolume f = gaussian_smooth(testing::random_volume(g, 13, -1, 1), Vec3(1, 1, 1));
  ComposedTransform ct = make_composed(AffineTransform{}, g, 4.0);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& v : ct.ffd.coefficients()) v = Vec3(u(rng), u(rng), u(rng));
  CHECK(oracle::nmi_gradient_error(t, f, ct, w, 1e-4) <= 1e-4);
}

TEST_CASE("lncc") {
  const GridGeometry g = cube_grid(7);
  const BoundingBox all = BoundingBox::full(g);
  const ScalarVolume a = testing::random_volume(g, 1, 0, 1);
  ScalarVolume b = a, n = a;
  for (auto& x : b.data()) x = 3.0 * x + 7.0;
  for (auto& x : n.data()) x = -x;
  CHECK(lncc(a, a, 1, all) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lncc(a, b, 1, all) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(lncc(a, n, 2, all) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_THROWS_AS(lncc(a, a, 0, all), Error);
}
