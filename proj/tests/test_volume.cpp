#include "doctest.h"

#include <cmath>
#include <set>

#include "support.hpp"
#include "vmaseg/nifti.hpp"

using namespace vmaseg;
using testing::cube_grid;

TEST_CASE("trilinear sampling at centers, midpoints and on constants") {
  ScalarVolume v = testing::random_volume(cube_grid(5, 0.5), 3, -100, 100);
  CHECK(trilinear_sample(v, v.geometry().to_world(2, 3, 1)) == v(2, 3, 1));

  ScalarVolume pair({{2, 1, 1}, {1, 1, 1}, {0, 0, 0}});
  pair(0, 0, 0) = 0.0;
  pair(1, 0, 0) = 10.0;
  CHECK(trilinear_sample(pair, Vec3(0.5, 0, 0)) == doctest::Approx(5.0).epsilon(1e-15));

  ScalarVolume c(cube_grid(4), 7.25);
  CHECK(trilinear_sample(c, Vec3(1.3, 2.7, 0.4)) == doctest::Approx(7.25).epsilon(1e-15));
  CHECK(trilinear_sample(c, Vec3(-0.5, 1, 1)) == 0.0);
  CHECK_THROWS_AS((void)trilinear_sample(c, Vec3(NAN, 0, 0)), Error);
}

TEST_CASE("trilinear sampling is exact on affine fields") {
  const GridGeometry g{{6, 5, 4}, {0.4, 0.7, 1.5}, {-3, 2, 10}};
  ScalarVolume v(g);
  const auto f = [](const Vec3& p) { return 2.5 * p.x() - 1.25 * p.y() + 0.5 * p.z() + 3.0; };
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 5; ++j)
      for (int i = 0; i < 6; ++i) v(i, j, k) = f(g.to_world(i, j, k));
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n = 0; n < 200; ++n) {
    const Vec3 idx(u(rng) * 5, u(rng) * 4, u(rng) * 3);
    const Vec3 p = g.to_world(idx);
    CHECK(trilinear_sample(v, p) == doctest::Approx(f(p)).epsilon(1e-9));
  }
}

TEST_CASE("nearest sampling: nearest center, lower index on ties, zero outside") {
  LabelVolume v(cube_grid(3));
  v(0, 0, 0) = 4;
  v(1, 0, 0) = 9;
  CHECK(nearest_sample(v, Vec3(0.4, 0, 0)) == 4);
  CHECK(nearest_sample(v, Vec3(0.6, 0, 0)) == 9);
  CHECK(nearest_sample(v, Vec3(0.5, 0, 0)) == 4);
  CHECK(nearest_sample(v, Vec3(-0.6, 0, 0)) == 0);
  CHECK(nearest_sample(v, Vec3(2.6, 0, 0)) == 0);

  const LabelVolume r = testing::random_labels(cube_grid(6), 5, 4);
  const auto present = label_set(r);
  const std::set<Label> allowed(present.begin(), present.end());
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2.0, 8.0);
  for (int n = 0; n < 500; ++n) {
    const Label l = nearest_sample(r, Vec3(u(rng), u(rng), u(rng)));
    CHECK((l == 0 || allowed.count(l) == 1));
  }
}

TEST_CASE("crop keeps world coordinates and clamps at faces") {
  const GridGeometry g{{5, 5, 5}, {0.4, 0.4, 1.0}, {1, 2, 3}};
  const ScalarVolume v = testing::random_volume(g, 8, 0, 1);
  CHECK(crop(v, BoundingBox::full(g), {0, 0, 0}) == v);

  const ScalarVolume unit = crop(v, {{2, 2, 2}, {2, 2, 2}}, {0, 0, 0});
  CHECK(unit.dims() == Index3{1, 1, 1});
  CHECK(unit(0, 0, 0) == v(2, 2, 2));

  const ScalarVolume c = crop(v, {{0, 1, 3}, {1, 2, 4}}, {3, 3, 3});
  CHECK(c.dims() == Index3{5, 5, 5});
  const BoundingBox b{{0, 1, 3}, {1, 2, 4}};
  const ScalarVolume c2 = crop(v, b, {1, 1, 1});
  const Index3 lo{0, 0, 2};
  for (int k = 0; k < c2.dims()[2]; ++k)
    for (int j = 0; j < c2.dims()[1]; ++j)
      for (int i = 0; i < c2.dims()[0]; ++i) {
        const Vec3 before = g.to_world(i + lo[0], j + lo[1], k + lo[2]);
        CHECK((c2.geometry().to_world(i, j, k) - before).norm() <= 1e-12);
        CHECK(c2(i, j, k) == v(i + lo[0], j + lo[1], k + lo[2]));
      }
  CHECK_THROWS_AS(crop(v, {{7, 7, 7}, {8, 8, 8}}, {0, 0, 0}), Error);
}

TEST_CASE("resample: identity, whole-voxel shift, half-voxel ramp") {
  const GridGeometry g{{6, 4, 3}, {2.0, 1.0, 1.0}, {0, 0, 0}};
  const ScalarVolume v = testing::random_volume(g, 1, -5, 5);
  const PointMap id = [](const Vec3& x) { return x; };
  CHECK(resample(v, g, id) == v);
  const LabelVolume l = testing::random_labels(g, 1, 3);
  CHECK(resample(l, g, id) == l);

  // out(x) = v(x + 1 voxel) in x: a copy shifted toward lower i, zero at the vacated face.
  const ScalarVolume s = resample(v, g, [](const Vec3& x) { return Vec3(x.x() + 2.0, x.y(), x.z()); });
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j) {
      for (int i = 0; i < 5; ++i) CHECK(s(i, j, k) == doctest::Approx(v(i + 1, j, k)).epsilon(1e-14));
      CHECK(s(5, j, k) == 0.0);
    }

  ScalarVolume ramp(g);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 6; ++i) ramp(i, j, k) = 10.0 * i;
  const ScalarVolume h = resample(ramp, g, [](const Vec3& x) { return Vec3(x.x() + 1.0, x.y(), x.z()); });
  for (int i = 0; i < 5; ++i) CHECK(h(i, 1, 1) == doctest::Approx(10.0 * i + 5.0).epsilon(1e-14));
}

TEST_CASE("downsample: identity factor, constants, checkerboard against direct convolution") {
  const ScalarVolume v = testing::random_volume(cube_grid(6), 4, 0, 1);
  CHECK(downsample(v, {1, 1, 1}) == v);
  const ScalarVolume c = downsample(ScalarVolume(cube_grid(9), 3.5), {2, 3, 1});
  CHECK(c.dims() == Index3{4, 3, 9});
  CHECK(c.geometry().spacing == Vec3(2, 3, 1));
  for (double x : c.data()) CHECK(x == doctest::Approx(3.5).epsilon(1e-12));
  CHECK_THROWS_AS(downsample(v, {7, 1, 1}), Error);

  // Independent oracle: full 3-D sum of the separable Gaussian (sigma 1) with
  // reflected indices, then decimation.
  const int n = 8;
  ScalarVolume board(cube_grid(n));
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) board(i, j, k) = (i + j + k) % 2 ? 1.0 : 0.0;
  std::vector<double> kern(7);
  double ks = 0.0;
  for (int d = -3; d <= 3; ++d) ks += kern[d + 3] = std::exp(-0.5 * d * d);
  for (auto& x : kern) x /= ks;
  const auto reflect = [n](int i) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  const ScalarVolume d = downsample(board, {2, 2, 2});
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 4; ++i) {
        double acc = 0.0;
        for (int c2 = -3; c2 <= 3; ++c2)
          for (int b = -3; b <= 3; ++b)
            for (int a = -3; a <= 3; ++a)
              acc += kern[a + 3] * kern[b + 3] * kern[c2 + 3] *
                     board(reflect(2 * i + a), reflect(2 * j + b), reflect(2 * k + c2));
        CHECK(d(i, j, k) == doctest::Approx(acc).epsilon(1e-12));
        CHECK(std::abs(d(i, j, k) - 0.5) < 0.01);
      }
}

TEST_CASE("label helpers") {
  LabelVolume v(cube_grid(6));
  testing::fill_block(v, {1, 2, 3}, {2, 4, 3}, 5);
  const BoundingBox b = label_bounds(v, 5);
  CHECK(b == BoundingBox{{1, 2, 3}, {2, 4, 3}});
  CHECK_FALSE(label_bounds(v, 7).valid());
  CHECK(label_set(v) == std::vector<Label>{0, 5});
}

TEST_CASE("nifti round trip") {
  const auto dir = testing::scratch_dir("nifti");
  const GridGeometry g{{7, 5, 3}, {0.4, 0.4, 1.0}, {-12.5, 3.25, 100.0}};
  ScalarVolume img = testing::random_volume(g, 9, -1000, 1500);
  for (auto& x : img.data()) x = std::round(x);
  nifti::write_image(dir / "img.nii.gz", img);
  const ScalarVolume back = nifti::read_scalar(dir / "img.nii.gz");
  CHECK(back.geometry() == nifti::storable(g));
  CHECK(back.values() == img.values());

  const ScalarVolume frac = testing::random_volume(g, 10, 0, 1);
  nifti::write_float(dir / "p.nii", frac);
  const ScalarVolume fb = nifti::read_scalar(dir / "p.nii");
  for (std::size_t i = 0; i < frac.size(); ++i) CHECK(fb[i] == static_cast<double>(static_cast<float>(frac[i])));

  const LabelVolume lab = testing::random_labels(g, 2, 200);
  nifti::write_labels(dir / "l.nii.gz", lab);
  CHECK(nifti::read_labels(dir / "l.nii.gz").values() == lab.values());

  CHECK_THROWS_AS(nifti::read_scalar(dir / "missing.nii.gz"), Error);
  std::ofstream(dir / "junk.nii") << "not a nifti file";
  CHECK_THROWS_AS(nifti::read_scalar(dir / "junk.nii"), Error);
}
