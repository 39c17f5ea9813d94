#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"
#include "vmaseg/distance.hpp"
#include "vmaseg/postprocess.hpp"

using namespace vmaseg;
using testing::cube_grid;
using testing::fill_block;

namespace {

// Bright cylinder along z with a sharp edge, and its exact mask.
struct Cylinder {
  ScalarVolume image;
  LabelVolume truth;
};

Cylinder cylinder(double radius, double offset_mask = 0.0, LabelVolume* offset = nullptr) {
  const GridGeometry g{{32, 32, 12}, {1, 1, 1}, {0, 0, 0}};
  Cylinder c{ScalarVolume(g, 0.0), LabelVolume(g, 0)};
  if (offset) *offset = LabelVolume(g, 0);
  for (int k = 0; k < 12; ++k)
    for (int j = 0; j < 32; ++j)
      for (int i = 0; i < 32; ++i) {
        const double r = std::hypot(i - 15.5, j - 15.5);
        if (r <= radius) {
          c.image(i, j, k) = 100.0;
          c.truth(i, j, k) = 1;
        }
        if (offset && r <= radius + offset_mask) (*offset)(i, j, k) = 1;
      }
  return c;
}

}  // namespace

TEST_CASE("morph_cleanup: solid blob, satellite, hollow shell") {
  LabelVolume blob(cube_grid(10));
  fill_block(blob, {2, 2, 2}, {6, 6, 6}, 1);
  CHECK(morph_cleanup(blob, 10) == blob);

  LabelVolume sat = blob;
  fill_block(sat, {8, 8, 8}, {8, 8, 9}, 1);
  sat(9, 8, 8) = 1;
  CHECK(morph_cleanup(sat, 10) == blob);

  LabelVolume shell(cube_grid(10));
  fill_block(shell, {2, 2, 2}, {7, 7, 7}, 3);
  fill_block(shell, {3, 3, 3}, {6, 6, 6}, 0);
  LabelVolume filled(cube_grid(10));
  fill_block(filled, {2, 2, 2}, {7, 7, 7}, 3);
  CHECK(morph_cleanup(shell, 0) == filled);

  // A component smaller than the threshold disappears even when it is the largest.
  LabelVolume tiny(cube_grid(6));
  fill_block(tiny, {1, 1, 1}, {2, 2, 1}, 2);
  CHECK(testing::count_nonzero(morph_cleanup(tiny, 5)) == 0);
  CHECK_THROWS_AS(morph_cleanup(tiny, -1), Error);
}

TEST_CASE("morph_cleanup is idempotent and keeps geometry") {
  const GridGeometry g{{12, 10, 9}, {0.4, 0.4, 1.0}, {1, 2, 3}};
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    LabelVolume v(g);
    std::uniform_int_distribution<int> pos(0, 8), lab(1, 3), size(0, 3);
    for (int b = 0; b < 8; ++b) {
      const Index3 lo{pos(rng), pos(rng), pos(rng) % 7};
      fill_block(v, lo, {std::min(11, lo[0] + size(rng)), std::min(9, lo[1] + size(rng)), std::min(8, lo[2] + size(rng))},
                 static_cast<Label>(lab(rng)));
    }
    const LabelVolume once = morph_cleanup(v, 4);
    CHECK(once.geometry() == g);
    CHECK(morph_cleanup(once, 4) == once);
  }
  CHECK(island_voxels(8.0, GridGeometry{{1, 1, 1}, {0.4, 0.4, 1.0}, {0, 0, 0}}) == 50);
  CHECK(island_voxels(8.0, cube_grid(1)) == 8);
}

TEST_CASE("resolve_collisions") {
  const GridGeometry g{{21, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  LabelVolume a(g), b(g);
  fill_block(a, {0, 0, 0}, {4, 0, 0}, 1);
  fill_block(b, {10, 0, 0}, {14, 0, 0}, 1);
  ScalarVolume img(g, 50.0);
  const VertebraInstance ia{3, Vec3(2, 0, 0), 50.0}, ib{7, Vec3(12, 0, 0), 50.0};
  const CollisionResult disjoint = resolve_collisions({a, b}, img, {ia, ib}, CollisionPolicy{});
  CHECK(disjoint.contested == 0);
  for (int i = 0; i < 21; ++i) CHECK(disjoint.labels(i, 0, 0) == (i <= 4 ? 3 : (i >= 10 && i <= 14 ? 7 : 0)));

  // Equidistant voxel; its intensity matches A's mean and is far from B's.
  LabelVolume a2(g), b2(g);
  fill_block(a2, {0, 0, 0}, {10, 0, 0}, 1);
  fill_block(b2, {10, 0, 0}, {20, 0, 0}, 1);
  img(10, 0, 0) = 100.0;
  ScalarVolume img2(g, 0.0);
  img2(10, 0, 0) = 100.0;
  const CollisionResult by_intensity =
      resolve_collisions({a2, b2}, img2, {{1, Vec3(5, 0, 0), 100.0}, {2, Vec3(15, 0, 0), 0.0}}, CollisionPolicy{});
  CHECK(by_intensity.contested == 1);
  CHECK(by_intensity.labels(10, 0, 0) == 1);

  // Equal intensity affinity; 2 mm from A's center against 10 mm from B's.
  const CollisionResult by_distance =
      resolve_collisions({a2, b2}, img2, {{1, Vec3(20, 0, 0), 100.0}, {2, Vec3(8, 0, 0), 100.0}}, CollisionPolicy{});
  CHECK(by_distance.labels(10, 0, 0) == 2);

  // Every contested voxel ends up with one of the candidate labels.
  const LabelVolume r1 = testing::random_labels(cube_grid(6), 1, 1), r2 = testing::random_labels(cube_grid(6), 2, 1);
  const ScalarVolume ri = testing::random_volume(cube_grid(6), 3, 0, 10);
  const CollisionResult rr =
      resolve_collisions({r1, r2}, ri, {{4, Vec3(1, 1, 1), 3.0}, {9, Vec3(4, 4, 4), 7.0}}, CollisionPolicy{});
  for (std::size_t i = 0; i < r1.size(); ++i) {
    if (r1[i] && r2[i]) CHECK((rr.labels[i] == 4 || rr.labels[i] == 9));
    else if (r1[i]) CHECK(rr.labels[i] == 4);
    else if (r2[i]) CHECK(rr.labels[i] == 9);
    else CHECK(rr.labels[i] == 0);
  }
  CHECK_THROWS_AS(resolve_collisions({}, ri, {}, CollisionPolicy{}), Error);
}

TEST_CASE("describe_instance") {
  LabelVolume m(GridGeometry{{4, 4, 4}, {0.5, 1, 2}, {1, 0, 0}});
  fill_block(m, {1, 1, 1}, {2, 2, 2}, 1);
  ScalarVolume img(m.geometry(), 7.0);
  const VertebraInstance d = describe_instance(5, m, img);
  CHECK(d.label == 5);
  CHECK((d.center - Vec3(1.75, 1.5, 3.0)).norm() <= 1e-12);
  CHECK(d.mean_intensity == doctest::Approx(7.0));
  CHECK_THROWS_AS(describe_instance(1, LabelVolume(m.geometry()), img), Error);
}

TEST_CASE("levelset_refine: identity at zero iterations, stationary edge, offset recovery, band bound") {
  const Cylinder c = cylinder(8.0);
  CHECK(levelset_refine(c.truth, c.image, 0) == c.truth);
  const LabelVolume still = levelset_refine(c.truth, c.image, 10);
  CHECK(still.geometry() == c.truth.geometry());
  CHECK(oracle::dice(c.truth, still) >= 99.0);

  LabelVolume off;
  const Cylinder c2 = cylinder(8.0, 1.0, &off);
  const LabelVolume refined = levelset_refine(off, c2.image, 10);
  CHECK(oracle::dice(c2.truth, refined) > oracle::dice(c2.truth, off));

  // No voxel changes farther than ceil(iters * step) + 1 voxels from the initial boundary.
  const int iters = 6;
  const double step = 0.25;
  const LabelVolume moved = levelset_refine(off, c2.image, iters, step);
  std::vector<char> boundary(off.size(), 0);
  const auto surf = oracle::surface(off);
  for (const Vec3& p : surf) {
    const Index3 idx{static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())),
                     static_cast<int>(std::lround(p.z()))};
    boundary[off.geometry().linear(idx[0], idx[1], idx[2])] = 1;
  }
  const auto d2 = squared_distance_transform(boundary, off.geometry(), false);
  const double limit = std::ceil(iters * step) + 1.0;
  for (std::size_t i = 0; i < off.size(); ++i)
    if (moved[i] != off[i]) CHECK(std::sqrt(d2[i]) <= limit);
  CHECK_THROWS_AS(levelset_refine(off, c2.image, -1), Error);
}
