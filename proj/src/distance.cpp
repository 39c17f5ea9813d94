#include "vmaseg/distance.hpp"

#include <limits>

#include "vmaseg/parallel.hpp"

namespace vmaseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line,
// sample positions scaled by `step`.
void edt_line(const double* f, double* d, int n, double step, std::vector<int>& v,
              std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = q * step;
    while (k >= 0) {
      const double xv = v[k] * step;
      const double s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((f[q] + xq * xq) - (f[v[k - 1]] + (v[k - 1] * step) * (v[k - 1] * step))) /
                                (2.0 * (xq - v[k - 1] * step));
    z[k + 1] = kInf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * step;
    while (z[j + 1] < xq) ++j;
    const double dx = xq - v[j] * step;
    d[q] = dx * dx + f[v[j]];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const std::vector<char>& seeds, const GridGeometry& g,
                                               bool world_units) {
  if (seeds.size() != g.voxel_count()) throw Error("distance transform: seed mask size mismatch");
  std::vector<double> dist(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) dist[i] = seeds[i] ? 0.0 : kInf;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = g.dims[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const double step = world_units ? g.spacing[axis] : 1.0;
    parallel_for(g.dims[a2], [&](std::int64_t outer) {
      std::vector<double> f(n), d(n);
      std::vector<int> v;
      std::vector<double> z;
      Index3 idx{};
      idx[a2] = static_cast<int>(outer);
      for (int inner = 0; inner < g.dims[a1]; ++inner) {
        idx[a1] = inner;
        for (int t = 0; t < n; ++t) {
          idx[axis] = t;
          f[t] = dist[g.linear(idx[0], idx[1], idx[2])];
        }
        edt_line(f.data(), d.data(), n, step, v, z);
        for (int t = 0; t < n; ++t) {
          idx[axis] = t;
          dist[g.linear(idx[0], idx[1], idx[2])] = d[t];
        }
      }
    });
  }
  return dist;
}

}  // namespace vmaseg
