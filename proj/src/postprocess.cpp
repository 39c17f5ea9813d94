#include "vmaseg/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vmaseg/distance.hpp"
#include "vmaseg/parallel.hpp"

namespace vmaseg {

namespace {

// Flood fill from `seed` over voxels accepted by `in`, marking them with `id`.
template <typename Pred>
std::size_t flood(const GridGeometry& g, std::size_t seed, int connectivity, std::vector<int>& comp,
                  int id, Pred&& in, std::vector<std::size_t>& stack,
                  std::vector<std::size_t>* members = nullptr) {
  std::size_t count = 0;
  stack.clear();
  stack.push_back(seed);
  comp[seed] = id;
  while (!stack.empty()) {
    const std::size_t cur = stack.back();
    stack.pop_back();
    ++count;
    if (members) members->push_back(cur);
    const Index3 p = g.unravel(cur);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
          if (manhattan == 0) continue;
          if (connectivity == 6 && manhattan != 1) continue;
          const int i = p[0] + dx, j = p[1] + dy, k = p[2] + dz;
          if (!g.contains(i, j, k)) continue;
          const std::size_t n = g.linear(i, j, k);
          if (comp[n] != 0 || !in(n)) continue;
          comp[n] = id;
          stack.push_back(n);
        }
  }
  return count;
}

}  // namespace

LabelVolume morph_cleanup(const LabelVolume& labels, int min_island_voxels) {
  if (min_island_voxels < 0) throw Error("morph_cleanup: min_island_voxels must be >= 0");
  const GridGeometry& g = labels.geometry();
  LabelVolume out = labels;
  std::vector<std::size_t> stack;

  for (Label l : label_set(labels)) {
    if (l == 0) continue;
    std::vector<int> comp(out.size(), 0);
    int id = 0, best_id = 0;
    std::size_t best = 0;
    for (std::size_t v = 0; v < out.size(); ++v) {
      if (out[v] != l || comp[v] != 0) continue;
      const std::size_t n = flood(g, v, 26, comp, ++id, [&](std::size_t x) { return out[x] == l; }, stack);
      if (n > best) {
        best = n;
        best_id = id;
      }
    }
    const bool keep = best >= static_cast<std::size_t>(min_island_voxels);
    for (std::size_t v = 0; v < out.size(); ++v) {
      if (out[v] == l && (!keep || comp[v] != best_id)) out[v] = 0;
    }
  }

  // Enclosed background cavities.
  std::vector<int> comp(out.size(), 0);
  std::vector<std::size_t> members;
  int id = 0;
  for (std::size_t v = 0; v < out.size(); ++v) {
    if (out[v] != 0 || comp[v] != 0) continue;
    members.clear();
    flood(g, v, 6, comp, ++id, [&](std::size_t x) { return out[x] == 0; }, stack, &members);
    bool border = false;
    int bounding = -1;  // -1 none yet, -2 several labels
    for (std::size_t m : members) {
      const Index3 p = g.unravel(m);
      for (int a = 0; a < 3; ++a)
        if (p[a] == 0 || p[a] == g.dims[a] - 1) border = true;
      if (border) break;
      static constexpr int kSix[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
      for (const auto& o : kSix) {
        const Label n = out(p[0] + o[0], p[1] + o[1], p[2] + o[2]);
        if (n == 0) continue;
        if (bounding == -1) bounding = n;
        else if (bounding != n) bounding = -2;
      }
    }
    if (border || bounding < 0) continue;
    for (std::size_t m : members) out[m] = static_cast<Label>(bounding);
  }
  return out;
}

int island_voxels(double min_island_mm3, const GridGeometry& g) {
  if (min_island_mm3 < 0) throw Error("min_island_mm3 must be >= 0");
  return static_cast<int>(std::ceil(min_island_mm3 / g.voxel_volume() - 1e-9));
}

VertebraInstance describe_instance(Label label, const LabelVolume& mask, const ScalarVolume& intensity) {
  if (!(mask.geometry() == intensity.geometry())) throw Error("instance mask and intensity differ in geometry");
  const GridGeometry& g = mask.geometry();
  VertebraInstance inst;
  inst.label = label;
  Vec3 sum = Vec3::Zero();
  double isum = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (mask[v] == 0) continue;
    const Index3 p = g.unravel(v);
    sum += g.to_world(p[0], p[1], p[2]);
    isum += intensity[v];
    ++n;
  }
  if (n == 0) throw Error("vertebra " + std::to_string(label) + " has an empty mask");
  inst.center = sum / static_cast<double>(n);
  inst.mean_intensity = isum / static_cast<double>(n);
  return inst;
}

void CollisionPolicy::validate() const {
  if (w_intensity == 0.0 && w_distance == 0.0) throw Error("collision policy needs a nonzero weight");
  if (!std::isfinite(w_intensity) || !std::isfinite(w_distance)) throw Error("collision weights must be finite");
}

CollisionResult resolve_collisions(const std::vector<LabelVolume>& masks, const ScalarVolume& intensity,
                                   const std::vector<VertebraInstance>& instances,
                                   const CollisionPolicy& policy) {
  policy.validate();
  if (instances.empty()) throw Error("resolve_collisions: no vertebra instances");
  if (masks.size() != instances.size()) throw Error("resolve_collisions: one mask per instance required");
  const GridGeometry& g = intensity.geometry();
  for (const auto& m : masks)
    if (!(m.geometry() == g)) throw Error("resolve_collisions: masks do not share the intensity geometry");

  CollisionResult res{LabelVolume(g, 0), 0};
  struct Pair {
    std::size_t voxel;
    std::size_t inst;
    double fi, fd;
  };
  std::vector<Pair> pairs;
  std::vector<std::size_t> contested;
  for (std::size_t v = 0; v < g.voxel_count(); ++v) {
    std::size_t claims = 0, owner = 0;
    for (std::size_t m = 0; m < masks.size(); ++m)
      if (masks[m][v] != 0) {
        ++claims;
        owner = m;
      }
    if (claims == 1) res.labels[v] = instances[owner].label;
    if (claims < 2) continue;
    contested.push_back(v);
    const Index3 p = g.unravel(v);
    const Vec3 x = g.to_world(p[0], p[1], p[2]);
    for (std::size_t m = 0; m < masks.size(); ++m)
      if (masks[m][v] != 0)
        pairs.push_back({v, m, std::abs(intensity[v] - instances[m].mean_intensity),
                         (x - instances[m].center).norm()});
  }
  res.contested = contested.size();
  if (pairs.empty()) return res;

  const auto standardize = [&](auto field) {
    double mean = 0.0;
    for (const auto& p : pairs) mean += p.*field;
    mean /= static_cast<double>(pairs.size());
    double var = 0.0;
    for (const auto& p : pairs) var += (p.*field - mean) * (p.*field - mean);
    const double sd = std::sqrt(var / static_cast<double>(pairs.size()));
    for (auto& p : pairs) p.*field = sd > 0.0 ? (p.*field - mean) / sd : 0.0;
  };
  standardize(&Pair::fi);
  standardize(&Pair::fd);

  std::size_t at = 0;
  for (std::size_t v : contested) {
    double best = -std::numeric_limits<double>::infinity();
    Label winner = 0;
    for (; at < pairs.size() && pairs[at].voxel == v; ++at) {
      const Pair& p = pairs[at];
      const double score = -policy.w_intensity * p.fi - policy.w_distance * p.fd;
      const Label l = instances[p.inst].label;
      if (score > best || (score == best && l < winner)) {
        best = score;
        winner = l;
      }
    }
    res.labels[v] = winner;
  }
  return res;
}

namespace {

// Central differences with clamped borders, index units.
struct Stencil {
  const std::vector<double>& f;
  const GridGeometry& g;
  double at(int i, int j, int k) const {
    i = std::clamp(i, 0, g.dims[0] - 1);
    j = std::clamp(j, 0, g.dims[1] - 1);
    k = std::clamp(k, 0, g.dims[2] - 1);
    return f[g.linear(i, j, k)];
  }
};

double laplacian(const Stencil& s, int i, int j, int k) {
  const double c = s.at(i, j, k);
  return s.at(i + 1, j, k) + s.at(i - 1, j, k) + s.at(i, j + 1, k) + s.at(i, j - 1, k) + s.at(i, j, k + 1) +
         s.at(i, j, k - 1) - 6.0 * c;
}

double mean_curvature(const Stencil& s, int i, int j, int k) {
  const double c = s.at(i, j, k);
  const double fx = 0.5 * (s.at(i + 1, j, k) - s.at(i - 1, j, k));
  const double fy = 0.5 * (s.at(i, j + 1, k) - s.at(i, j - 1, k));
  const double fz = 0.5 * (s.at(i, j, k + 1) - s.at(i, j, k - 1));
  const double fxx = s.at(i + 1, j, k) - 2 * c + s.at(i - 1, j, k);
  const double fyy = s.at(i, j + 1, k) - 2 * c + s.at(i, j - 1, k);
  const double fzz = s.at(i, j, k + 1) - 2 * c + s.at(i, j, k - 1);
  const double fxy = 0.25 * (s.at(i + 1, j + 1, k) - s.at(i + 1, j - 1, k) - s.at(i - 1, j + 1, k) +
                             s.at(i - 1, j - 1, k));
  const double fxz = 0.25 * (s.at(i + 1, j, k + 1) - s.at(i + 1, j, k - 1) - s.at(i - 1, j, k + 1) +
                             s.at(i - 1, j, k - 1));
  const double fyz = 0.25 * (s.at(i, j + 1, k + 1) - s.at(i, j + 1, k - 1) - s.at(i, j - 1, k + 1) +
                             s.at(i, j - 1, k - 1));
  const double g2 = fx * fx + fy * fy + fz * fz;
  if (g2 < 1e-12) return 0.0;
  const double num = fxx * (fy * fy + fz * fz) + fyy * (fx * fx + fz * fz) + fzz * (fx * fx + fy * fy) -
                     2.0 * (fx * fy * fxy + fx * fz * fxz + fy * fz * fyz);
  return std::clamp(num / (g2 * std::sqrt(g2)), -1.0, 1.0);
}

}  // namespace

LabelVolume levelset_refine(const LabelVolume& mask, const ScalarVolume& intensity, int iters, double step,
                            const LevelSetConfig& cfg) {
  if (iters < 0) throw Error("levelset_refine: iters must be >= 0");
  if (!(step > 0.0) || step > 0.5) throw Error("levelset_refine: step must lie in (0, 0.5]");
  if (!(mask.geometry() == intensity.geometry())) throw Error("levelset_refine: mask and intensity differ in geometry");
  if (iters == 0) return mask;
  const GridGeometry& g = mask.geometry();
  std::vector<char> in(mask.size()), out(mask.size());
  std::size_t inside = 0;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    in[v] = mask[v] != 0;
    out[v] = !in[v];
    inside += in[v];
  }
  if (inside == 0 || inside == mask.size()) return mask;

  const std::vector<double> d_in = squared_distance_transform(in, g, false);
  const std::vector<double> d_out = squared_distance_transform(out, g, false);
  std::vector<double> phi(mask.size());
  for (std::size_t v = 0; v < phi.size(); ++v)
    phi[v] = in[v] ? -(std::sqrt(d_out[v]) - 0.5) : std::sqrt(d_in[v]) - 0.5;

  const double band = iters * step + 2.0;
  std::vector<std::size_t> active;
  for (std::size_t v = 0; v < phi.size(); ++v)
    if (std::abs(phi[v]) <= band) active.push_back(v);

  const ScalarVolume smooth =
      cfg.smoothing_voxels > 0.0
          ? gaussian_smooth(intensity, Vec3::Constant(cfg.smoothing_voxels))
          : intensity;
  const Stencil is{smooth.values(), g};
  std::vector<double> lap(active.size());
  double lap_max = 0.0, sum_in = 0.0, sum_out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t a = 0; a < active.size(); ++a) {
    const Index3 p = g.unravel(active[a]);
    lap[a] = laplacian(is, p[0], p[1], p[2]);
    lap_max = std::max(lap_max, std::abs(lap[a]));
    if (std::abs(phi[active[a]]) <= 3.0) {
      if (phi[active[a]] < 0) {
        sum_in += intensity[active[a]];
        ++n_in;
      } else {
        sum_out += intensity[active[a]];
        ++n_out;
      }
    }
  }
  const double contrast =
      (n_in && n_out && sum_in / static_cast<double>(n_in) < sum_out / static_cast<double>(n_out)) ? -1.0 : 1.0;
  if (lap_max > 0.0)
    for (double& l : lap) l *= contrast / lap_max;

  std::vector<double> next = phi;
  for (int it = 0; it < iters; ++it) {
    const Stencil ps{phi, g};
    parallel_for(static_cast<std::int64_t>(active.size()), [&](std::int64_t a) {
      const std::size_t v = active[a];
      const Index3 p = g.unravel(v);
      const double speed = lap[a] + cfg.curvature_weight * mean_curvature(ps, p[0], p[1], p[2]);
      next[v] = phi[v] + step * std::clamp(speed, -1.0, 1.0);
    });
    phi.swap(next);
    for (std::size_t v : active) next[v] = phi[v];
  }

  LabelVolume res(g, 0);
  for (std::size_t v = 0; v < phi.size(); ++v) res[v] = phi[v] < 0.0 ? 1 : 0;
  return res;
}

}  // namespace vmaseg
