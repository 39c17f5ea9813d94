#include "vmaseg/fusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "vmaseg/parallel.hpp"

namespace vmaseg {

void FusionConfig::validate() const {
  if (patch_radius < 0) throw Error("fusion patch_radius must be >= 0");
  if (search_radius < 0) throw Error("fusion search_radius must be >= 0");
  if (!(beta > 0.0)) throw Error("fusion beta must be positive");
  if (!(epsilon > 0.0)) throw Error("fusion epsilon must be positive");
}

DependencyMatrix dependency_matrix(std::span<const double> target_patch,
                                   const std::vector<std::vector<double>>& atlas_patches,
                                   double beta, double epsilon) {
  const auto n = static_cast<Eigen::Index>(atlas_patches.size());
  if (n == 0) throw Error("dependency matrix needs at least one atlas");
  const std::size_t size = target_patch.size();
  if (size == 0) throw Error("dependency matrix needs a non-empty patch");
  Eigen::MatrixXd err(static_cast<Eigen::Index>(size), n);
  for (Eigen::Index a = 0; a < n; ++a) {
    const auto& p = atlas_patches[a];
    if (p.size() != size) throw Error("atlas patch shape differs from the target patch");
    for (std::size_t y = 0; y < size; ++y) err(static_cast<Eigen::Index>(y), a) = std::abs(target_patch[y] - p[y]);
  }
  DependencyMatrix m = (err.transpose() * err) / static_cast<double>(size);
  if (beta != 1.0) m = m.array().pow(beta).matrix();
  m.diagonal().array() += epsilon;
  return m;
}

Eigen::VectorXd jlf_weights(const DependencyMatrix& m) {
  if (m.rows() != m.cols() || m.rows() == 0) throw Error("dependency matrix must be square and non-empty");
  if (!m.allFinite()) throw Error("dependency matrix has non-finite entries");
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(m.rows());
  // Normalized weights are unchanged by m - c * 1 1^T (Sherman-Morrison).
  // Removing the common off-diagonal floor avoids cancellation when the
  // errors are large next to epsilon, e.g. near-identical atlases.
  DependencyMatrix shifted = m;
  if (m.rows() > 1) {
    double floor = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        if (r != c) floor = std::min(floor, m(r, c));
    if (floor > 0.0) shifted.array() -= floor;
  }
  Eigen::VectorXd w;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(shifted);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    w = ldlt.solve(ones);
  } else {
    w = shifted.fullPivLu().solve(ones);
  }
  const double sum = w.sum();
  if (!std::isfinite(sum) || sum == 0.0) throw Error("joint label fusion weights are degenerate");
  w /= sum;
  return w;
}

namespace {

// In-grid voxels of the cube around (i, j, k).
void patch_positions(const GridGeometry& g, int i, int j, int k, int radius,
                     std::vector<std::size_t>& out) {
  out.clear();
  for (int dz = -radius; dz <= radius; ++dz)
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (g.contains(i + dx, j + dy, k + dz)) out.push_back(g.linear(i + dx, j + dy, k + dz));
}

struct VoxelVotes {
  std::vector<Label> labels;  // per atlas
  Eigen::VectorXd weights;
};

// Weights and per-atlas votes at one voxel, including the optional local search.
void weights_and_votes(const AtlasSet& atlases, const FusionConfig& cfg, int i, int j, int k,
                       const ScalarVolume& target, std::vector<std::size_t>& pos,
                       VoxelVotes& out) {
  const GridGeometry& g = target.geometry();
  const std::size_t n = atlases.size();
  patch_positions(g, i, j, k, cfg.patch_radius, pos);
  std::vector<double> tp(pos.size());
  for (std::size_t y = 0; y < pos.size(); ++y) tp[y] = target[pos[y]];

  std::vector<std::vector<double>> patches(n, std::vector<double>(pos.size()));
  out.labels.assign(n, 0);
  for (std::size_t a = 0; a < n; ++a) {
    const ScalarVolume& img = atlases[a].image;
    Index3 best{0, 0, 0};
    if (cfg.search_radius > 0) {
      double best_ssd = 0.0;
      for (std::size_t y = 0; y < pos.size(); ++y) {
        const double d = tp[y] - img[pos[y]];
        best_ssd += d * d;
      }
      const int r = cfg.search_radius;
      for (int oz = -r; oz <= r; ++oz)
        for (int oy = -r; oy <= r; ++oy)
          for (int ox = -r; ox <= r; ++ox) {
            if (ox == 0 && oy == 0 && oz == 0) continue;
            if (!g.contains(i + ox, j + oy, k + oz)) continue;
            double ssd = 0.0;
            bool inside = true;
            for (std::size_t y = 0; y < pos.size() && inside; ++y) {
              const Index3 p = g.unravel(pos[y]);
              if (!g.contains(p[0] + ox, p[1] + oy, p[2] + oz)) {
                inside = false;
                break;
              }
              const double d = tp[y] - img(p[0] + ox, p[1] + oy, p[2] + oz);
              ssd += d * d;
            }
            if (inside && ssd < best_ssd) {
              best_ssd = ssd;
              best = {ox, oy, oz};
            }
          }
    }
    for (std::size_t y = 0; y < pos.size(); ++y) {
      const Index3 p = g.unravel(pos[y]);
      patches[a][y] = img(p[0] + best[0], p[1] + best[1], p[2] + best[2]);
    }
    out.labels[a] = atlases[a].labels(i + best[0], j + best[1], k + best[2]);
  }
  out.weights = jlf_weights(dependency_matrix(tp, patches, cfg.beta, cfg.epsilon));
}

void check_atlases(const AtlasSet& atlases) {
  if (atlases.empty()) throw Error("fusion needs at least one atlas");
  const GridGeometry& g = atlases.front().image.geometry();
  for (const auto& a : atlases) {
    if (!(a.image.geometry() == g) || !(a.labels.geometry() == g)) {
      throw Error("fusion: atlas '" + a.atlas_id + "' is not on the target grid");
    }
  }
}

// Weighted vote with the lowest-label tie-break; returns the winner and its score.
std::pair<Label, double> vote(const std::vector<Label>& labels, const Eigen::VectorXd& w) {
  std::array<double, 256> score{};
  std::array<bool, 256> present{};
  for (std::size_t a = 0; a < labels.size(); ++a) {
    score[labels[a]] += w[static_cast<Eigen::Index>(a)];
    present[labels[a]] = true;
  }
  Label best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < 256; ++l) {
    if (!present[l]) continue;
    if (score[l] > best_score + kScoreTieTolerance) {
      best = static_cast<Label>(l);
      best_score = score[l];
    }
  }
  return {best, best_score};
}

template <typename WeightFn>
FusionOutput fuse_impl(const AtlasSet& atlases, WeightFn&& weight_fn) {
  check_atlases(atlases);
  const GridGeometry& g = atlases.front().image.geometry();
  FusionOutput out{LabelVolume(g, 0), ScalarVolume(g, 0.0)};
  const std::size_t n = atlases.size();
  parallel_for(g.dims[2], [&](std::int64_t kk) {
    const int k = static_cast<int>(kk);
    std::vector<std::size_t> pos;
    VoxelVotes votes;
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t idx = g.linear(i, j, k);
        const Label first = atlases[0].labels[idx];
        bool unanimous = true;
        for (std::size_t a = 1; a < n && unanimous; ++a) unanimous = atlases[a].labels[idx] == first;
        // Weights sum to one, so a unanimous vote wins with score 1.
        if (unanimous) {
          out.consensus[idx] = first;
          out.probability[idx] = 1.0;
          continue;
        }
        weight_fn(i, j, k, pos, votes);
        const auto [label, score] = vote(votes.labels, votes.weights);
        out.consensus[idx] = label;
        out.probability[idx] = std::clamp(score, 0.0, 1.0);
      }
  });
  return out;
}

}  // namespace

FusionOutput fuse(const ScalarVolume& target, const AtlasSet& atlases, const FusionConfig& cfg) {
  cfg.validate();
  check_atlases(atlases);
  if (!(target.geometry() == atlases.front().image.geometry())) {
    throw Error("fusion: target image is not on the atlas grid");
  }
  return fuse_impl(atlases, [&](int i, int j, int k, std::vector<std::size_t>& pos, VoxelVotes& votes) {
    weights_and_votes(atlases, cfg, i, j, k, target, pos, votes);
  });
}

FusionOutput majority_vote(const AtlasSet& atlases) {
  check_atlases(atlases);
  const auto n = static_cast<Eigen::Index>(atlases.size());
  const Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  return fuse_impl(atlases, [&](int i, int j, int k, std::vector<std::size_t>&, VoxelVotes& votes) {
    votes.labels.resize(atlases.size());
    for (std::size_t a = 0; a < atlases.size(); ++a) votes.labels[a] = atlases[a].labels(i, j, k);
    votes.weights = uniform;
  });
}

Eigen::VectorXd fusion_weights_at(const ScalarVolume& target, const AtlasSet& atlases,
                                  const FusionConfig& cfg, int i, int j, int k) {
  cfg.validate();
  check_atlases(atlases);
  std::vector<std::size_t> pos;
  VoxelVotes votes;
  weights_and_votes(atlases, cfg, i, j, k, target, pos, votes);
  return votes.weights;
}

}  // namespace vmaseg
