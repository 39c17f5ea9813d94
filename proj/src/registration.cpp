#include "vmaseg/registration.hpp"

#include <algorithm>
#include <cmath>

#include "vmaseg/parallel.hpp"

namespace vmaseg {

void RegistrationConfig::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw Error("registration alpha must lie in [0, 1)");
  if (pyramid_levels < 1) throw Error("registration needs at least one pyramid level");
  if (!(control_spacing_mm > 0.0)) throw Error("control spacing must be positive");
  if (max_iters_per_level < 0) throw Error("max_iters_per_level must be >= 0");
  if (!(step_tolerance > 0.0)) throw Error("step_tolerance must be positive");
  if (!(objective_tolerance >= 0.0)) throw Error("objective_tolerance must be >= 0");
  if (affine_levels < 0) throw Error("affine_levels must be >= 0");
  window.validate();
}

namespace {

constexpr int kMinLevelDim = 8;

struct Level {
  ScalarVolume target;
  ScalarVolume floating;
};

Index3 level_factor(const GridGeometry& g, int shrink) {
  Index3 f{};
  for (int a = 0; a < 3; ++a) {
    int s = shrink;
    while (s > 1 && g.dims[a] / s < kMinLevelDim) s /= 2;
    f[a] = s;
  }
  return f;
}

// Index 0 is the coarsest level; the last level is the input resolution.
std::vector<Level> build_pyramid(const ScalarVolume& target, const ScalarVolume& floating, int levels) {
  std::vector<Level> pyramid(levels);
  for (int l = 0; l < levels; ++l) {
    const int shrink = 1 << (levels - 1 - l);
    if (shrink == 1) {
      pyramid[l] = {target, floating};
      continue;
    }
    pyramid[l] = {downsample(target, level_factor(target.geometry(), shrink)),
                  downsample(floating, level_factor(floating.geometry(), shrink))};
  }
  return pyramid;
}

void require_contrast(const ScalarVolume& vol, const char* what) {
  if (vol.empty()) throw Error(std::string("registration: empty ") + what + " volume");
  const auto [lo, hi] = std::minmax_element(vol.data().begin(), vol.data().end());
  if (*lo == *hi) throw Error(std::string("registration: ") + what + " volume is constant");
}

Vec3 domain_center(const GridGeometry& g) { return 0.5 * (g.origin + g.extent_max()); }

// Affine parameterization about the target center c:
//   x -> (I + D)(x - c) + c_f + t
// with the matrix block scaled by `radius` so all 12 parameters move points
// by comparable distances (mm).
struct AffineParams {
  Vec3 t = Vec3::Zero();
  Mat3 d = Mat3::Zero();
};

AffineTransform to_affine(const AffineParams& p, const Vec3& c, const Vec3& cf) {
  AffineTransform a;
  a.matrix = Mat3::Identity() + p.d;
  a.translation = cf + p.t - a.matrix * c;
  return a;
}

double rms_radius(const GridGeometry& g) {
  double var = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double n = g.dims[a];
    const double s = g.spacing[a];
    var += s * s * (n * n - 1.0) / 12.0;
  }
  return std::max(1.0, std::sqrt(var));
}

struct AffineEval {
  double value = 0.0;
  Vec3 grad_t = Vec3::Zero();
  Mat3 grad_d = Mat3::Zero();
};

AffineEval evaluate_affine(const Level& level, const IntensityWindow& window, const AffineTransform& a,
                           const Vec3& c, bool with_gradient) {
  const GridGeometry& g = level.target.geometry();
  const BoundingBox mask = BoundingBox::full(g);
  std::vector<Vec3> forces;
  AffineEval e;
  e.value = nmi_with_forces(level.target, level.floating, window, mask, a,
                            with_gradient ? &forces : nullptr);
  if (!with_gradient) return e;
  std::size_t m = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++m) {
        const Vec3& f = forces[m];
        if (f.isZero(0.0)) continue;
        e.grad_t += f;
        e.grad_d += f * (g.to_world(i, j, k) - c).transpose();
      }
  return e;
}

}  // namespace

AffineTransform register_affine(const ScalarVolume& target, const ScalarVolume& floating,
                                const RegistrationConfig& cfg, std::vector<TraceRow>* trace) {
  cfg.validate();
  require_contrast(target, "target");
  require_contrast(floating, "floating");
  const auto pyramid = build_pyramid(target, floating, cfg.pyramid_levels);
  const Vec3 c = domain_center(target.geometry());
  const Vec3 cf = domain_center(floating.geometry());
  const double radius = rms_radius(target.geometry());
  const int last = cfg.affine_levels == 0 ? cfg.pyramid_levels
                                          : std::min(cfg.pyramid_levels, cfg.affine_levels);

  AffineParams params;
  for (int l = 0; l < last; ++l) {
    const Level& level = pyramid[l];
    AffineEval cur = evaluate_affine(level, cfg.window, to_affine(params, c, cf), c, true);
    if (trace) trace->push_back({l, 0, cur.value, cur.value, 0.0});
    const double initial_step = level.target.geometry().spacing.maxCoeff();
    double step = initial_step;
    int iter = 0;
    // Polak-Ribiere directions in (t, radius * D), restarted on a failed step.
    using Vec12 = Eigen::Matrix<double, 12, 1>;
    const auto scaled_gradient = [radius](const AffineEval& e) {
      Vec12 g;
      g.head<3>() = e.grad_t;
      g.tail<9>() = Eigen::Map<const Eigen::Matrix<double, 9, 1>>(e.grad_d.data()) / radius;
      return g;
    };
    Vec12 grad = scaled_gradient(cur);
    Vec12 dir = grad;
    bool steepest = true;
    while (iter < cfg.max_iters_per_level && step >= cfg.step_tolerance) {
      ++iter;
      const double norm = dir.cwiseAbs().maxCoeff();
      if (!(norm > 0.0)) break;
      AffineParams trial = params;
      trial.t += (step / norm) * dir.head<3>();
      trial.d += (step / norm / radius) * Eigen::Map<const Mat3>(dir.tail<9>().data());
      AffineEval next = evaluate_affine(level, cfg.window, to_affine(trial, c, cf), c, false);
      if (next.value > cur.value) {
        const double gain = next.value - cur.value;
        params = trial;
        cur = evaluate_affine(level, cfg.window, to_affine(params, c, cf), c, true);
        if (trace) trace->push_back({l, iter, cur.value, cur.value, 0.0});
        step = std::min(step * 1.25, initial_step);
        if (gain < cfg.objective_tolerance) break;
        const Vec12 g = scaled_gradient(cur);
        const double beta = std::max(0.0, g.dot(g - grad) / grad.squaredNorm());
        dir = g + beta * dir;
        if (dir.dot(g) <= 0.0) dir = g;
        grad = g;
        steepest = dir == g;
      } else if (!steepest) {
        dir = grad;
        steepest = true;
      } else {
        step *= 0.5;
      }
    }
  }
  AffineTransform result = to_affine(params, c, cf);
  result.validate();
  return result;
}

namespace {

struct FfdEval {
  double objective = 0.0;
  double nmi = 0.0;
  double penalty = 0.0;
  std::vector<Vec3> forces;  // per target voxel, kept for the gradient scatter
};

FfdEval evaluate_ffd(const Level& level, const ComposedTransform& t, const GridGeometry& omega,
                     const RegistrationConfig& cfg, bool with_forces) {
  const BoundingBox mask = BoundingBox::full(level.target.geometry());
  FfdEval e;
  e.nmi = nmi_with_forces(level.target, level.floating, cfg.window, mask, t,
                          with_forces ? &e.forces : nullptr);
  e.penalty = cfg.alpha > 0.0 ? bending_energy(t.ffd, omega, false).value : 0.0;
  e.objective = (1.0 - cfg.alpha) * e.nmi - cfg.alpha * e.penalty;
  return e;
}

std::vector<Vec3> objective_gradient(const Level& level, const ComposedTransform& t,
                                     const GridGeometry& omega, const RegistrationConfig& cfg,
                                     const FfdEval& e) {
  std::vector<Vec3> g = scatter_forces(t, level.target.geometry(),
                                       BoundingBox::full(level.target.geometry()), e.forces);
  for (auto& v : g) v *= (1.0 - cfg.alpha);
  if (cfg.alpha > 0.0) {
    const BendingEnergy be = bending_energy(t.ffd, omega, true);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= cfg.alpha * be.gradient[i];
  }
  return g;
}

}  // namespace

RegistrationResult register_ffd(const ScalarVolume& target, const ScalarVolume& floating,
                                const AffineTransform& affine, const RegistrationConfig& cfg) {
  cfg.validate();
  affine.validate();
  require_contrast(target, "target");
  require_contrast(floating, "floating");
  const auto pyramid = build_pyramid(target, floating, cfg.pyramid_levels);

  Vec3 lo, hi;
  affine_image_bounds(affine, target.geometry(), lo, hi);
  const double coarse_spacing = cfg.control_spacing_mm * (1 << (cfg.pyramid_levels - 1));
  ComposedTransform t{affine, FFDTransform::covering(lo, hi, Vec3::Constant(coarse_spacing))};

  RegistrationResult result;
  FfdEval cur;
  for (int l = 0; l < cfg.pyramid_levels; ++l) {
    if (l > 0) t.ffd = t.ffd.refined();
    const Level& level = pyramid[l];
    const GridGeometry omega = penalty_grid(affine, level.target.geometry());
    cur = evaluate_ffd(level, t, omega, cfg, true);
    result.trace.push_back({l, 0, cur.objective, cur.nmi, cur.penalty});
    std::vector<Vec3> grad = objective_gradient(level, t, omega, cfg, cur);

    const double initial_step = 0.5 * t.ffd.lattice().spacing.maxCoeff();
    double step = initial_step;
    int iter = 0;
    while (iter < cfg.max_iters_per_level && step >= cfg.step_tolerance) {
      ++iter;
      double norm = 0.0;
      for (const auto& v : grad) norm = std::max(norm, v.norm());
      if (!(norm > 0.0)) break;
      ComposedTransform trial = t;
      auto coeffs = trial.ffd.coefficients();
      for (std::size_t i = 0; i < coeffs.size(); ++i) coeffs[i] += (step / norm) * grad[i];
      FfdEval next = evaluate_ffd(level, trial, omega, cfg, true);
      if (next.objective > cur.objective) {
        const double gain = next.objective - cur.objective;
        t = std::move(trial);
        cur = std::move(next);
        result.trace.push_back({l, iter, cur.objective, cur.nmi, cur.penalty});
        step = std::min(step * 1.25, initial_step);
        if (gain < cfg.objective_tolerance) break;
        grad = objective_gradient(level, t, omega, cfg, cur);
      } else {
        step *= 0.5;
      }
    }
  }
  result.transform = std::move(t);
  result.final_objective = cur.objective;
  result.final_nmi = cur.nmi;
  result.final_penalty = cur.penalty;
  return result;
}

TraceRow evaluate_objective(const ScalarVolume& target, const ScalarVolume& floating,
                            const ComposedTransform& t, const RegistrationConfig& cfg) {
  const Level level{target, floating};
  const GridGeometry omega = penalty_grid(t.affine, target.geometry());
  const FfdEval e = evaluate_ffd(level, t, omega, cfg, false);
  return {cfg.pyramid_levels - 1, 0, e.objective, e.nmi, e.penalty};
}

std::pair<ScalarVolume, LabelVolume> warp_atlas(const ScalarVolume& atlas_image,
                                                const LabelVolume& atlas_labels,
                                                const ComposedTransform& t,
                                                const GridGeometry& target) {
  const PointMap map = [&t](const Vec3& x) { return t.apply(x); };
  return {resample(atlas_image, target, map), resample(atlas_labels, target, map)};
}

}  // namespace vmaseg
