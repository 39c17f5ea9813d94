#include "vmaseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include <spdlog/spdlog.h>

#include "vmaseg/nifti.hpp"
#include "vmaseg/parallel.hpp"

namespace vmaseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

AtlasMode parse_atlas_mode(const std::string& name) {
  if (name == "single") return AtlasMode::single;
  if (name == "bundle3") return AtlasMode::bundle3;
  throw Error("unknown atlas mode '" + name + "' (expected single or bundle3)");
}

std::string to_string(AtlasMode mode) { return mode == AtlasMode::single ? "single" : "bundle3"; }

RefineOrder parse_refine_order(const std::string& name) {
  if (name == "levelset_then_collisions") return RefineOrder::levelset_then_collisions;
  if (name == "collisions_then_levelset") return RefineOrder::collisions_then_levelset;
  throw Error("unknown refine order '" + name + "'");
}

std::string to_string(RefineOrder order) {
  return order == RefineOrder::levelset_then_collisions ? "levelset_then_collisions"
                                                        : "collisions_then_levelset";
}

void PostprocessConfig::validate() const {
  if (!(min_island_mm3 >= 0.0)) throw Error("postprocess min_island_mm3 must be >= 0");
  if (levelset_iters < 0) throw Error("postprocess levelset_iters must be >= 0");
  if (!(levelset_step > 0.0 && levelset_step <= 0.5)) throw Error("postprocess levelset_step must lie in (0, 0.5]");
  if (!(levelset.smoothing_voxels >= 0.0)) throw Error("postprocess smoothing_voxels must be >= 0");
  collisions.validate();
}

void AtlasManifest::validate() const {
  if (vertebrae.empty()) throw Error("manifest: target lists no vertebrae");
  if (atlases.empty()) throw Error("manifest: no atlases");
  std::set<std::string> ids;
  std::set<int> labels;
  for (const auto& v : vertebrae) {
    if (!ids.insert(v.id).second) throw Error("manifest: duplicate vertebra id '" + v.id + "'");
    if (v.label == 0) throw Error("manifest: vertebra '" + v.id + "' needs a nonzero label");
    if (!labels.insert(v.label).second) throw Error("manifest: duplicate vertebra label " + std::to_string(v.label));
    if (!v.box.valid()) throw Error("manifest: vertebra '" + v.id + "' has an empty box");
  }
  std::set<std::string> atlas_ids;
  for (const auto& a : atlases)
    if (!atlas_ids.insert(a.id).second) throw Error("manifest: duplicate atlas id '" + a.id + "'");
  if (mode == AtlasMode::bundle3 && vertebrae.size() < 3) {
    throw Error("manifest: bundle3 mode needs at least three target vertebrae");
  }
  if (!(crop_margin_mm >= 0.0)) throw Error("manifest: crop_margin_mm must be >= 0");
  registration.validate();
  fusion.validate();
  postprocess.validate();
}

namespace {

// Strict object access: unknown keys are errors so typos do not pass silently.
void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error("manifest: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error("manifest: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

Index3 read_index3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error("manifest: box corners must be 3-element arrays");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

void read_registration(const json& j, RegistrationConfig& c) {
  check_keys(j, "registration", {"alpha", "pyramid_levels", "control_spacing_mm", "max_iters_per_level",
                                 "step_tolerance", "objective_tolerance", "affine_levels", "window"});
  read_opt(j, "alpha", c.alpha);
  read_opt(j, "pyramid_levels", c.pyramid_levels);
  read_opt(j, "control_spacing_mm", c.control_spacing_mm);
  read_opt(j, "max_iters_per_level", c.max_iters_per_level);
  read_opt(j, "step_tolerance", c.step_tolerance);
  read_opt(j, "objective_tolerance", c.objective_tolerance);
  read_opt(j, "affine_levels", c.affine_levels);
  if (j.contains("window")) {
    const json& w = j.at("window");
    check_keys(w, "registration.window", {"lo", "hi", "bins"});
    read_opt(w, "lo", c.window.lo);
    read_opt(w, "hi", c.window.hi);
    read_opt(w, "bins", c.window.bins);
  }
}

void read_fusion(const json& j, FusionConfig& c) {
  check_keys(j, "fusion", {"patch_radius", "search_radius", "beta", "epsilon"});
  read_opt(j, "patch_radius", c.patch_radius);
  read_opt(j, "search_radius", c.search_radius);
  read_opt(j, "beta", c.beta);
  read_opt(j, "epsilon", c.epsilon);
}

void read_postprocess(const json& j, PostprocessConfig& c) {
  check_keys(j, "postprocess", {"min_island_mm3", "levelset_iters", "levelset_step", "smoothing_voxels",
                                "curvature_weight", "w_intensity", "w_distance", "order"});
  read_opt(j, "min_island_mm3", c.min_island_mm3);
  read_opt(j, "levelset_iters", c.levelset_iters);
  read_opt(j, "levelset_step", c.levelset_step);
  read_opt(j, "smoothing_voxels", c.levelset.smoothing_voxels);
  read_opt(j, "curvature_weight", c.levelset.curvature_weight);
  read_opt(j, "w_intensity", c.collisions.w_intensity);
  read_opt(j, "w_distance", c.collisions.w_distance);
  if (j.contains("order")) c.order = parse_refine_order(j.at("order").get<std::string>());
}

Label read_label(const json& j, const std::string& what) {
  const int v = j.get<int>();
  if (v < 1 || v > 255) throw Error("manifest: " + what + " must be a label in 1..255");
  return static_cast<Label>(v);
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("manifest: invalid JSON: ") + e.what());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

AtlasManifest parse_manifest(const std::string& json_text, const fs::path& base_dir) {
  const json root = parse_json(json_text);
  AtlasManifest m;
  try {
    check_keys(root, "manifest", {"target", "atlases", "mode", "leave_one_out", "crop_margin_mm",
                                  "registration", "fusion", "postprocess", "output", "write_intermediates"});
    const json& t = root.at("target");
    check_keys(t, "target", {"case_id", "image", "labels", "vertebrae"});
    read_opt(t, "case_id", m.case_id);
    m.target_image = resolve(base_dir, t.at("image").get<std::string>());
    if (t.contains("labels")) m.target_labels = resolve(base_dir, t.at("labels").get<std::string>());
    int index = 0;
    for (const json& v : t.at("vertebrae")) {
      check_keys(v, "target.vertebrae", {"id", "label", "box", "tags"});
      TargetVertebra tv;
      tv.id = v.at("id").get<std::string>();
      tv.label = v.contains("label") ? read_label(v.at("label"), "vertebra label")
                                     : static_cast<Label>(index + 1);
      const json& b = v.at("box");
      check_keys(b, "box", {"min", "max"});
      tv.box = {read_index3(b.at("min")), read_index3(b.at("max"))};
      if (v.contains("tags"))
        for (const auto& [k, val] : v.at("tags").items()) tv.tags[k] = val.is_string() ? val.get<std::string>() : val.dump();
      m.vertebrae.push_back(std::move(tv));
      ++index;
    }
    for (const json& a : root.at("atlases")) {
      check_keys(a, "atlases", {"id", "case_id", "image", "labels", "vertebrae", "cohort"});
      AtlasEntry e;
      e.id = a.at("id").get<std::string>();
      e.case_id = a.contains("case_id") ? a.at("case_id").get<std::string>() : e.id;
      e.image = resolve(base_dir, a.at("image").get<std::string>());
      e.labels = resolve(base_dir, a.at("labels").get<std::string>());
      for (const auto& [k, val] : a.at("vertebrae").items()) e.vertebrae[k] = read_label(val, "atlas label");
      read_opt(a, "cohort", e.cohort);
      m.atlases.push_back(std::move(e));
    }
    if (root.contains("mode")) m.mode = parse_atlas_mode(root.at("mode").get<std::string>());
    read_opt(root, "leave_one_out", m.leave_one_out);
    read_opt(root, "crop_margin_mm", m.crop_margin_mm);
    read_opt(root, "write_intermediates", m.write_intermediates);
    if (root.contains("registration")) read_registration(root.at("registration"), m.registration);
    if (root.contains("fusion")) read_fusion(root.at("fusion"), m.fusion);
    if (root.contains("postprocess")) read_postprocess(root.at("postprocess"), m.postprocess);
    if (root.contains("output")) m.output = resolve(base_dir, root.at("output").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

AtlasManifest load_manifest(const fs::path& path) {
  return parse_manifest(read_file(path), path.parent_path());
}

void load_config_blocks(const fs::path& path, RegistrationConfig* reg, FusionConfig* fusion,
                        PostprocessConfig* post) {
  const json root = parse_json(read_file(path));
  try {
    if (reg && root.contains("registration")) read_registration(root.at("registration"), *reg);
    if (fusion && root.contains("fusion")) read_fusion(root.at("fusion"), *fusion);
    if (post && root.contains("postprocess")) read_postprocess(root.at("postprocess"), *post);
  } catch (const json::exception& e) {
    throw Error(std::string("manifest: ") + e.what());
  }
  if (reg) reg->validate();
  if (fusion) fusion->validate();
  if (post) post->validate();
}

std::vector<std::size_t> bundle_members(std::size_t count, std::size_t v) {
  if (count < 3) throw Error("bundles need at least three vertebrae");
  if (v >= count) throw Error("bundle centre out of range");
  // Column ends bundle with their two nearest same-side neighbours.
  if (v == 0) return {0, 1, 2};
  if (v == count - 1) return {count - 3, count - 2, count - 1};
  return {v - 1, v, v + 1};
}

std::vector<std::size_t> eligible_atlases(const AtlasManifest& m, std::size_t vertebra) {
  std::vector<std::string> needed;
  if (m.mode == AtlasMode::single) {
    needed.push_back(m.vertebrae[vertebra].id);
  } else {
    for (std::size_t b : bundle_members(m.vertebrae.size(), vertebra)) needed.push_back(m.vertebrae[b].id);
  }
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < m.atlases.size(); ++a) {
    const AtlasEntry& e = m.atlases[a];
    if (m.leave_one_out && !m.case_id.empty() && e.case_id == m.case_id) continue;
    bool has_all = true;
    for (const auto& id : needed) has_all = has_all && e.vertebrae.count(id) > 0;
    if (has_all) out.push_back(a);
  }
  return out;
}

BoundingBox with_margin(const BoundingBox& box, double margin_mm, const GridGeometry& g) {
  Index3 margin{};
  for (int a = 0; a < 3; ++a) margin[a] = static_cast<int>(std::ceil(margin_mm / g.spacing[a] - 1e-9));
  const BoundingBox out = box.expanded(margin).clamped(g);
  if (!out.valid()) throw Error("crop box does not intersect the volume");
  return out;
}

namespace {

template <typename T>
Volume<T> crop_exact_impl(const Volume<T>& vol, const BoundingBox& box) {
  const Volume<T> c = crop(vol, box, {0, 0, 0});
  std::vector<T> values(c.values());
  return Volume<T>(nifti::storable(c.geometry()), std::move(values));
}

}  // namespace

ScalarVolume crop_exact(const ScalarVolume& vol, const BoundingBox& box) { return crop_exact_impl(vol, box); }
LabelVolume crop_exact(const LabelVolume& vol, const BoundingBox& box) { return crop_exact_impl(vol, box); }

BoundingBox locate_subgrid(const GridGeometry& full, const GridGeometry& sub) {
  BoundingBox box;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(sub.spacing[a] - full.spacing[a]) > 1e-6 * full.spacing[a]) {
      throw Error("sub-volume spacing differs from the target grid");
    }
    const double t = (sub.origin[a] - full.origin[a]) / full.spacing[a];
    const double r = std::round(t);
    if (std::abs(t - r) > 1e-3) throw Error("sub-volume is not aligned with the target grid");
    box.min_index[a] = static_cast<int>(r);
    box.max_index[a] = box.min_index[a] + sub.dims[a] - 1;
  }
  if (box.clamped(full) != box) throw Error("sub-volume extends beyond the target grid");
  return box;
}

LabelVolume cleanup_vertebra(const LabelVolume& mask, const PostprocessConfig& cfg) {
  return morph_cleanup(mask, island_voxels(cfg.min_island_mm3, mask.geometry()));
}

namespace {

LabelVolume levelset_on(const LabelVolume& mask, const ScalarVolume& intensity, const BoundingBox& box,
                        const PostprocessConfig& cfg) {
  const ScalarVolume local = crop_exact(intensity, box);
  const LabelVolume m(local.geometry(), std::vector<Label>(mask.values()));
  const LabelVolume r = levelset_refine(m, local, cfg.levelset_iters, cfg.levelset_step, cfg.levelset);
  return LabelVolume(mask.geometry(), std::vector<Label>(r.values()));
}

LabelVolume paste(const LabelVolume& sub, const BoundingBox& box, const GridGeometry& full) {
  LabelVolume out(full, 0);
  const GridGeometry& sg = sub.geometry();
  for (int k = 0; k < sg.dims[2]; ++k)
    for (int j = 0; j < sg.dims[1]; ++j)
      for (int i = 0; i < sg.dims[0]; ++i)
        if (sub(i, j, k)) out(i + box.min_index[0], j + box.min_index[1], k + box.min_index[2]) = 1;
  return out;
}

CollisionResult collide(const std::vector<LabelVolume>& full_masks, const std::vector<Label>& labels,
                        const ScalarVolume& intensity, const CollisionPolicy& policy) {
  std::vector<VertebraInstance> instances;
  std::vector<LabelVolume> nonempty;
  for (std::size_t v = 0; v < full_masks.size(); ++v) {
    const auto& m = full_masks[v];
    if (std::none_of(m.data().begin(), m.data().end(), [](Label l) { return l != 0; })) {
      spdlog::warn("vertebra label {} is empty after refinement", static_cast<int>(labels[v]));
      continue;
    }
    instances.push_back(describe_instance(labels[v], m, intensity));
    nonempty.push_back(m);
  }
  if (instances.empty()) return {LabelVolume(intensity.geometry(), 0), 0};
  return resolve_collisions(nonempty, intensity, instances, policy);
}

}  // namespace

AssembledLabels assemble(const std::vector<LabelVolume>& masks, const std::vector<Label>& labels,
                         const ScalarVolume& intensity, const PostprocessConfig& cfg) {
  cfg.validate();
  if (masks.size() != labels.size()) throw Error("assemble: one label per mask required");
  const GridGeometry& g = intensity.geometry();
  std::vector<BoundingBox> boxes;
  for (const auto& m : masks) boxes.push_back(locate_subgrid(g, m.geometry()));

  AssembledLabels out;
  out.refined.resize(masks.size());
  if (cfg.order == RefineOrder::levelset_then_collisions) {
    std::vector<LabelVolume> full(masks.size());
    parallel_for(static_cast<std::int64_t>(masks.size()), [&](std::int64_t v) {
      out.refined[v] = levelset_on(masks[v], intensity, boxes[v], cfg);
      full[v] = paste(out.refined[v], boxes[v], g);
    });
    CollisionResult c = collide(full, labels, intensity, cfg.collisions);
    out.labels = std::move(c.labels);
    out.contested = c.contested;
    return out;
  }

  std::vector<LabelVolume> full(masks.size());
  for (std::size_t v = 0; v < masks.size(); ++v) full[v] = paste(masks[v], boxes[v], g);
  CollisionResult c = collide(full, labels, intensity, cfg.collisions);
  out.contested = c.contested;
  LabelVolume merged = c.labels;
  parallel_for(static_cast<std::int64_t>(masks.size()), [&](std::int64_t v) {
    LabelVolume own = crop_exact(c.labels, boxes[v]);
    for (auto& l : own.data()) l = l == labels[v] ? 1 : 0;
    out.refined[v] = levelset_on(LabelVolume(masks[v].geometry(), std::vector<Label>(own.values())),
                                 intensity, boxes[v], cfg);
  });
  for (std::size_t v = 0; v < masks.size(); ++v) {
    const BoundingBox& b = boxes[v];
    const LabelVolume& r = out.refined[v];
    for (int k = b.min_index[2]; k <= b.max_index[2]; ++k)
      for (int j = b.min_index[1]; j <= b.max_index[1]; ++j)
        for (int i = b.min_index[0]; i <= b.max_index[0]; ++i) {
          const bool in = r(i - b.min_index[0], j - b.min_index[1], k - b.min_index[2]) != 0;
          Label& dst = merged(i, j, k);
          if (dst == labels[v] && !in && c.labels(i, j, k) == labels[v]) dst = 0;
          else if (dst == 0 && in) dst = labels[v];
        }
  }
  out.labels = std::move(merged);
  return out;
}

RegisteredPair register_and_warp(const ScalarVolume& target, const ScalarVolume& atlas_image,
                                 const LabelVolume& atlas_labels, const RegistrationConfig& cfg) {
  if (!(atlas_image.geometry() == atlas_labels.geometry())) {
    throw Error("atlas image and labels differ in geometry");
  }
  RegisteredPair out;
  const AffineTransform a = register_affine(target, atlas_image, cfg, &out.affine_trace);
  out.result = register_ffd(target, atlas_image, a, cfg);
  auto [img, lbl] = warp_atlas(atlas_image, atlas_labels, out.result.transform, target.geometry());
  out.warped.image = nifti::quantize_int16(img);
  out.warped.labels = std::move(lbl);
  return out;
}

EvalRow evaluate_vertebra(const LabelVolume& gt, const LabelVolume& seg, Label label,
                          const ScalarVolume* intensity, AsdMode mode) {
  if (!(gt.geometry() == seg.geometry())) throw Error("ground truth and segmentation differ in geometry");
  if (intensity && !(intensity->geometry() == seg.geometry())) {
    throw Error("intensity and segmentation differ in geometry");
  }
  const LabelVolume g = binary_mask(gt, label);
  const LabelVolume s = binary_mask(seg, label);
  const auto any = [](const LabelVolume& v) {
    return std::any_of(v.data().begin(), v.data().end(), [](Label l) { return l != 0; });
  };
  EvalRow row;
  row.dice = dice(g, s);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (!any(s)) {
    row.volume_cm3 = 0.0;
    row.density_hu = nan;
    row.asd = nan;
    return row;
  }
  if (intensity) {
    const VolumeDensity vd = volume_and_density(s, *intensity);
    row.volume_cm3 = vd.volume_cm3;
    row.density_hu = vd.density_hu;
  } else {
    const auto n = std::count_if(s.data().begin(), s.data().end(), [](Label l) { return l != 0; });
    row.volume_cm3 = static_cast<double>(n) * s.geometry().voxel_volume() / 1000.0;
    row.density_hu = nan;
  }
  row.asd = any(g) ? asd(g, s, mode) : nan;
  return row;
}

void write_timing_csv(const fs::path& path, const std::vector<TimingEntry>& timing) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "stage,vertebra,atlas,seconds\n";
  for (const auto& t : timing) out << t.stage << ',' << t.vertebra << ',' << t.atlas << ',' << std::fixed
                                   << std::setprecision(3) << t.seconds << '\n';
}

void write_trace_csv(const fs::path& path, const std::vector<TraceRow>& affine,
                     const std::vector<TraceRow>& ffd) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "stage,level,iteration,objective,nmi,penalty\n" << std::setprecision(12);
  for (const auto& r : affine)
    out << "affine," << r.level << ',' << r.iteration << ',' << r.objective << ',' << r.nmi << ',' << r.penalty << '\n';
  for (const auto& r : ffd)
    out << "ffd," << r.level << ',' << r.iteration << ',' << r.objective << ',' << r.nmi << ',' << r.penalty << '\n';
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct LoadedAtlas {
  ScalarVolume image;
  LabelVolume labels;
};

// Atlas crop and its labels for one target vertebra: binary in single mode,
// 1..3 by column order in bundle3 mode. Returns the label kept after fusion.
Label prepare_atlas(const AtlasManifest& m, std::size_t v, const AtlasEntry& e, const LoadedAtlas& a,
                    ScalarVolume& image, LabelVolume& labels) {
  std::vector<std::size_t> members{v};
  if (m.mode == AtlasMode::bundle3) members = bundle_members(m.vertebrae.size(), v);
  BoundingBox box;
  bool first = true;
  Label keep = 1;
  std::vector<std::pair<Label, Label>> remap;
  for (std::size_t n = 0; n < members.size(); ++n) {
    const std::string& id = m.vertebrae[members[n]].id;
    const Label src = e.vertebrae.at(id);
    const BoundingBox b = label_bounds(a.labels, src);
    if (!b.valid()) throw Error("atlas '" + e.id + "' has no voxels for vertebra '" + id + "'");
    box = first ? b : box.united(b);
    first = false;
    const Label dst = static_cast<Label>(n + 1);
    remap.emplace_back(src, dst);
    if (members[n] == v) keep = dst;
  }
  box = with_margin(box, m.crop_margin_mm, a.image.geometry());
  image = crop_exact(a.image, box);
  labels = crop_exact(a.labels, box);
  for (auto& l : labels.data()) {
    Label out = 0;
    for (const auto& [src, dst] : remap)
      if (l == src) out = dst;
    l = out;
  }
  return keep;
}

BoundingBox target_box(const AtlasManifest& m, std::size_t v, const GridGeometry& g) {
  BoundingBox box = m.vertebrae[v].box;
  if (m.mode == AtlasMode::bundle3)
    for (std::size_t b : bundle_members(m.vertebrae.size(), v)) box = box.united(m.vertebrae[b].box);
  return with_margin(box, m.crop_margin_mm, g);
}

std::string safe_name(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return out;
}

}  // namespace

PipelineRun run_pipeline(const AtlasManifest& m) {
  m.validate();
  const auto t_start = Clock::now();
  PipelineRun run;
  const ScalarVolume target = nifti::read_scalar(m.target_image);
  const GridGeometry& tg = target.geometry();
  std::optional<LabelVolume> truth;
  if (m.target_labels) {
    truth = nifti::read_labels(*m.target_labels);
    if (!(truth->geometry() == tg)) throw Error("ground-truth labels do not share the target geometry");
  }
  for (const auto& v : m.vertebrae)
    if (v.box.clamped(tg) != v.box) throw Error("vertebra '" + v.id + "' box leaves the target grid");

  const std::size_t nv = m.vertebrae.size();
  std::vector<std::vector<std::size_t>> eligible(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    eligible[v] = eligible_atlases(m, v);
    if (eligible[v].empty()) throw Error("vertebra '" + m.vertebrae[v].id + "' has no eligible atlas");
  }

  // Atlases are loaded once and shared read-only.
  std::vector<std::optional<LoadedAtlas>> loaded(m.atlases.size());
  for (std::size_t v = 0; v < nv; ++v)
    for (std::size_t a : eligible[v]) {
      if (loaded[a]) continue;
      try {
        LoadedAtlas la{nifti::read_scalar(m.atlases[a].image), nifti::read_labels(m.atlases[a].labels)};
        if (!(la.image.geometry() == la.labels.geometry())) throw Error("image and labels differ in geometry");
        loaded[a] = std::move(la);
      } catch (const Error& e) {
        throw Error("[load] atlas '" + m.atlases[a].id + "': " + e.what());
      }
    }

  const bool write = !m.output.empty();
  if (write) fs::create_directories(m.output);
  const auto vdir = [&](std::size_t v) { return m.output / safe_name(m.vertebrae[v].id); };
  if (write && m.write_intermediates)
    for (std::size_t v = 0; v < nv; ++v) fs::create_directories(vdir(v));

  std::vector<ScalarVolume> crops(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    crops[v] = crop_exact(target, target_box(m, v, tg));
    if (write && m.write_intermediates) nifti::write_image(vdir(v) / "target.nii.gz", crops[v]);
  }

  struct Job {
    std::size_t vertebra, atlas, slot;
  };
  std::vector<Job> jobs;
  run.vertebrae.resize(nv);
  std::vector<std::vector<RegisteredAtlas>> warped(nv);
  std::vector<Label> keep(nv, 1);
  for (std::size_t v = 0; v < nv; ++v) {
    run.vertebrae[v].id = m.vertebrae[v].id;
    run.vertebrae[v].label = m.vertebrae[v].label;
    run.vertebrae[v].crop = crops[v].geometry();
    run.vertebrae[v].atlases.resize(eligible[v].size());
    warped[v].resize(eligible[v].size());
    for (std::size_t s = 0; s < eligible[v].size(); ++s) jobs.push_back({v, eligible[v][s], s});
  }
  std::vector<double> job_seconds(jobs.size(), 0.0);

  spdlog::info("registering {} atlas/vertebra pairs", jobs.size());
  parallel_for(static_cast<std::int64_t>(jobs.size()), [&](std::int64_t ji) {
    const Job& job = jobs[ji];
    const AtlasEntry& e = m.atlases[job.atlas];
    const std::string& vid = m.vertebrae[job.vertebra].id;
    const auto t0 = Clock::now();
    try {
      ScalarVolume img;
      LabelVolume lbl;
      const Label k = prepare_atlas(m, job.vertebra, e, *loaded[job.atlas], img, lbl);
      if (job.slot == 0) keep[job.vertebra] = k;
      RegisteredPair reg = register_and_warp(crops[job.vertebra], img, lbl, m.registration);
      AtlasRun& ar = run.vertebrae[job.vertebra].atlases[job.slot];
      ar.atlas_id = e.id;
      ar.transform = reg.result.transform;
      ar.final_objective = reg.result.final_objective;
      ar.final_nmi = reg.result.final_nmi;
      ar.final_penalty = reg.result.final_penalty;
      reg.warped.atlas_id = e.id;
      if (write && m.write_intermediates) {
        const fs::path dir = vdir(job.vertebra);
        const std::string name = safe_name(e.id);
        nifti::write_image(dir / ("atlas_" + name + "_image.nii.gz"), img);
        nifti::write_labels(dir / ("atlas_" + name + "_labels.nii.gz"), lbl);
        save_transform(dir / (name + ".tfm"), reg.result.transform);
        write_trace_csv(dir / (name + "_trace.csv"), reg.affine_trace, reg.result.trace);
        nifti::write_scalar(dir / ("warped_" + name + "_image.nii.gz"), reg.warped.image);
        nifti::write_labels(dir / ("warped_" + name + "_labels.nii.gz"), reg.warped.labels);
      }
      warped[job.vertebra][job.slot] = std::move(reg.warped);
    } catch (const Error& err) {
      throw Error("[register] vertebra '" + vid + "', atlas '" + e.id + "': " + err.what());
    }
    job_seconds[ji] = seconds_since(t0);
    spdlog::debug("registered atlas {} to vertebra {} in {:.1f} s", e.id, vid, job_seconds[ji]);
  });
  for (std::size_t ji = 0; ji < jobs.size(); ++ji)
    run.timing.push_back({"register", m.vertebrae[jobs[ji].vertebra].id, m.atlases[jobs[ji].atlas].id,
                          job_seconds[ji]});

  std::vector<LabelVolume> cleaned(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    const std::string& vid = m.vertebrae[v].id;
    const auto t0 = Clock::now();
    try {
      run.vertebrae[v].fusion = fuse(crops[v], warped[v], m.fusion);
    } catch (const Error& err) {
      throw Error("[fuse] vertebra '" + vid + "': " + err.what());
    }
    run.timing.push_back({"fuse", vid, "", seconds_since(t0)});
    LabelVolume mask = run.vertebrae[v].fusion.consensus;
    for (auto& l : mask.data()) l = l == keep[v] ? 1 : 0;
    cleaned[v] = cleanup_vertebra(mask, m.postprocess);
    if (write && m.write_intermediates) {
      nifti::write_labels(vdir(v) / "fused_labels.nii.gz", run.vertebrae[v].fusion.consensus);
      nifti::write_float(vdir(v) / "fused_probability.nii.gz", run.vertebrae[v].fusion.probability);
      nifti::write_labels(vdir(v) / "mask.nii.gz", mask);
    }
  }

  const auto t_refine = Clock::now();
  std::vector<Label> labels;
  for (const auto& v : m.vertebrae) labels.push_back(v.label);
  AssembledLabels assembled;
  try {
    assembled = assemble(cleaned, labels, target, m.postprocess);
  } catch (const Error& err) {
    throw Error(std::string("[refine] ") + err.what());
  }
  run.timing.push_back({"refine", "", "", seconds_since(t_refine)});
  for (std::size_t v = 0; v < nv; ++v) run.vertebrae[v].refined = std::move(assembled.refined[v]);
  run.segmentation = std::move(assembled.labels);
  run.contested_voxels = assembled.contested;

  if (truth) {
    for (std::size_t v = 0; v < nv; ++v) {
      const TargetVertebra& tv = m.vertebrae[v];
      const LabelVolume gt = binary_mask(*truth, tv.label);
      const LabelVolume seg = binary_mask(run.segmentation, tv.label);
      EvalRow row = evaluate_vertebra(*truth, run.segmentation, tv.label, &target);
      row.case_id = m.case_id;
      row.vertebra_id = tv.id;
      row.tags = tv.tags;
      row.tags["mode"] = to_string(m.mode);
      run.rows.push_back(std::move(row));
    }
  }
  run.timing.push_back({"total", "", "", seconds_since(t_start)});

  if (write) {
    nifti::write_labels(m.output / "segmentation.nii.gz", run.segmentation);
    write_timing_csv(m.output / "timing.csv", run.timing);
    if (!run.rows.empty()) {
      const auto groups = report(run.rows, "");
      std::ofstream(m.output / "report.csv") << report_csv(groups, "");
      std::ofstream(m.output / "report.txt") << report_text(groups, "");
      std::ofstream(m.output / "rows.csv") << rows_csv(run.rows);
    }
  }
  return run;
}

}  // namespace vmaseg
