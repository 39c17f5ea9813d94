#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmaseg/fusion.hpp"
#include "vmaseg/metrics.hpp"
#include "vmaseg/postprocess.hpp"
#include "vmaseg/registration.hpp"

namespace vmaseg {

enum class AtlasMode { single, bundle3 };
AtlasMode parse_atlas_mode(const std::string& name);
std::string to_string(AtlasMode mode);

enum class RefineOrder {
  levelset_then_collisions,  // cleanup, level set per vertebra, then collisions across vertebrae
  collisions_then_levelset,  // cleanup, collisions, then level set
};
RefineOrder parse_refine_order(const std::string& name);
std::string to_string(RefineOrder order);

struct PostprocessConfig {
  double min_island_mm3 = 8.0;  // 50 voxels at 0.4 x 0.4 x 1.0 mm
  int levelset_iters = 10;
  double levelset_step = 0.25;
  LevelSetConfig levelset;
  CollisionPolicy collisions;
  RefineOrder order = RefineOrder::levelset_then_collisions;

  void validate() const;
};

struct TargetVertebra {
  std::string id;
  Label label = 0;  // output label, also the ground-truth label when given
  BoundingBox box;
  std::map<std::string, std::string> tags;
};

struct AtlasEntry {
  std::string id;
  std::string case_id;
  std::filesystem::path image;
  std::filesystem::path labels;
  std::map<std::string, Label> vertebrae;  // vertebra id -> label value
  std::string cohort;
};

struct AtlasManifest {
  std::string case_id;
  std::filesystem::path target_image;
  std::optional<std::filesystem::path> target_labels;  // ground truth, enables evaluation
  std::vector<TargetVertebra> vertebrae;               // superior to inferior
  std::vector<AtlasEntry> atlases;
  AtlasMode mode = AtlasMode::single;
  bool leave_one_out = false;
  double crop_margin_mm = 10.0;
  RegistrationConfig registration;
  FusionConfig fusion;
  PostprocessConfig postprocess;
  std::filesystem::path output;
  bool write_intermediates = true;

  void validate() const;
};

/// Relative paths resolve against the manifest's directory.
AtlasManifest load_manifest(const std::filesystem::path& path);
AtlasManifest parse_manifest(const std::string& json_text, const std::filesystem::path& base_dir);
/// Reads only the registration / fusion / postprocess blocks (defaults for missing ones).
void load_config_blocks(const std::filesystem::path& path, RegistrationConfig* reg, FusionConfig* fusion,
                        PostprocessConfig* post);

struct TimingEntry {
  std::string stage;
  std::string vertebra;
  std::string atlas;
  double seconds = 0.0;
};

struct AtlasRun {
  std::string atlas_id;
  ComposedTransform transform;
  double final_objective = 0.0;
  double final_nmi = 0.0;
  double final_penalty = 0.0;
};

struct VertebraRun {
  std::string id;
  Label label = 0;
  GridGeometry crop;                 // target sub-grid the vertebra was processed on
  std::vector<AtlasRun> atlases;
  FusionOutput fusion;
  LabelVolume refined;               // on `crop`
};

struct PipelineRun {
  std::vector<VertebraRun> vertebrae;
  LabelVolume segmentation;          // on the target grid
  std::size_t contested_voxels = 0;  // voxels entering collision resolution
  std::vector<EvalRow> rows;         // empty without ground truth
  std::vector<TimingEntry> timing;
};

PipelineRun run_pipeline(const AtlasManifest& manifest);

// Building blocks shared with the stage-by-stage subcommands.

/// Atlas ids eligible for a vertebra, in manifest order.
std::vector<std::size_t> eligible_atlases(const AtlasManifest& m, std::size_t vertebra);

/// Vertebra indices bundled with `v`: itself plus its neighbours, ascending.
std::vector<std::size_t> bundle_members(std::size_t count, std::size_t v);

/// Crop box plus a physical margin (rounded up per axis), clipped to the grid.
BoundingBox with_margin(const BoundingBox& box, double margin_mm, const GridGeometry& g);

/// Sub-volume on a storable geometry, so it survives a file round trip exactly.
ScalarVolume crop_exact(const ScalarVolume& vol, const BoundingBox& box);
LabelVolume crop_exact(const LabelVolume& vol, const BoundingBox& box);

/// Box of `sub` inside `full` when `sub` is a storable crop of it.
BoundingBox locate_subgrid(const GridGeometry& full, const GridGeometry& sub);

/// Island removal and hole filling of one vertebra mask on its own grid.
LabelVolume cleanup_vertebra(const LabelVolume& mask, const PostprocessConfig& cfg);

struct AssembledLabels {
  LabelVolume labels;                 // on the intensity grid
  std::vector<LabelVolume> refined;   // per vertebra, on its own sub-grid
  std::size_t contested = 0;
};

/// Merges cleaned per-vertebra binary masks, each on a sub-grid of
/// `intensity`, onto the full grid: level set and collision resolution in
/// the order given by `cfg.order`.
AssembledLabels assemble(const std::vector<LabelVolume>& masks, const std::vector<Label>& labels,
                         const ScalarVolume& intensity, const PostprocessConfig& cfg);

struct RegisteredPair {
  std::vector<TraceRow> affine_trace;
  RegistrationResult result;
  RegisteredAtlas warped;  // image rounded to int16 like its file form
};

/// Affine then FFD registration of one atlas onto the target, then warping.
RegisteredPair register_and_warp(const ScalarVolume& target, const ScalarVolume& atlas_image,
                                 const LabelVolume& atlas_labels, const RegistrationConfig& cfg);

/// Metric columns of one evaluation row. An empty segmentation has volume 0
/// and NaN density and ASD; without `intensity` density is NaN.
EvalRow evaluate_vertebra(const LabelVolume& gt, const LabelVolume& seg, Label label,
                          const ScalarVolume* intensity, AsdMode mode = AsdMode::directed);

void write_timing_csv(const std::filesystem::path& path, const std::vector<TimingEntry>& timing);
/// Columns: stage, level, iteration, objective, nmi, penalty.
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& affine,
                     const std::vector<TraceRow>& ffd);

}  // namespace vmaseg
