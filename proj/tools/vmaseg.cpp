#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "vmaseg/nifti.hpp"
#include "vmaseg/parallel.hpp"
#include "vmaseg/phantom.hpp"
#include "vmaseg/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace vmaseg;

namespace {

// Bad argument values detected after parsing; reported like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string manifest;
  int workers = 0;
  std::string output;
  std::uint64_t seed = 0;
  std::string log_level = "info";
};

fs::path output_dir(const Globals& g) {
  if (g.output.empty()) throw UsageError("--output is required");
  fs::create_directories(g.output);
  return g.output;
}

std::pair<std::string, std::string> split_pair(const std::string& s, const std::string& flag) {
  const auto pos = s.find(':');
  if (pos == std::string::npos || pos == 0 || pos + 1 == s.size()) {
    throw UsageError(flag + " expects A:B, got '" + s + "'");
  }
  return {s.substr(0, pos), s.substr(pos + 1)};
}

Label parse_label(const std::string& s) {
  int v = 0;
  try {
    std::size_t used = 0;
    v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw UsageError("'" + s + "' is not a label");
  }
  if (v < 1 || v > 255) throw UsageError("label " + s + " outside 1..255");
  return static_cast<Label>(v);
}

json box_json(const BoundingBox& b) {
  return {{"min", {b.min_index[0], b.min_index[1], b.min_index[2]}},
          {"max", {b.max_index[0], b.max_index[1], b.max_index[2]}}};
}

// register ------------------------------------------------------------------

struct RegisterArgs {
  std::string target, image, labels, name = "atlas";
};

void cmd_register(const Globals& g, const RegisterArgs& a) {
  RegistrationConfig cfg;
  if (!g.manifest.empty()) load_config_blocks(g.manifest, &cfg, nullptr, nullptr);
  cfg.validate();
  const fs::path out = output_dir(g);
  const ScalarVolume target = nifti::read_scalar(a.target);
  const ScalarVolume image = nifti::read_scalar(a.image);
  std::vector<TraceRow> affine_trace;
  RegistrationResult result;
  if (!a.labels.empty()) {
    RegisteredPair reg = register_and_warp(target, image, nifti::read_labels(a.labels), cfg);
    nifti::write_scalar(out / ("warped_" + a.name + "_image.nii.gz"), reg.warped.image);
    nifti::write_labels(out / ("warped_" + a.name + "_labels.nii.gz"), reg.warped.labels);
    affine_trace = std::move(reg.affine_trace);
    result = std::move(reg.result);
  } else {
    const AffineTransform affine = register_affine(target, image, cfg, &affine_trace);
    result = register_ffd(target, image, affine, cfg);
  }
  save_transform(out / (a.name + ".tfm"), result.transform);
  write_trace_csv(out / (a.name + "_trace.csv"), affine_trace, result.trace);
  spdlog::info("final objective {:.6f} (nmi {:.6f}, penalty {:.3e})", result.final_objective, result.final_nmi,
               result.final_penalty);
}

// fuse ----------------------------------------------------------------------

struct FuseArgs {
  std::string target;
  std::vector<std::string> atlases;
  int keep_label = 0;
  bool majority = false;
};

void cmd_fuse(const Globals& g, const FuseArgs& a) {
  FusionConfig cfg;
  if (!g.manifest.empty()) load_config_blocks(g.manifest, nullptr, &cfg, nullptr);
  cfg.validate();
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& s : a.atlases) pairs.push_back(split_pair(s, "--atlas"));
  if (a.target.empty() && !a.majority) throw UsageError("--target is required unless --majority is given");
  if (a.keep_label < 0 || a.keep_label > 255) throw UsageError("--keep-label outside 0..255");
  const fs::path out = output_dir(g);
  AtlasSet set;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    set.push_back({nifti::read_scalar(pairs[i].first), nifti::read_labels(pairs[i].second), std::to_string(i)});
  }
  const FusionOutput f = a.majority ? majority_vote(set) : fuse(nifti::read_scalar(a.target), set, cfg);
  nifti::write_labels(out / "fused_labels.nii.gz", f.consensus);
  nifti::write_float(out / "fused_probability.nii.gz", f.probability);
  if (a.keep_label > 0) {
    LabelVolume mask = f.consensus;
    for (auto& l : mask.data()) l = l == a.keep_label ? 1 : 0;
    nifti::write_labels(out / "mask.nii.gz", mask);
  }
}

// refine --------------------------------------------------------------------

struct RefineArgs {
  std::string intensity;
  std::vector<std::string> masks;
  std::string order;
};

void cmd_refine(const Globals& g, const RefineArgs& a) {
  PostprocessConfig cfg;
  if (!g.manifest.empty()) load_config_blocks(g.manifest, nullptr, nullptr, &cfg);
  if (!a.order.empty()) {
    try {
      cfg.order = parse_refine_order(a.order);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  cfg.validate();
  std::vector<Label> labels;
  std::vector<std::string> paths;
  for (const auto& s : a.masks) {
    auto [label, path] = split_pair(s, "--mask");
    labels.push_back(parse_label(label));
    paths.push_back(path);
  }
  const fs::path out = output_dir(g);
  const ScalarVolume intensity = nifti::read_scalar(a.intensity);
  std::vector<LabelVolume> cleaned;
  for (const auto& p : paths) cleaned.push_back(cleanup_vertebra(nifti::read_labels(p), cfg));
  const AssembledLabels r = assemble(cleaned, labels, intensity, cfg);
  nifti::write_labels(out / "segmentation.nii.gz", r.labels);
  for (std::size_t v = 0; v < labels.size(); ++v) {
    nifti::write_labels(out / ("refined_" + std::to_string(labels[v]) + ".nii.gz"), r.refined[v]);
  }
  spdlog::info("{} contested voxels", r.contested);
}

// evaluate ------------------------------------------------------------------

struct EvaluateArgs {
  std::string gt, seg, intensity, cases, group_by;
  std::vector<int> labels;
  std::string case_id = "case";
  bool symmetric = false;
};

// Cases file: [{"case_id", "gt", "seg", "intensity"?, "vertebrae": [{"id", "label", "tags"?}]}],
// paths relative to the file.
std::vector<EvalRow> evaluate_cases(const fs::path& file, AsdMode mode) {
  std::ifstream in(file);
  if (!in) throw Error("cannot open " + file.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("cases file: " + std::string(e.what()));
  }
  const fs::path base = file.parent_path();
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  std::vector<EvalRow> rows;
  try {
    for (const json& c : root) {
      const LabelVolume gt = nifti::read_labels(resolve(c.at("gt").get<std::string>()));
      const LabelVolume seg = nifti::read_labels(resolve(c.at("seg").get<std::string>()));
      std::optional<ScalarVolume> intensity;
      if (c.contains("intensity")) intensity = nifti::read_scalar(resolve(c.at("intensity").get<std::string>()));
      for (const json& v : c.at("vertebrae")) {
        EvalRow row = evaluate_vertebra(gt, seg, static_cast<Label>(v.at("label").get<int>()),
                                        intensity ? &*intensity : nullptr, mode);
        row.case_id = c.at("case_id").get<std::string>();
        row.vertebra_id = v.at("id").get<std::string>();
        if (v.contains("tags"))
          for (const auto& [k, val] : v.at("tags").items())
            row.tags[k] = val.is_string() ? val.get<std::string>() : val.dump();
        rows.push_back(std::move(row));
      }
    }
  } catch (const json::exception& e) {
    throw Error("cases file: " + std::string(e.what()));
  }
  return rows;
}

void cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
  const AsdMode mode = a.symmetric ? AsdMode::symmetric : AsdMode::directed;
  std::vector<EvalRow> rows;
  if (!a.cases.empty()) {
    if (!a.gt.empty() || !a.seg.empty()) throw UsageError("--cases excludes --gt/--seg");
    rows = evaluate_cases(a.cases, mode);
  } else {
    if (a.gt.empty() || a.seg.empty()) throw UsageError("either --cases or both --gt and --seg are required");
    const LabelVolume gt = nifti::read_labels(a.gt);
    const LabelVolume seg = nifti::read_labels(a.seg);
    std::optional<ScalarVolume> intensity;
    if (!a.intensity.empty()) intensity = nifti::read_scalar(a.intensity);
    std::vector<Label> labels;
    for (int l : a.labels) labels.push_back(parse_label(std::to_string(l)));
    if (labels.empty())
      for (Label l : label_set(gt))
        if (l != 0) labels.push_back(l);
    for (Label l : labels) {
      EvalRow row = evaluate_vertebra(gt, seg, l, intensity ? &*intensity : nullptr, mode);
      row.case_id = a.case_id;
      row.vertebra_id = std::to_string(l);
      rows.push_back(std::move(row));
    }
  }
  if (rows.empty()) throw Error("nothing to evaluate");
  const fs::path out = output_dir(g);
  const auto groups = report(rows, a.group_by);
  std::ofstream(out / "report.csv") << report_csv(groups, a.group_by);
  std::ofstream(out / "report.txt") << report_text(groups, a.group_by);
  std::ofstream(out / "rows.csv") << rows_csv(rows);
  std::cout << report_text(groups, a.group_by);
}

// phantom -------------------------------------------------------------------

struct PhantomArgs {
  int n_vertebrae = 5;
  std::vector<double> height_scale;
  std::vector<int> dims;
  double noise_sd = 0.0;
  std::string deform;
  double magnitude = 4.0;
};

void cmd_phantom(const Globals& g, const PhantomArgs& a) {
  PhantomSpec spec;
  spec.n_vertebrae = a.n_vertebrae;
  spec.height_scale = a.height_scale;
  spec.noise_sd = a.noise_sd;
  spec.seed = g.seed;
  if (!a.dims.empty()) {
    if (a.dims.size() != 3) throw UsageError("--dims takes three values");
    spec.grid.dims = {a.dims[0], a.dims[1], a.dims[2]};
  }
  std::optional<DeformationKind> kind;
  if (!a.deform.empty()) {
    try {
      kind = parse_deformation_kind(a.deform);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  const fs::path out = output_dir(g);
  const Phantom p = make_phantom(spec);
  nifti::write_image(out / "image.nii.gz", p.image);
  nifti::write_labels(out / "labels.nii.gz", p.labels);
  json boxes = json::array();
  for (std::size_t v = 0; v < p.boxes.size(); ++v) {
    boxes.push_back({{"id", "V" + std::to_string(v + 1)}, {"label", v + 1}, {"box", box_json(p.boxes[v])}});
  }
  std::ofstream(out / "boxes.json") << boxes.dump(2) << '\n';
  if (kind) {
    const DeformedPhantom d = deform_phantom(p.image, p.labels, *kind, a.magnitude, g.seed);
    nifti::write_image(out / "deformed_image.nii.gz", d.image);
    nifti::write_labels(out / "deformed_labels.nii.gz", d.labels);
    save_transform(out / "truth.tfm", d.truth);
  }
}

// run -----------------------------------------------------------------------

void cmd_run(const Globals& g) {
  if (g.manifest.empty()) throw UsageError("run needs --manifest");
  AtlasManifest m = load_manifest(g.manifest);
  if (!g.output.empty()) m.output = g.output;
  if (m.output.empty()) throw UsageError("no output directory: set \"output\" in the manifest or pass --output");
  const PipelineRun run = run_pipeline(m);
  for (const auto& r : run.rows) {
    spdlog::info("{}: dice {:.2f}%, asd {:.3f} mm", r.vertebra_id, r.dice, r.asd);
  }
  spdlog::info("{} contested voxels; outputs in {}", run.contested_voxels, m.output.string());
}

int configure_workers(const Globals& g) {
  int w = g.workers;
  if (w == 0) {
    if (const char* env = std::getenv("VMASEG_WORKERS")) {
      try {
        w = std::stoi(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("VMASEG_WORKERS is not a number: ") + env);
      }
      if (w < 1) throw UsageError("VMASEG_WORKERS must be >= 1");
    }
  }
  if (w > 0) set_worker_count(w);
  return worker_count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-atlas vertebra segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--manifest", g.manifest, "Pipeline manifest (run) or config-block JSON (other subcommands)");
  app.add_option("--workers", g.workers, "Worker threads (default: VMASEG_WORKERS or all cores)")
      ->check(CLI::PositiveNumber);
  app.add_option("--output", g.output, "Output directory");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Affine + FFD registration of one volume onto another");
  reg->add_option("--target", ra.target, "Target image")->required()->check(CLI::ExistingFile);
  reg->add_option("--image", ra.image, "Floating (atlas) image")->required()->check(CLI::ExistingFile);
  reg->add_option("--labels", ra.labels, "Atlas labels; also writes the warped pair")->check(CLI::ExistingFile);
  reg->add_option("--name", ra.name, "Output file stem");

  FuseArgs fa;
  auto* fu = app.add_subcommand("fuse", "Joint label fusion of warped atlases");
  fu->add_option("--target", fa.target, "Target image")->check(CLI::ExistingFile);
  fu->add_option("--atlas", fa.atlases, "Warped atlas as IMAGE:LABELS (repeat)")->required();
  fu->add_option("--keep-label", fa.keep_label, "Also write mask.nii.gz for this fused label");
  fu->add_flag("--majority", fa.majority, "Unweighted majority vote instead");

  RefineArgs rf;
  auto* re = app.add_subcommand("refine", "Cleanup, level set and collision resolution");
  re->add_option("--intensity", rf.intensity, "Full target image")->required()->check(CLI::ExistingFile);
  re->add_option("--mask", rf.masks, "Vertebra mask as LABEL:PATH on a crop of the target (repeat)")->required();
  re->add_option("--order", rf.order, "levelset_then_collisions|collisions_then_levelset");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Dice, ASD, volume and density report");
  ev->add_option("--gt", ea.gt, "Ground-truth labels")->check(CLI::ExistingFile);
  ev->add_option("--seg", ea.seg, "Segmentation labels")->check(CLI::ExistingFile);
  ev->add_option("--intensity", ea.intensity, "Image for density")->check(CLI::ExistingFile);
  ev->add_option("--labels", ea.labels, "Labels to evaluate (default: all ground-truth labels)");
  ev->add_option("--case-id", ea.case_id, "Case id for --gt/--seg rows");
  ev->add_option("--cases", ea.cases, "JSON list of cases with per-vertebra tags")->check(CLI::ExistingFile);
  ev->add_option("--group-by", ea.group_by, "Tag, 'case' or 'vertebra' to group the report by");
  ev->add_flag("--symmetric", ea.symmetric, "Symmetric surface distance");

  PhantomArgs pa;
  auto* ph = app.add_subcommand("phantom", "Synthetic spine phantom");
  ph->add_option("--vertebrae", pa.n_vertebrae, "Number of vertebrae")->check(CLI::PositiveNumber);
  ph->add_option("--height-scale", pa.height_scale, "Per-vertebra height factors in (0, 1]");
  ph->add_option("--dims", pa.dims, "Grid size NX NY NZ")->expected(3);
  ph->add_option("--noise-sd", pa.noise_sd, "Gaussian noise SD in HU")->check(CLI::NonNegativeNumber);
  ph->add_option("--deform", pa.deform, "Also write a deformed copy: translation|affine|smooth_ffd");
  ph->add_option("--magnitude", pa.magnitude, "Deformation magnitude in mm")->check(CLI::NonNegativeNumber);

  auto* run = app.add_subcommand("run", "Full pipeline from a manifest");
  app.add_subcommand("pipeline", "Alias of run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  spdlog::set_level(spdlog::level::from_str(g.log_level));
  try {
    configure_workers(g);
    if (reg->parsed()) cmd_register(g, ra);
    else if (fu->parsed()) cmd_fuse(g, fa);
    else if (re->parsed()) cmd_refine(g, rf);
    else if (ev->parsed()) cmd_evaluate(g, ea);
    else if (ph->parsed()) cmd_phantom(g, pa);
    else if (run->parsed() || app.got_subcommand("pipeline")) cmd_run(g);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for more information.\n";
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
