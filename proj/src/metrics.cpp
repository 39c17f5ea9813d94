#include "vmaseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <iomanip>
#include <set>
#include <sstream>

#include "vmaseg/distance.hpp"

namespace vmaseg {

namespace {

void require_same_grid(const GridGeometry& a, const GridGeometry& b) {
  if (!(a == b)) throw Error("metrics: masks do not share geometry");
}

}  // namespace

LabelVolume binary_mask(const LabelVolume& labels, Label label) {
  LabelVolume out(labels.geometry(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == label ? 1 : 0;
  return out;
}

double dice(const LabelVolume& gt, const LabelVolume& s) {
  require_same_grid(gt.geometry(), s.geometry());
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt[i] != 0, x = s[i] != 0;
    a += g;
    b += x;
    both += g && x;
  }
  if (a + b == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

SurfaceVoxelSet surface_voxels(const LabelVolume& mask) {
  const GridGeometry& g = mask.geometry();
  SurfaceVoxelSet out;
  static constexpr int kOffsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                         {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (mask(i, j, k) == 0) continue;
        for (const auto& o : kOffsets) {
          const int ni = i + o[0], nj = j + o[1], nk = k + o[2];
          if (g.contains(ni, nj, nk) && mask(ni, nj, nk) == 0) {
            out.points.push_back(g.to_world(i, j, k));
            out.voxels.push_back(g.linear(i, j, k));
            break;
          }
        }
      }
  return out;
}

namespace {

double directed_asd(const SurfaceVoxelSet& from, const SurfaceVoxelSet& to, const GridGeometry& g) {
  std::vector<char> seeds(g.voxel_count(), 0);
  for (auto v : to.voxels) seeds[v] = 1;
  const std::vector<double> d2 = squared_distance_transform(seeds, g, true);
  double sum = 0.0;
  for (auto v : from.voxels) sum += std::sqrt(d2[v]);
  return sum / static_cast<double>(from.voxels.size());
}

}  // namespace

double asd(const LabelVolume& gt, const LabelVolume& s, AsdMode mode) {
  require_same_grid(gt.geometry(), s.geometry());
  const SurfaceVoxelSet sg = surface_voxels(gt);
  const SurfaceVoxelSet ss = surface_voxels(s);
  if (sg.voxels.empty() || ss.voxels.empty()) {
    throw Error("asd: both masks need a non-empty surface");
  }
  const double forward = directed_asd(ss, sg, gt.geometry());
  if (mode == AsdMode::directed) return forward;
  return 0.5 * (forward + directed_asd(sg, ss, gt.geometry()));
}

VolumeDensity volume_and_density(const LabelVolume& mask, const ScalarVolume& intensity) {
  require_same_grid(mask.geometry(), intensity.geometry());
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0) continue;
    ++count;
    sum += intensity[i];
  }
  if (count == 0) throw Error("volume_and_density: empty mask has no density");
  return {static_cast<double>(count) * mask.geometry().voxel_volume() / 1000.0,
          sum / static_cast<double>(count)};
}

namespace {

// Undefined entries (NaN, e.g. the density of an empty segmentation) are skipped.
ColumnStats column(const std::vector<double>& all) {
  std::vector<double> v;
  for (double x : all)
    if (!std::isnan(x)) v.push_back(x);
  ColumnStats s;
  if (v.empty()) {
    s.mean = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string group_value(const EvalRow& row, const std::string& group_by) {
  if (group_by.empty()) return "all";
  if (group_by == "case") return row.case_id;
  if (group_by == "vertebra") return row.vertebra_id;
  const auto it = row.tags.find(group_by);
  if (it == row.tags.end()) {
    throw Error("report: row " + row.case_id + "/" + row.vertebra_id + " has no tag '" + group_by + "'");
  }
  return it->second;
}

std::string fmt(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string fmt_sd(const std::optional<double>& sd, int precision) {
  return sd ? fmt(*sd, precision) : std::string();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<GroupSummary> report(const std::vector<EvalRow>& rows, const std::string& group_by) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalRow*>> groups;
  for (const auto& row : rows) {
    const std::string key = group_value(row, group_by);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(&row);
  }
  std::vector<GroupSummary> out;
  for (const auto& key : order) {
    const auto& members = groups[key];
    std::vector<double> vol, den, dc, sd;
    for (const auto* r : members) {
      vol.push_back(r->volume_cm3);
      den.push_back(r->density_hu);
      dc.push_back(r->dice);
      sd.push_back(r->asd);
    }
    out.push_back({key, members.size(), column(vol), column(den), column(dc), column(sd)});
  }
  return out;
}

std::string report_csv(const std::vector<GroupSummary>& groups, const std::string& group_by) {
  std::ostringstream os;
  os << (group_by.empty() ? "group" : group_by)
     << ",count,volume_cm3_mean,volume_cm3_sd,density_hu_mean,density_hu_sd,dice_mean,dice_sd,"
        "asd_mm_mean,asd_mm_sd\n";
  for (const auto& g : groups) {
    os << csv_escape(g.group) << ',' << g.count << ',' << fmt(g.volume_cm3.mean, 4) << ','
       << fmt_sd(g.volume_cm3.sd, 4) << ',' << fmt(g.density_hu.mean, 2) << ','
       << fmt_sd(g.density_hu.sd, 2) << ',' << fmt(g.dice.mean, 3) << ',' << fmt_sd(g.dice.sd, 3)
       << ',' << fmt(g.asd.mean, 4) << ',' << fmt_sd(g.asd.sd, 4) << '\n';
  }
  return os.str();
}

std::string report_text(const std::vector<GroupSummary>& groups, const std::string& group_by) {
  const auto cell = [](const ColumnStats& s, int precision) {
    std::string out = fmt(s.mean, precision);
    if (s.sd) out += " (" + fmt(*s.sd, precision) + ")";
    return out;
  };
  std::vector<std::array<std::string, 6>> table;
  table.push_back({group_by.empty() ? "group" : group_by, "n", "Vol. cm3", "Den. HU", "DC %", "ASD mm"});
  for (const auto& g : groups) {
    table.push_back({g.group, std::to_string(g.count), cell(g.volume_cm3, 1), cell(g.density_hu, 0),
                     cell(g.dice, 1), cell(g.asd, 2)});
  }
  std::array<std::size_t, 6> width{};
  for (const auto& row : table)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c];
      os << (c + 1 < row.size() ? "  " : "\n");
    }
  }
  return os.str();
}

std::string rows_csv(const std::vector<EvalRow>& rows) {
  std::set<std::string> tag_names;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.tags) tag_names.insert(k);
  std::ostringstream os;
  os << "case,vertebra";
  for (const auto& t : tag_names) os << ',' << csv_escape(t);
  os << ",volume_cm3,density_hu,dice,asd_mm\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << csv_escape(r.case_id) << ',' << csv_escape(r.vertebra_id);
    for (const auto& t : tag_names) {
      const auto it = r.tags.find(t);
      os << ',' << (it == r.tags.end() ? std::string() : csv_escape(it->second));
    }
    os << ',' << r.volume_cm3 << ',' << r.density_hu << ',' << r.dice << ',' << r.asd << '\n';
  }
  return os.str();
}

}  // namespace vmaseg
