#include "vmaseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <memory>
#include <string>

#include <Eigen/Geometry>

namespace vmaseg::nifti {

namespace {

#pragma pack(push, 1)
struct Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348);

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

void read_exact(gzFile f, void* dst, std::size_t bytes, const std::filesystem::path& path) {
  auto* out = static_cast<char*>(dst);
  while (bytes > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw Error("nifti: truncated file " + path.string());
    out += got;
    bytes -= static_cast<std::size_t>(got);
  }
}

struct RawImage {
  GridGeometry geometry;
  std::vector<double> values;  // scaled, in file voxel order after flips
  bool integral = false;
};

// Converts the stored orientation into axis-aligned geometry; flips[a] is
// set when axis a runs against world +a.
GridGeometry decode_geometry(const Header& h, std::array<bool, 3>& flips,
                             const std::filesystem::path& path) {
  GridGeometry g;
  for (int a = 0; a < 3; ++a) g.dims[a] = std::max<int>(1, h.dim[a + 1]);
  Mat3 m = Mat3::Zero();
  Vec3 offset = Vec3::Zero();
  if (h.sform_code > 0) {
    const float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m(r, c) = rows[r][c];
      offset[r] = rows[r][3];
    }
  } else if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const Mat3 rot = Eigen::Quaterniond(a, b, c, d).toRotationMatrix();
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    const Vec3 scale(h.pixdim[1], h.pixdim[2], h.pixdim[3] * qfac);
    m = rot * scale.asDiagonal();
    offset = Vec3(h.qoffset_x, h.qoffset_y, h.qoffset_z);
  } else {
    m = Vec3(h.pixdim[1], h.pixdim[2], h.pixdim[3]).asDiagonal();
  }
  const double tol = 1e-5 * std::max(1.0, m.cwiseAbs().maxCoeff());
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (r != c && std::abs(m(r, c)) > tol) {
        throw Error("nifti: non-axis-aligned orientation rejected in " + path.string());
      }
  for (int a = 0; a < 3; ++a) {
    const double s = m(a, a);
    if (!(std::abs(s) > 0.0) || !std::isfinite(s)) {
      throw Error("nifti: invalid voxel spacing in " + path.string());
    }
    flips[a] = s < 0.0;
    g.spacing[a] = std::abs(s);
    // A flipped axis starts at the far end in world coordinates.
    g.origin[a] = flips[a] ? offset[a] + s * (g.dims[a] - 1) : offset[a];
  }
  return g;
}

template <typename T>
void convert(const std::vector<char>& bytes, std::vector<double>& out) {
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(v);
  }
}

RawImage read_raw(const std::filesystem::path& path) {
  GzHandle file(gzopen(path.string().c_str(), "rb"));
  if (!file) throw Error("nifti: cannot open " + path.string());
  Header h{};
  read_exact(file.get(), &h, sizeof(h), path);
  if (h.sizeof_hdr != 348) {
    throw Error("nifti: not a little-endian NIfTI-1 file: " + path.string());
  }
  if (std::strncmp(h.magic, "n+1", 4) != 0) {
    throw Error("nifti: only single-file (n+1) volumes are supported: " + path.string());
  }
  if (h.dim[0] < 1 || h.dim[0] > 7) throw Error("nifti: bad dim[0] in " + path.string());
  for (int a = 4; a <= h.dim[0]; ++a)
    if (h.dim[a] > 1) throw Error("nifti: volumes with more than 3 dimensions are not supported");

  std::array<bool, 3> flips{};
  RawImage raw;
  raw.geometry = decode_geometry(h, flips, path);
  raw.geometry.validate();

  const std::size_t offset = static_cast<std::size_t>(h.vox_offset);
  if (offset < sizeof(h)) throw Error("nifti: bad vox_offset in " + path.string());
  std::vector<char> skip(offset - sizeof(h));
  if (!skip.empty()) read_exact(file.get(), skip.data(), skip.size(), path);

  const std::size_t n = raw.geometry.voxel_count();
  std::size_t elem = 0;
  switch (h.datatype) {
    case kUInt8: case kInt8: elem = 1; break;
    case kInt16: case kUInt16: elem = 2; break;
    case kInt32: case kUInt32: case kFloat32: elem = 4; break;
    case kFloat64: elem = 8; break;
    default: throw Error("nifti: unsupported datatype " + std::to_string(h.datatype));
  }
  std::vector<char> bytes(n * elem);
  read_exact(file.get(), bytes.data(), bytes.size(), path);

  std::vector<double> values(n);
  raw.integral = true;
  switch (h.datatype) {
    case kUInt8: convert<std::uint8_t>(bytes, values); break;
    case kInt8: convert<std::int8_t>(bytes, values); break;
    case kInt16: convert<std::int16_t>(bytes, values); break;
    case kUInt16: convert<std::uint16_t>(bytes, values); break;
    case kInt32: convert<std::int32_t>(bytes, values); break;
    case kUInt32: convert<std::uint32_t>(bytes, values); break;
    case kFloat32: convert<float>(bytes, values); raw.integral = false; break;
    case kFloat64: convert<double>(bytes, values); raw.integral = false; break;
  }
  const double slope = h.scl_slope;
  const double inter = h.scl_inter;
  if (slope != 0.0 && std::isfinite(slope) && !(slope == 1.0 && inter == 0.0)) {
    raw.integral = false;
    for (auto& v : values) v = v * slope + inter;
  }

  const auto& d = raw.geometry.dims;
  raw.values.resize(n);
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i) {
        const int si = flips[0] ? d[0] - 1 - i : i;
        const int sj = flips[1] ? d[1] - 1 - j : j;
        const int sk = flips[2] ? d[2] - 1 - k : k;
        raw.values[raw.geometry.linear(i, j, k)] = values[raw.geometry.linear(si, sj, sk)];
      }
  return raw;
}

Header make_header(const GridGeometry& g, std::int16_t datatype, std::int16_t bitpix) {
  Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    if (g.dims[a] > std::numeric_limits<std::int16_t>::max()) {
      throw Error("nifti: dimension too large for NIfTI-1");
    }
    h.dim[a + 1] = static_cast<std::int16_t>(g.dims[a]);
  }
  for (int a = 4; a < 8; ++a) h.dim[a] = 1;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.pixdim[0] = 1.0f;
  for (int a = 0; a < 3; ++a) h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.qform_code = 1;
  h.sform_code = 1;
  h.qoffset_x = static_cast<float>(g.origin[0]);
  h.qoffset_y = static_cast<float>(g.origin[1]);
  h.qoffset_z = static_cast<float>(g.origin[2]);
  float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
  for (int r = 0; r < 3; ++r) {
    rows[r][r] = static_cast<float>(g.spacing[r]);
    rows[r][3] = static_cast<float>(g.origin[r]);
  }
  std::strncpy(h.descrip, "vmaseg", sizeof(h.descrip));
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

bool has_gz_suffix(const std::filesystem::path& path) { return path.extension() == ".gz"; }

void write_raw(const std::filesystem::path& path, const Header& h, const void* data,
               std::size_t bytes) {
  const char extension[4] = {0, 0, 0, 0};
  if (has_gz_suffix(path)) {
    GzHandle file(gzopen(path.string().c_str(), "wb"));
    if (!file) throw Error("nifti: cannot write " + path.string());
    const auto put = [&](const void* p, std::size_t n) {
      if (n > 0 && gzwrite(file.get(), p, static_cast<unsigned>(n)) != static_cast<int>(n)) {
        throw Error("nifti: write failed for " + path.string());
      }
    };
    put(&h, sizeof(h));
    put(extension, sizeof(extension));
    put(data, bytes);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("nifti: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(&h), sizeof(h));
  out.write(extension, sizeof(extension));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("nifti: write failed for " + path.string());
}

}  // namespace

ScalarVolume read_scalar(const std::filesystem::path& path) {
  RawImage raw = read_raw(path);
  for (double v : raw.values)
    if (!std::isfinite(v)) throw Error("nifti: non-finite intensity in " + path.string());
  return ScalarVolume(raw.geometry, std::move(raw.values));
}

LabelVolume read_labels(const std::filesystem::path& path) {
  const RawImage raw = read_raw(path);
  std::vector<Label> labels(raw.values.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = raw.values[i];
    if (v < 0.0 || v > 255.0 || v != std::round(v)) {
      throw Error("nifti: label volume holds non-label value in " + path.string());
    }
    labels[i] = static_cast<Label>(v);
  }
  return LabelVolume(raw.geometry, std::move(labels));
}

ScalarVolume quantize_int16(const ScalarVolume& vol) {
  ScalarVolume out = vol;
  for (auto& v : out.data()) {
    const double r = std::round(v);
    if (!(r >= std::numeric_limits<std::int16_t>::min() &&
          r <= std::numeric_limits<std::int16_t>::max())) {
      throw Error("nifti: intensity outside int16 range");
    }
    v = r;
  }
  return out;
}

void write_scalar(const std::filesystem::path& path, const ScalarVolume& vol) {
  const ScalarVolume q = quantize_int16(vol);
  std::vector<std::int16_t> data(q.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<std::int16_t>(q[i]);
  write_raw(path, make_header(vol.geometry(), kInt16, 16), data.data(), data.size() * 2);
}

void write_float(const std::filesystem::path& path, const ScalarVolume& vol) {
  std::vector<float> data(vol.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(vol[i]);
  write_raw(path, make_header(vol.geometry(), kFloat32, 32), data.data(), data.size() * 4);
}

void write_image(const std::filesystem::path& path, const ScalarVolume& vol) {
  const bool integral = std::all_of(vol.data().begin(), vol.data().end(), [](double v) {
    return v == std::round(v) && v >= std::numeric_limits<std::int16_t>::min() &&
           v <= std::numeric_limits<std::int16_t>::max();
  });
  if (integral) {
    write_scalar(path, vol);
  } else {
    write_float(path, vol);
  }
}

GridGeometry storable(const GridGeometry& g) {
  GridGeometry out = g;
  for (int a = 0; a < 3; ++a) {
    out.spacing[a] = static_cast<float>(g.spacing[a]);
    out.origin[a] = static_cast<float>(g.origin[a]);
  }
  return out;
}

void write_labels(const std::filesystem::path& path, const LabelVolume& vol) {
  write_raw(path, make_header(vol.geometry(), kUInt8, 8), vol.data().data(), vol.size());
}

}  // namespace vmaseg::nifti
