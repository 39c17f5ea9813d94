#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace vmaseg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Index3 = std::array<int, 3>;
using Label = std::uint8_t;

/// Base exception for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Axis-aligned voxel grid: world = origin + index * spacing (component-wise).
struct GridGeometry {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  void validate() const;

  [[nodiscard]] std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  [[nodiscard]] double voxel_volume() const { return spacing.prod(); }

  [[nodiscard]] std::size_t linear(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }
  [[nodiscard]] Index3 unravel(std::size_t idx) const {
    const int i = static_cast<int>(idx % dims[0]);
    idx /= dims[0];
    const int j = static_cast<int>(idx % dims[1]);
    return {i, j, static_cast<int>(idx / dims[1])};
  }
  [[nodiscard]] bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }

  [[nodiscard]] Vec3 to_world(int i, int j, int k) const {
    return origin + Vec3(i, j, k).cwiseProduct(spacing);
  }
  [[nodiscard]] Vec3 to_world(const Vec3& index) const {
    return origin + index.cwiseProduct(spacing);
  }
  [[nodiscard]] Vec3 to_index(const Vec3& world) const {
    return (world - origin).cwiseQuotient(spacing);
  }
  /// World coordinates of the last voxel center.
  [[nodiscard]] Vec3 extent_max() const {
    return to_world(dims[0] - 1, dims[1] - 1, dims[2] - 1);
  }

  bool operator==(const GridGeometry& other) const {
    return dims == other.dims && spacing == other.spacing && origin == other.origin;
  }
};

/// Inclusive voxel index bounds.
struct BoundingBox {
  Index3 min_index{0, 0, 0};
  Index3 max_index{0, 0, 0};

  [[nodiscard]] bool valid() const {
    return min_index[0] <= max_index[0] && min_index[1] <= max_index[1] &&
           min_index[2] <= max_index[2];
  }
  /// Intersection with the grid; invalid() if empty.
  [[nodiscard]] BoundingBox clamped(const GridGeometry& geom) const;
  [[nodiscard]] BoundingBox expanded(const Index3& margin) const;
  [[nodiscard]] BoundingBox united(const BoundingBox& other) const;
  [[nodiscard]] std::size_t voxel_count() const {
    return valid() ? static_cast<std::size_t>(max_index[0] - min_index[0] + 1) *
                         (max_index[1] - min_index[1] + 1) *
                         (max_index[2] - min_index[2] + 1)
                   : 0;
  }
  static BoundingBox full(const GridGeometry& geom) {
    return {{0, 0, 0}, {geom.dims[0] - 1, geom.dims[1] - 1, geom.dims[2] - 1}};
  }
  bool operator==(const BoundingBox&) const = default;
};

template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;
  explicit Volume(const GridGeometry& geometry, T fill = T{})
      : geometry_(geometry), data_((geometry.validate(), geometry.voxel_count()), fill) {}
  Volume(const GridGeometry& geometry, std::vector<T> data)
      : geometry_(geometry), data_(std::move(data)) {
    geometry_.validate();
    if (data_.size() != geometry_.voxel_count()) {
      throw Error("volume data length does not match grid dimensions");
    }
  }

  [[nodiscard]] const GridGeometry& geometry() const { return geometry_; }
  [[nodiscard]] const Index3& dims() const { return geometry_.dims; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  T& operator()(int i, int j, int k) { return data_[geometry_.linear(i, j, k)]; }
  const T& operator()(int i, int j, int k) const { return data_[geometry_.linear(i, j, k)]; }
  T& operator[](std::size_t idx) { return data_[idx]; }
  const T& operator[](std::size_t idx) const { return data_[idx]; }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] const std::vector<T>& values() const { return data_; }

  bool operator==(const Volume& other) const {
    return geometry_ == other.geometry_ && data_ == other.data_;
  }

 private:
  GridGeometry geometry_;
  std::vector<T> data_;
};

using ScalarVolume = Volume<double>;
using LabelVolume = Volume<Label>;

/// A point map from target world space to source world space.
using PointMap = std::function<Vec3(const Vec3&)>;

/// Trilinear interpolation at a world point; 0 outside the voxel-center hull.
double trilinear_sample(const ScalarVolume& vol, const Vec3& p);

/// Trilinear interpolation in index coordinates. Returns false (value 0,
/// gradient 0) outside the grid. The gradient is with respect to index
/// coordinates; at exact grid nodes the two one-sided slopes are averaged.
bool trilinear_index(const ScalarVolume& vol, const Vec3& idx, double& value, Vec3* gradient);

/// Label of the nearest voxel center (ties to the lowest index); 0 outside.
Label nearest_sample(const LabelVolume& vol, const Vec3& p);

ScalarVolume crop(const ScalarVolume& vol, const BoundingBox& box, const Index3& margin);
LabelVolume crop(const LabelVolume& vol, const BoundingBox& box, const Index3& margin);

/// Pull-back resampling: out(x) = sample(src, map(x)) at every target voxel center.
ScalarVolume resample(const ScalarVolume& src, const GridGeometry& target, const PointMap& map);
LabelVolume resample(const LabelVolume& src, const GridGeometry& target, const PointMap& map);

/// Separable Gaussian smoothing, sigma in voxels per axis, mirrored borders.
ScalarVolume gaussian_smooth(const ScalarVolume& vol, const Vec3& sigma_voxels);

/// Scalar path: Gaussian (sigma = 0.5 * factor voxels) then decimation.
ScalarVolume downsample(const ScalarVolume& vol, const Index3& factor);
/// Label path: nearest decimation.
LabelVolume downsample(const LabelVolume& vol, const Index3& factor);

/// Geometry of the decimated grid (shared by both downsample paths).
GridGeometry decimated_geometry(const GridGeometry& geom, const Index3& factor);

/// Bounding box of voxels carrying `label`; invalid() when absent.
BoundingBox label_bounds(const LabelVolume& vol, Label label);

/// Ascending list of distinct labels present (including 0 when present).
std::vector<Label> label_set(const LabelVolume& vol);

}  // namespace vmaseg
