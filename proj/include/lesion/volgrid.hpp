#pragma once

// Volumetric grids, LSV1/LSM1 file IO, integral volumes and gradients.
//
// Layout is x-fastest, then y, then z for every grid in the library.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "lesion/errors.hpp"

namespace lesion {

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
  friend auto operator<=>(const Index3&, const Index3&) = default;
};

struct Dims3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool contains(const Index3& p) const {
    return p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x < nx && p.y < ny && p.z < nz;
  }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

/// Millimeters per voxel along each axis.
struct Spacing3 {
  float sx = 0.894f;
  float sy = 0.894f;
  float sz = 2.5f;

  friend bool operator==(const Spacing3&, const Spacing3&) = default;
};

using Vec3 = std::array<double, 3>;

/// Dense 3D grid with physical spacing. Volume3 and Mask3 are the two
/// instantiations used throughout.
template <typename T>
class Grid3 {
 public:
  using value_type = T;

  Grid3() = default;
  Grid3(Dims3 dims, Spacing3 spacing, T fill = T{})
      : dims_(dims), spacing_(spacing) {
    validate_shape(dims, spacing);
    data_.assign(dims.count(), fill);
  }
  Grid3(Dims3 dims, Spacing3 spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    validate_shape(dims, spacing);
    if (data_.size() != dims.count()) {
      throw ValidationError("voxel count does not match dims");
    }
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t offset(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * static_cast<std::size_t>(dims_.ny) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(dims_.nx) +
           static_cast<std::size_t>(x);
  }

  T& operator()(int x, int y, int z) { return data_[offset(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[offset(x, y, z)]; }
  T& operator[](const Index3& p) { return (*this)(p.x, p.y, p.z); }
  const T& operator[](const Index3& p) const { return (*this)(p.x, p.y, p.z); }

  const T& at(const Index3& p) const {
    if (!dims_.contains(p)) throw BoundsError("voxel index outside grid");
    return (*this)[p];
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  static void validate_shape(const Dims3& d, const Spacing3& s) {
    if (d.nx < 1 || d.ny < 1 || d.nz < 1) {
      throw ValidationError("grid dims must be >= 1");
    }
    if (!(s.sx > 0.f) || !(s.sy > 0.f) || !(s.sz > 0.f)) {
      throw ValidationError("grid spacing must be > 0");
    }
  }

  Dims3 dims_{};
  Spacing3 spacing_{};
  std::vector<T> data_;
};

/// HU intensities.
using Volume3 = Grid3<std::int16_t>;
/// 0 = background, k >= 1 = lesion instance k.
using Mask3 = Grid3<std::uint8_t>;

/// Inclusive voxel box.
struct BoxRegion {
  Index3 min;
  Index3 max;

  bool valid() const { return min.x <= max.x && min.y <= max.y && min.z <= max.z; }
  bool within(const Dims3& d) const {
    return valid() && d.contains(min) && d.contains(max);
  }
  bool contains(const Index3& p) const {
    return p.x >= min.x && p.y >= min.y && p.z >= min.z && p.x <= max.x &&
           p.y <= max.y && p.z <= max.z;
  }
  std::int64_t voxel_count() const {
    return static_cast<std::int64_t>(max.x - min.x + 1) * (max.y - min.y + 1) *
           (max.z - min.z + 1);
  }
  friend bool operator==(const BoxRegion&, const BoxRegion&) = default;
};

/// Clip a box against the grid; returns an invalid box when disjoint.
BoxRegion clip_box(const BoxRegion& b, const Dims3& d);

/// Summed-volume table with a zero leading hyperplane on every axis.
class IntegralVolume {
 public:
  IntegralVolume() = default;
  explicit IntegralVolume(Dims3 volume_dims);

  /// Dims of the source volume (the table itself is one larger per axis).
  const Dims3& volume_dims() const { return dims_; }

  std::int64_t sum_at(int i, int j, int k) const {
    return sums_[(static_cast<std::size_t>(k) * (dims_.ny + 1) + j) * (dims_.nx + 1) + i];
  }
  std::int64_t& sum_ref(int i, int j, int k) {
    return sums_[(static_cast<std::size_t>(k) * (dims_.ny + 1) + j) * (dims_.nx + 1) + i];
  }

 private:
  Dims3 dims_{};
  std::vector<std::int64_t> sums_;
};

IntegralVolume build_integral(const Volume3& v);

/// Sum of voxels in `b` (inclusive) via 8-corner inclusion-exclusion.
std::int64_t box_sum(const IntegralVolume& iv, const BoxRegion& b);

/// Central differences inside, one-sided at faces. Units: HU per voxel.
Vec3 gradient_at(const Volume3& v, const Index3& p);

Volume3 read_volume(const std::filesystem::path& path);
void write_volume(const Volume3& v, const std::filesystem::path& path);
Mask3 read_mask(const std::filesystem::path& path);
void write_mask(const Mask3& m, const std::filesystem::path& path);

}  // namespace lesion
