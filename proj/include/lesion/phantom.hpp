#pragma once

// Deterministic synthetic CT-like volumes with exact lesion ground truth.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "lesion/volgrid.hpp"

namespace lesion {

/// Axis-aligned ellipsoid in voxel coordinates.
struct Ellipsoid {
  Vec3 center{};
  Vec3 radii{};

  /// Normalized radius squared of a voxel center; <= 1 means inside.
  double norm2(double x, double y, double z) const {
    const double dx = (x - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dz = (z - center[2]) / radii[2];
    return dx * dx + dy * dy + dz * dz;
  }
  bool contains(double x, double y, double z) const { return norm2(x, y, z) <= 1.0; }
  /// Voxel-space bounding box, clipped to `d`.
  BoxRegion bounds(const Dims3& d) const;
};

struct LesionSpec {
  Ellipsoid shape;
  double contrast_hu = 20.0;   // lesion sits this far below the organ mean
  double texture_sigma = 0.0;  // amplitude of the heterogeneity blobs
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims3 dims{96, 96, 40};
  Spacing3 spacing{};
  double background_hu = 40.0;
  double organ_hu = 60.0;
  std::optional<Ellipsoid> organ;
  std::vector<LesionSpec> lesions;
  double noise_sigma = 5.0;
  int node_count = 0;
};

struct GroundTruth {
  Mask3 mask;
  std::vector<BoxRegion> boxes;  // boxes[k-1] bounds label k
  std::optional<BoxRegion> organ_box;
};

struct Phantom {
  Volume3 volume;
  GroundTruth truth;
};

/// Samples the default phantom distribution (organ, 1-4 lesions, nodes, noise).
PhantomSpec default_phantom_spec(std::uint64_t seed);

/// Throws ValidationError when a lesion leaves the organ, lesions overlap,
/// or radii are below 2 voxels.
Phantom generate_phantom(const PhantomSpec& spec);

struct ManifestLesion {
  int label = 0;
  Index3 box_min;
  Index3 box_max;
  double contrast = 0.0;
  Vec3 radii{};
};

struct ManifestEntry {
  std::filesystem::path volume;
  std::filesystem::path mask;
  std::vector<ManifestLesion> lesions;
  std::optional<BoxRegion> organ_box;
};

using Manifest = std::vector<ManifestEntry>;

/// Writes `count` LSV1/LSM1 pairs plus manifest.json; child seed = seed + index.
Manifest generate_dataset(int count, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Paths in the returned entries are resolved against the manifest's directory.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

/// Rebuilds GroundTruth (mask + per-label boxes) from a manifest entry's mask file.
GroundTruth load_truth(const ManifestEntry& e);

/// Tight per-label boxes by scanning the mask; index k-1 holds label k.
std::vector<BoxRegion> label_boxes(const Mask3& mask);

}  // namespace lesion
