#pragma once

// Feature extraction: 3D Haar-like box features, GLCM/Haralick texture,
// and the 14-ray self-aligned feature vector.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lesion/image2d.hpp"
#include "lesion/volgrid.hpp"

namespace lesion {

// ---------------------------------------------------------------- Haar

/// One weighted box; offsets are relative to the candidate center, in voxels
/// at scale 1.
struct HaarBox {
  Index3 lo;
  Index3 hi;
  int weight = 1;  // one of +1, -1, +2, -2
};

struct HaarSpec {
  std::vector<HaarBox> boxes;
  bool normalize = true;

  /// Zero weight sum: invariant to a constant intensity offset.
  bool contrast_type() const;
};

/// Evaluates a Haar spec with per-axis scale factors. Boxes that extend past
/// the volume are clipped and `clipped` (if given) is set.
double eval_haar(const IntegralVolume& iv, const Index3& center, const HaarSpec& spec,
                 const Vec3& scale, bool* clipped = nullptr);

inline double eval_haar(const IntegralVolume& iv, const Index3& center, const HaarSpec& spec,
                        double scale = 1.0, bool* clipped = nullptr) {
  return eval_haar(iv, center, spec, Vec3{scale, scale, scale}, clipped);
}

/// Random 1-, 2- and 3-box specs; in-plane offsets stay within `max_extent`,
/// z offsets within `max_extent_z` (defaults to `max_extent`).
std::vector<HaarSpec> sample_haar_pool(std::uint64_t seed, int pool_size, int max_extent,
                                       int max_extent_z = -1);

// ---------------------------------------------------------------- GLCM

struct Quantization {
  double lo = 0.0;
  double hi = 1.0;
  int levels = 32;
};

struct Offset2 {
  int dx = 1;
  int dy = 0;
};


struct Glcm {
  int levels = 0;
  std::vector<double> p;  // levels x levels, symmetric, sums to 1
  Quantization quantization;
  Offset2 offset;
  bool uniform_fallback = false;  // no in-range pairs; p is uniform

  double operator()(int i, int j) const { return p[static_cast<std::size_t>(i) * levels + j]; }
};

Glcm compute_glcm(const Image2DView& window, const Quantization& q, Offset2 offset);

struct Haralick {
  double contrast = 0.0;
  double homogeneity = 1.0;
};

Haralick haralick(const Glcm& g);

/// Default texture descriptor: G = 32 levels over the window's own [min, max],
/// averaged over offsets (1,0) and (0,1).
Haralick window_texture(const Image2DView& window);

// ---------------------------------------------------------------- rays

inline constexpr int kRayCount = 14;
inline constexpr int kFeaturesPerRay = 24;
inline constexpr int kRayFeatureLength = kRayCount * kFeaturesPerRay;

/// 6 face directions followed by the 8 normalized cube diagonals.
const std::array<Vec3, kRayCount>& ray_directions();

struct RayFeatureVector {
  std::vector<double> values;        // kRayCount x kFeaturesPerRay, ray-major
  std::array<Index3, kRayCount> hits{};
  std::array<double, kRayCount> hit_distance{};
};

/// Per ray: [0] HU at hit, [1-4] mean/std/min/max HU of the 3x3x3 hit
/// neighborhood, [5] |grad| at hit, [6-7] mean/std |grad| in that
/// neighborhood, [8] cos(grad, ray), [9] hit distance, [10-16] HU at 7 points
/// evenly spaced from center to hit, [17-23] |grad| at the same points.
RayFeatureVector ray_features(const Volume3& v, const Index3& center, int max_range);

}  // namespace lesion
