#pragma once

// Organ localization and the cascaded lesion detector:
// ROI -> HU window -> Haar stage -> ray stage -> rough segment + score
// -> threshold -> NMS.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lesion/boost.hpp"
#include "lesion/texfeat.hpp"
#include "lesion/volgrid.hpp"

namespace lesion {

class OrganNotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { C0, C1, C2, C3, D };
const char* stage_name(Stage s);

inline constexpr int kRoughFeatureCount = 6;

struct RoughSegment {
  std::vector<Index3> voxels;  // region-grown blob, in growth order
  BoxRegion box;               // tight bounds of `voxels`
  std::size_t volume_voxels = 0;
  double mean_hu = 0.0;
  double std_hu = 0.0;
  double sphericity = 0.0;
  double boundary_gradient = 0.0;  // mean |grad| over blob surface voxels
  double shell_contrast = 0.0;     // shell mean minus blob mean
  Vec3 centroid{};

  /// volume, mean, std, sphericity, boundary gradient, contrast-to-shell.
  std::vector<double> features() const;
  /// Blob as a full-size mask (1 inside).
  Mask3 mask(const Dims3& d, const Spacing3& s) const;
};

struct Candidate {
  Index3 center;
  double score = 0.0;
  Stage stage = Stage::C0;
  std::optional<RoughSegment> rough;
  BoxRegion box;  // rough-segment extent once segmented
};

struct DetectorConfig {
  double tau = 0.5;
  double hu_lo = -100.0;
  double hu_hi = 200.0;
  int stride = 2;
  double nms_radius_mm = 10.0;
  int ray_range = 20;
  int rough_max_radius = 16;     // in-plane voxels; the cap is a physical ball
  double rough_floor_hu = 3.0;   // lower bound of the growth tolerance
  bool recenter = true;          // move candidates to their blob centroid

  /// Throws ValidationError on a non-finite or negative tau, stride < 1, ...
  void validate() const;
};

struct OrganROI {
  BoxRegion box;
  double score = 0.0;
  Index3 center;
  double scale = 1.0;
};

/// Two-step organ search: position at a fixed scale, then scale at the best
/// positions. Haar offsets are in normalized units spanning [-extent, extent]
/// and are stretched per axis by ref_radii * scale / extent.
struct OrganModels {
  std::vector<HaarSpec> pool;
  int extent = 10;
  Vec3 ref_radii{36.0, 32.0, 13.0};
  double position_scale = 0.9;
  std::vector<double> scales;  // searched in stage 2
  int grid_stride = 2;
  int top_k = 8;
  double box_margin = 1.15;
  StrongClassifier position;
  StrongClassifier scale;
};

struct DetectorModels {
  OrganModels organ;
  std::vector<HaarSpec> haar_pool;  // lesion-scale pool, voxel offsets
  std::vector<CascadeStage> cascade;  // extractors "haar" then "ray"
  StrongClassifier scorer;
  DetectorConfig config;

  /// Throws ConfigError when a model is missing or references features
  /// beyond its pool.
  void validate() const;
};

/// Haar rows for the organ search; only indices in `used` are evaluated,
/// the rest stay 0.
std::vector<double> organ_features(const IntegralVolume& iv, const Index3& center,
                                   const OrganModels& m, double scale,
                                   std::span<const int> used = {});

/// center +- (scale * ref_radii * box_margin + 2), clipped to the volume.
BoxRegion organ_roi_box(const Index3& center, double scale, const OrganModels& m, const Dims3& d);

/// Throws OrganNotFound when no grid position scores above 0.5.
OrganROI detect_organ_roi(const Volume3& v, const IntegralVolume& iv, const OrganModels& m);
OrganROI detect_organ_roi(const Volume3& v, const OrganModels& m);

/// Grid points (multiples of `stride`) inside the ROI with HU in the window.
std::vector<Candidate> seed_candidates(const Volume3& v, const BoxRegion& roi,
                                       const DetectorConfig& cfg);

/// Lesion-scale Haar features (unit scale, voxel offsets); only `used`
/// indices are evaluated when given.
std::vector<double> lesion_haar_features(const IntegralVolume& iv, const Index3& center,
                                         std::span<const HaarSpec> pool,
                                         std::span<const int> used = {});

/// Region growing on the 3x3x3 mean-smoothed volume: a voxel joins when
/// |smoothed - running mean| <= max(2 * running std, floor) and it lies in
/// the physical ball of max_radius in-plane voxels around the seed.
/// Throws ValidationError when the seed HU is outside the window.
RoughSegment rough_segment(const Volume3& v, const IntegralVolume& iv, const Index3& seed,
                           const DetectorConfig& cfg);
RoughSegment rough_segment(const Volume3& v, const Index3& seed, const DetectorConfig& cfg);

/// Throws ValidationError on a feature count other than kRoughFeatureCount.
double score_candidate(std::span<const double> rough_features, const StrongClassifier& scorer);

/// Greedy by descending score (ties: smaller (x, y, z) first); drops any
/// candidate within radius_mm of a kept one.
std::vector<Candidate> nms(std::vector<Candidate> cands, double radius_mm, const Spacing3& s);

struct StageCounts {
  std::size_t c0 = 0, c1 = 0, c2 = 0, c3 = 0, d = 0;
};

struct DetectionRun {
  std::optional<OrganROI> roi;  // empty when the organ was not found
  std::vector<Candidate> detections;
  StageCounts counts;
  std::vector<Candidate> c3;  // scored, thresholded, before NMS
};

/// Throws ConfigError on missing models.
DetectionRun detect_lesions(const Volume3& v, const DetectorModels& models,
                            const DetectorConfig& cfg);

struct DetectionRecord {
  Index3 center;
  BoxRegion box;
  double score = 0.0;
  std::string volume_id;
};

void write_detections(std::ostream& os, std::span<const DetectionRecord> dets);
/// Throws FormatError on malformed lines.
std::vector<DetectionRecord> read_detections(std::istream& is);

}  // namespace lesion
