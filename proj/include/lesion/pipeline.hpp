#pragma once

// Training routines for every model in the bundle and the evaluation run
// (detection, segmentation, matching, reports).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesion/bundle.hpp"
#include "lesion/metrics.hpp"
#include "lesion/phantom.hpp"

namespace lesion {

/// Loads every volume and ground truth listed in a manifest.
std::vector<Phantom> load_dataset(const Manifest& m);

/// `count` in-memory phantoms from the default distribution; child seed i is
/// derive_seed(seed, stream, i).
std::vector<Phantom> synth_dataset(int count, std::uint64_t seed, const std::string& stream);

struct DetectorTrainOptions {
  std::uint64_t seed = 0;
  int organ_pool_size = 300;
  int organ_rounds = 60;
  int haar_pool_size = 400;
  int haar_extent = 8;      // in-plane voxels; z extent follows the spacing
  int haar_rounds = 40;
  int ray_rounds = 40;
  int scorer_rounds = 60;
  double stage_recall = 0.99;
  int negatives_per_volume = 600;
  double core_radius = 0.7;     // normalized lesion radius of positive seeds
  double exclusion_radius = 1.5;  // seeds between core and this are unused
  int scorer_background = 100;    // extra cascade-rejected seeds per volume
  double scorer_min_dice = 0.5;   // rough segment vs lesion overlap of a positive
  DetectorConfig config;
};

struct DetectorTrainLog {
  std::size_t organ_positives = 0;
  std::size_t organ_negatives = 0;
  std::size_t cascade_positives = 0;
  std::size_t cascade_negatives = 0;
  std::vector<StageReport> stages;
  std::size_t scorer_positives = 0;
  std::size_t scorer_negatives = 0;
  std::vector<std::string> warnings;
};

/// Organ center and scale implied by a ground-truth organ box.
struct OrganTruth {
  Index3 center;
  double scale = 1.0;
};
OrganTruth organ_truth(const BoxRegion& organ_box, const Vec3& ref_radii);

OrganModels train_organ_models(std::span<const Phantom> data, const DetectorTrainOptions& opt,
                               DetectorTrainLog* log = nullptr);

/// Organ models, Haar pool, two-stage cascade and rough-segment scorer.
/// Throws ValidationError when the data holds no lesions or no organ boxes.
DetectorModels train_detector(std::span<const Phantom> data, const DetectorTrainOptions& opt,
                              DetectorTrainLog* log = nullptr);

struct CnnTrainOptions {
  std::uint64_t seed = 0;
  int contours_per_slice = 8;
  int empty_slices = 1;  // slices beyond each lesion's extent, per side
  SgdOptions sgd{12, 0.01, 0.9, 16, 0};
  NetSpec spec;
  SegmentConfig segment;
};

/// Contour-centered patches sampled around ground-truth lesions on the same
/// prepared slices segmentation uses, labeled by label_patch; slices without
/// lesion yield outside-far samples.
std::vector<PatchSample> cnn_patches(std::span<const Phantom> data, const CnnTrainOptions& opt);

TrainResult train_cnn(std::span<const Phantom> data, const CnnTrainOptions& opt);

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
  bool manual_init = false;  // feed ground-truth boxes instead of detections
};

struct VolumeEval {
  std::string id;
  StageCounts counts;
  bool organ_found = false;
  std::vector<Candidate> detections;
  MatchReport match;
  std::vector<double> dice;  // per true-positive lesion
  std::vector<int> dice_labels;
  std::vector<std::string> warnings;
};

struct EvalReport {
  std::uint64_t seed = 0;
  bool manual_init = false;
  MatchReport match;
  SegReport seg;
  std::vector<VolumeEval> volumes;
  DetectorConfig config;
  SegmentConfig segment;

  /// {detection, segmentation, config_echo, seed, volumes}.
  nlohmann::ordered_json to_json() const;
};

/// Throws ConfigError when the bundle has no CNN.
EvalReport run_pipeline(std::span<const Phantom> data, std::span<const std::string> ids,
                        const ModelBundle& bundle, const EvalOptions& opt = {});
EvalReport run_pipeline(const Manifest& m, const ModelBundle& bundle, const EvalOptions& opt = {});

}  // namespace lesion
