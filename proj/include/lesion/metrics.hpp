#pragma once

// Overlap metrics and detection-to-truth matching.

#include <cstddef>
#include <span>
#include <vector>

#include "lesion/image2d.hpp"
#include "lesion/volgrid.hpp"

namespace lesion {

/// 2|A and B| / (|A| + |B|) over nonzero voxels; 1 when both are empty.
/// Throws ValidationError on a shape mismatch.
double dice(const Mask3& a, const Mask3& b);
double dice(const SliceMask& a, const SliceMask& b);

/// Dice of (a != 0) against (b == label).
double dice_label(const Mask3& a, const Mask3& b, int label);

struct ScoredPoint {
  Index3 center;
  double score = 0.0;
};

struct MatchReport {
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  std::size_t volumes = 0;
  std::vector<bool> lesion_matched;  // per ground-truth label, label k at k-1
  std::vector<int> detection_label;  // matched label per input detection, 0 = FP

  double sensitivity() const { return tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0; }
  double fp_per_volume() const { return volumes ? static_cast<double>(fp) / volumes : 0.0; }
  /// Accumulates counts from another volume.
  void merge(const MatchReport& other);
};

/// Greedy by descending score (ties: smaller center first): a detection
/// matches the first unmatched label whose mask, dilated by one voxel
/// (26-neighborhood), contains its center.
MatchReport match_detections(std::span<const ScoredPoint> dets, const Mask3& truth);

struct SegReport {
  std::vector<double> dice;

  double mean() const;
  /// Population standard deviation; 0 for fewer than two entries.
  double stddev() const;
};

}  // namespace lesion
