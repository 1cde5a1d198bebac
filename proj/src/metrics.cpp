#include "lesion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lesion/errors.hpp"

namespace lesion {

namespace {

template <typename A, typename B>
double dice_counts(const A& a, const B& b, std::size_t n, auto&& in_a, auto&& in_b) {
  std::size_t ca = 0, cb = 0, both = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool x = in_a(a, i), y = in_b(b, i);
    ca += x;
    cb += y;
    both += x && y;
  }
  if (ca + cb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(ca + cb);
}

}  // namespace

double dice(const Mask3& a, const Mask3& b) {
  if (!(a.dims() == b.dims())) throw ValidationError("dice: mask shapes differ");
  auto nz = [](const Mask3& m, std::size_t i) { return m.data()[i] != 0; };
  return dice_counts(a, b, a.size(), nz, nz);
}

double dice(const SliceMask& a, const SliceMask& b) {
  if (a.width != b.width || a.height != b.height) throw ValidationError("dice: mask shapes differ");
  auto nz = [](const SliceMask& m, std::size_t i) { return m.values[i] != 0; };
  return dice_counts(a, b, a.values.size(), nz, nz);
}

double dice_label(const Mask3& a, const Mask3& b, int label) {
  if (!(a.dims() == b.dims())) throw ValidationError("dice: mask shapes differ");
  return dice_counts(
      a, b, a.size(), [](const Mask3& m, std::size_t i) { return m.data()[i] != 0; },
      [label](const Mask3& m, std::size_t i) { return m.data()[i] == label; });
}

void MatchReport::merge(const MatchReport& o) {
  tp += o.tp;
  fn += o.fn;
  fp += o.fp;
  volumes += o.volumes;
  lesion_matched.insert(lesion_matched.end(), o.lesion_matched.begin(), o.lesion_matched.end());
  detection_label.insert(detection_label.end(), o.detection_label.begin(), o.detection_label.end());
}

MatchReport match_detections(std::span<const ScoredPoint> dets, const Mask3& truth) {
  int labels = 0;
  for (auto v : truth.data()) labels = std::max<int>(labels, v);
  MatchReport r;
  r.volumes = 1;
  r.lesion_matched.assign(static_cast<std::size_t>(labels), false);
  r.detection_label.assign(dets.size(), 0);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].center < dets[b].center;
  });

  const Dims3& d = truth.dims();
  for (std::size_t i : order) {
    const Index3 c = dets[i].center;
    int hit = 0;
    // Labels present within one voxel; the smallest unmatched one wins.
    for (int dz = -1; dz <= 1 && d.contains(c); ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const Index3 q{c.x + dx, c.y + dy, c.z + dz};
          if (!d.contains(q)) continue;
          const int l = truth[q];
          if (l > 0 && !r.lesion_matched[l - 1] && (hit == 0 || l < hit)) hit = l;
        }
      }
    }
    if (hit > 0) {
      r.lesion_matched[hit - 1] = true;
      r.detection_label[i] = hit;
      ++r.tp;
    } else {
      ++r.fp;
    }
  }
  r.fn = static_cast<std::size_t>(std::count(r.lesion_matched.begin(), r.lesion_matched.end(), false));
  return r;
}

double SegReport::mean() const {
  if (dice.empty()) return 0.0;
  return std::accumulate(dice.begin(), dice.end(), 0.0) / static_cast<double>(dice.size());
}

double SegReport::stddev() const {
  if (dice.size() < 2) return 0.0;
  const double m = mean();
  double s = 0.0;
  for (double v : dice) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(dice.size()));
}

}  // namespace lesion
