#include "lesion/texfeat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lesion/random.hpp"

namespace lesion {

bool HaarSpec::contrast_type() const {
  int sum = 0;
  for (const auto& b : boxes) sum += b.weight;
  return !boxes.empty() && sum == 0;
}

double eval_haar(const IntegralVolume& iv, const Index3& center, const HaarSpec& spec,
                 const Vec3& scale, bool* clipped) {
  const Dims3& d = iv.volume_dims();
  if (!d.contains(center)) throw BoundsError("Haar center outside volume");
  bool any_clipped = false;
  double value = 0.0;
  for (const auto& hb : spec.boxes) {
    BoxRegion b;
    b.min = {center.x + static_cast<int>(std::lround(hb.lo.x * scale[0])),
             center.y + static_cast<int>(std::lround(hb.lo.y * scale[1])),
             center.z + static_cast<int>(std::lround(hb.lo.z * scale[2]))};
    b.max = {center.x + static_cast<int>(std::lround(hb.hi.x * scale[0])),
             center.y + static_cast<int>(std::lround(hb.hi.y * scale[1])),
             center.z + static_cast<int>(std::lround(hb.hi.z * scale[2]))};
    const BoxRegion c = clip_box(b, d);
    if (!(c == b)) any_clipped = true;
    if (!c.valid()) continue;
    const double s = static_cast<double>(box_sum(iv, c));
    value += hb.weight * (spec.normalize ? s / static_cast<double>(c.voxel_count()) : s);
  }
  if (clipped) *clipped = any_clipped;
  return value;
}

namespace {

int axis_get(const Index3& p, int a) { return a == 0 ? p.x : (a == 1 ? p.y : p.z); }
void axis_set(Index3& p, int a, int v) { (a == 0 ? p.x : (a == 1 ? p.y : p.z)) = v; }

struct PoolSampler {
  Rng rng;
  int ext;
  int ext_z;

  int extent(int a) const { return a == 2 ? ext_z : ext; }

  // Random box with each side in [1, ext] fully inside [-ext, ext].
  HaarBox box(int weight) {
    HaarBox b;
    b.weight = weight;
    for (int a = 0; a < 3; ++a) {
      const int e = extent(a);
      const int size = uniform_int(rng, 1, std::max(1, e));
      const int lo = uniform_int(rng, -e, e - size + 1);
      axis_set(b.lo, a, lo);
      axis_set(b.hi, a, lo + size - 1);
    }
    return b;
  }

  bool fits(const HaarBox& b) const {
    for (int a = 0; a < 3; ++a) {
      if (axis_get(b.lo, a) < -extent(a) || axis_get(b.hi, a) > extent(a)) return false;
    }
    return true;
  }

  // Neighbor of `b` along axis `a`, same shape, shifted by its width.
  HaarBox adjacent(const HaarBox& b, int a, int weight) {
    HaarBox n = b;
    n.weight = weight;
    const int w = axis_get(b.hi, a) - axis_get(b.lo, a) + 1;
    axis_set(n.lo, a, axis_get(b.lo, a) + w);
    axis_set(n.hi, a, axis_get(b.hi, a) + w);
    return n;
  }

  HaarSpec draw() {
    for (;;) {
      HaarSpec s;
      const double kind = uniform(rng, 0.0, 1.0);
      const int axis = uniform_int(rng, 0, 2);
      if (kind < 0.20) {
        s.boxes.push_back(box(uniform_int(rng, 0, 1) ? 1 : -1));
      } else if (kind < 0.45) {
        const HaarBox a = box(1);
        s.boxes = {a, adjacent(a, axis, -1)};
      } else if (kind < 0.65) {
        // Center-surround: inner box roughly centered, outer grown by a margin.
        HaarBox inner;
        inner.weight = 1;
        HaarBox outer;
        outer.weight = -1;
        for (int a = 0; a < 3; ++a) {
          const int e = extent(a);
          const int half = uniform_int(rng, 0, std::max(0, e / 2));
          const int shift = uniform_int(rng, -1, 1);
          const int margin = uniform_int(rng, 1, std::max(1, e / 2));
          axis_set(inner.lo, a, -half + shift);
          axis_set(inner.hi, a, half + shift);
          axis_set(outer.lo, a, -half + shift - margin);
          axis_set(outer.hi, a, half + shift + margin);
        }
        s.boxes = {inner, outer};
      } else if (kind < 0.75) {
        const bool doubled = uniform_int(rng, 0, 1) == 1;
        s.boxes = {box(doubled ? 2 : 1), box(doubled ? -1 : 1)};
      } else if (kind < 0.90) {
        const HaarBox mid = box(2);
        HaarBox left = adjacent(mid, axis, -1);
        const int w = axis_get(mid.hi, axis) - axis_get(mid.lo, axis) + 1;
        axis_set(left.lo, axis, axis_get(mid.lo, axis) - w);
        axis_set(left.hi, axis, axis_get(mid.hi, axis) - w);
        s.boxes = {left, mid, adjacent(mid, axis, -1)};
      } else {
        s.boxes = {box(1), box(1), box(-1)};
      }
      bool ok = true;
      for (const auto& b : s.boxes) ok = ok && fits(b);
      if (ok) return s;
    }
  }
};

}  // namespace

std::vector<HaarSpec> sample_haar_pool(std::uint64_t seed, int pool_size, int max_extent,
                                       int max_extent_z) {
  if (pool_size < 1) throw ValidationError("pool_size must be >= 1");
  if (max_extent < 1) throw ValidationError("max_extent must be >= 1");
  if (max_extent_z < 0) max_extent_z = max_extent;
  max_extent_z = std::max(1, max_extent_z);
  PoolSampler sampler{Rng(derive_seed(seed, "haar.pool")), max_extent, max_extent_z};
  std::vector<HaarSpec> pool;
  pool.reserve(pool_size);
  for (int i = 0; i < pool_size; ++i) pool.push_back(sampler.draw());
  return pool;
}

// ---------------------------------------------------------------- GLCM

Glcm compute_glcm(const Image2DView& window, const Quantization& q, Offset2 offset) {
  if (window.width < 1 || window.height < 1) throw ValidationError("GLCM window is empty");
  if (q.levels < 2) throw ValidationError("GLCM needs at least 2 levels");
  const int g = q.levels;
  const double range = q.hi - q.lo;
  auto level = [&](double v) -> int {
    if (!(v >= q.lo && v <= q.hi)) return -1;
    if (range <= 0.0) return 0;
    return std::min(g - 1, static_cast<int>(std::floor((v - q.lo) / range * g)));
  };

  Glcm out{g, std::vector<double>(static_cast<std::size_t>(g) * g, 0.0), q, offset, false};
  double total = 0.0;
  for (int y = 0; y < window.height; ++y) {
    const int y2 = y + offset.dy;
    if (y2 < 0 || y2 >= window.height) continue;
    for (int x = 0; x < window.width; ++x) {
      const int x2 = x + offset.dx;
      if (x2 < 0 || x2 >= window.width) continue;
      const int a = level(window(x, y)), b = level(window(x2, y2));
      if (a < 0 || b < 0) continue;
      out.p[static_cast<std::size_t>(a) * g + b] += 1.0;
      out.p[static_cast<std::size_t>(b) * g + a] += 1.0;
      total += 2.0;
    }
  }
  if (total == 0.0) {
    out.uniform_fallback = true;
    std::fill(out.p.begin(), out.p.end(), 1.0 / (static_cast<double>(g) * g));
    return out;
  }
  for (double& v : out.p) v /= total;
  return out;
}

Haralick haralick(const Glcm& g) {
  Haralick h{0.0, 0.0};
  for (int i = 0; i < g.levels; ++i) {
    for (int j = 0; j < g.levels; ++j) {
      const double p = g(i, j);
      const double d = i - j;
      h.contrast += p * d * d;
      h.homogeneity += p / (1.0 + std::abs(d));
    }
  }
  return h;
}

Haralick window_texture(const Image2DView& window) {
  const auto [lo, hi] = std::minmax_element(window.values.begin(), window.values.end());
  const Quantization q{*lo, *hi, 32};
  const Haralick a = haralick(compute_glcm(window, q, {1, 0}));
  const Haralick b = haralick(compute_glcm(window, q, {0, 1}));
  return {0.5 * (a.contrast + b.contrast), 0.5 * (a.homogeneity + b.homogeneity)};
}

// ---------------------------------------------------------------- rays

const std::array<Vec3, kRayCount>& ray_directions() {
  static const std::array<Vec3, kRayCount> dirs = [] {
    std::array<Vec3, kRayCount> d{};
    d[0] = {1, 0, 0};
    d[1] = {-1, 0, 0};
    d[2] = {0, 1, 0};
    d[3] = {0, -1, 0};
    d[4] = {0, 0, 1};
    d[5] = {0, 0, -1};
    const double s = 1.0 / std::sqrt(3.0);
    for (int i = 0; i < 8; ++i) {
      d[6 + i] = {(i & 1) ? -s : s, (i & 2) ? -s : s, (i & 4) ? -s : s};
    }
    return d;
  }();
  return dirs;
}

namespace {

double grad_mag(const Volume3& v, const Index3& p) {
  const Vec3 g = gradient_at(v, p);
  return std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
}

Index3 step_point(const Index3& c, const Vec3& dir, double t) {
  return {c.x + static_cast<int>(std::lround(t * dir[0])),
          c.y + static_cast<int>(std::lround(t * dir[1])),
          c.z + static_cast<int>(std::lround(t * dir[2]))};
}

}  // namespace

RayFeatureVector ray_features(const Volume3& v, const Index3& center, int max_range) {
  if (!v.dims().contains(center)) throw BoundsError("ray center outside volume");
  if (max_range < 1) throw ValidationError("ray max_range must be >= 1");
  RayFeatureVector out;
  out.values.assign(kRayFeatureLength, 0.0);
  const Dims3& d = v.dims();

  for (int r = 0; r < kRayCount; ++r) {
    const Vec3& dir = ray_directions()[r];
    double best = -1.0;
    double hit_t = 0.0;
    Index3 hit = center;
    for (int t = 1; t <= max_range; ++t) {
      const Index3 p = step_point(center, dir, t);
      if (!d.contains(p)) break;
      const double m = grad_mag(v, p);
      if (m >= best) {
        best = m;
        hit_t = t;
        hit = p;
      }
    }
    out.hits[r] = hit;
    out.hit_distance[r] = hit_t;

    double* f = out.values.data() + static_cast<std::size_t>(r) * kFeaturesPerRay;
    f[0] = v[hit];
    double hu_sum = 0, hu_sq = 0, hu_min = std::numeric_limits<double>::max();
    double hu_max = std::numeric_limits<double>::lowest();
    double g_sum = 0, g_sq = 0;
    int n = 0;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const Index3 q{hit.x + dx, hit.y + dy, hit.z + dz};
          if (!d.contains(q)) continue;
          const double h = v[q];
          const double g = grad_mag(v, q);
          hu_sum += h;
          hu_sq += h * h;
          hu_min = std::min(hu_min, h);
          hu_max = std::max(hu_max, h);
          g_sum += g;
          g_sq += g * g;
          ++n;
        }
      }
    }
    const double hu_mean = hu_sum / n, g_mean = g_sum / n;
    f[1] = hu_mean;
    f[2] = std::sqrt(std::max(0.0, hu_sq / n - hu_mean * hu_mean));
    f[3] = hu_min;
    f[4] = hu_max;
    const Vec3 gh = gradient_at(v, hit);
    const double gm = std::sqrt(gh[0] * gh[0] + gh[1] * gh[1] + gh[2] * gh[2]);
    f[5] = gm;
    f[6] = g_mean;
    f[7] = std::sqrt(std::max(0.0, g_sq / n - g_mean * g_mean));
    f[8] = gm > 0 ? (gh[0] * dir[0] + gh[1] * dir[1] + gh[2] * dir[2]) / gm : 0.0;
    f[9] = hit_t;
    for (int k = 1; k <= 7; ++k) {
      const Index3 q = step_point(center, dir, hit_t * k / 8.0);
      f[9 + k] = v[q];
      f[16 + k] = grad_mag(v, q);
    }
  }
  return out;
}

}  // namespace lesion
