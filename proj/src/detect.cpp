#include "lesion/detect.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <istream>
#include <ostream>

#include <json.hpp>

namespace lesion {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::C0: return "C0";
    case Stage::C1: return "C1";
    case Stage::C2: return "C2";
    case Stage::C3: return "C3";
    case Stage::D: return "D";
  }
  return "?";
}

void DetectorConfig::validate() const {
  if (!std::isfinite(tau) || tau < 0.0) throw ValidationError("tau must be finite and >= 0");
  if (stride < 1) throw ValidationError("stride must be >= 1");
  if (!(hu_lo <= hu_hi)) throw ValidationError("HU window is empty");
  if (!(nms_radius_mm >= 0.0)) throw ValidationError("NMS radius must be >= 0");
  if (ray_range < 1) throw ValidationError("ray range must be >= 1");
  if (rough_max_radius < 1) throw ValidationError("rough segment radius must be >= 1");
  if (!(rough_floor_hu >= 0.0)) throw ValidationError("rough segment floor must be >= 0");
}

void DetectorModels::validate() const {
  auto check = [](const StrongClassifier& c, std::size_t dim, const std::string& what) {
    if (c.stumps.empty()) throw ConfigError("missing model: " + what);
    if (c.max_feature_index() >= static_cast<int>(dim)) {
      throw ConfigError(what + " references a feature beyond its pool");
    }
  };
  if (organ.pool.empty()) throw ConfigError("missing model: organ Haar pool");
  if (organ.scales.empty()) throw ConfigError("organ model has no scales");
  check(organ.position, organ.pool.size(), "organ position classifier");
  check(organ.scale, organ.pool.size(), "organ scale classifier");
  if (cascade.empty()) throw ConfigError("missing model: detection cascade");
  for (const auto& st : cascade) {
    if (st.extractor == "haar") {
      if (haar_pool.empty()) throw ConfigError("missing model: lesion Haar pool");
      check(st.classifier, haar_pool.size(), "Haar cascade stage");
    } else if (st.extractor == "ray") {
      check(st.classifier, kRayFeatureLength, "ray cascade stage");
    } else {
      throw ConfigError("unknown cascade extractor '" + st.extractor + "'");
    }
  }
  check(scorer, kRoughFeatureCount, "rough-segment scorer");
}

// ---------------------------------------------------------------- organ

std::vector<double> organ_features(const IntegralVolume& iv, const Index3& center,
                                   const OrganModels& m, double scale, std::span<const int> used) {
  const Vec3 s{m.ref_radii[0] * scale / m.extent, m.ref_radii[1] * scale / m.extent,
               m.ref_radii[2] * scale / m.extent};
  std::vector<double> f(m.pool.size(), 0.0);
  if (used.empty()) {
    for (std::size_t i = 0; i < m.pool.size(); ++i) f[i] = eval_haar(iv, center, m.pool[i], s);
  } else {
    for (int i : used) f[static_cast<std::size_t>(i)] = eval_haar(iv, center, m.pool[i], s);
  }
  return f;
}

OrganROI detect_organ_roi(const Volume3& v, const OrganModels& m) {
  return detect_organ_roi(v, build_integral(v), m);
}

OrganROI detect_organ_roi(const Volume3& v, const IntegralVolume& iv, const OrganModels& m) {
  const Dims3& d = v.dims();
  const std::vector<int> pos_used = m.position.used_features();
  const std::vector<int> scale_used = m.scale.used_features();
  const int step = std::max(1, m.grid_stride);

  struct Hit {
    Index3 p;
    double score;
  };
  std::vector<Hit> hits;
  for (int z = 0; z < d.nz; z += step) {
    for (int y = 0; y < d.ny; y += step) {
      for (int x = 0; x < d.nx; x += step) {
        const Index3 p{x, y, z};
        const double s = score(m.position, organ_features(iv, p, m, m.position_scale, pos_used));
        if (s > 0.5) hits.push_back({p, s});
      }
    }
  }
  if (hits.empty()) throw OrganNotFound("organ not found: no position scores above 0.5");
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.p < b.p;
  });
  hits.resize(std::min<std::size_t>(hits.size(), static_cast<std::size_t>(std::max(1, m.top_k))));

  OrganROI best;
  best.score = -1.0;
  for (const Hit& h : hits) {
    for (double s : m.scales) {
      const double p = h.score * score(m.scale, organ_features(iv, h.p, m, s, scale_used));
      if (p > best.score) {
        best.score = p;
        best.center = h.p;
        best.scale = s;
      }
    }
  }
  best.box = organ_roi_box(best.center, best.scale, m, d);
  return best;
}

BoxRegion organ_roi_box(const Index3& center, double scale, const OrganModels& m, const Dims3& d) {
  BoxRegion box;
  int* lo[3] = {&box.min.x, &box.min.y, &box.min.z};
  int* hi[3] = {&box.max.x, &box.max.y, &box.max.z};
  const int c[3] = {center.x, center.y, center.z};
  for (int a = 0; a < 3; ++a) {
    const double half = scale * m.ref_radii[a] * m.box_margin + 2.0;
    *lo[a] = static_cast<int>(std::floor(c[a] - half));
    *hi[a] = static_cast<int>(std::ceil(c[a] + half));
  }
  return clip_box(box, d);
}

// ---------------------------------------------------------------- candidates

std::vector<Candidate> seed_candidates(const Volume3& v, const BoxRegion& roi,
                                       const DetectorConfig& cfg) {
  cfg.validate();
  std::vector<Candidate> out;
  const BoxRegion r = clip_box(roi, v.dims());
  if (!r.valid()) return out;
  auto first = [&](int lo) { return (lo + cfg.stride - 1) / cfg.stride * cfg.stride; };
  for (int z = first(r.min.z); z <= r.max.z; z += cfg.stride) {
    for (int y = first(r.min.y); y <= r.max.y; y += cfg.stride) {
      for (int x = first(r.min.x); x <= r.max.x; x += cfg.stride) {
        const double hu = v(x, y, z);
        if (hu >= cfg.hu_lo && hu <= cfg.hu_hi) out.push_back({{x, y, z}, 0.0, Stage::C0, {}, {}});
      }
    }
  }
  return out;
}

std::vector<double> lesion_haar_features(const IntegralVolume& iv, const Index3& center,
                                         std::span<const HaarSpec> pool, std::span<const int> used) {
  std::vector<double> f(pool.size(), 0.0);
  if (used.empty()) {
    for (std::size_t i = 0; i < pool.size(); ++i) f[i] = eval_haar(iv, center, pool[i]);
  } else {
    for (int i : used) f[static_cast<std::size_t>(i)] = eval_haar(iv, center, pool[i]);
  }
  return f;
}

// ---------------------------------------------------------------- rough segment

std::vector<double> RoughSegment::features() const {
  return {static_cast<double>(volume_voxels), mean_hu, std_hu, sphericity, boundary_gradient,
          shell_contrast};
}

Mask3 RoughSegment::mask(const Dims3& d, const Spacing3& s) const {
  Mask3 m(d, s);
  for (const Index3& p : voxels) m[p] = 1;
  return m;
}

RoughSegment rough_segment(const Volume3& v, const Index3& seed, const DetectorConfig& cfg) {
  return rough_segment(v, build_integral(v), seed, cfg);
}

RoughSegment rough_segment(const Volume3& v, const IntegralVolume& iv, const Index3& seed,
                           const DetectorConfig& cfg) {
  const Dims3& d = v.dims();
  if (!d.contains(seed)) throw BoundsError("rough segment seed outside volume");
  const double seed_hu = v[seed];
  if (seed_hu < cfg.hu_lo || seed_hu > cfg.hu_hi) {
    throw ValidationError("rough segment seed HU outside the window");
  }
  const Spacing3& sp = v.spacing();
  const double radius_mm = cfg.rough_max_radius * sp.sx;
  const int rad[3] = {static_cast<int>(std::floor(radius_mm / sp.sx)),
                      static_cast<int>(std::floor(radius_mm / sp.sy)),
                      static_cast<int>(std::floor(radius_mm / sp.sz))};

  // Local work grid: the ball's bounds plus a 2-voxel shell margin.
  const BoxRegion local = clip_box({{seed.x - rad[0] - 2, seed.y - rad[1] - 2, seed.z - rad[2] - 2},
                                    {seed.x + rad[0] + 2, seed.y + rad[1] + 2, seed.z + rad[2] + 2}},
                                   d);
  const int lx = local.max.x - local.min.x + 1, ly = local.max.y - local.min.y + 1;
  const int lz = local.max.z - local.min.z + 1;
  auto lidx = [&](const Index3& p) {
    return (static_cast<std::size_t>(p.z - local.min.z) * ly + (p.y - local.min.y)) * lx +
           (p.x - local.min.x);
  };
  // 0 untested, 1 in blob, 2 rejected
  std::vector<std::uint8_t> state(static_cast<std::size_t>(lx) * ly * lz, 0);

  auto in_ball = [&](const Index3& p) {
    const double dx = (p.x - seed.x) * sp.sx, dy = (p.y - seed.y) * sp.sy,
                 dz = (p.z - seed.z) * sp.sz;
    return dx * dx + dy * dy + dz * dz <= radius_mm * radius_mm;
  };
  auto smoothed = [&](const Index3& p) {
    const BoxRegion b = clip_box({{p.x - 1, p.y - 1, p.z - 1}, {p.x + 1, p.y + 1, p.z + 1}}, d);
    return static_cast<double>(box_sum(iv, b)) / static_cast<double>(b.voxel_count());
  };

  static constexpr int kN6[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  RoughSegment r;
  double sum = 0.0, sum2 = 0.0;
  auto accept = [&](const Index3& p, double s) {
    state[lidx(p)] = 1;
    r.voxels.push_back(p);
    sum += s;
    sum2 += s * s;
  };
  accept(seed, smoothed(seed));
  for (std::size_t head = 0; head < r.voxels.size(); ++head) {
    const Index3 p = r.voxels[head];
    for (const auto& o : kN6) {
      const Index3 q{p.x + o[0], p.y + o[1], p.z + o[2]};
      if (!d.contains(q) || !in_ball(q)) continue;
      std::uint8_t& st = state[lidx(q)];
      if (st != 0) continue;
      const double n = static_cast<double>(r.voxels.size());
      const double mean = sum / n;
      const double sd = std::sqrt(std::max(0.0, sum2 / n - mean * mean));
      const double s = smoothed(q);
      if (std::abs(s - mean) <= std::max(2.0 * sd, cfg.rough_floor_hu)) {
        accept(q, s);
      } else {
        st = 2;
      }
    }
  }

  // Smoothing pulls the outer layer toward the surroundings; one pass on raw
  // HU takes it back.
  {
    double rs = 0.0, rs2 = 0.0;
    for (const Index3& p : r.voxels) {
      rs += v[p];
      rs2 += static_cast<double>(v[p]) * v[p];
    }
    const double n0 = static_cast<double>(r.voxels.size());
    const double mean = rs / n0;
    const double tol = std::max(2.0 * std::sqrt(std::max(0.0, rs2 / n0 - mean * mean)), cfg.rough_floor_hu);
    const std::size_t grown = r.voxels.size();
    for (std::size_t i = 0; i < grown; ++i) {
      const Index3 p = r.voxels[i];
      for (const auto& o : kN6) {
        const Index3 q{p.x + o[0], p.y + o[1], p.z + o[2]};
        if (!d.contains(q) || !in_ball(q)) continue;
        std::uint8_t& st = state[lidx(q)];
        if (st == 1) continue;
        if (std::abs(v[q] - mean) <= tol) {
          st = 1;
          r.voxels.push_back(q);
        }
      }
    }
  }

  // Statistics on raw HU.
  const double n = static_cast<double>(r.voxels.size());
  r.volume_voxels = r.voxels.size();
  r.box = {r.voxels.front(), r.voxels.front()};
  double hs = 0.0, hs2 = 0.0, cx = 0.0, cy = 0.0, cz = 0.0;
  for (const Index3& p : r.voxels) {
    const double h = v[p];
    hs += h;
    hs2 += h * h;
    cx += p.x;
    cy += p.y;
    cz += p.z;
    r.box.min = {std::min(r.box.min.x, p.x), std::min(r.box.min.y, p.y), std::min(r.box.min.z, p.z)};
    r.box.max = {std::max(r.box.max.x, p.x), std::max(r.box.max.y, p.y), std::max(r.box.max.z, p.z)};
  }
  r.mean_hu = hs / n;
  r.std_hu = std::sqrt(std::max(0.0, hs2 / n - r.mean_hu * r.mean_hu));
  r.centroid = {cx / n, cy / n, cz / n};

  // Blob voxels over the grid points within its farthest-voxel radius.
  double rmax2 = 0.0;
  for (const Index3& p : r.voxels) {
    const double dx = (p.x - r.centroid[0]) * sp.sx, dy = (p.y - r.centroid[1]) * sp.sy,
                 dz = (p.z - r.centroid[2]) * sp.sz;
    rmax2 = std::max(rmax2, dx * dx + dy * dy + dz * dz);
  }
  const double rmax = std::sqrt(rmax2);
  auto lo = [&](int a, double sa) { return static_cast<int>(std::floor(r.centroid[a] - rmax / sa)); };
  auto hi = [&](int a, double sa) { return static_cast<int>(std::ceil(r.centroid[a] + rmax / sa)); };
  std::size_t enclosing = 0;
  for (int z = lo(2, sp.sz); z <= hi(2, sp.sz); ++z)
    for (int y = lo(1, sp.sy); y <= hi(1, sp.sy); ++y)
      for (int x = lo(0, sp.sx); x <= hi(0, sp.sx); ++x) {
        const double dx = (x - r.centroid[0]) * sp.sx, dy = (y - r.centroid[1]) * sp.sy,
                     dz = (z - r.centroid[2]) * sp.sz;
        enclosing += dx * dx + dy * dy + dz * dz <= rmax2 + 1e-9;
      }
  r.sphericity = n / static_cast<double>(enclosing);

  // Surface gradient and a two-voxel outer shell.
  double gsum = 0.0;
  std::size_t gcount = 0;
  std::vector<Index3> shell;
  for (const Index3& p : r.voxels) {
    bool surface = false;
    for (const auto& o : kN6) {
      const Index3 q{p.x + o[0], p.y + o[1], p.z + o[2]};
      if (!d.contains(q)) {
        surface = true;
        continue;
      }
      std::uint8_t& st = state[lidx(q)];
      if (st == 1) continue;
      surface = true;
      if (st != 3) {
        st = 3;
        shell.push_back(q);
      }
    }
    if (surface) {
      const Vec3 g = gradient_at(v, p);
      gsum += std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      ++gcount;
    }
  }
  const std::size_t first_layer = shell.size();
  for (std::size_t i = 0; i < first_layer; ++i) {
    const Index3 p = shell[i];
    for (const auto& o : kN6) {
      const Index3 q{p.x + o[0], p.y + o[1], p.z + o[2]};
      if (!local.contains(q)) continue;
      std::uint8_t& st = state[lidx(q)];
      if (st == 1 || st == 3) continue;
      st = 3;
      shell.push_back(q);
    }
  }
  r.boundary_gradient = gcount ? gsum / static_cast<double>(gcount) : 0.0;
  if (!shell.empty()) {
    double ss = 0.0;
    for (const Index3& p : shell) ss += v[p];
    r.shell_contrast = ss / static_cast<double>(shell.size()) - r.mean_hu;
  }
  return r;
}

double score_candidate(std::span<const double> rough_features, const StrongClassifier& scorer) {
  if (rough_features.size() != static_cast<std::size_t>(kRoughFeatureCount)) {
    throw ValidationError("rough feature vector must have 6 entries");
  }
  if (scorer.max_feature_index() >= kRoughFeatureCount) {
    throw ValidationError("scorer dimension does not match the rough features");
  }
  return score(scorer, rough_features);
}

// ---------------------------------------------------------------- NMS

std::vector<Candidate> nms(std::vector<Candidate> cands, double radius_mm, const Spacing3& s) {
  std::vector<std::size_t> order(cands.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    const Candidate &a = cands[i], &b = cands[j];
    return a.score != b.score ? a.score > b.score : a.center < b.center;
  });
  std::vector<Candidate> kept;
  for (std::size_t i : order) {
    Candidate& c = cands[i];
    bool suppressed = false;
    for (const auto& k : kept) {
      const double dx = (c.center.x - k.center.x) * s.sx, dy = (c.center.y - k.center.y) * s.sy,
                   dz = (c.center.z - k.center.z) * s.sz;
      if (dx * dx + dy * dy + dz * dz <= radius_mm * radius_mm) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(std::move(c));
  }
  return kept;
}

// ---------------------------------------------------------------- pipeline

DetectionRun detect_lesions(const Volume3& v, const DetectorModels& models,
                            const DetectorConfig& cfg) {
  models.validate();
  cfg.validate();
  DetectionRun run;
  const IntegralVolume iv = build_integral(v);
  try {
    run.roi = detect_organ_roi(v, iv, models.organ);
  } catch (const OrganNotFound&) {
    return run;
  }

  std::vector<Candidate> cands = seed_candidates(v, run.roi->box, cfg);
  run.counts.c0 = cands.size();

  std::vector<std::vector<int>> used;
  for (const auto& st : models.cascade) used.push_back(st.classifier.used_features());
  std::vector<Candidate> c2;
  for (Candidate& c : cands) {
    const CascadeDecision dec = apply_cascade(models.cascade, [&](std::size_t s) {
      if (models.cascade[s].extractor == "haar") {
        return lesion_haar_features(iv, c.center, models.haar_pool, used[s]);
      }
      return ray_features(v, c.center, cfg.ray_range).values;
    });
    if (dec.accepted || dec.stages_evaluated > 1) ++run.counts.c1;
    if (!dec.accepted) continue;
    c.stage = Stage::C2;
    c2.push_back(c);
  }
  run.counts.c2 = c2.size();

  for (Candidate& c : c2) {
    RoughSegment rs = rough_segment(v, iv, c.center, cfg);
    c.score = score_candidate(rs.features(), models.scorer);
    if (cfg.recenter) {
      const Index3 m{static_cast<int>(std::lround(rs.centroid[0])),
                     static_cast<int>(std::lround(rs.centroid[1])),
                     static_cast<int>(std::lround(rs.centroid[2]))};
      const double hu = v[m];
      if (std::find(rs.voxels.begin(), rs.voxels.end(), m) != rs.voxels.end() && hu >= cfg.hu_lo &&
          hu <= cfg.hu_hi) {
        c.center = m;
      }
    }
    c.box = rs.box;
    c.rough = std::move(rs);
    if (c.score >= cfg.tau) {
      c.stage = Stage::C3;
      run.c3.push_back(c);
    }
  }
  run.counts.c3 = run.c3.size();

  run.detections = nms(run.c3, cfg.nms_radius_mm, v.spacing());
  for (Candidate& c : run.detections) c.stage = Stage::D;
  run.counts.d = run.detections.size();
  return run;
}

// ---------------------------------------------------------------- JSON lines

void write_detections(std::ostream& os, std::span<const DetectionRecord> dets) {
  for (const auto& d : dets) {
    nlohmann::ordered_json j;
    j["center"] = {d.center.x, d.center.y, d.center.z};
    j["box_min"] = {d.box.min.x, d.box.min.y, d.box.min.z};
    j["box_max"] = {d.box.max.x, d.box.max.y, d.box.max.z};
    j["score"] = d.score;
    j["volume_id"] = d.volume_id;
    os << j.dump() << '\n';
  }
}

std::vector<DetectionRecord> read_detections(std::istream& is) {
  std::vector<DetectionRecord> out;
  std::string line;
  int lineno = 0;
  auto idx = [](const nlohmann::json& a) {
    return Index3{a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>()};
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DetectionRecord r;
      r.center = idx(j.at("center"));
      r.box = {idx(j.at("box_min")), idx(j.at("box_max"))};
      r.score = j.at("score").get<double>();
      r.volume_id = j.value("volume_id", std::string{});
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("detections line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lesion
