#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "lesion/detect.hpp"
#include "lesion/errors.hpp"
#include "lesion/phantom.hpp"
#include "lesion/pipeline.hpp"
#include "lesion/random.hpp"

using namespace lesion;

namespace {

const DetectorModels& trained() {
  static const DetectorModels m = [] {
    const auto train = synth_dataset(8, derive_seed(9, "train"), "train");
    DetectorTrainOptions o;
    o.seed = 9;
    return train_detector(train, o);
  }();
  return m;
}

PhantomSpec one_lesion(std::uint64_t seed, double cx) {
  PhantomSpec sp;
  sp.seed = seed;
  sp.noise_sigma = 5;
  sp.organ = Ellipsoid{{47.5, 47.5, 19.5}, {34, 30, 12}};
  LesionSpec l;
  l.shape = Ellipsoid{{cx, 52, 19}, {8, 8, 8 * 0.894 / 2.5}};
  l.contrast_hu = 40;
  sp.lesions = {l};
  return sp;
}

Phantom empty_volume(std::uint64_t seed) {
  PhantomSpec sp;
  sp.seed = seed;
  return generate_phantom(sp);
}

Volume3 iso_sphere(double r, double noise) {
  PhantomSpec s;
  s.seed = 3;
  s.dims = {48, 48, 48};
  s.spacing = {1.f, 1.f, 1.f};
  s.organ = Ellipsoid{{24, 24, 24}, {20, 20, 20}};
  LesionSpec l;
  l.shape = Ellipsoid{{24, 24, 24}, {r, r, r}};
  l.contrast_hu = 40;
  s.lesions = {l};
  s.noise_sigma = noise;
  return generate_phantom(s).volume;
}

Candidate cand(int x, int y, int z, double score) { return {{x, y, z}, score, Stage::C3, {}, {}}; }

double dist_mm(const Index3& a, const Index3& b, const Spacing3& s) {
  return std::hypot((a.x - b.x) * s.sx, (a.y - b.y) * s.sy, (a.z - b.z) * s.sz);
}

}  // namespace

TEST_CASE("config validation") {
  DetectorConfig c;
  CHECK_NOTHROW(c.validate());
  c.stride = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.tau = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.tau = -0.1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.tau = 1.01;  // allowed: an empty detection set
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("seed candidates keep the inclusive HU window") {
  Volume3 v(Dims3{5, 1, 1}, Spacing3{}, std::vector<std::int16_t>{-150, -100, 0, 200, 201});
  DetectorConfig cfg;
  cfg.stride = 1;
  const auto c = seed_candidates(v, {{0, 0, 0}, {4, 0, 0}}, cfg);
  REQUIRE(c.size() == 3);
  CHECK(v[c[0].center] == -100);
  CHECK(v[c[1].center] == 0);
  CHECK(v[c[2].center] == 200);
  for (const auto& k : c) CHECK(k.stage == Stage::C0);

  const Volume3 air(Dims3{20, 20, 10}, Spacing3{}, std::int16_t{-1000});
  CHECK(seed_candidates(air, {{0, 0, 0}, {19, 19, 9}}, DetectorConfig{}).empty());
}

TEST_CASE("stride 2 keeps about an eighth of the stride 1 grid") {
  const Phantom ph = generate_phantom(default_phantom_spec(31));
  const BoxRegion roi = *ph.truth.organ_box;
  DetectorConfig c1;
  c1.stride = 1;
  const auto a = seed_candidates(ph.volume, roi, c1);
  const auto b = seed_candidates(ph.volume, roi, DetectorConfig{});
  REQUIRE(!a.empty());
  const double ratio = double(b.size()) / double(a.size());
  CHECK(ratio > 0.1);
  CHECK(ratio < 0.16);
  // exact: the stride-2 grid is the all-even subset
  std::size_t even = 0;
  for (const auto& k : a) even += k.center.x % 2 == 0 && k.center.y % 2 == 0 && k.center.z % 2 == 0;
  CHECK(b.size() == even);
  for (const auto& k : b) CHECK(roi.contains(k.center));
}

TEST_CASE("rough segment of a voxelized sphere") {
  const Volume3 v = iso_sphere(8, 5);
  const RoughSegment r = rough_segment(v, {24, 24, 24}, DetectorConfig{});
  CHECK(std::abs(double(r.volume_voxels) - 2145.0) <= 0.25 * 2145.0);
  CHECK(r.volume_voxels == r.voxels.size());
  const Mask3 m = r.mask(v.dims(), v.spacing());
  std::size_t pop = 0;
  for (auto x : m.data()) pop += x;
  CHECK(pop == r.volume_voxels);
  CHECK(r.features().size() == kRoughFeatureCount);
  CHECK(r.shell_contrast > 20.0);
  CHECK(r.mean_hu == doctest::Approx(20.0).epsilon(0.1));
  for (const auto& p : r.voxels) CHECK(r.box.contains(p));
}

TEST_CASE("rough segment of a uniform volume fills the ball") {
  const Volume3 v(Dims3{48, 48, 48}, Spacing3{1.f, 1.f, 1.f}, std::int16_t{40});
  DetectorConfig cfg;
  cfg.rough_max_radius = 10;
  const RoughSegment r = rough_segment(v, {24, 24, 24}, cfg);
  std::size_t ball = 0;
  for (int z = 0; z < 48; ++z)
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x)
        ball += (x - 24) * (x - 24) + (y - 24) * (y - 24) + (z - 24) * (z - 24) <= 100;
  CHECK(r.volume_voxels == ball);
  CHECK(r.sphericity == doctest::Approx(1.0));
  CHECK(r.sphericity <= 1.0);
  CHECK(r.std_hu == 0.0);

  Volume3 hot = v;
  hot(24, 24, 24) = 500;
  CHECK_THROWS_AS(rough_segment(hot, {24, 24, 24}, cfg), ValidationError);
}

TEST_CASE("candidate scores") {
  const DetectorModels& m = trained();
  const Volume3 v = iso_sphere(8, 5);
  const auto f = rough_segment(v, {24, 24, 24}, DetectorConfig{}).features();
  const double p = score_candidate(f, m.scorer);
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
  CHECK(score_candidate(f, m.scorer) == p);
  CHECK_THROWS_AS(score_candidate(std::vector<double>(5, 1.0), m.scorer), ValidationError);
}

TEST_CASE("lesion seeds outscore background seeds on the training set") {
  const DetectorModels& m = trained();
  const auto data = synth_dataset(8, derive_seed(9, "train"), "train");
  Rng rng(5);
  double pos = 0, neg = 0;
  int np = 0, nn = 0;
  for (const Phantom& ph : data) {
    const IntegralVolume iv = build_integral(ph.volume);
    for (const BoxRegion& b : ph.truth.boxes) {
      const Index3 c{(b.min.x + b.max.x) / 2, (b.min.y + b.max.y) / 2, (b.min.z + b.max.z) / 2};
      pos += score_candidate(rough_segment(ph.volume, iv, c, m.config).features(), m.scorer);
      ++np;
    }
    const BoxRegion o = *ph.truth.organ_box;
    for (int k = 0; k < 10; ++k) {
      const Index3 c{uniform_int(rng, o.min.x, o.max.x), uniform_int(rng, o.min.y, o.max.y),
                     uniform_int(rng, o.min.z, o.max.z)};
      const double hu = ph.volume[c];
      if (ph.truth.mask[c] != 0 || hu < m.config.hu_lo || hu > m.config.hu_hi) continue;
      neg += score_candidate(rough_segment(ph.volume, iv, c, m.config).features(), m.scorer);
      ++nn;
    }
  }
  REQUIRE(np > 0);
  REQUIRE(nn > 0);
  CHECK(pos / np - neg / nn > 0.0);
}

TEST_CASE("nms examples") {
  const Spacing3 iso{1.f, 1.f, 1.f};
  auto kept = nms({cand(0, 0, 0, 0.8), cand(3, 0, 0, 0.9)}, 5.0, iso);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == 0.9);

  kept = nms({cand(0, 0, 0, 0.8), cand(20, 0, 0, 0.9)}, 5.0, iso);
  CHECK(kept.size() == 2);

  kept = nms({cand(5, 1, 0, 0.7), cand(5, 0, 0, 0.7)}, 5.0, iso);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].center == Index3{5, 0, 0});

  CHECK(nms({}, 5.0, iso).empty());
}

TEST_CASE("nms output is an independent set") {
  const Spacing3 s{};
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Candidate> in;
    for (int i = 0; i < 60; ++i)
      in.push_back(cand(uniform_int(rng, 0, 40), uniform_int(rng, 0, 40), uniform_int(rng, 0, 10),
                        std::round(uniform(rng, 0, 1) * 10) / 10));
    const double radius = 10.0;
    const auto kept = nms(in, radius, s);
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        CHECK(dist_mm(kept[i].center, kept[j].center, s) > radius);
    // every dropped candidate has a kept neighbor scoring at least as high
    for (const auto& c : in) {
      bool covered = false;
      for (const auto& k : kept)
        covered |= dist_mm(c.center, k.center, s) <= radius && k.score >= c.score;
      CHECK(covered);
    }
    std::vector<std::size_t> perm(in.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Candidate> shuffled;
    for (std::size_t i : perm) shuffled.push_back(in[i]);
    const auto again = nms(shuffled, radius, s);
    REQUIRE(again.size() == kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) CHECK(again[i].center == kept[i].center);
  }
}

TEST_CASE("organ localization") {
  const DetectorModels& m = trained();
  for (std::uint64_t s : {51, 52, 53}) {
    const Phantom ph = generate_phantom(default_phantom_spec(s));
    const OrganROI roi = detect_organ_roi(ph.volume, m.organ);
    const BoxRegion& o = *ph.truth.organ_box;
    const double cx = 0.5 * (o.min.x + o.max.x), cy = 0.5 * (o.min.y + o.max.y),
                 cz = 0.5 * (o.min.z + o.max.z);
    INFO("seed ", s);
    CHECK(std::abs(roi.center.x - cx) <= 5);
    CHECK(std::abs(roi.center.y - cy) <= 5);
    CHECK(std::abs(roi.center.z - cz) <= 5);
    CHECK(roi.box.valid());
    CHECK(clip_box(roi.box, ph.volume.dims()) == roi.box);
    CHECK(roi.score > 0.5);
  }
  const Phantom bg = empty_volume(3);
  CHECK_THROWS_AS(detect_organ_roi(bg.volume, m.organ), OrganNotFound);
  const DetectionRun run = detect_lesions(bg.volume, m, m.config);
  CHECK_FALSE(run.roi.has_value());
  CHECK(run.detections.empty());
}

TEST_CASE("one high-contrast lesion gives one detection inside it") {
  const DetectorModels& m = trained();
  for (int s = 0; s < 3; ++s) {
    const Phantom ph = generate_phantom(one_lesion(200 + s, 40.0 + 3 * s));
    const DetectionRun run = detect_lesions(ph.volume, m, m.config);
    INFO("seed ", 200 + s);
    REQUIRE(run.detections.size() == 1);
    const Candidate& d = run.detections[0];
    CHECK(ph.truth.mask[d.center] == 1);
    CHECK(d.stage == Stage::D);
    CHECK(d.score >= m.config.tau);
    CHECK(d.box.contains(d.center));
  }
}

TEST_CASE("detection runs keep the stage invariants") {
  const DetectorModels& m = trained();
  for (std::uint64_t s : {61, 62, 63, 64}) {
    const Phantom ph = generate_phantom(default_phantom_spec(s));
    DetectorConfig lo = m.config;
    lo.tau = 0.2;
    const DetectionRun a = detect_lesions(ph.volume, m, lo);
    const auto& c = a.counts;
    INFO("seed ", s);
    CHECK(c.c0 >= c.c1);
    CHECK(c.c1 >= c.c2);
    CHECK(c.c2 >= c.c3);
    CHECK(c.c3 >= c.d);
    for (const auto& d : a.detections) {
      CHECK(ph.volume[d.center] >= m.config.hu_lo);
      CHECK(ph.volume[d.center] <= m.config.hu_hi);
    }
    std::set<std::pair<Index3, double>> low;
    for (const auto& k : a.c3) low.insert({k.center, k.score});
    for (double tau : {0.5, 0.8, 0.95}) {
      DetectorConfig hi = m.config;
      hi.tau = tau;
      const DetectionRun b = detect_lesions(ph.volume, m, hi);
      for (const auto& k : b.c3) CHECK(low.count({k.center, k.score}) == 1);
      CHECK(b.counts.c2 == c.c2);
    }
    DetectorConfig none = m.config;
    none.tau = 1.01;
    CHECK(detect_lesions(ph.volume, m, none).detections.empty());
  }
  CHECK_THROWS_AS(detect_lesions(empty_volume(1).volume, DetectorModels{}, DetectorConfig{}),
                  ConfigError);
}

TEST_CASE("detections JSON lines round trip") {
  std::vector<DetectionRecord> recs{{{1, 2, 3}, {{0, 1, 2}, {4, 5, 6}}, 0.1 + 0.2, "vol_000"},
                                    {{7, 8, 9}, {{7, 8, 9}, {7, 8, 9}}, 0.987654321, "vol_001"}};
  std::stringstream ss;
  write_detections(ss, recs);
  std::istringstream in(ss.str());
  const auto back = read_detections(in);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].center == recs[i].center);
    CHECK(back[i].box == recs[i].box);
    CHECK(back[i].score == recs[i].score);
    CHECK(back[i].volume_id == recs[i].volume_id);
  }
  std::istringstream bad("{\"center\": [1, 2]}\n");
  CHECK_THROWS_AS(read_detections(bad), FormatError);
  std::istringstream junk("not json\n");
  CHECK_THROWS_AS(read_detections(junk), FormatError);
}
