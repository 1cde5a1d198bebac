#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "lesion/phantom.hpp"

using namespace lesion;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("lesion_phantom_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PhantomSpec sphere_spec(double r, double contrast, double noise) {
  PhantomSpec s;
  s.seed = 3;
  s.dims = {48, 48, 48};
  s.spacing = {1.f, 1.f, 1.f};
  s.organ = Ellipsoid{{24, 24, 24}, {20, 20, 20}};
  LesionSpec l;
  l.shape = Ellipsoid{{24, 24, 24}, {r, r, r}};
  l.contrast_hu = contrast;
  l.texture_sigma = 0.0;
  s.lesions = {l};
  s.noise_sigma = noise;
  return s;
}

}  // namespace

TEST_CASE("organ only, no noise") {
  PhantomSpec s;
  s.dims = {20, 20, 10};
  s.organ = Ellipsoid{{10, 10, 5}, {6, 6, 3}};
  s.noise_sigma = 0;
  const Phantom ph = generate_phantom(s);
  for (int z = 0; z < 10; ++z)
    for (int y = 0; y < 20; ++y)
      for (int x = 0; x < 20; ++x) {
        const int expect = s.organ->contains(x, y, z) ? 60 : 40;
        REQUIRE(ph.volume(x, y, z) == expect);
        REQUIRE(ph.truth.mask(x, y, z) == 0);
      }
  CHECK(ph.truth.boxes.empty());
  REQUIRE(ph.truth.organ_box);
  CHECK(*ph.truth.organ_box == BoxRegion{{4, 4, 2}, {16, 16, 8}});
}

TEST_CASE("voxelized sphere count") {
  const Phantom ph = generate_phantom(sphere_spec(8, 30, 0));
  std::size_t n = 0;
  for (auto v : ph.truth.mask.data()) n += v == 1;
  const double expect = 4.0 / 3.0 * M_PI * 512.0;
  CHECK(std::abs(double(n) - expect) / expect < 0.02);
  CHECK(ph.truth.boxes.size() == 1);
  CHECK(ph.truth.boxes[0] == BoxRegion{{16, 16, 16}, {32, 32, 32}});
  // exact intensities without noise or texture
  CHECK(ph.volume(24, 24, 24) == 30);
  CHECK(ph.volume(24, 24, 40) == 60);
  CHECK(ph.volume(1, 1, 1) == 40);
}

TEST_CASE("lesion contrast against its shell") {
  const double noise = 6.0, contrast = 15.0;
  const Phantom ph = generate_phantom(sphere_spec(7, contrast, noise));
  double in = 0, out = 0;
  std::size_t nin = 0, nout = 0;
  for (int z = 0; z < 48; ++z)
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) {
        const double r = std::sqrt((x - 24.0) * (x - 24.0) + (y - 24.0) * (y - 24.0) + (z - 24.0) * (z - 24.0));
        if (ph.truth.mask(x, y, z)) {
          in += ph.volume(x, y, z);
          ++nin;
        } else if (r > 8.5 && r < 11.5) {
          out += ph.volume(x, y, z);
          ++nout;
        }
      }
  const double diff = in / nin - out / nout;
  const double tol = 3 * noise / std::sqrt(double(std::min(nin, nout))) + 0.5;  // + rounding
  CHECK(std::abs(diff + contrast) < tol);
}

TEST_CASE("generation is deterministic") {
  const PhantomSpec s = default_phantom_spec(1234);
  const Phantom a = generate_phantom(s);
  const Phantom b = generate_phantom(default_phantom_spec(1234));
  CHECK(a.volume == b.volume);
  CHECK(a.truth.mask == b.truth.mask);
  CHECK(a.truth.boxes == b.truth.boxes);
  const Phantom c = generate_phantom(default_phantom_spec(1235));
  CHECK_FALSE(a.volume == c.volume);
}

TEST_CASE("invalid phantom parameters") {
  PhantomSpec s = sphere_spec(8, 20, 0);
  s.lesions[0].shape.center = {40, 24, 24};
  CHECK_THROWS_AS(generate_phantom(s), ValidationError);

  s = sphere_spec(8, 20, 0);
  s.lesions[0].shape.radii = {1.5, 4, 4};
  CHECK_THROWS_AS(generate_phantom(s), ValidationError);

  s = sphere_spec(4, 20, 0);
  s.lesions.push_back(s.lesions[0]);
  s.lesions[1].shape.center[0] += 3;
  CHECK_THROWS_AS(generate_phantom(s), ValidationError);

  s = sphere_spec(4, 20, 0);
  s.organ.reset();
  CHECK_THROWS_AS(generate_phantom(s), ValidationError);
}

TEST_CASE("default distribution respects its invariants") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    const PhantomSpec s = default_phantom_spec(seed);
    CHECK(s.lesions.size() >= 1);
    CHECK(s.lesions.size() <= 4);
    CHECK(s.noise_sigma >= 3.0);
    CHECK(s.noise_sigma <= 10.0);
    for (const auto& l : s.lesions) {
      CHECK(l.contrast_hu >= 5.0);
      CHECK(l.contrast_hu <= 40.0);
      for (double r : l.shape.radii) CHECK(r >= 2.0);
    }
    const Phantom ph = generate_phantom(s);
    REQUIRE(ph.truth.boxes.size() == s.lesions.size());
    // boxes are tight: recompute by scan
    CHECK(label_boxes(ph.truth.mask) == ph.truth.boxes);
    for (std::size_t k = 0; k < ph.truth.boxes.size(); ++k) {
      const BoxRegion& b = ph.truth.boxes[k];
      const int label = int(k) + 1;
      bool lo_x = false, hi_x = false, lo_z = false, hi_z = false;
      for (int z = b.min.z; z <= b.max.z; ++z)
        for (int y = b.min.y; y <= b.max.y; ++y)
          for (int x = b.min.x; x <= b.max.x; ++x) {
            if (ph.truth.mask(x, y, z) != label) continue;
            lo_x |= x == b.min.x;
            hi_x |= x == b.max.x;
            lo_z |= z == b.min.z;
            hi_z |= z == b.max.z;
          }
      CHECK((lo_x && hi_x && lo_z && hi_z));
    }
  }
}

TEST_CASE("dataset files and manifest") {
  TempDir a("a"), b("b");
  const Manifest m = generate_dataset(3, 7, a.path);
  REQUIRE(m.size() == 3);
  for (const auto& e : m) {
    CHECK(fs::exists(e.volume));
    CHECK(fs::exists(e.mask));
    CHECK(!e.lesions.empty());
  }
  CHECK(fs::exists(a.path / "manifest.json"));

  generate_dataset(3, 7, b.path);
  CHECK(slurp(a.path / "manifest.json") == slurp(b.path / "manifest.json"));
  for (const char* f : {"vol_000.lsv", "vol_001.lsm", "vol_002.lsv"}) {
    CHECK(slurp(a.path / f) == slurp(b.path / f));
  }

  // child seeds are seed + index
  const Phantom second = generate_phantom(default_phantom_spec(8));
  CHECK(read_volume(m[1].volume) == second.volume);

  const Manifest back = read_manifest(a.path / "manifest.json");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(fs::equivalent(back[i].volume, m[i].volume));
    REQUIRE(back[i].lesions.size() == m[i].lesions.size());
    for (std::size_t k = 0; k < m[i].lesions.size(); ++k) {
      CHECK(back[i].lesions[k].box_min == m[i].lesions[k].box_min);
      CHECK(back[i].lesions[k].box_max == m[i].lesions[k].box_max);
      CHECK(back[i].lesions[k].contrast == m[i].lesions[k].contrast);
    }
    const GroundTruth gt = load_truth(back[i]);
    CHECK(gt.mask == read_mask(m[i].mask));
    CHECK(gt.organ_box == m[i].organ_box);
  }

  CHECK_THROWS_AS(generate_dataset(0, 7, a.path), ValidationError);
  CHECK_THROWS_AS(read_manifest(a.path / "none.json"), IoError);
}

TEST_CASE("seed 42 dataset lesion count") {
  // 20 volumes with 1-4 lesions each; frozen from a seeded run
  std::size_t total = 0;
  for (int i = 0; i < 20; ++i) total += default_phantom_spec(42 + i).lesions.size();
  CHECK(total >= 20);
  CHECK(total <= 80);
  CHECK(total == 44);
}
