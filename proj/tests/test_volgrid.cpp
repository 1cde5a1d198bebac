#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "lesion/random.hpp"
#include "lesion/volgrid.hpp"

using namespace lesion;
namespace fs = std::filesystem;

namespace {

Volume3 random_volume(Dims3 d, std::uint64_t seed, int lo = -1000, int hi = 1000) {
  Volume3 v(d, Spacing3{});
  Rng rng(seed);
  for (auto& x : v.data()) x = static_cast<std::int16_t>(uniform_int(rng, lo, hi));
  return v;
}

std::int64_t brute_sum(const Volume3& v, const BoxRegion& b) {
  std::int64_t s = 0;
  for (int z = b.min.z; z <= b.max.z; ++z)
    for (int y = b.min.y; y <= b.max.y; ++y)
      for (int x = b.min.x; x <= b.max.x; ++x) s += v(x, y, z);
  return s;
}

BoxRegion random_box(Rng& rng, const Dims3& d) {
  BoxRegion b;
  b.min.x = uniform_int(rng, 0, d.nx - 1);
  b.max.x = uniform_int(rng, b.min.x, d.nx - 1);
  b.min.y = uniform_int(rng, 0, d.ny - 1);
  b.max.y = uniform_int(rng, b.min.y, d.ny - 1);
  b.min.z = uniform_int(rng, 0, d.nz - 1);
  b.max.z = uniform_int(rng, b.min.z, d.nz - 1);
  return b;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("lesion_volgrid_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("grid shape is validated") {
  CHECK_THROWS_AS(Volume3(Dims3{0, 1, 1}, Spacing3{}), ValidationError);
  CHECK_THROWS_AS(Volume3(Dims3{1, 1, 1}, Spacing3{0.f, 1.f, 1.f}), ValidationError);
  CHECK_THROWS_AS(Volume3(Dims3{2, 2, 2}, Spacing3{}, std::vector<std::int16_t>(7)),
                  ValidationError);
  Volume3 v(Dims3{2, 3, 4}, Spacing3{});
  CHECK(v.size() == 24);
  CHECK(v.offset(1, 0, 0) == 1);
  CHECK(v.offset(0, 1, 0) == 2);
  CHECK(v.offset(0, 0, 1) == 6);
  CHECK_THROWS_AS(v.at({2, 0, 0}), BoundsError);
}

TEST_CASE("default spacing") {
  Spacing3 s;
  CHECK(s.sx == doctest::Approx(0.894));
  CHECK(s.sy == doctest::Approx(0.894));
  CHECK(s.sz == doctest::Approx(2.5));
}

TEST_CASE("integral volume small cases") {
  Volume3 ones(Dims3{2, 2, 2}, Spacing3{}, 1);
  IntegralVolume iv = build_integral(ones);
  CHECK(iv.sum_at(2, 2, 2) == 8);
  CHECK(iv.sum_at(0, 2, 2) == 0);
  CHECK(iv.sum_at(2, 0, 2) == 0);
  CHECK(iv.sum_at(2, 2, 0) == 0);

  Volume3 one(Dims3{1, 1, 1}, Spacing3{}, 7);
  CHECK(build_integral(one).sum_at(1, 1, 1) == 7);

  Volume3 four(Dims3{4, 4, 4}, Spacing3{}, 1);
  IntegralVolume iv4 = build_integral(four);
  CHECK(box_sum(iv4, {{0, 0, 0}, {3, 3, 3}}) == 64);
  CHECK(box_sum(iv4, {{1, 1, 1}, {2, 2, 2}}) == 8);
  CHECK_THROWS_AS(box_sum(iv4, {{0, 0, 0}, {4, 3, 3}}), BoundsError);
  CHECK_THROWS_AS(box_sum(iv4, {{2, 0, 0}, {1, 3, 3}}), BoundsError);
}

TEST_CASE("integral corners match brute force") {
  const Volume3 v = random_volume({8, 8, 8}, 11);
  const IntegralVolume iv = build_integral(v);
  Rng rng(12);
  for (int n = 0; n < 20; ++n) {
    const int i = uniform_int(rng, 0, 8), j = uniform_int(rng, 0, 8), k = uniform_int(rng, 0, 8);
    std::int64_t s = 0;
    for (int c = 0; c < k; ++c)
      for (int b = 0; b < j; ++b)
        for (int a = 0; a < i; ++a) s += v(a, b, c);
    CHECK(iv.sum_at(i, j, k) == s);
  }
}

TEST_CASE("box_sum matches brute force on random boxes") {
  Rng rng(derive_seed(5, "boxes"));
  for (int vol = 0; vol < 5; ++vol) {
    const Dims3 d{uniform_int(rng, 3, 17), uniform_int(rng, 3, 17), uniform_int(rng, 3, 17)};
    const Volume3 v = random_volume(d, 100 + vol, -32768, 32767);
    const IntegralVolume iv = build_integral(v);
    for (int n = 0; n < 100; ++n) {
      const BoxRegion b = random_box(rng, d);
      REQUIRE(box_sum(iv, b) == brute_sum(v, b));
    }
    CHECK(box_sum(iv, {{0, 0, 0}, {d.nx - 1, d.ny - 1, d.nz - 1}}) ==
          brute_sum(v, {{0, 0, 0}, {d.nx - 1, d.ny - 1, d.nz - 1}}));
  }
}

TEST_CASE("box_sum is additive under splits") {
  const Dims3 d{9, 7, 6};
  const Volume3 v = random_volume(d, 3);
  const IntegralVolume iv = build_integral(v);
  Rng rng(4);
  for (int n = 0; n < 200; ++n) {
    const BoxRegion b = random_box(rng, d);
    for (int axis = 0; axis < 3; ++axis) {
      const int lo = axis == 0 ? b.min.x : axis == 1 ? b.min.y : b.min.z;
      const int hi = axis == 0 ? b.max.x : axis == 1 ? b.max.y : b.max.z;
      if (lo == hi) continue;
      const int cut = uniform_int(rng, lo, hi - 1);
      BoxRegion a = b, c = b;
      if (axis == 0) { a.max.x = cut; c.min.x = cut + 1; }
      if (axis == 1) { a.max.y = cut; c.min.y = cut + 1; }
      if (axis == 2) { a.max.z = cut; c.min.z = cut + 1; }
      CHECK(box_sum(iv, a) + box_sum(iv, c) == box_sum(iv, b));
    }
  }
}

TEST_CASE("integral is monotone for nonnegative input") {
  const Volume3 v = random_volume({6, 5, 4}, 9, 0, 500);
  const IntegralVolume iv = build_integral(v);
  for (int k = 0; k <= 4; ++k)
    for (int j = 0; j <= 5; ++j)
      for (int i = 0; i <= 6; ++i) {
        if (i > 0) CHECK(iv.sum_at(i, j, k) >= iv.sum_at(i - 1, j, k));
        if (j > 0) CHECK(iv.sum_at(i, j, k) >= iv.sum_at(i, j - 1, k));
        if (k > 0) CHECK(iv.sum_at(i, j, k) >= iv.sum_at(i, j, k - 1));
      }
}

TEST_CASE("gradient examples") {
  Volume3 c(Dims3{5, 5, 5}, Spacing3{}, 42);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        const Vec3 g = gradient_at(c, {x, y, z});
        CHECK(g[0] == 0.0);
        CHECK(g[1] == 0.0);
        CHECK(g[2] == 0.0);
      }

  Volume3 ramp(Dims3{6, 3, 3}, Spacing3{});
  Volume3 sq(Dims3{6, 3, 3}, Spacing3{});
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 6; ++x) {
        ramp(x, y, z) = static_cast<std::int16_t>(2 * x);
        sq(x, y, z) = static_cast<std::int16_t>(x * x);
      }
  CHECK(gradient_at(ramp, {2, 1, 1})[0] == 2.0);
  CHECK(gradient_at(sq, {3, 1, 1})[0] == 6.0);
  // one-sided at faces
  CHECK(gradient_at(sq, {0, 1, 1})[0] == 1.0);
  CHECK(gradient_at(sq, {5, 1, 1})[0] == 9.0);
  CHECK_THROWS_AS(gradient_at(sq, {6, 0, 0}), BoundsError);
}

TEST_CASE("gradient of an affine field is its coefficients") {
  Volume3 v(Dims3{7, 6, 5}, Spacing3{});
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 7; ++x) v(x, y, z) = static_cast<std::int16_t>(3 * x - 2 * y + 5 * z + 10);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 7; ++x) {
        const Vec3 g = gradient_at(v, {x, y, z});
        CHECK(g[0] == 3.0);
        CHECK(g[1] == -2.0);
        CHECK(g[2] == 5.0);
      }
}

TEST_CASE("clip_box") {
  const Dims3 d{4, 4, 4};
  CHECK(clip_box({{-2, 1, 0}, {9, 2, 3}}, d) == BoxRegion{{0, 1, 0}, {3, 2, 3}});
  CHECK_FALSE(clip_box({{5, 5, 5}, {6, 6, 6}}, d).valid());
}

TEST_CASE("volume and mask file round trip") {
  TempDir tmp;
  Volume3 zero(Dims3{4, 4, 4}, Spacing3{});
  write_volume(zero, tmp.path / "z.lsv");
  CHECK(read_volume(tmp.path / "z.lsv") == zero);

  Volume3 one(Dims3{1, 1, 1}, Spacing3{}, -100);
  write_volume(one, tmp.path / "one.lsv");
  // 4 magic + 12 dims + 12 spacing + 2 payload
  CHECK(fs::file_size(tmp.path / "one.lsv") == 30);
  const std::string bytes = slurp(tmp.path / "one.lsv");
  CHECK(bytes.substr(0, 4) == "LSV1");
  CHECK(static_cast<unsigned char>(bytes[28]) == 0x9c);
  CHECK(static_cast<unsigned char>(bytes[29]) == 0xff);

  const Volume3 r = random_volume({5, 3, 2}, 77, -32768, 32767);
  write_volume(r, tmp.path / "a.lsv");
  const Volume3 back = read_volume(tmp.path / "a.lsv");
  CHECK(back == r);
  write_volume(back, tmp.path / "b.lsv");
  CHECK(slurp(tmp.path / "a.lsv") == slurp(tmp.path / "b.lsv"));

  Mask3 m(Dims3{3, 2, 2}, Spacing3{0.5f, 0.7f, 3.f});
  m(1, 1, 1) = 2;
  m(0, 0, 0) = 255;
  write_mask(m, tmp.path / "m.lsm");
  CHECK(read_mask(tmp.path / "m.lsm") == m);
  CHECK(slurp(tmp.path / "m.lsm").substr(0, 4) == "LSM1");
  CHECK(fs::file_size(tmp.path / "m.lsm") == 28 + 12);
}

TEST_CASE("file format errors") {
  TempDir tmp;
  {
    std::ofstream f(tmp.path / "bad.lsv", std::ios::binary);
    f << "XXXX" << std::string(40, '\0');
  }
  CHECK_THROWS_AS(read_volume(tmp.path / "bad.lsv"), FormatError);

  // header says 10x10x10, payload one voxel short
  Volume3 big(Dims3{10, 10, 10}, Spacing3{});
  write_volume(big, tmp.path / "big.lsv");
  std::string bytes = slurp(tmp.path / "big.lsv");
  bytes.resize(bytes.size() - 2);
  {
    std::ofstream f(tmp.path / "short.lsv", std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_AS(read_volume(tmp.path / "short.lsv"), LengthError);

  bytes = slurp(tmp.path / "big.lsv");
  bytes[4] = bytes[5] = bytes[6] = bytes[7] = 0;
  {
    std::ofstream f(tmp.path / "zero.lsv", std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_AS(read_volume(tmp.path / "zero.lsv"), ValidationError);

  // a mask file is not a volume file
  write_mask(Mask3(Dims3{2, 2, 2}, Spacing3{}), tmp.path / "m.lsm");
  CHECK_THROWS_AS(read_volume(tmp.path / "m.lsm"), FormatError);

  CHECK_THROWS_AS(read_volume(tmp.path / "missing.lsv"), IoError);
  CHECK_THROWS_AS(write_volume(big, tmp.path / "no" / "such" / "dir.lsv"), IoError);
  try {
    read_volume(tmp.path / "missing.lsv");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("missing.lsv") != std::string::npos);
  }
}
