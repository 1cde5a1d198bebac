#include "lesion/volgrid.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace lesion {

BoxRegion clip_box(const BoxRegion& b, const Dims3& d) {
  BoxRegion c;
  c.min = {std::max(b.min.x, 0), std::max(b.min.y, 0), std::max(b.min.z, 0)};
  c.max = {std::min(b.max.x, d.nx - 1), std::min(b.max.y, d.ny - 1),
           std::min(b.max.z, d.nz - 1)};
  return c;
}

IntegralVolume::IntegralVolume(Dims3 volume_dims)
    : dims_(volume_dims),
      sums_(static_cast<std::size_t>(volume_dims.nx + 1) * (volume_dims.ny + 1) *
                (volume_dims.nz + 1),
            0) {}

IntegralVolume build_integral(const Volume3& v) {
  const Dims3 d = v.dims();
  IntegralVolume iv(d);
  for (int k = 1; k <= d.nz; ++k) {
    for (int j = 1; j <= d.ny; ++j) {
      std::int64_t row = 0;
      for (int i = 1; i <= d.nx; ++i) {
        row += v(i - 1, j - 1, k - 1);
        iv.sum_ref(i, j, k) =
            row + iv.sum_at(i, j - 1, k) + iv.sum_at(i, j, k - 1) - iv.sum_at(i, j - 1, k - 1);
      }
    }
  }
  return iv;
}

std::int64_t box_sum(const IntegralVolume& iv, const BoxRegion& b) {
  if (!b.within(iv.volume_dims())) throw BoundsError("box outside integral volume");
  const int x0 = b.min.x, y0 = b.min.y, z0 = b.min.z;
  const int x1 = b.max.x + 1, y1 = b.max.y + 1, z1 = b.max.z + 1;
  return iv.sum_at(x1, y1, z1) - iv.sum_at(x0, y1, z1) - iv.sum_at(x1, y0, z1) -
         iv.sum_at(x1, y1, z0) + iv.sum_at(x0, y0, z1) + iv.sum_at(x0, y1, z0) +
         iv.sum_at(x1, y0, z0) - iv.sum_at(x0, y0, z0);
}

namespace {

double axis_diff(const Volume3& v, Index3 p, int axis, int n) {
  if (n < 2) return 0.0;
  int& c = axis == 0 ? p.x : (axis == 1 ? p.y : p.z);
  const int at = c;
  Index3 lo = p, hi = p;
  int& l = axis == 0 ? lo.x : (axis == 1 ? lo.y : lo.z);
  int& h = axis == 0 ? hi.x : (axis == 1 ? hi.y : hi.z);
  if (at == 0) {
    h = 1;
    return static_cast<double>(v[hi]) - v[p];
  }
  if (at == n - 1) {
    l = n - 2;
    return static_cast<double>(v[p]) - v[lo];
  }
  l = at - 1;
  h = at + 1;
  return 0.5 * (static_cast<double>(v[hi]) - v[lo]);
}

// LSV1/LSM1 share a header; only magic and payload element type differ.
constexpr std::size_t kHeaderBytes = 4 + 12 + 12;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_all(const std::string& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T>
std::string encode(const Grid3<T>& g, const char* magic) {
  std::string out(magic, 4);
  out.reserve(kHeaderBytes + g.size() * sizeof(T));
  put_u32(out, static_cast<std::uint32_t>(g.dims().nx));
  put_u32(out, static_cast<std::uint32_t>(g.dims().ny));
  put_u32(out, static_cast<std::uint32_t>(g.dims().nz));
  for (float s : {g.spacing().sx, g.spacing().sy, g.spacing().sz}) {
    put_u32(out, std::bit_cast<std::uint32_t>(s));
  }
  for (T value : g.data()) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
    }
  }
  return out;
}

template <typename T>
Grid3<T> decode(const std::string& bytes, const char* magic, const std::filesystem::path& path) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw FormatError("bad magic (expected " + std::string(magic, 4) + "): " + path.string());
  }
  if (bytes.size() < kHeaderBytes) throw LengthError("truncated header: " + path.string());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t nx = get_u32(p + 4), ny = get_u32(p + 8), nz = get_u32(p + 12);
  Spacing3 sp{std::bit_cast<float>(get_u32(p + 16)), std::bit_cast<float>(get_u32(p + 20)),
              std::bit_cast<float>(get_u32(p + 24))};
  if (nx == 0 || ny == 0 || nz == 0) throw ValidationError("zero dimension in " + path.string());
  if (nx > 0x7fffffffu || ny > 0x7fffffffu || nz > 0x7fffffffu) {
    throw ValidationError("dimension too large in " + path.string());
  }
  const Dims3 dims{static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)};
  const std::size_t expected = dims.count() * sizeof(T);
  if (bytes.size() - kHeaderBytes != expected) {
    throw LengthError("payload has " + std::to_string(bytes.size() - kHeaderBytes) +
                      " bytes, header implies " + std::to_string(expected) + ": " +
                      path.string());
  }
  std::vector<T> data(dims.count());
  const unsigned char* q = p + kHeaderBytes;
  for (std::size_t n = 0; n < data.size(); ++n, q += sizeof(T)) {
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u = static_cast<decltype(u)>(u | (static_cast<decltype(u)>(q[i]) << (8 * i)));
    }
    data[n] = static_cast<T>(u);
  }
  return Grid3<T>(dims, sp, std::move(data));
}

}  // namespace

Vec3 gradient_at(const Volume3& v, const Index3& p) {
  if (!v.dims().contains(p)) throw BoundsError("gradient position outside volume");
  return {axis_diff(v, p, 0, v.dims().nx), axis_diff(v, p, 1, v.dims().ny),
          axis_diff(v, p, 2, v.dims().nz)};
}

Volume3 read_volume(const std::filesystem::path& path) {
  return decode<std::int16_t>(read_all(path), "LSV1", path);
}

void write_volume(const Volume3& v, const std::filesystem::path& path) {
  write_all(encode(v, "LSV1"), path);
}

Mask3 read_mask(const std::filesystem::path& path) {
  return decode<std::uint8_t>(read_all(path), "LSM1", path);
}

void write_mask(const Mask3& m, const std::filesystem::path& path) {
  write_all(encode(m, "LSM1"), path);
}

}  // namespace lesion
