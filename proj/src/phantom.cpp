#include "lesion/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "lesion/random.hpp"

namespace lesion {

namespace {

using nlohmann::json;

struct TextureBlob {
  Vec3 center;  // voxel coords
  double width_mm;
  double amplitude;
};

std::vector<TextureBlob> texture_blobs(const LesionSpec& l, const Spacing3& sp, Rng& rng) {
  std::vector<TextureBlob> blobs;
  if (l.texture_sigma <= 0.0) return blobs;
  const int n = uniform_int(rng, 3, 10);
  const double r_mm = std::min(l.shape.radii[0] * sp.sx, l.shape.radii[1] * sp.sy);
  while (static_cast<int>(blobs.size()) < n) {
    Vec3 c;
    for (int a = 0; a < 3; ++a) {
      c[a] = l.shape.center[a] + uniform(rng, -1.0, 1.0) * l.shape.radii[a];
    }
    const double width = uniform(rng, 0.25, 0.5) * r_mm;
    const double amp = uniform(rng, -1.0, 1.0) * l.texture_sigma;
    if (!l.shape.contains(c[0], c[1], c[2])) continue;
    blobs.push_back({c, width, amp});
  }
  return blobs;
}

double texture_at(const std::vector<TextureBlob>& blobs, const Spacing3& sp, int x, int y, int z) {
  double t = 0.0;
  for (const auto& b : blobs) {
    const double dx = (x - b.center[0]) * sp.sx;
    const double dy = (y - b.center[1]) * sp.sy;
    const double dz = (z - b.center[2]) * sp.sz;
    t += b.amplitude * std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.width_mm * b.width_mm));
  }
  return t;
}

struct Node {
  Ellipsoid shape;
  double contrast;
};

std::vector<Node> place_nodes(const PhantomSpec& spec) {
  std::vector<Node> nodes;
  if (spec.node_count <= 0) return nodes;
  Rng rng(derive_seed(spec.seed, "phantom.nodes"));
  const Dims3& d = spec.dims;
  const double aspect = spec.spacing.sx / spec.spacing.sz;
  for (int tries = 0; tries < 200 && static_cast<int>(nodes.size()) < spec.node_count; ++tries) {
    const double r = uniform(rng, 3.0, 6.0);
    Ellipsoid e{{0, 0, 0}, {r, r, std::max(2.0, r * aspect)}};
    for (int a = 0; a < 3; ++a) {
      const double n = a == 0 ? d.nx : (a == 1 ? d.ny : d.nz);
      const double lo = e.radii[a] + 1.0, hi = n - 2.0 - e.radii[a];
      if (hi <= lo) return nodes;
      e.center[a] = uniform(rng, lo, hi);
    }
    const double contrast = uniform(rng, 5.0, 15.0);
    bool ok = true;
    if (spec.organ) {
      const Ellipsoid grown{spec.organ->center,
                            {spec.organ->radii[0] + e.radii[0] + 2.0,
                             spec.organ->radii[1] + e.radii[1] + 2.0,
                             spec.organ->radii[2] + e.radii[2] + 2.0}};
      ok = !grown.contains(e.center[0], e.center[1], e.center[2]);
    }
    for (const auto& other : nodes) {
      const double dx = e.center[0] - other.shape.center[0];
      const double dy = e.center[1] - other.shape.center[1];
      const double dz = (e.center[2] - other.shape.center[2]) / aspect;
      if (std::sqrt(dx * dx + dy * dy + dz * dz) < e.radii[0] + other.shape.radii[0] + 2.0) {
        ok = false;
      }
    }
    if (ok) nodes.push_back({e, contrast});
  }
  return nodes;
}

json index_json(const Index3& p) { return json::array({p.x, p.y, p.z}); }

Index3 index_from_json(const json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

}  // namespace

BoxRegion Ellipsoid::bounds(const Dims3& d) const {
  BoxRegion b;
  b.min = {static_cast<int>(std::floor(center[0] - radii[0])),
           static_cast<int>(std::floor(center[1] - radii[1])),
           static_cast<int>(std::floor(center[2] - radii[2]))};
  b.max = {static_cast<int>(std::ceil(center[0] + radii[0])),
           static_cast<int>(std::ceil(center[1] + radii[1])),
           static_cast<int>(std::ceil(center[2] + radii[2]))};
  return clip_box(b, d);
}

std::vector<BoxRegion> label_boxes(const Mask3& mask) {
  std::vector<BoxRegion> boxes;
  const Dims3& d = mask.dims();
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        const int k = mask(x, y, z);
        if (k == 0) continue;
        if (static_cast<int>(boxes.size()) < k) {
          boxes.resize(k, BoxRegion{{1 << 30, 1 << 30, 1 << 30}, {-1, -1, -1}});
        }
        BoxRegion& b = boxes[k - 1];
        b.min = {std::min(b.min.x, x), std::min(b.min.y, y), std::min(b.min.z, z)};
        b.max = {std::max(b.max.x, x), std::max(b.max.y, y), std::max(b.max.z, z)};
      }
    }
  }
  return boxes;
}

PhantomSpec default_phantom_spec(std::uint64_t seed) {
  PhantomSpec spec;
  spec.seed = seed;
  Rng rng(derive_seed(seed, "phantom.spec"));
  const Dims3& d = spec.dims;

  const double scale = uniform(rng, 0.8, 1.0);
  Ellipsoid organ;
  organ.center = {(d.nx - 1) / 2.0 + uniform(rng, -3.0, 3.0),
                  (d.ny - 1) / 2.0 + uniform(rng, -3.0, 3.0),
                  (d.nz - 1) / 2.0 + uniform(rng, -2.0, 2.0)};
  const Vec3 reference{36.0, 32.0, 13.0};
  for (int a = 0; a < 3; ++a) organ.radii[a] = reference[a] * scale * uniform(rng, 0.95, 1.05);
  spec.organ = organ;

  spec.noise_sigma = uniform(rng, 3.0, 10.0);
  spec.node_count = uniform_int(rng, 0, 3);

  const int wanted = uniform_int(rng, 1, 4);
  const double aspect = spec.spacing.sx / spec.spacing.sz;
  for (int tries = 0; tries < 400 && static_cast<int>(spec.lesions.size()) < wanted; ++tries) {
    const double r = uniform(rng, 6.0, 14.0);
    LesionSpec l;
    l.shape.radii = {r * uniform(rng, 0.9, 1.1), r * uniform(rng, 0.9, 1.1),
                     std::max(2.0, r * aspect)};
    // Center drawn so the lesion stays at least ~1.5 voxels inside the organ.
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double room = organ.radii[a] - l.shape.radii[a] - 1.5;
      if (room <= 0) inside = false;
      l.shape.center[a] = organ.center[a] + uniform(rng, -1.0, 1.0) * std::max(room, 0.0);
    }
    if (!inside) continue;
    const Ellipsoid shrunk{organ.center,
                           {organ.radii[0] - 1.5, organ.radii[1] - 1.5, organ.radii[2] - 1.0}};
    for (int k = 0; k < 26 && inside; ++k) {
      // Extreme points of the lesion along the 26 lattice directions.
      const int sx = k % 3 - 1, sy = (k / 3) % 3 - 1, sz = k / 9 - 1;
      if (sx == 0 && sy == 0 && sz == 0) continue;
      const double n = std::sqrt(double(sx * sx + sy * sy + sz * sz));
      inside = shrunk.contains(l.shape.center[0] + sx / n * l.shape.radii[0],
                               l.shape.center[1] + sy / n * l.shape.radii[1],
                               l.shape.center[2] + sz / n * l.shape.radii[2]);
    }
    if (!inside) continue;
    bool separated = true;
    for (const auto& other : spec.lesions) {
      const double dx = (l.shape.center[0] - other.shape.center[0]) * spec.spacing.sx;
      const double dy = (l.shape.center[1] - other.shape.center[1]) * spec.spacing.sy;
      const double dz = (l.shape.center[2] - other.shape.center[2]) * spec.spacing.sz;
      const double need = (std::max(l.shape.radii[0], l.shape.radii[1]) +
                           std::max(other.shape.radii[0], other.shape.radii[1])) *
                              spec.spacing.sx +
                          12.0;
      if (std::sqrt(dx * dx + dy * dy + dz * dz) < need) separated = false;
    }
    if (!separated) continue;
    l.contrast_hu = uniform(rng, std::max(5.0, 2.0 * spec.noise_sigma), 40.0);
    l.texture_sigma = uniform(rng, 0.0, 0.3 * l.contrast_hu);
    spec.lesions.push_back(l);
  }
  return spec;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  const Dims3& d = spec.dims;
  Phantom ph{Volume3(d, spec.spacing), GroundTruth{Mask3(d, spec.spacing), {}, std::nullopt}};
  if (spec.lesions.size() > 255) throw ValidationError("at most 255 lesions per phantom");
  if (!spec.lesions.empty() && !spec.organ) {
    throw ValidationError("lesions require an organ ellipsoid");
  }
  if (spec.noise_sigma < 0) throw ValidationError("noise sigma must be >= 0");

  Mask3& mask = ph.truth.mask;
  for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
    const Ellipsoid& e = spec.lesions[k].shape;
    if (e.radii[0] < 2.0 || e.radii[1] < 2.0 || e.radii[2] < 2.0) {
      throw ValidationError("lesion radii must be >= 2 voxels");
    }
    const BoxRegion b = e.bounds(d);
    std::size_t count = 0;
    if (b.valid()) {
      for (int z = b.min.z; z <= b.max.z; ++z) {
        for (int y = b.min.y; y <= b.max.y; ++y) {
          for (int x = b.min.x; x <= b.max.x; ++x) {
            if (!e.contains(x, y, z)) continue;
            if (!spec.organ->contains(x, y, z)) {
              throw ValidationError("lesion " + std::to_string(k + 1) + " escapes the organ");
            }
            if (mask(x, y, z) != 0) throw ValidationError("lesions overlap");
            mask(x, y, z) = static_cast<std::uint8_t>(k + 1);
            ++count;
          }
        }
      }
    }
    if (count == 0) throw ValidationError("lesion " + std::to_string(k + 1) + " has no voxels");
  }

  std::vector<std::vector<TextureBlob>> textures;
  for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
    Rng rng(derive_seed(spec.seed, "phantom.texture", k));
    textures.push_back(texture_blobs(spec.lesions[k], spec.spacing, rng));
  }
  const std::vector<Node> nodes = place_nodes(spec);

  Rng noise_rng(derive_seed(spec.seed, "phantom.noise"));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        double hu = spec.background_hu;
        if (spec.organ && spec.organ->contains(x, y, z)) hu = spec.organ_hu;
        for (const auto& n : nodes) {
          if (n.shape.contains(x, y, z)) hu = spec.background_hu + n.contrast;
        }
        if (const int k = mask(x, y, z); k > 0) {
          hu = spec.organ_hu - spec.lesions[k - 1].contrast_hu +
               texture_at(textures[k - 1], spec.spacing, x, y, z);
        }
        if (spec.noise_sigma > 0) hu += spec.noise_sigma * noise(noise_rng);
        hu = std::clamp(std::round(hu), -32768.0, 32767.0);
        ph.volume(x, y, z) = static_cast<std::int16_t>(hu);
      }
    }
  }

  ph.truth.boxes = label_boxes(mask);
  if (spec.organ) ph.truth.organ_box = spec.organ->bounds(d);
  return ph;
}

Manifest generate_dataset(int count, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (count < 1) throw ValidationError("dataset count must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Manifest manifest;
  for (int i = 0; i < count; ++i) {
    const PhantomSpec spec = default_phantom_spec(seed + static_cast<std::uint64_t>(i));
    const Phantom ph = generate_phantom(spec);
    char name[32];
    std::snprintf(name, sizeof(name), "vol_%03d", i);
    ManifestEntry e;
    e.volume = out_dir / (std::string(name) + ".lsv");
    e.mask = out_dir / (std::string(name) + ".lsm");
    write_volume(ph.volume, e.volume);
    write_mask(ph.truth.mask, e.mask);
    for (std::size_t k = 0; k < ph.truth.boxes.size(); ++k) {
      const auto& l = spec.lesions[k];
      e.lesions.push_back({static_cast<int>(k + 1), ph.truth.boxes[k].min, ph.truth.boxes[k].max,
                           l.contrast_hu, l.shape.radii});
    }
    e.organ_box = ph.truth.organ_box;
    manifest.push_back(std::move(e));
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  json arr = json::array();
  for (const auto& e : m) {
    json j;
    j["volume"] = e.volume.lexically_relative(base.empty() ? "." : base).generic_string();
    j["mask"] = e.mask.lexically_relative(base.empty() ? "." : base).generic_string();
    json lesions = json::array();
    for (const auto& l : e.lesions) {
      lesions.push_back({{"label", l.label},
                         {"box_min", index_json(l.box_min)},
                         {"box_max", index_json(l.box_max)},
                         {"contrast", l.contrast},
                         {"radii", l.radii}});
    }
    j["lesions"] = std::move(lesions);
    if (e.organ_box) {
      j["organ_box"] = {{"box_min", index_json(e.organ_box->min)},
                        {"box_max", index_json(e.organ_box->max)}};
    }
    arr.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << arr.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json arr;
  try {
    arr = json::parse(in);
  } catch (const json::exception& ex) {
    throw FormatError("manifest " + path.string() + ": " + ex.what());
  }
  if (!arr.is_array()) throw FormatError("manifest must be a JSON array: " + path.string());
  const auto base = path.parent_path();
  Manifest m;
  try {
    for (const auto& j : arr) {
      ManifestEntry e;
      e.volume = base / j.at("volume").get<std::string>();
      e.mask = base / j.at("mask").get<std::string>();
      for (const auto& l : j.at("lesions")) {
        e.lesions.push_back({l.at("label").get<int>(), index_from_json(l.at("box_min")),
                             index_from_json(l.at("box_max")), l.at("contrast").get<double>(),
                             l.at("radii").get<Vec3>()});
      }
      if (j.contains("organ_box")) {
        e.organ_box = BoxRegion{index_from_json(j["organ_box"].at("box_min")),
                                index_from_json(j["organ_box"].at("box_max"))};
      }
      m.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw FormatError("manifest " + path.string() + ": " + ex.what());
  }
  return m;
}

GroundTruth load_truth(const ManifestEntry& e) {
  GroundTruth gt{read_mask(e.mask), {}, e.organ_box};
  gt.boxes = label_boxes(gt.mask);
  return gt;
}

}  // namespace lesion
