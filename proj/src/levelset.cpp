#include "lesion/levelset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "lesion/errors.hpp"
#include "lesion/texfeat.hpp"

namespace lesion {

Circle circle_from_points(Point2 a, Point2 b) {
  return {(a.x + b.x) / 2.0, (a.y + b.y) / 2.0, std::hypot(a.x - b.x, a.y - b.y) / 2.0};
}

PhiField init_phi_from_points(Point2 a, Point2 b, int width, int height, double band_width) {
  if (a.x == b.x && a.y == b.y) throw ValidationError("initialization points coincide");
  if (width < 1 || height < 1) throw ValidationError("empty level-set grid");
  const Circle c = circle_from_points(a, b);
  PhiField f{width, height, std::vector<double>(static_cast<std::size_t>(width) * height), band_width};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) f(x, y) = std::hypot(x - c.cx, y - c.cy) - c.radius;
  }
  return f;
}

EnergyWeights lambdas_from_probs(const ClassProbs& p, double mu_factor) {
  constexpr double tol = 1e-6;
  if (p.p1 < -tol || p.p2 < -tol || p.p3 < -tol || std::abs(p.p1 + p.p2 + p.p3 - 1.0) > tol ||
      !std::isfinite(p.p1 + p.p2 + p.p3)) {
    throw ValidationError("class probabilities are not on the simplex");
  }
  EnergyWeights w;
  w.lambda1 = std::exp((1.0 + p.p2 + p.p3) / (1.0 + p.p1));
  w.lambda2 = std::exp((1.0 + p.p1 + p.p2) / (1.0 + p.p3));
  w.mu = mu_factor * 0.5 * (w.lambda1 + w.lambda2);
  return w;
}

WindowParams adaptive_window(double diameter, double homogeneity) {
  const double h = std::clamp(homogeneity, 0.0, 1.0);
  const double t = 2.0 - h;
  const double raw = 0.4 * diameter * t;
  const int odd = 2 * static_cast<int>(std::round((raw - 1.0) / 2.0)) + 1;
  return {std::clamp(odd, 5, 41), t};
}

SliceMask inside_mask(const PhiField& phi) {
  SliceMask m(phi.width, phi.height);
  for (std::size_t i = 0; i < phi.phi.size(); ++i) m.values[i] = phi.phi[i] < 0.0;
  return m;
}

bool keep_largest_component(PhiField& phi) {
  const int W = phi.width, H = phi.height;
  std::vector<int> comp(phi.phi.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < phi.phi.size(); ++start) {
    if (phi.phi[start] >= 0.0 || comp[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t n = 0;
    comp[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++n;
      const int x = static_cast<int>(i % W), y = static_cast<int>(i / W);
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int k = 0; k < 4; ++k) {
        if (nx[k] < 0 || ny[k] < 0 || nx[k] >= W || ny[k] >= H) continue;
        const std::size_t j = static_cast<std::size_t>(ny[k]) * W + nx[k];
        if (phi.phi[j] < 0.0 && comp[j] < 0) {
          comp[j] = id;
          stack.push_back(j);
        }
      }
    }
    sizes.push_back(n);
  }
  if (sizes.size() < 2) return false;
  const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < phi.phi.size(); ++i) {
    if (comp[i] >= 0 && comp[i] != keep) phi.phi[i] = std::abs(phi.phi[i]);
  }
  return true;
}

Circle contour_circle(const PhiField& phi) {
  double n = 0, sx = 0, sy = 0;
  for (int y = 0; y < phi.height; ++y) {
    for (int x = 0; x < phi.width; ++x) {
      if (!phi.inside(x, y)) continue;
      n += 1;
      sx += x;
      sy += y;
    }
  }
  if (n == 0) return {0, 0, 0};
  return {sx / n, sy / n, std::sqrt(n / M_PI)};
}

namespace {

// Summed-area table with a zero leading row/column.
struct Integral2 {
  int w = 0, h = 0;
  std::vector<double> s;

  void build(int width, int height, auto&& value) {
    w = width;
    h = height;
    s.assign(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
    for (int y = 0; y < h; ++y) {
      double row = 0.0;
      for (int x = 0; x < w; ++x) {
        row += value(x, y);
        s[static_cast<std::size_t>(y + 1) * (w + 1) + x + 1] =
            row + s[static_cast<std::size_t>(y) * (w + 1) + x + 1];
      }
    }
  }
  // Inclusive rectangle sum.
  double sum(int x0, int y0, int x1, int y1) const {
    auto at = [&](int x, int y) { return s[static_cast<std::size_t>(y) * (w + 1) + x]; };
    return at(x1 + 1, y1 + 1) - at(x0, y1 + 1) - at(x1 + 1, y0) + at(x0, y0);
  }
};

bool has_interface(const PhiField& f) {
  bool in = false, out = false;
  for (double v : f.phi) {
    (v < 0.0 ? in : out) = true;
    if (in && out) return true;
  }
  return false;
}

}  // namespace

PhiField evolve_step(const PhiField& phi, const Image2DView& image, const EnergyWeights& w,
                     const WindowParams& win, double dt_max, StepInfo* info) {
  const int W = phi.width, H = phi.height;
  if (image.width != W || image.height != H) throw ValidationError("image and phi shapes differ");
  if (!has_interface(phi)) throw ContourVanished("no zero level set");

  Integral2 in_count, in_sum;
  in_count.build(W, H, [&](int x, int y) { return phi(x, y) < 0.0 ? 1.0 : 0.0; });
  in_sum.build(W, H, [&](int x, int y) { return phi(x, y) < 0.0 ? image(x, y) : 0.0; });
  Integral2 all_sum;
  all_sum.build(W, H, [&](int x, int y) { return image(x, y); });
  const double n_in_total = in_count.sum(0, 0, W - 1, H - 1);
  const double s_in_total = in_sum.sum(0, 0, W - 1, H - 1);
  const double s_total = all_sum.sum(0, 0, W - 1, H - 1);
  const double global_u = s_in_total / n_in_total;
  const double global_v = (s_total - s_in_total) / (static_cast<double>(W) * H - n_in_total);

  auto at = [&](int x, int y) {
    return phi(std::clamp(x, 0, W - 1), std::clamp(y, 0, H - 1));
  };
  const int half = win.side / 2;

  struct Update {
    std::size_t index;
    double rate;  // d(phi)/dt
  };
  std::vector<Update> updates;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double p = phi(x, y);
      // Interface neighbors stay in the band even after |phi| outgrows it.
      if (std::abs(p) > phi.band_width && (at(x + 1, y) < 0) == (p < 0) &&
          (at(x - 1, y) < 0) == (p < 0) && (at(x, y + 1) < 0) == (p < 0) &&
          (at(x, y - 1) < 0) == (p < 0)) {
        continue;
      }
      const int x0 = std::max(0, x - half), x1 = std::min(W - 1, x + half);
      const int y0 = std::max(0, y - half), y1 = std::min(H - 1, y + half);
      const double n = static_cast<double>(x1 - x0 + 1) * (y1 - y0 + 1);
      const double n_in = in_count.sum(x0, y0, x1, y1);
      const double s_in = in_sum.sum(x0, y0, x1, y1);
      const double s_all = all_sum.sum(x0, y0, x1, y1);
      const double u = n_in > 0 ? s_in / n_in : global_u;
      const double v = n - n_in > 0 ? (s_all - s_in) / (n - n_in) : global_v;
      const double i = image(x, y);
      const double region = -w.lambda1 * (i - u) * (i - u) + w.lambda2 * (i - v) * (i - v);

      const double px = 0.5 * (at(x + 1, y) - at(x - 1, y));
      const double py = 0.5 * (at(x, y + 1) - at(x, y - 1));
      const double pxx = at(x + 1, y) - 2 * p + at(x - 1, y);
      const double pyy = at(x, y + 1) - 2 * p + at(x, y - 1);
      const double pxy =
          0.25 * (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1) + at(x - 1, y - 1));
      const double g2 = px * px + py * py;
      const double grad = std::sqrt(g2);
      const double kappa = (pxx * py * py - 2 * px * py * pxy + pyy * px * px) /
                           (std::pow(g2, 1.5) + 1e-10);
      const double speed = region - w.mu * kappa;
      const double rate = -speed * grad;
      updates.push_back({static_cast<std::size_t>(y) * W + x, rate});
    }
  }
  if (updates.empty()) throw ContourVanished("empty narrow band");

  double dt = dt_max;
  if (w.mu > 0.0) dt = std::min(dt, 0.2 / w.mu);

  // Per-point CFL clamp: strong fronts move 0.45 voxels per step without
  // freezing weak ones.
  PhiField out = phi;
  double max_change = 0.0;
  for (const auto& u : updates) {
    const double change = std::clamp(dt * u.rate, -0.45, 0.45);
    out.phi[u.index] += change;
    max_change = std::max(max_change, std::abs(change));
  }
  if (info) *info = {dt, max_change, updates.size()};
  return out;
}

PhiField reinitialize(const PhiField& phi, double cap) {
  const int W = phi.width, H = phi.height;
  if (!has_interface(phi)) throw ContourVanished("no zero crossing to reinitialize from");
  if (cap <= 0.0) cap = phi.band_width + 3.0;

  struct Segment {
    Point2 a, b;
  };
  std::vector<Segment> segments;
  auto crossing = [](double pa, double pb, Point2 a, Point2 b) {
    const double t = pa / (pa - pb);
    return Point2{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
  };
  for (int y = 0; y + 1 < H; ++y) {
    for (int x = 0; x + 1 < W; ++x) {
      const std::array<Point2, 4> pt{Point2{double(x), double(y)}, Point2{double(x + 1), double(y)},
                                     Point2{double(x + 1), double(y + 1)},
                                     Point2{double(x), double(y + 1)}};
      const std::array<double, 4> v{phi(x, y), phi(x + 1, y), phi(x + 1, y + 1), phi(x, y + 1)};
      std::array<Point2, 4> cross{};
      int n = 0;
      for (int e = 0; e < 4; ++e) {
        const int f = (e + 1) % 4;
        if ((v[e] < 0.0) != (v[f] < 0.0)) cross[n++] = crossing(v[e], v[f], pt[e], pt[f]);
      }
      if (n == 2) {
        segments.push_back({cross[0], cross[1]});
      } else if (n == 4) {
        const double center = 0.25 * (v[0] + v[1] + v[2] + v[3]);
        if ((center < 0.0) == (v[0] < 0.0)) {
          segments.push_back({cross[0], cross[3]});
          segments.push_back({cross[1], cross[2]});
        } else {
          segments.push_back({cross[0], cross[1]});
          segments.push_back({cross[2], cross[3]});
        }
      }
    }
  }
  // A sign change that no cell resolves (single-row or -column grids) still
  // needs an interface: fall back to edge crossings as degenerate segments.
  if (segments.empty()) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        if (x + 1 < W && (phi(x, y) < 0.0) != (phi(x + 1, y) < 0.0)) {
          const Point2 c = crossing(phi(x, y), phi(x + 1, y), {double(x), double(y)},
                                    {double(x + 1), double(y)});
          segments.push_back({c, c});
        }
        if (y + 1 < H && (phi(x, y) < 0.0) != (phi(x, y + 1) < 0.0)) {
          const Point2 c = crossing(phi(x, y), phi(x, y + 1), {double(x), double(y)},
                                    {double(x), double(y + 1)});
          segments.push_back({c, c});
        }
      }
    }
  }

  std::vector<double> dist(phi.phi.size(), cap);
  const int reach = static_cast<int>(std::ceil(cap));
  for (const auto& s : segments) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x, s.b.x))) - reach);
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(s.a.x, s.b.x))) + reach);
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y, s.b.y))) - reach);
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(s.a.y, s.b.y))) + reach);
    const double dx = s.b.x - s.a.x, dy = s.b.y - s.a.y;
    const double len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double t = len2 > 0 ? ((x - s.a.x) * dx + (y - s.a.y) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double d = std::hypot(x - (s.a.x + t * dx), y - (s.a.y + t * dy));
        double& cur = dist[static_cast<std::size_t>(y) * W + x];
        cur = std::min(cur, d);
      }
    }
  }
  PhiField out = phi;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    out.phi[i] = phi.phi[i] < 0.0 ? -dist[i] : dist[i];
  }
  return out;
}

// ---------------------------------------------------------------- driver

BoxRegion segmentation_roi(const BoxRegion& box, const Dims3& d) {
  const double cx = 0.5 * (box.min.x + box.max.x), cy = 0.5 * (box.min.y + box.max.y);
  const double half =
      1.5 * 0.5 * std::max(box.max.x - box.min.x + 1, box.max.y - box.min.y + 1) + 12.0;
  BoxRegion roi{{static_cast<int>(std::floor(cx - half)), static_cast<int>(std::floor(cy - half)), 0},
                {static_cast<int>(std::ceil(cx + half)), static_cast<int>(std::ceil(cy + half)),
                 d.nz - 1}};
  return clip_box(roi, d);
}

Image2D prepare_slice(const Volume3& v, int z, const BoxRegion& roi, const SegmentConfig& cfg) {
  const int W = roi.max.x - roi.min.x + 1, H = roi.max.y - roi.min.y + 1;
  Image2D raw(W, H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) raw(x, y) = v(roi.min.x + x, roi.min.y + y, z);
  }
  Image2D img = raw;
  if (cfg.smoothing_sigma > 0.0) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * cfg.smoothing_sigma)));
    std::vector<double> k(2 * r + 1);
    double ks = 0.0;
    for (int i = -r; i <= r; ++i) {
      k[i + r] = std::exp(-0.5 * i * i / (cfg.smoothing_sigma * cfg.smoothing_sigma));
      ks += k[i + r];
    }
    for (double& kv : k) kv /= ks;
    Image2D tmp(W, H);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * raw(std::clamp(x + i, 0, W - 1), y);
        tmp(x, y) = acc;
      }
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(x, std::clamp(y + i, 0, H - 1));
        img(x, y) = acc;
      }
    }
  }
  double mean = 0.0;
  for (double val : img.values) mean += val;
  mean /= static_cast<double>(img.values.size());
  double var = 0.0;
  for (double val : img.values) var += (val - mean) * (val - mean);
  const double scale =
      std::max(std::sqrt(var / static_cast<double>(img.values.size())), cfg.intensity_floor_hu);
  for (double& val : img.values) val = (val - mean) / scale;
  return img;
}

namespace {

SliceReport evolve_slice(const Image2D& img, Point2 a, Point2 b, const ConvNet& cnn,
                         const SegmentConfig& cfg, PhiField& phi) {
  SliceReport rep;
  phi = init_phi_from_points(a, b, img.width, img.height, cfg.band_width);
  EnergyWeights w;
  WindowParams win;
  SliceMask previous = inside_mask(phi);
  int stable = 0;
  double drift = 0.0;
  int since_reinit = 0;
  const Image2DView view = img.view();
  int it = 0;
  for (; it < cfg.max_iterations; ++it) {
    if (it % cfg.cnn_every == 0) {
      if (cfg.single_component && keep_largest_component(phi)) phi = reinitialize(phi);
      const Circle c = contour_circle(phi);
      if (c.radius <= 0.0) throw ContourVanished("contour has no interior");
      w = lambdas_from_probs(forward(cnn, make_patch(view, c, cnn.spec.input)), cfg.mu_factor);
      const int half = std::max(2, static_cast<int>(std::lround(c.radius)));
      const int x0 = std::clamp(static_cast<int>(std::lround(c.cx)) - half, 0, img.width - 1);
      const int x1 = std::clamp(static_cast<int>(std::lround(c.cx)) + half, 0, img.width - 1);
      const int y0 = std::clamp(static_cast<int>(std::lround(c.cy)) - half, 0, img.height - 1);
      const int y1 = std::clamp(static_cast<int>(std::lround(c.cy)) + half, 0, img.height - 1);
      Image2D crop(x1 - x0 + 1, y1 - y0 + 1);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) crop(x - x0, y - y0) = img(x, y);
      }
      win = adaptive_window(std::max(2.0, 2.0 * c.radius), window_texture(crop.view()).homogeneity);

      if (it > 0) {
        const SliceMask now = inside_mask(phi);
        std::size_t changed = 0;
        for (std::size_t i = 0; i < now.values.size(); ++i) changed += now.values[i] != previous.values[i];
        const double area = static_cast<double>(now.count());
        stable = changed < cfg.convergence_fraction * area ? stable + 1 : 0;
        previous = now;
        if (stable >= cfg.convergence_checks) {
          rep.converged = true;
          break;
        }
      }
    }
    StepInfo info;
    phi = evolve_step(phi, view, w, win, cfg.dt_max, &info);
    drift += info.max_change;
    ++since_reinit;
    if (since_reinit >= cfg.reinit_every || drift >= cfg.band_width - 1.0) {
      phi = reinitialize(phi);
      since_reinit = 0;
      drift = 0.0;
    }
  }
  rep.iterations = it;
  if (cfg.single_component && keep_largest_component(phi)) phi = reinitialize(phi);
  if (cfg.reject_outside) {
    const Circle c = contour_circle(phi);
    if (c.radius <= 0.0) throw ContourVanished("contour has no interior");
    const ClassProbs p = forward(cnn, make_patch(view, c, cnn.spec.input));
    if (p.p3 > p.p1 && p.p3 > p.p2) throw ContourVanished("contour settled outside the lesion");
  }
  rep.final_lambda1 = w.lambda1;
  rep.final_lambda2 = w.lambda2;
  rep.window_side = win.side;
  return rep;
}

}  // namespace

LesionSegmentation segment_lesion(const Volume3& v, const BoxRegion& box, const ConvNet& cnn,
                                  const SegmentConfig& cfg) {
  const Dims3& d = v.dims();
  if (!box.within(d)) throw ValidationError("detection box outside volume");
  if (box.min.x == box.max.x && box.min.y == box.max.y) {
    throw ValidationError("degenerate detection box");
  }
  LesionSegmentation out{Mask3(d, v.spacing()), {}, {}};
  const int pad = std::max(0, cfg.slice_padding);
  const int padz = std::max(0, cfg.slice_padding_z);
  const BoxRegion grown = clip_box(
      {{box.min.x - pad, box.min.y - pad, box.min.z - padz}, {box.max.x + pad, box.max.y + pad, box.max.z + padz}},
      d);
  const BoxRegion roi = segmentation_roi(grown, d);
  const Point2 a{double(grown.min.x - roi.min.x), double(grown.min.y - roi.min.y)};
  const Point2 b{double(grown.max.x - roi.min.x), double(grown.max.y - roi.min.y)};

  for (int z = grown.min.z; z <= grown.max.z; ++z) {
    const Image2D img = prepare_slice(v, z, roi, cfg);
    PhiField phi;
    SliceReport rep;
    try {
      rep = evolve_slice(img, a, b, cnn, cfg, phi);
    } catch (const ContourVanished& e) {
      rep.vanished = true;
      out.warnings.push_back("slice z=" + std::to_string(z) + ": " + e.what() + "; mask left empty");
    }
    rep.z = z;
    if (!rep.vanished) {
      for (int y = 0; y < phi.height; ++y) {
        for (int x = 0; x < phi.width; ++x) {
          if (phi.inside(x, y)) out.mask(roi.min.x + x, roi.min.y + y, z) = 1;
        }
      }
    }
    out.slices.push_back(rep);
  }
  return out;
}

}  // namespace lesion
