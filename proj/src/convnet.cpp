#include "lesion/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lesion/errors.hpp"
#include "lesion/random.hpp"

namespace lesion {

void NetSpec::validate() const {
  if (input < NetSpec::kKernel || conv1_maps < 1 || conv2_maps < 1 || fc_width < 1) {
    throw ValidationError("invalid network spec");
  }
  if (conv1_size() % 2 != 0 || pool1_size() < kKernel || conv2_size() % 2 != 0 ||
      pool2_size() < 1) {
    throw ValidationError("network input size does not pool evenly");
  }
}

ConvNet ConvNet::zeros(const NetSpec& spec) {
  spec.validate();
  ConvNet n;
  n.spec = spec;
  const int k2 = NetSpec::kKernel * NetSpec::kKernel;
  n.conv1_w.assign(static_cast<std::size_t>(spec.conv1_maps) * k2, 0.0);
  n.conv1_b.assign(spec.conv1_maps, 0.0);
  n.conv2_w.assign(static_cast<std::size_t>(spec.conv2_maps) * spec.conv1_maps * k2, 0.0);
  n.conv2_b.assign(spec.conv2_maps, 0.0);
  n.fc1_w.assign(static_cast<std::size_t>(spec.fc_width) * spec.flat_size(), 0.0);
  n.fc1_b.assign(spec.fc_width, 0.0);
  n.fc2_w.assign(static_cast<std::size_t>(NetSpec::kClasses) * spec.fc_width, 0.0);
  n.fc2_b.assign(NetSpec::kClasses, 0.0);
  return n;
}

ConvNet ConvNet::init(const NetSpec& spec, std::uint64_t seed) {
  ConvNet n = zeros(spec);
  Rng rng(derive_seed(seed, "cnn.init"));
  auto fill = [&](std::vector<double>& w, double fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (double& v : w) v = uniform(rng, -bound, bound);
  };
  const int k2 = NetSpec::kKernel * NetSpec::kKernel;
  fill(n.conv1_w, k2);
  fill(n.conv2_w, static_cast<double>(spec.conv1_maps) * k2);
  fill(n.fc1_w, spec.flat_size());
  fill(n.fc2_w, spec.fc_width);
  return n;
}

std::array<std::vector<double>*, ConvNet::kBlocks> ConvNet::blocks() {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
}

std::array<const std::vector<double>*, ConvNet::kBlocks> ConvNet::blocks() const {
  return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc1_w, &fc1_b, &fc2_w, &fc2_b};
}

std::size_t ConvNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto* b : blocks()) n += b->size();
  return n;
}

std::array<double, 3> softmax3(const std::array<double, 3>& z) {
  const double m = std::max({z[0], z[1], z[2]});
  std::array<double, 3> e{std::exp(z[0] - m), std::exp(z[1] - m), std::exp(z[2] - m)};
  const double s = e[0] + e[1] + e[2];
  return {e[0] / s, e[1] / s, e[2] / s};
}

namespace {

constexpr int K = NetSpec::kKernel;

// Activations kept for the backward pass.
struct Trace {
  std::vector<double> a1, h1, p1;  // conv1 pre/post activation, pool1
  std::vector<int> arg1;
  std::vector<double> a2, h2, p2;
  std::vector<int> arg2;
  std::vector<double> z3, h3;
  std::array<double, 3> logits{};
};

double leaky(double a, double slope) { return a > 0 ? a : slope * a; }
double leaky_grad(double a, double slope) { return a > 0 ? 1.0 : slope; }

// Valid 5x5 convolution (cross-correlation) of `in` (cin x n x n).
void conv_forward(const std::vector<double>& in, int cin, int n, const std::vector<double>& w,
                  const std::vector<double>& b, int cout, std::vector<double>& out) {
  const int m = n - K + 1;
  out.assign(static_cast<std::size_t>(cout) * m * m, 0.0);
  for (int o = 0; o < cout; ++o) {
    double* dst = out.data() + static_cast<std::size_t>(o) * m * m;
    std::fill(dst, dst + m * m, b[o]);
    for (int c = 0; c < cin; ++c) {
      const double* src = in.data() + static_cast<std::size_t>(c) * n * n;
      const double* ker = w.data() + (static_cast<std::size_t>(o) * cin + c) * K * K;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          const double wk = ker[ky * K + kx];
          for (int y = 0; y < m; ++y) {
            const double* s = src + static_cast<std::size_t>(y + ky) * n + kx;
            double* d = dst + static_cast<std::size_t>(y) * m;
            for (int x = 0; x < m; ++x) d[x] += wk * s[x];
          }
        }
      }
    }
  }
}

void pool_forward(const std::vector<double>& in, int maps, int n, std::vector<double>& out,
                  std::vector<int>& arg) {
  const int m = n / 2;
  out.assign(static_cast<std::size_t>(maps) * m * m, 0.0);
  arg.assign(out.size(), 0);
  for (int c = 0; c < maps; ++c) {
    for (int y = 0; y < m; ++y) {
      for (int x = 0; x < m; ++x) {
        int best = (c * n + 2 * y) * n + 2 * x;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (c * n + 2 * y + dy) * n + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(c) * m + y) * m + x;
        out[o] = in[best];
        arg[o] = best;
      }
    }
  }
}

void run_forward(const ConvNet& net, std::span<const double> patch, Trace& t) {
  const NetSpec& s = net.spec;
  if (static_cast<int>(patch.size()) != s.input * s.input) {
    throw ValidationError("patch size does not match network input");
  }
  const double slope = s.leaky_slope;
  const std::vector<double> x(patch.begin(), patch.end());
  conv_forward(x, 1, s.input, net.conv1_w, net.conv1_b, s.conv1_maps, t.a1);
  t.h1.resize(t.a1.size());
  for (std::size_t i = 0; i < t.a1.size(); ++i) t.h1[i] = leaky(t.a1[i], slope);
  pool_forward(t.h1, s.conv1_maps, s.conv1_size(), t.p1, t.arg1);
  conv_forward(t.p1, s.conv1_maps, s.pool1_size(), net.conv2_w, net.conv2_b, s.conv2_maps, t.a2);
  t.h2.resize(t.a2.size());
  for (std::size_t i = 0; i < t.a2.size(); ++i) t.h2[i] = leaky(t.a2[i], slope);
  pool_forward(t.h2, s.conv2_maps, s.conv2_size(), t.p2, t.arg2);

  const int flat = s.flat_size();
  t.z3.assign(s.fc_width, 0.0);
  t.h3.assign(s.fc_width, 0.0);
  for (int j = 0; j < s.fc_width; ++j) {
    const double* w = net.fc1_w.data() + static_cast<std::size_t>(j) * flat;
    double acc = net.fc1_b[j];
    for (int i = 0; i < flat; ++i) acc += w[i] * t.p2[i];
    t.z3[j] = acc;
    t.h3[j] = leaky(acc, slope);
  }
  for (int c = 0; c < 3; ++c) {
    const double* w = net.fc2_w.data() + static_cast<std::size_t>(c) * s.fc_width;
    double acc = net.fc2_b[c];
    for (int j = 0; j < s.fc_width; ++j) acc += w[j] * t.h3[j];
    t.logits[c] = acc;
  }
}

// Accumulates d(loss)/d(params) scaled by `scale` into g.
void run_backward(const ConvNet& net, std::span<const double> patch, const Trace& t, int label,
                  double scale, ConvNet& g) {
  const NetSpec& s = net.spec;
  const double slope = s.leaky_slope;
  const auto probs = softmax3(t.logits);
  std::array<double, 3> dlog{};
  for (int c = 0; c < 3; ++c) dlog[c] = scale * (probs[c] - (c == label - 1 ? 1.0 : 0.0));

  std::vector<double> dz3(s.fc_width, 0.0);
  for (int c = 0; c < 3; ++c) {
    g.fc2_b[c] += dlog[c];
    double* gw = g.fc2_w.data() + static_cast<std::size_t>(c) * s.fc_width;
    const double* w = net.fc2_w.data() + static_cast<std::size_t>(c) * s.fc_width;
    for (int j = 0; j < s.fc_width; ++j) {
      gw[j] += dlog[c] * t.h3[j];
      dz3[j] += dlog[c] * w[j];
    }
  }
  const int flat = s.flat_size();
  std::vector<double> dp2(flat, 0.0);
  for (int j = 0; j < s.fc_width; ++j) {
    const double d = dz3[j] * leaky_grad(t.z3[j], slope);
    if (d == 0.0) continue;
    g.fc1_b[j] += d;
    double* gw = g.fc1_w.data() + static_cast<std::size_t>(j) * flat;
    const double* w = net.fc1_w.data() + static_cast<std::size_t>(j) * flat;
    for (int i = 0; i < flat; ++i) {
      gw[i] += d * t.p2[i];
      dp2[i] += d * w[i];
    }
  }

  // pool2 -> conv2
  const int n2 = s.conv2_size(), n1 = s.pool1_size();
  std::vector<double> da2(t.a2.size(), 0.0);
  for (std::size_t i = 0; i < dp2.size(); ++i) da2[t.arg2[i]] += dp2[i];
  for (std::size_t i = 0; i < da2.size(); ++i) da2[i] *= leaky_grad(t.a2[i], slope);

  std::vector<double> dp1(t.p1.size(), 0.0);
  for (int o = 0; o < s.conv2_maps; ++o) {
    const double* d = da2.data() + static_cast<std::size_t>(o) * n2 * n2;
    double bsum = 0.0;
    for (int i = 0; i < n2 * n2; ++i) bsum += d[i];
    g.conv2_b[o] += bsum;
    for (int c = 0; c < s.conv1_maps; ++c) {
      const double* src = t.p1.data() + static_cast<std::size_t>(c) * n1 * n1;
      double* dsrc = dp1.data() + static_cast<std::size_t>(c) * n1 * n1;
      const std::size_t kbase = (static_cast<std::size_t>(o) * s.conv1_maps + c) * K * K;
      for (int ky = 0; ky < K; ++ky) {
        for (int kx = 0; kx < K; ++kx) {
          const double wk = net.conv2_w[kbase + ky * K + kx];
          double acc = 0.0;
          for (int y = 0; y < n2; ++y) {
            const double* sr = src + static_cast<std::size_t>(y + ky) * n1 + kx;
            double* dr = dsrc + static_cast<std::size_t>(y + ky) * n1 + kx;
            const double* dd = d + static_cast<std::size_t>(y) * n2;
            for (int x = 0; x < n2; ++x) {
              acc += dd[x] * sr[x];
              dr[x] += dd[x] * wk;
            }
          }
          g.conv2_w[kbase + ky * K + kx] += acc;
        }
      }
    }
  }

  // pool1 -> conv1
  const int c1 = s.conv1_size(), in = s.input;
  std::vector<double> da1(t.a1.size(), 0.0);
  for (std::size_t i = 0; i < dp1.size(); ++i) da1[t.arg1[i]] += dp1[i];
  for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= leaky_grad(t.a1[i], slope);
  for (int o = 0; o < s.conv1_maps; ++o) {
    const double* d = da1.data() + static_cast<std::size_t>(o) * c1 * c1;
    double bsum = 0.0;
    for (int i = 0; i < c1 * c1; ++i) bsum += d[i];
    g.conv1_b[o] += bsum;
    for (int ky = 0; ky < K; ++ky) {
      for (int kx = 0; kx < K; ++kx) {
        double acc = 0.0;
        for (int y = 0; y < c1; ++y) {
          const double* sr = patch.data() + static_cast<std::size_t>(y + ky) * in + kx;
          const double* dd = d + static_cast<std::size_t>(y) * c1;
          for (int x = 0; x < c1; ++x) acc += dd[x] * sr[x];
        }
        g.conv1_w[(static_cast<std::size_t>(o) * K + ky) * K + kx] += acc;
      }
    }
  }
}

double sample_loss(const Trace& t, int label) {
  const auto& z = t.logits;
  const double m = std::max({z[0], z[1], z[2]});
  const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m) + std::exp(z[2] - m));
  return lse - z[label - 1];
}

void check_label(int label) {
  if (label < 1 || label > 3) throw ValidationError("patch label must be 1, 2 or 3");
}

}  // namespace

ClassProbs forward(const ConvNet& net, std::span<const double> patch) {
  Trace t;
  run_forward(net, patch, t);
  const auto p = softmax3(t.logits);
  return {p[0], p[1], p[2]};
}

double mean_loss(const ConvNet& net, std::span<const PatchSample> batch) {
  if (batch.empty()) throw ValidationError("empty batch");
  Trace t;
  double sum = 0.0;
  for (const auto& s : batch) {
    check_label(s.label);
    run_forward(net, s.pixels, t);
    sum += sample_loss(t, s.label);
  }
  return sum / static_cast<double>(batch.size());
}

LossGrad loss_and_grad(const ConvNet& net, std::span<const PatchSample> batch) {
  if (batch.empty()) throw ValidationError("empty batch");
  LossGrad out{0.0, ConvNet::zeros(net.spec)};
  const double scale = 1.0 / static_cast<double>(batch.size());
  Trace t;
  for (const auto& s : batch) {
    check_label(s.label);
    run_forward(net, s.pixels, t);
    out.loss += sample_loss(t, s.label) * scale;
    run_backward(net, s.pixels, t, s.label, scale, out.grad);
  }
  return out;
}

double accuracy(const ConvNet& net, std::span<const PatchSample> data) {
  if (data.empty()) return 0.0;
  std::size_t right = 0;
  for (const auto& s : data) {
    const ClassProbs p = forward(net, s.pixels);
    int pred = 1;
    if (p.p2 > p.p1 && p.p2 >= p.p3) pred = 2;
    else if (p.p3 > p.p1 && p.p3 > p.p2) pred = 3;
    right += pred == s.label;
  }
  return static_cast<double>(right) / static_cast<double>(data.size());
}

TrainResult sgd_train(ConvNet net, std::span<const PatchSample> data, const SgdOptions& opt) {
  std::array<bool, 3> seen{};
  for (const auto& s : data) {
    check_label(s.label);
    seen[s.label - 1] = true;
  }
  if (!seen[0] || !seen[1] || !seen[2]) {
    throw ValidationError("CNN training data must contain all three classes");
  }
  if (opt.epochs < 0 || opt.batch_size < 1) throw ValidationError("invalid SGD options");

  TrainResult out;
  out.initial_loss = mean_loss(net, data);
  ConvNet velocity = ConvNet::zeros(net.spec);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(opt.seed, "cnn.shuffle"));
  std::vector<PatchSample> batch;

  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(data[order[i]]);
      const LossGrad lg = loss_and_grad(net, batch);
      epoch_loss += lg.loss * static_cast<double>(end - start);
      auto params = net.blocks();
      auto vel = velocity.blocks();
      const auto grads = lg.grad.blocks();
      for (int b = 0; b < ConvNet::kBlocks; ++b) {
        auto& p = *params[b];
        auto& v = *vel[b];
        const auto& g = *grads[b];
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = opt.momentum * v[i] - opt.learning_rate * g[i];
          p[i] += v[i];
        }
      }
    }
    out.loss_curve.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  out.net = std::move(net);
  return out;
}

// ---------------------------------------------------------------- patches

PatchCrop patch_crop(const Circle& c) {
  const double side = 3.0 * c.radius;
  return {c.cx - side / 2.0, c.cy - side / 2.0, side};
}

std::vector<double> make_patch(const Image2DView& slice, const Circle& contour, int out_size) {
  if (!(contour.radius > 0.0)) throw ValidationError("contour radius must be > 0");
  if (out_size < 1 || slice.width < 1 || slice.height < 1) {
    throw ValidationError("invalid patch geometry");
  }
  const PatchCrop crop = patch_crop(contour);
  if (crop.x0 + crop.side < 0.0 || crop.y0 + crop.side < 0.0 || crop.x0 > slice.width - 1.0 ||
      crop.y0 > slice.height - 1.0) {
    throw ValidationError("patch crop lies entirely outside the slice");
  }
  std::vector<double> out(static_cast<std::size_t>(out_size) * out_size);
  const double step = crop.side / out_size;
  for (int j = 0; j < out_size; ++j) {
    const double y = std::clamp(crop.y0 + (j + 0.5) * step, 0.0, slice.height - 1.0);
    const int y0 = std::min(static_cast<int>(std::floor(y)), slice.height - 1);
    const int y1 = std::min(y0 + 1, slice.height - 1);
    const double fy = y - y0;
    for (int i = 0; i < out_size; ++i) {
      const double x = std::clamp(crop.x0 + (i + 0.5) * step, 0.0, slice.width - 1.0);
      const int x0 = std::min(static_cast<int>(std::floor(x)), slice.width - 1);
      const int x1 = std::min(x0 + 1, slice.width - 1);
      const double fx = x - x0;
      const double top = slice(x0, y0) * (1 - fx) + slice(x1, y0) * fx;
      const double bot = slice(x0, y1) * (1 - fx) + slice(x1, y1) * fx;
      out[static_cast<std::size_t>(j) * out_size + i] = top * (1 - fy) + bot * fy;
    }
  }
  const double mean = std::accumulate(out.begin(), out.end(), 0.0) / out.size();
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(var / out.size()), 1e-6);
  for (double& v : out) v = (v - mean) / sd;
  return out;
}

int label_patch(const Circle& contour, const SliceMask& gt) {
  double area = 0.0, sx = 0.0, sy = 0.0;
  for (int y = 0; y < gt.height; ++y) {
    for (int x = 0; x < gt.width; ++x) {
      if (!gt(x, y)) continue;
      area += 1.0;
      sx += x;
      sy += y;
    }
  }
  if (area == 0.0) throw ValidationError("ground-truth slice mask is empty");
  const double r_eq = std::sqrt(area / M_PI);
  const double gx = sx / area, gy = sy / area;
  if (std::hypot(contour.cx - gx, contour.cy - gy) <= 0.5) {
    const double rho = contour.radius / r_eq;
    if (rho < 0.7) return 1;
    if (rho > 1.3) return 3;
    return 2;
  }

  // Offset contour: mean signed distance of contour samples to the gt boundary.
  std::vector<Point2> boundary;
  auto fg = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < gt.width && y < gt.height && gt(x, y) != 0;
  };
  for (int y = 0; y < gt.height; ++y) {
    for (int x = 0; x < gt.width; ++x) {
      if (fg(x, y) && (!fg(x - 1, y) || !fg(x + 1, y) || !fg(x, y - 1) || !fg(x, y + 1))) {
        boundary.push_back({double(x), double(y)});
      }
    }
  }
  constexpr int kSamples = 64;
  double total = 0.0;
  for (int k = 0; k < kSamples; ++k) {
    const double a = 2.0 * M_PI * k / kSamples;
    const double px = contour.cx + contour.radius * std::cos(a);
    const double py = contour.cy + contour.radius * std::sin(a);
    double d = std::numeric_limits<double>::max();
    for (const auto& b : boundary) d = std::min(d, std::hypot(px - b.x, py - b.y));
    const bool inside = fg(static_cast<int>(std::lround(px)), static_cast<int>(std::lround(py)));
    total += inside ? -d : d;
  }
  const double mean = total / kSamples;
  if (mean < -0.3 * r_eq) return 1;
  if (mean > 0.3 * r_eq) return 3;
  return 2;
}

namespace detail {

std::vector<int> activation_pattern(const ConvNet& net, std::span<const double> patch) {
  Trace t;
  run_forward(net, patch, t);
  std::vector<int> p;
  p.reserve(t.a1.size() + t.a2.size() + t.z3.size() + t.arg1.size() + t.arg2.size());
  for (double a : t.a1) p.push_back(a > 0);
  for (double a : t.a2) p.push_back(a > 0);
  for (double a : t.z3) p.push_back(a > 0);
  p.insert(p.end(), t.arg1.begin(), t.arg1.end());
  p.insert(p.end(), t.arg2.begin(), t.arg2.end());
  return p;
}

}  // namespace detail

}  // namespace lesion
