#pragma once

// Central finite-difference check of loss_and_grad, shared by the unit and
// acceptance tests.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "lesion/convnet.hpp"
#include "lesion/random.hpp"

namespace gradcheck {

struct BlockResult {
  std::size_t checked = 0;
  std::size_t kinks = 0;  // perturbation crossed a ReLU sign or a pool argmax
  double max_rel = 0.0;
};

// Relative error with a floor on the denominator. Central differences on a
// loss of order 1 resolve gradients only to about 1e-16 / eps = 1e-12, so
// entries below the floor are judged by absolute error (< tol * floor).
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline std::vector<std::vector<int>> patterns(const lesion::ConvNet& net,
                                              std::span<const lesion::PatchSample> batch) {
  std::vector<std::vector<int>> out;
  for (const auto& s : batch) out.push_back(lesion::detail::activation_pattern(net, s.pixels));
  return out;
}

/// Checks `limit` entries of block `b` (all of them when limit is 0 or
/// exceeds the block size; otherwise a seeded random subset).
inline BlockResult check_block(const lesion::ConvNet& net, std::span<const lesion::PatchSample> batch,
                               int b, std::size_t limit = 0, double eps = 1e-4,
                               std::uint64_t seed = 1) {
  const lesion::LossGrad lg = lesion::loss_and_grad(net, batch);
  const auto base = patterns(net, batch);
  const std::vector<double>& grad = *lg.grad.blocks()[b];

  std::vector<std::size_t> idx(grad.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (limit > 0 && limit < idx.size()) {
    lesion::Rng rng(lesion::derive_seed(seed, "gradcheck", static_cast<std::uint64_t>(b)));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }

  BlockResult r;
  lesion::ConvNet probe = net;
  std::vector<double>& p = *probe.blocks()[b];
  for (std::size_t i : idx) {
    const double orig = p[i];
    p[i] = orig + eps;
    const double lp = lesion::mean_loss(probe, batch);
    const bool same_p = patterns(probe, batch) == base;
    p[i] = orig - eps;
    const double lm = lesion::mean_loss(probe, batch);
    const bool same_m = patterns(probe, batch) == base;
    p[i] = orig;
    if (!same_p || !same_m) {
      ++r.kinks;
      continue;
    }
    const double numeric = (lp - lm) / (2 * eps);
    r.max_rel = std::max(r.max_rel, rel_error(grad[i], numeric));
    ++r.checked;
  }
  return r;
}

/// Seeded random patches with labels 1, 2, 3, ...
inline std::vector<lesion::PatchSample> random_batch(const lesion::NetSpec& spec, int n,
                                                     std::uint64_t seed) {
  lesion::Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<lesion::PatchSample> out;
  for (int k = 0; k < n; ++k) {
    lesion::PatchSample s;
    s.pixels.resize(static_cast<std::size_t>(spec.input) * spec.input);
    for (double& v : s.pixels) v = g(rng);
    s.label = k % 3 + 1;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace gradcheck
