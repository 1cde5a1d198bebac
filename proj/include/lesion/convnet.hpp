#pragma once

// Small convolutional network classifying a contour-centered patch into
// {inside-far, near-boundary, outside-far}.
//
//   conv 5x5 -> leaky ReLU -> max-pool 2 -> conv 5x5 -> leaky ReLU ->
//   max-pool 2 -> FC -> leaky ReLU -> FC(3) -> softmax

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "lesion/image2d.hpp"

namespace lesion {

struct NetSpec {
  static constexpr int kKernel = 5;
  static constexpr int kClasses = 3;

  int input = 32;
  int conv1_maps = 8;
  int conv2_maps = 16;
  int fc_width = 128;
  double leaky_slope = 0.01;

  int conv1_size() const { return input - kKernel + 1; }
  int pool1_size() const { return conv1_size() / 2; }
  int conv2_size() const { return pool1_size() - kKernel + 1; }
  int pool2_size() const { return conv2_size() / 2; }
  int flat_size() const { return pool2_size() * pool2_size() * conv2_maps; }

  /// Throws ValidationError unless every stage has an even, positive size.
  void validate() const;
};

/// Parameters, row-major:
///   conv1_w[m][ky][kx], conv2_w[m2][m1][ky][kx], fc1_w[j][flat], fc2_w[c][j]
/// where flat = (map * pool2 + y) * pool2 + x.
struct ConvNet {
  NetSpec spec;
  std::vector<double> conv1_w, conv1_b;
  std::vector<double> conv2_w, conv2_b;
  std::vector<double> fc1_w, fc1_b;
  std::vector<double> fc2_w, fc2_b;

  static ConvNet zeros(const NetSpec& spec);
  /// He-style uniform init scaled by fan-in; biases zero.
  static ConvNet init(const NetSpec& spec, std::uint64_t seed);

  static constexpr int kBlocks = 8;
  static constexpr std::array<std::string_view, kBlocks> kBlockNames{
      "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b"};
  std::array<std::vector<double>*, kBlocks> blocks();
  std::array<const std::vector<double>*, kBlocks> blocks() const;
  std::size_t parameter_count() const;
};

struct ClassProbs {
  double p1 = 1.0 / 3;  // contour inside the lesion, far from its boundary
  double p2 = 1.0 / 3;  // contour near the boundary
  double p3 = 1.0 / 3;  // contour outside, far from the boundary
};

struct PatchSample {
  std::vector<double> pixels;  // input x input, normalized
  int label = 1;               // 1, 2 or 3
};

/// Numerically stable softmax over 3 logits.
std::array<double, 3> softmax3(const std::array<double, 3>& logits);

ClassProbs forward(const ConvNet& net, std::span<const double> patch);

struct LossGrad {
  double loss = 0.0;
  ConvNet grad;  // same shapes as the network
};

/// Mean cross-entropy over the batch and its gradient.
LossGrad loss_and_grad(const ConvNet& net, std::span<const PatchSample> batch);

/// Mean cross-entropy only.
double mean_loss(const ConvNet& net, std::span<const PatchSample> batch);

struct SgdOptions {
  int epochs = 20;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ConvNet net;
  double initial_loss = 0.0;
  std::vector<double> loss_curve;  // mean batch loss per epoch
};

/// Mini-batch SGD with momentum and a seed-fixed shuffle. Throws
/// ValidationError unless all three classes are present.
TrainResult sgd_train(ConvNet net, std::span<const PatchSample> data, const SgdOptions& opt);

double accuracy(const ConvNet& net, std::span<const PatchSample> data);

/// Square crop of side 3 * radius centered on the circle.
struct PatchCrop {
  double x0 = 0.0;
  double y0 = 0.0;
  double side = 0.0;
};
PatchCrop patch_crop(const Circle& contour);

/// Bilinear resample of the crop to out_size^2, then zero-mean / unit-std
/// (std floored at 1e-6). Throws ValidationError for radius <= 0 or a crop
/// that misses the image entirely.
std::vector<double> make_patch(const Image2DView& slice, const Circle& contour, int out_size = 32);

/// Class of a contour against a ground-truth slice mask: concentric contours
/// use the radius ratio (< 0.7 inside, > 1.3 outside); offset contours use
/// the mean signed distance to the boundary (+-0.3 equivalent radius).
int label_patch(const Circle& contour, const SliceMask& gt);

namespace detail {
/// ReLU signs and pooling argmaxes of a forward pass; finite-difference
/// checks use it to detect kink crossings.
std::vector<int> activation_pattern(const ConvNet& net, std::span<const double> patch);
}  // namespace detail

}  // namespace lesion
