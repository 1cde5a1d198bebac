#include <doctest.h>

#include <chrono>
#include <cmath>

#include "gradcheck.hpp"
#include "lesion/convnet.hpp"
#include "lesion/errors.hpp"

using namespace lesion;

namespace {

NetSpec small_spec() {
  NetSpec s;
  s.input = 20;
  s.conv1_maps = 3;
  s.conv2_maps = 4;
  s.fc_width = 6;
  return s;
}

double prob_sum(const ClassProbs& p) { return p.p1 + p.p2 + p.p3; }

// Disk patches that separate by radius: small disks, rim-sized disks, empty.
std::vector<PatchSample> toy_set(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PatchSample> out;
  for (int k = 0; k < n; ++k) {
    const int label = k % 3 + 1;
    const double r = label == 1 ? 14.0 : label == 2 ? 8.0 : 3.0;
    const double cx = 15.5 + uniform(rng, -2, 2), cy = 15.5 + uniform(rng, -2, 2);
    Image2D im(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        im(x, y) = (std::hypot(x - cx, y - cy) < r ? -1.0 : 1.0) + 0.2 * uniform(rng, -1, 1);
    out.push_back({make_patch(im.view(), Circle{15.5, 15.5, 32.0 / 3}), label});
  }
  return out;
}

}  // namespace

TEST_CASE("network shape arithmetic") {
  NetSpec s;
  CHECK(s.conv1_size() == 28);
  CHECK(s.pool1_size() == 14);
  CHECK(s.conv2_size() == 10);
  CHECK(s.pool2_size() == 5);
  CHECK(s.flat_size() == 400);
  CHECK(NetSpec::kKernel == 5);
  CHECK(NetSpec::kClasses == 3);
  const ConvNet net = ConvNet::init(s, 1);
  CHECK(net.conv1_w.size() == 8 * 25);
  CHECK(net.conv2_w.size() == 16 * 8 * 25);
  CHECK(net.fc1_w.size() == 128 * 400);
  CHECK(net.fc2_w.size() == 3 * 128);
  CHECK(net.parameter_count() == 200 + 8 + 3200 + 16 + 51200 + 128 + 384 + 3);

  NetSpec bad;
  bad.input = 30;  // conv1 26 -> pool 13 -> conv2 9 (odd)
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("zero network is uniform") {
  const ConvNet z = ConvNet::zeros(NetSpec{});
  const std::vector<double> patch(32 * 32, 0.7);
  const ClassProbs p = forward(z, patch);
  CHECK(p.p1 == doctest::Approx(1.0 / 3));
  CHECK(p.p2 == doctest::Approx(1.0 / 3));
  CHECK(p.p3 == doctest::Approx(1.0 / 3));
  const auto batch = gradcheck::random_batch(NetSpec{}, 5, 3);
  CHECK(mean_loss(z, batch) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss_and_grad(z, batch).loss == doctest::Approx(1.0986122886681098).epsilon(1e-12));
  CHECK_THROWS_AS(forward(z, std::vector<double>(31 * 32)), ValidationError);
}

TEST_CASE("softmax") {
  const auto p = softmax3({1.0, -2.0, 0.5});
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-15));
  for (double shift : {-500.0, -3.0, 7.0, 800.0}) {
    const auto q = softmax3({1.0 + shift, -2.0 + shift, 0.5 + shift});
    for (int i = 0; i < 3; ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));
  }
  const auto big = softmax3({1000.0, 0.0, -1000.0});
  CHECK(big[0] == 1.0);
  CHECK(std::isfinite(big[2]));
}

TEST_CASE("forward outputs stay on the simplex") {
  const ConvNet net = ConvNet::init(NetSpec{}, 17);
  for (const auto& s : gradcheck::random_batch(NetSpec{}, 20, 4)) {
    const ClassProbs p = forward(net, s.pixels);
    CHECK(std::abs(prob_sum(p) - 1.0) < 1e-6);
    CHECK(p.p1 >= 0.0);
    CHECK(p.p2 >= 0.0);
    CHECK(p.p3 >= 0.0);
    const ClassProbs q = forward(net, s.pixels);
    CHECK(p.p1 == q.p1);
    CHECK(p.p3 == q.p3);
  }
  const ConvNet again = ConvNet::init(NetSpec{}, 17);
  CHECK(again.fc1_w == net.fc1_w);
  CHECK_FALSE(ConvNet::init(NetSpec{}, 18).fc1_w == net.fc1_w);
}

TEST_CASE("gradients match finite differences on a small net") {
  const NetSpec spec = small_spec();
  const ConvNet net = ConvNet::init(spec, 5);
  const auto batch = gradcheck::random_batch(spec, 2, 6);
  for (int b = 0; b < ConvNet::kBlocks; ++b) {
    const auto r = gradcheck::check_block(net, batch, b);
    INFO("block ", ConvNet::kBlockNames[b], " checked ", r.checked, " kinks ", r.kinks);
    CHECK(r.checked > 0);
    CHECK(r.kinks * 10 <= r.checked + r.kinks);
    CHECK(r.max_rel < 1e-5);
  }
}

TEST_CASE("gradients match finite differences on the default net") {
  const ConvNet net = ConvNet::init(NetSpec{}, 8);
  const auto batch = gradcheck::random_batch(NetSpec{}, 2, 9);
  for (int b = 0; b < ConvNet::kBlocks; ++b) {
    const auto r = gradcheck::check_block(net, batch, b, 60);
    INFO("block ", ConvNet::kBlockNames[b]);
    CHECK(r.checked > 0);
    CHECK(r.max_rel < 1e-5);
  }
}

TEST_CASE("duplicated batch leaves loss and gradient unchanged") {
  const ConvNet net = ConvNet::init(small_spec(), 2);
  auto batch = gradcheck::random_batch(small_spec(), 3, 1);
  const LossGrad a = loss_and_grad(net, batch);
  const auto copy = batch;
  batch.insert(batch.end(), copy.begin(), copy.end());
  const LossGrad b = loss_and_grad(net, batch);
  CHECK(b.loss == doctest::Approx(a.loss).epsilon(1e-14));
  for (int k = 0; k < ConvNet::kBlocks; ++k) {
    const auto& ga = *a.grad.blocks()[k];
    const auto& gb = *b.grad.blocks()[k];
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(gb[i] == doctest::Approx(ga[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(loss_and_grad(net, std::vector<PatchSample>{}), ValidationError);
}

TEST_CASE("SGD overfits a small toy set") {
  const auto data = toy_set(30, 12);
  SgdOptions opt;
  opt.epochs = 200;
  opt.learning_rate = 0.01;
  opt.seed = 3;
  const TrainResult r = sgd_train(ConvNet::init(NetSpec{}, 3), data, opt);
  CHECK(accuracy(r.net, data) == 1.0);
  REQUIRE(r.loss_curve.size() == 200);
  CHECK(r.loss_curve.back() < r.initial_loss);

  SgdOptions few = opt;
  few.epochs = 3;
  const TrainResult a = sgd_train(ConvNet::init(NetSpec{}, 3), data, few);
  const TrainResult b = sgd_train(ConvNet::init(NetSpec{}, 3), data, few);
  CHECK(a.net.conv2_w == b.net.conv2_w);
  CHECK(a.net.fc2_b == b.net.fc2_b);
  CHECK(a.loss_curve == b.loss_curve);

  std::vector<PatchSample> two(data.begin(), data.end());
  std::erase_if(two, [](const PatchSample& s) { return s.label == 2; });
  CHECK_THROWS_AS(sgd_train(ConvNet::init(NetSpec{}, 3), two, few), ValidationError);
}

TEST_CASE("make_patch") {
  const Image2D flat(40, 40, 25.0);
  for (double v : make_patch(flat.view(), Circle{20, 20, 5})) CHECK(v == 0.0);

  CHECK(patch_crop(Circle{20, 20, 10}).side == 30.0);
  CHECK(patch_crop(Circle{20, 20, 10}).x0 == 5.0);

  Rng rng(4);
  Image2D im(60, 60);
  for (double& v : im.values) v = uniform(rng, -100, 100);
  const auto p = make_patch(im.view(), Circle{25.3, 28.1, 6.5});
  double mean = 0, sq = 0;
  for (double v : p) {
    mean += v;
    sq += v * v;
  }
  CHECK(p.size() == 32 * 32);
  CHECK(std::abs(mean / p.size()) < 1e-12);
  CHECK(sq / p.size() == doctest::Approx(1.0));

  // shifting image and contour together by whole pixels
  Image2D shifted(60, 60);
  for (int y = 0; y < 60; ++y)
    for (int x = 0; x < 60; ++x) shifted(x, y) = im((x + 55) % 60, (y + 57) % 60);
  const auto q = make_patch(shifted.view(), Circle{30.3, 31.1, 6.5});
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(q[i] == doctest::Approx(p[i]).epsilon(1e-12));

  CHECK_THROWS_AS(make_patch(im.view(), Circle{20, 20, 0}), ValidationError);
  CHECK_THROWS_AS(make_patch(im.view(), Circle{-100, 20, 5}), ValidationError);
}

TEST_CASE("label_patch") {
  SliceMask gt(50, 50);
  for (int y = 0; y < 50; ++y)
    for (int x = 0; x < 50; ++x)
      if (std::hypot(x - 25.0, y - 25.0) <= 10.0) gt(x, y) = 1;
  const double r_eq = std::sqrt(gt.count() / M_PI);
  CHECK(label_patch(Circle{25, 25, 1.0 * r_eq}, gt) == 2);
  CHECK(label_patch(Circle{25, 25, 0.3 * r_eq}, gt) == 1);
  CHECK(label_patch(Circle{25, 25, 2.0 * r_eq}, gt) == 3);
  CHECK(label_patch(Circle{25, 25, 0.69 * r_eq}, gt) == 1);
  CHECK(label_patch(Circle{25, 25, 1.31 * r_eq}, gt) == 3);
  // offset contours
  CHECK(label_patch(Circle{27, 25, 3}, gt) == 1);
  CHECK(label_patch(Circle{28, 25, r_eq}, gt) == 2);
  CHECK(label_patch(Circle{45, 45, 3}, gt) == 3);
  CHECK_THROWS_AS(label_patch(Circle{25, 25, 3}, SliceMask(50, 50)), ValidationError);
}
