#include <gtest/gtest.h>

#include <cstring>
#include <functional>

#include "check_util.hpp"
#include "lewel/nn.hpp"

using check::param_grad_error;
using check::random_tensor;
using check::weighted;
using lewel::backward;
using lewel::BnMode;
using lewel::NoGradGuard;
using lewel::Shape;
using lewel::Tensor;

namespace {
using DT = Tensor<double>;
}  // namespace

TEST(Linear, IdentityWeightsPassThrough) {
  lewel::Rng rng(1);
  lewel::Linear<double> fc(3, 3, rng);
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::copy(eye.begin(), eye.end(), fc.w.mutable_data().begin());
  auto x = random_tensor({4, 3}, rng);
  auto y = fc.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(BatchNormOp, BatchStatsNormalizes) {
  // two channels; channel data {3,7} has mean 5, biased variance 4
  auto x = DT::from_data({2, 2}, {3, 30, 7, 70});
  lewel::BatchNorm<double> bn(2);
  auto y = bn.forward(x, BnMode::BatchStats, /*training=*/true);
  // per channel: mean 0, var 1 after normalization
  for (std::size_t c = 0; c < 2; ++c) {
    const double a = y.at({0, c}), b = y.at({1, c});
    EXPECT_NEAR(a + b, 0.0, 1e-6);
    EXPECT_NEAR((a * a + b * b) / 2.0, 1.0, 1e-5);
  }
  // running stats folded in with momentum 0.1 from (0,1)
  EXPECT_NEAR(bn.running_mean.data()[0], 0.5, 1e-12);
  EXPECT_NEAR(bn.running_var.data()[0], 1.3, 1e-12);
  EXPECT_NEAR(bn.running_mean.data()[1], 5.0, 1e-12);
  EXPECT_NEAR(bn.running_var.data()[1], 0.9 + 0.1 * 400.0, 1e-9);
}

TEST(BatchNormOp, ModesAndErrors) {
  lewel::Rng rng(2);
  auto x = random_tensor({3, 4}, rng);
  lewel::BatchNorm<double> bn(4);

  auto ident = bn.forward(x, BnMode::Identity, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(ident.data()[i], x.data()[i]);

  // fresh running stats (0,1) with unit affine behave as identity
  auto ema = bn.forward(x, BnMode::EmaStats, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(ema.data()[i], x.data()[i], 1e-4);

  auto single = random_tensor({1, 4}, rng);
  EXPECT_THROW(bn.forward(single, BnMode::BatchStats, true), lewel::NumericError);
  // eval-time batch-stats on one row is defined (normalizes to beta)
  EXPECT_NO_THROW(bn.forward(single, BnMode::BatchStats, false));

  // a single image still has spatial statistics: N*H*W = 16 values per channel
  auto img = random_tensor({1, 4, 4, 4}, rng);
  EXPECT_NO_THROW(bn.forward(img, BnMode::BatchStats, true));
}

TEST(BatchNormOp, GradChecks) {
  lewel::Rng rng(3);
  auto x0 = random_tensor({4, 3}, rng);
  lewel::BatchNorm<double> bn(3);
  // perturb affine away from the (1,0) fixed point
  for (auto& v : bn.gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
  for (auto& v : bn.beta.mutable_data()) v = rng.uniform(-0.5, 0.5);

  for (BnMode mode : {BnMode::BatchStats, BnMode::EmaStats}) {
    auto xp = DT::param(x0.shape(), {x0.data().begin(), x0.data().end()});
    auto loss = [&] { return weighted(bn.forward(xp, mode, false), 7); };
    EXPECT_LE(param_grad_error(loss, xp), 1e-6) << "input grad, mode " << int(mode);
    EXPECT_LE(param_grad_error(loss, bn.gamma), 1e-6) << "gamma grad, mode " << int(mode);
    EXPECT_LE(param_grad_error(loss, bn.beta), 1e-6) << "beta grad, mode " << int(mode);
  }

  // rank-4 path with batch-coupled statistics
  auto img = DT::param({2, 3, 2, 2}, [&] {
    std::vector<double> d(24);
    for (auto& v : d) v = rng.uniform(-1, 1);
    return d;
  }());
  auto loss4 = [&] { return weighted(bn.forward(img, BnMode::BatchStats, false), 8); };
  EXPECT_LE(param_grad_error(loss4, img), 1e-6);
}

TEST(MlpHead, IdentityConfigurationPassesThrough) {
  lewel::Rng rng(4);
  lewel::MlpHead<double> head(3, 3, 3, rng);
  std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::copy(eye.begin(), eye.end(), head.fc1.w.mutable_data().begin());
  std::copy(eye.begin(), eye.end(), head.fc2.w.mutable_data().begin());
  auto x = random_tensor({5, 3}, rng, 0.1, 2.0);  // nonnegative: relu transparent
  auto y = head.forward_global(x, BnMode::Identity, false);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-12);
}

TEST(MlpHead, ShapesMirrorScaledProjector) {
  lewel::Rng rng(5);
  lewel::MlpHead<double> head(64, 128, 32, rng);
  auto y = head.forward_global(random_tensor({2, 64}, rng), BnMode::BatchStats, true);
  EXPECT_EQ(y.shape(), (Shape{2, 32}));
  auto maps = head.forward_perpixel(random_tensor({2, 64, 8, 8}, rng), BnMode::BatchStats, true);
  EXPECT_EQ(maps.shape(), (Shape{2, 32, 8, 8}));
  EXPECT_THROW(head.forward_global(random_tensor({2, 63}, rng), BnMode::Identity, false),
               lewel::ShapeError);
}

TEST(MlpHead, PerPixelMatchesGlobalOnConstantMaps) {
  lewel::Rng rng(6);
  lewel::MlpHead<double> head(6, 8, 4, rng);
  const std::size_t N = 3, H = 5, W = 5;
  // per-sample constant across space, different constants per sample
  std::vector<double> fm(N * 6 * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < 6; ++c) {
      const double v = rng.uniform(-1, 1);
      for (std::size_t s = 0; s < H * W; ++s) fm[(n * 6 + c) * H * W + s] = v;
    }
  auto fmap = DT::from_data({N, 6, H, W}, std::move(fm));
  auto pooled = lewel::global_average_pool(fmap);
  auto global = head.forward_global(pooled, BnMode::Identity, false);
  auto perpix = head.forward_perpixel(fmap, BnMode::Identity, false);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          EXPECT_NEAR(perpix.at({n, k, i, j}), global.at({n, k}), 1e-6);
}

TEST(MlpHead, PerPixelOnSinglePixelEqualsGlobal) {
  lewel::Rng rng(7);
  lewel::MlpHead<double> head(5, 6, 3, rng);
  auto fmap = random_tensor({4, 5, 1, 1}, rng);
  auto rows = lewel::reshape(fmap, {4, 5});
  // H=W=1: batch x spatial statistics coincide with batch statistics
  auto a = head.forward_perpixel(fmap, BnMode::BatchStats, false);
  auto b = head.forward_global(rows, BnMode::BatchStats, false);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(a.at({n, k, 0, 0}), b.at({n, k}), 1e-12);
}

TEST(MlpHead, GlobalAndPerPixelShareParameters) {
  lewel::Rng rng(8);
  lewel::MlpHead<double> head(4, 4, 4, rng);
  lewel::NamedTensors<double> params, buffers;
  head.collect("head", params, buffers);
  ASSERT_EQ(params.size(), 6u);  // fc1 w/b, bn gamma/beta, fc2 w/b
  EXPECT_EQ(params.find("head.fc1.w")->id(), head.fc1.w.id());

  auto fmap = random_tensor({2, 4, 3, 3}, rng);
  auto rows = lewel::reshape(lewel::permute(fmap, {0, 2, 3, 1}), {18, 4});
  NoGradGuard ng;
  auto g0 = head.forward_global(rows, BnMode::Identity, false);
  auto p0 = head.forward_perpixel(fmap, BnMode::Identity, false);
  head.fc1.w.mutable_data()[0] += 0.75;  // single storage: both paths must move
  auto g1 = head.forward_global(rows, BnMode::Identity, false);
  auto p1 = head.forward_perpixel(fmap, BnMode::Identity, false);
  double dg = 0, dp = 0;
  for (std::size_t i = 0; i < g0.numel(); ++i) dg = std::max(dg, std::abs(g1.data()[i] - g0.data()[i]));
  for (std::size_t i = 0; i < p0.numel(); ++i) dp = std::max(dp, std::abs(p1.data()[i] - p0.data()[i]));
  EXPECT_GT(dg, 0.0);
  EXPECT_GT(dp, 0.0);
}

TEST(MlpHead, AllParameterGradsPassCheck) {
  lewel::Rng rng(9);
  lewel::MlpHead<double> head(4, 6, 3, rng);
  auto x = random_tensor({5, 4}, rng);
  auto loss = [&] { return weighted(head.forward_global(x, BnMode::BatchStats, false), 11); };
  lewel::NamedTensors<double> params, buffers;
  head.collect("head", params, buffers);
  for (auto& [name, p] : params.items)
    EXPECT_LE(param_grad_error(loss, p), 1e-4) << name;
}

TEST(Encoder, ShapeZeroAndDeterminism) {
  lewel::Rng rng(10);
  lewel::ToyEncoder<double> enc(64, rng);
  auto x = random_tensor({1, 3, 64, 64}, rng);
  auto f = enc.forward(x, BnMode::BatchStats, false);
  EXPECT_EQ(f.shape(), (Shape{1, 64, 8, 8}));

  EXPECT_THROW(enc.forward(random_tensor({1, 3, 60, 60}, rng), BnMode::Identity, false),
               lewel::ShapeError);
  EXPECT_THROW(enc.forward(random_tensor({1, 1, 64, 64}, rng), BnMode::Identity, false),
               lewel::ShapeError);

  // zero image, zero biases, identity BN: every block is conv(0)+0 -> relu -> 0
  auto zeros = DT::zeros({1, 3, 16, 16});
  auto fz = enc.forward(zeros, BnMode::Identity, false);
  for (std::size_t i = 0; i < fz.numel(); ++i) EXPECT_DOUBLE_EQ(fz.data()[i], 0.0);

  // same construction seed, same input: bit-identical features
  lewel::Rng ra(123), rb(123);
  lewel::ToyEncoder<double> ea(16, ra), eb(16, rb);
  auto inp = random_tensor({2, 3, 16, 16}, rng);
  auto fa = ea.forward(inp, BnMode::BatchStats, true);
  auto fb = eb.forward(inp, BnMode::BatchStats, true);
  ASSERT_EQ(fa.numel(), fb.numel());
  EXPECT_EQ(std::memcmp(fa.data().data(), fb.data().data(), fa.numel() * sizeof(double)), 0);
}

TEST(Encoder, ParameterGradsPassCheck) {
  lewel::Rng rng(11);
  lewel::ToyEncoder<double> enc(16, rng);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto loss = [&] { return weighted(enc.forward(x, BnMode::BatchStats, false), 13); };
  lewel::NamedTensors<double> params, buffers;
  enc.collect("enc", params, buffers);
  for (auto& [name, p] : params.items)
    EXPECT_LE(param_grad_error(loss, p), 1e-4) << name;
}

TEST(Gap, AveragesSpace) {
  auto fmap = DT::from_data({1, 2, 1, 2}, {1, 3, 10, 30});
  auto pooled = lewel::global_average_pool(fmap);
  ASSERT_EQ(pooled.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(pooled.at({0, 0}), 2.0);
  EXPECT_DOUBLE_EQ(pooled.at({0, 1}), 20.0);
}
