#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "check_util.hpp"
#include "lewel/align.hpp"

using check::param_grad_error;
using check::random_tensor;
using check::weighted;
using lewel::BnMode;
using lewel::BranchNet;
using lewel::HeadConfig;
using lewel::MapSource;
using lewel::Tensor;

namespace {

using DT = Tensor<double>;

HeadConfig small_config() {
  HeadConfig cfg;
  cfg.encoder_dim = 8;
  cfg.embed_dim = 8;
  cfg.aligned_dim = 8;
  cfg.groups = 2;
  cfg.hidden = 8;
  return cfg;
}

using check::identity_head;

void expect_map_invariants(const DT& maps, double tol = 1e-5) {
  ASSERT_EQ(maps.ndim(), 4u);
  const std::size_t planes = maps.size(0) * maps.size(1);
  const std::size_t hw = maps.size(2) * maps.size(3);
  for (std::size_t p = 0; p < planes; ++p) {
    double sum = 0.0;
    for (std::size_t s = 0; s < hw; ++s) {
      const double w = maps.data()[p * hw + s];
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, tol);
  }
}

}  // namespace

TEST(AlignmentMaps, DistributionInvariantsHold) {
  lewel::Rng rng(11);
  lewel::MlpHead<double> g(8, 16, 6, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const double scale = trial % 3 == 2 ? 1e3 : 1.0;  // large features must stay stable
    auto fmap = random_tensor({2, 8, 4, 4}, rng, -scale, scale);
    auto maps = lewel::compute_alignment_maps(fmap, g, BnMode::Identity, false);
    ASSERT_EQ(maps.size(1), 6u);
    expect_map_invariants(maps);
  }
}

TEST(AlignmentMaps, SinglePositionGridGivesOne) {
  lewel::Rng rng(12);
  lewel::MlpHead<double> g(4, 8, 5, rng);
  auto fmap = random_tensor({3, 4, 1, 1}, rng);
  auto maps = lewel::compute_alignment_maps(fmap, g, BnMode::Identity, false);
  for (const double w : maps.data()) EXPECT_DOUBLE_EQ(w, 1.0);
}

TEST(AlignmentMaps, SpatiallyConstantFeaturesGiveUniformMaps) {
  lewel::Rng rng(13);
  lewel::MlpHead<double> g(4, 8, 6, rng);
  // constant over space, different per sample and channel
  auto base = random_tensor({2, 4, 1, 1}, rng, 0.2, 1.0);
  std::vector<double> data(2 * 4 * 3 * 5);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t s = 0; s < 15; ++s) data[(n * 4 + c) * 15 + s] = base.at({n, c, 0, 0});
  auto fmap = DT::from_data({2, 4, 3, 5}, std::move(data));
  auto maps = lewel::compute_alignment_maps(fmap, g, BnMode::Identity, false);
  for (const double w : maps.data()) EXPECT_NEAR(w, 1.0 / 15.0, 1e-12);
  EXPECT_NEAR(lewel::map_entropy(maps), std::log(15.0), 1e-12);
}

TEST(AlignmentMaps, TwoPositionSoftmaxOracle) {
  // channel columns (0.6, 0.8) and (0.8, 0.6) are already unit-norm, so map 0
  // is softmax([0.6, 0.8]) across the two positions
  auto g = identity_head(2);
  auto fmap = DT::from_data({1, 2, 1, 2}, {0.6, 0.8, 0.8, 0.6});
  auto maps = lewel::compute_alignment_maps(fmap, g, BnMode::Identity, false);
  const double hi = 1.0 / (1.0 + std::exp(-0.2));  // larger logit's share
  EXPECT_NEAR(maps.at({0, 0, 0, 0}), 1.0 - hi, 1e-9);
  EXPECT_NEAR(maps.at({0, 0, 0, 1}), hi, 1e-9);
  EXPECT_NEAR(maps.at({0, 1, 0, 0}), hi, 1e-9);
  EXPECT_NEAR(maps.at({0, 1, 0, 1}), 1.0 - hi, 1e-9);
}

TEST(AlignmentMaps, ZeroProjectionPositionStaysInTheSoftmax) {
  // position 1 projects to the zero vector: its normalized column is zero and
  // its logit enters each softmax as 0 against the other position's 1
  auto g = identity_head(2);
  auto fmap = DT::from_data({1, 2, 1, 2}, {3.0, 0.0, 0.0, 0.0});
  auto maps = lewel::compute_alignment_maps(fmap, g, BnMode::Identity, false);
  const double e = std::exp(1.0);
  EXPECT_NEAR(maps.at({0, 0, 0, 0}), e / (e + 1.0), 1e-12);
  EXPECT_NEAR(maps.at({0, 0, 0, 1}), 1.0 / (e + 1.0), 1e-12);
  // map 1 sees logits (0, 0)
  EXPECT_NEAR(maps.at({0, 1, 0, 0}), 0.5, 1e-12);
  expect_map_invariants(maps);
}

TEST(Aggregate, UniformHandAndOneHotOracles) {
  lewel::Rng rng(14);
  auto part = random_tensor({5, 3, 4}, rng);

  auto uniform = DT::full({3, 4}, 1.0 / 12.0);
  auto pooled = lewel::aggregate(uniform, part);
  auto gap = lewel::mean_axes(part, {1, 2});
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(pooled.at({c}), gap.at({c}), 1e-12);

  auto single = lewel::aggregate(DT::from_data({1, 2}, {0.25, 0.75}),
                                 DT::from_data({1, 1, 2}, {2.0, 4.0}));
  EXPECT_NEAR(single.at({0}), 3.5, 1e-12);

  auto onehot = DT::zeros({3, 4});
  onehot.mutable_data()[2 * 4 + 1] = 1.0;
  auto picked = lewel::aggregate(onehot, part);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_DOUBLE_EQ(picked.at({c}), part.at({c, 2, 1}));

  EXPECT_THROW(lewel::aggregate(uniform, DT::zeros({5, 4, 3})), lewel::ShapeError);
}

TEST(AggregateGrouped, MatchesNaiveGroupLoop) {
  lewel::Rng rng(15);
  for (const std::size_t h : {1u, 2u, 4u}) {
    for (const auto [gh, gw] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 3}, {4, 4}}) {
      const std::size_t N = 2, D = 8, d = 8, K = d / h, G = D / h;
      auto fmap = random_tensor({N, D, gh, gw}, rng);
      auto maps = lewel::random_alignment_maps<double>(N, d, gh, gw, rng);
      auto out = lewel::aggregate_grouped(maps, fmap, h);
      ASSERT_EQ(out.shape(), (lewel::Shape{N, K, D}));
      // row k concatenates, group by group, the map-weighted sums
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t grp = 0; grp < h; ++grp)
            for (std::size_t cc = 0; cc < G; ++cc) {
              double want = 0.0;
              for (std::size_t i = 0; i < gh; ++i)
                for (std::size_t j = 0; j < gw; ++j)
                  want += maps.at({n, k * h + grp, i, j}) * fmap.at({n, grp * G + cc, i, j});
              EXPECT_NEAR(out.at({n, k, grp * G + cc}), want, 1e-10);
            }
    }
  }
  EXPECT_THROW(lewel::aggregate_grouped(DT::zeros({1, 6, 2, 2}), DT::zeros({1, 8, 2, 2}), 4),
               lewel::ShapeError);
  EXPECT_THROW(lewel::aggregate_grouped(DT::zeros({1, 8, 2, 2}), DT::zeros({1, 8, 3, 2}), 2),
               lewel::ShapeError);
}

TEST(AggregateGrouped, UniformMapsRecoverPooling) {
  lewel::Rng rng(16);
  auto fmap = random_tensor({3, 8, 4, 4}, rng);
  auto gap = lewel::global_average_pool(fmap);
  for (const std::size_t h : {1u, 2u, 4u}) {
    auto rows = lewel::aggregate_grouped(lewel::uniform_alignment_maps<double>(3, 8, 4, 4), fmap, h);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 8 / h; ++k)
        for (std::size_t c = 0; c < 8; ++c)
          EXPECT_NEAR(rows.at({n, k, c}), gap.at({n, c}), 1e-12);
  }
}

TEST(AggregateGrouped, GradientsMatchFiniteDifferences) {
  lewel::Rng rng(17);
  auto maps_pt = random_tensor({2, 4, 2, 3}, rng, 0.05, 1.0);
  auto fmap_pt = random_tensor({2, 8, 2, 3}, rng);
  const auto err_m = lewel::grad_check(
      [&](const DT& m) { return weighted(lewel::aggregate_grouped(m, fmap_pt, 2), 31); }, maps_pt);
  const auto err_f = lewel::grad_check(
      [&](const DT& f) { return weighted(lewel::aggregate_grouped(maps_pt, f, 2), 32); }, fmap_pt);
  EXPECT_LT(err_m, 1e-8);
  EXPECT_LT(err_f, 1e-8);
}

TEST(Branch, UniformSourceEqualsPooledProjection) {
  lewel::Rng rng(18);
  auto cfg = small_config();
  cfg.map_source = MapSource::Uniform;
  for (const auto mode : {BnMode::Identity, BnMode::BatchStats}) {
    lewel::Rng init(21);
    BranchNet<double> net(cfg, init);
    auto images = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
    auto out = net.forward(images, mode, /*training=*/mode == BnMode::BatchStats);
    auto pooled = net.p.forward_rows(lewel::global_average_pool(out.fmap), mode,
                                     mode == BnMode::BatchStats);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t k = 0; k < cfg.rows(); ++k)
        for (std::size_t c = 0; c < cfg.aligned_dim; ++c)
          EXPECT_NEAR(out.aligned.at({n, k, c}), pooled.at({n, c}), 1e-6);
  }
}

TEST(Branch, MapsComeFromTheGlobalProjector) {
  lewel::Rng rng(19);
  BranchNet<double> net(small_config(), rng);
  auto images = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto before = net.forward(images, BnMode::Identity, false);

  // one collected copy of the shared head's weights, and nudging it moves
  // both the global embedding and the alignment maps
  lewel::NamedTensors<double> params, buffers;
  net.collect("net", params, buffers);
  std::size_t g_fc1 = 0;
  for (const auto& [name, t] : params.items) g_fc1 += name == "net.g.fc1.w" ? 1 : 0;
  EXPECT_EQ(g_fc1, 1u);
  EXPECT_EQ(params.find("net.g.fc1.w")->id(), net.g.fc1.w.id());

  // bias on the head output shifts every position's channel-0 logit, so both
  // the global embedding and the maps must move
  net.g.fc2.b.mutable_data()[0] += 0.5;
  auto after = net.forward(images, BnMode::Identity, false);
  EXPECT_NE(std::memcmp(before.global.data().data(), after.global.data().data(),
                        before.global.numel() * sizeof(double)),
            0);
  EXPECT_NE(std::memcmp(before.maps.data().data(), after.maps.data().data(),
                        before.maps.numel() * sizeof(double)),
            0);
}

TEST(Branch, OutputShapesAndSkippedAlignedPath) {
  HeadConfig cfg;
  cfg.encoder_dim = 64;
  cfg.embed_dim = 32;
  cfg.aligned_dim = 32;
  cfg.groups = 4;
  cfg.hidden = 32;
  lewel::Rng rng(20);
  BranchNet<double> net(cfg, rng);
  auto images = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  auto out = net.forward(images, BnMode::Identity, false);
  EXPECT_EQ(out.global.shape(), (lewel::Shape{2, 32}));
  EXPECT_EQ(out.maps.shape(), (lewel::Shape{2, 32, 4, 4}));
  EXPECT_EQ(out.aligned.shape(), (lewel::Shape{2, 8, 32}));  // d/h = 8 rows

  auto bare = net.forward(images, BnMode::Identity, false, /*with_aligned=*/false);
  EXPECT_TRUE(bare.global.defined());
  EXPECT_FALSE(bare.maps.defined());
  EXPECT_FALSE(bare.aligned.defined());

  HeadConfig bad = cfg;
  bad.groups = 5;
  lewel::Rng rng2(21);
  EXPECT_THROW(BranchNet<double>(bad, rng2), lewel::ConfigError);
}

TEST(Paired, MomentumBranchReceivesNoGradient) {
  auto cfg = small_config();
  lewel::Rng r1(31), r2(32), rng(33);
  BranchNet<double> online(cfg, r1), momentum(cfg, r2);
  auto v1 = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto v2 = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto out = lewel::lewel_forward(v1, v2, online, momentum, /*training=*/true);

  EXPECT_FALSE(out.target.global.requires_grad());
  EXPECT_FALSE(out.target.aligned.requires_grad());

  auto loss = lewel::add(lewel::add(weighted(out.online.global, 1), weighted(out.online.aligned, 2)),
                         lewel::add(lewel::sum_all(out.target.global), lewel::sum_all(out.target.aligned)));
  auto table = lewel::backward(loss);

  EXPECT_FALSE(table.contains(momentum.g.fc1.w));
  EXPECT_FALSE(table.contains(momentum.encoder.conv[0].w));
  auto absent = table.grad_for(momentum.g.fc1.w);
  for (const double v : absent.data()) EXPECT_DOUBLE_EQ(v, 0.0);

  EXPECT_TRUE(table.contains(online.g.fc1.w));
  EXPECT_TRUE(table.contains(online.p.fc2.w));
  EXPECT_TRUE(table.contains(online.encoder.conv[0].w));
  auto present = table.grad_for(online.g.fc1.w);
  double norm = 0.0;
  for (const double v : present.data()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Paired, IdenticalBranchesAndViewsAgree) {
  auto cfg = small_config();
  lewel::Rng r1(41), r2(41), rng(42);
  BranchNet<double> online(cfg, r1), momentum(cfg, r2);  // same init stream
  auto v = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto out = lewel::lewel_forward(v, v, online, momentum, /*training=*/false);
  EXPECT_EQ(std::memcmp(out.online.global.data().data(), out.target.global.data().data(),
                        out.online.global.numel() * sizeof(double)),
            0);
  EXPECT_EQ(std::memcmp(out.online.aligned.data().data(), out.target.aligned.data().data(),
                        out.online.aligned.numel() * sizeof(double)),
            0);

  HeadConfig other = cfg;
  other.groups = 4;
  lewel::Rng r3(43);
  BranchNet<double> mismatched(other, r3);
  EXPECT_THROW(lewel::lewel_forward(v, v, online, mismatched, false), lewel::ConfigError);
}

TEST(RandomMaps, ControlModeInvariants) {
  lewel::Rng a(51), b(51), c(52);
  auto m1 = lewel::random_alignment_maps<double>(2, 4, 3, 3, a);
  auto m2 = lewel::random_alignment_maps<double>(2, 4, 3, 3, b);
  auto m3 = lewel::random_alignment_maps<double>(2, 4, 3, 3, c);
  expect_map_invariants(m1);
  EXPECT_FALSE(m1.requires_grad());
  EXPECT_EQ(std::memcmp(m1.data().data(), m2.data().data(), m1.numel() * sizeof(double)), 0);
  EXPECT_NE(std::memcmp(m1.data().data(), m3.data().data(), m1.numel() * sizeof(double)), 0);

  auto cfg = small_config();
  cfg.map_source = MapSource::Random;
  lewel::Rng init(53);
  BranchNet<double> net(cfg, init);
  auto images = random_tensor({2, 3, 16, 16}, c, 0.0, 1.0);
  EXPECT_THROW(net.forward(images, BnMode::Identity, false), lewel::ConfigError);
  lewel::Rng map_rng(54);
  auto out = net.forward(images, BnMode::Identity, false, true, &map_rng);
  expect_map_invariants(out.maps);
}

TEST(Paired, EndToEndGradientsThroughAlignedPath) {
  auto cfg = small_config();
  lewel::Rng r1(61), r2(62), rng(63);
  BranchNet<double> online(cfg, r1), momentum(cfg, r2);
  auto v1 = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto v2 = random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);

  auto loss = [&] {
    auto out = lewel::lewel_forward(v1, v2, online, momentum, /*training=*/true);
    // couple online outputs with the (constant) momentum outputs
    auto ga = lewel::mul(out.online.global, lewel::stop_gradient(out.target.global));
    auto al = lewel::mul(out.online.aligned, lewel::stop_gradient(out.target.aligned));
    return lewel::add(lewel::add(weighted(ga, 7), weighted(al, 8)),
                      weighted(out.online.maps, 9));
  };

  EXPECT_LT(param_grad_error(loss, online.encoder.conv[0].w), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.encoder.bn[3].gamma), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.g.fc1.w), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.g.fc2.b), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.g.bn.gamma), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.p.fc1.w), 1e-6);
  EXPECT_LT(param_grad_error(loss, online.p.fc2.w), 1e-6);
}
