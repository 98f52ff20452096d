#pragma once

// Central-difference verification of the autodiff engine: one entry per
// differentiable op, plus the two full training losses checked through every
// trainable parameter. Backs the `gradcheck` subcommand and the acceptance
// harness. Each entry reports the worst relative error between the analytic
// gradient and a symmetric finite difference at eps = 1e-5.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lewel/train.hpp"

namespace lewel {

struct GradCheckEntry {
  std::string name;
  double max_rel = 0.0;
};

namespace detail {

// Deterministic signed weights so reductions to a scalar see a non-uniform
// upstream gradient (a plain sum would hide sign and permutation bugs).
inline Tensor<double> weight_sum(const Tensor<double>& t, std::uint64_t salt) {
  Rng rng(0x5EED0000 + salt);
  std::vector<double> w(t.numel());
  for (auto& v : w) v = rng.uniform(0.5, 1.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  return sum_all(mul(t, Tensor<double>::from_data(t.shape(), std::move(w))));
}

inline Tensor<double> random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(data));
}

// Finite differences through live parameters: the closure must rebuild its
// graph every call and its value must not depend on mutable buffers (BN in
// batch-stats mode only writes the running stats, never reads them).
//
// A coordinate whose probe interval happens to straddle a relu kink shows a
// large error that collapses once eps shrinks past the kink distance; a wrong
// analytic gradient stays wrong at every eps. Suspicious coordinates are
// re-probed at smaller steps and the best agreement is kept.
inline double fd_through_params(const std::function<Tensor<double>()>& loss,
                                std::vector<Tensor<double>> params, double eps = 1e-5) {
  auto table = backward(loss());
  double worst = 0.0;
  for (auto& p : params) {
    if (!table.contains(p)) continue;
    const auto analytic = table.grad_for(p);
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      auto value = [&](double v) {
        data[i] = v;
        NoGradGuard ng;
        return loss().item();
      };
      const double a = analytic.data()[i];
      const auto rel_at = [&](double e) {
        const double fd = (value(orig + e) - value(orig - e)) / (2.0 * e);
        return std::abs(a - fd) / std::max(1.0, std::abs(a));
      };
      double err = rel_at(eps);
      if (err > 1e-6) err = std::min(err, std::min(rel_at(eps / 16), rel_at(eps / 256)));
      data[i] = orig;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace detail

// Every op exercised at small shapes chosen to hit broadcasting, strides and
// grouping; inputs kept away from kinks (relu) and singularities (log, sqrt).
inline std::vector<GradCheckEntry> gradient_battery(bool include_losses = true) {
  using DT = Tensor<double>;
  std::vector<GradCheckEntry> out;
  Rng rng(20240917);
  const auto check_input = [&](const std::string& name,
                               const std::function<DT(const DT&)>& f, const DT& point) {
    out.push_back({name, grad_check(f, point)});
  };

  // Elementwise arithmetic, including a broadcast operand.
  {
    const auto a = detail::random_input({2, 3, 4}, rng);
    const auto b = detail::random_input({2, 3, 4}, rng, 0.5, 1.5);
    const auto row = detail::random_input({1, 1, 4}, rng, 0.5, 1.5);
    check_input("add", [&](const DT& x) { return detail::weight_sum(add(x, b), 1); }, a);
    check_input("add/broadcast", [&](const DT& x) { return detail::weight_sum(add(a, x), 2); }, row);
    check_input("sub", [&](const DT& x) { return detail::weight_sum(sub(x, b), 3); }, a);
    check_input("mul", [&](const DT& x) { return detail::weight_sum(mul(x, b), 4); }, a);
    check_input("div", [&](const DT& x) { return detail::weight_sum(div(a, x), 5); }, b);
    check_input("neg", [&](const DT& x) { return detail::weight_sum(neg(x), 6); }, a);
    check_input("scale", [&](const DT& x) { return detail::weight_sum(scale(x, -1.7), 7); }, a);
  }

  // Unary maps on safe domains.
  {
    const auto pos = detail::random_input({3, 5}, rng, 0.5, 2.0);
    const auto off = detail::random_input({3, 5}, rng, 0.2, 1.0);  // away from relu's kink
    check_input("exp", [&](const DT& x) { return detail::weight_sum(exp(x), 8); }, pos);
    check_input("log", [&](const DT& x) { return detail::weight_sum(log(x), 9); }, pos);
    check_input("sqrt", [&](const DT& x) { return detail::weight_sum(sqrt(x), 10); }, pos);
    check_input("power", [&](const DT& x) { return detail::weight_sum(power(x, 2.5), 11); }, pos);
    check_input("relu", [&](const DT& x) { return detail::weight_sum(relu(x), 12); }, off);
  }

  // Matrix products.
  {
    const auto a = detail::random_input({3, 4}, rng);
    const auto b = detail::random_input({4, 5}, rng);
    const auto bt = detail::random_input({5, 4}, rng);
    check_input("matmul/lhs", [&](const DT& x) { return detail::weight_sum(matmul(x, b), 13); }, a);
    check_input("matmul/rhs", [&](const DT& x) { return detail::weight_sum(matmul(a, x), 14); }, b);
    check_input("matmul_nt", [&](const DT& x) { return detail::weight_sum(matmul_nt(a, x), 15); }, bt);
  }

  // Convolution at both strides used by the encoder.
  {
    const auto x = detail::random_input({2, 3, 6, 6}, rng);
    const auto w = detail::random_input({4, 3, 3, 3}, rng, -0.5, 0.5);
    const auto b = detail::random_input({4}, rng);
    check_input("conv2d/input",
                [&](const DT& v) { return detail::weight_sum(conv2d(v, w, b, 1, 1), 16); }, x);
    check_input("conv2d/weight",
                [&](const DT& v) { return detail::weight_sum(conv2d(x, v, b, 1, 1), 17); }, w);
    check_input("conv2d/bias",
                [&](const DT& v) { return detail::weight_sum(conv2d(x, w, v, 1, 1), 18); }, b);
    check_input("conv2d/stride2",
                [&](const DT& v) { return detail::weight_sum(conv2d(v, w, b, 2, 1), 19); }, x);
  }

  // Reductions and shape ops.
  {
    const auto a = detail::random_input({2, 3, 4}, rng);
    check_input("sum_axes",
                [&](const DT& x) { return detail::weight_sum(sum_axes(x, {0, 2}), 20); }, a);
    check_input("mean_axes",
                [&](const DT& x) { return detail::weight_sum(mean_axes(x, {1}), 21); }, a);
    check_input("mean_all", [&](const DT& x) { return mean_all(x); }, a);
    check_input("max_axes",
                [&](const DT& x) { return detail::weight_sum(max_axes(x, {2}), 22); }, a);
    check_input("reshape",
                [&](const DT& x) { return detail::weight_sum(reshape(x, {6, 4}), 23); }, a);
    check_input("permute",
                [&](const DT& x) { return detail::weight_sum(permute(x, {2, 0, 1}), 24); }, a);
    check_input("slice_axis",
                [&](const DT& x) { return detail::weight_sum(slice_axis(x, 1, 1, 2), 25); }, a);
    check_input("concat_axis", [&](const DT& x) {
      return detail::weight_sum(concat_axis({x, scale(x, 2.0)}, 1), 26);
    }, a);
  }

  // Normalizations.
  {
    const auto a = detail::random_input({3, 6}, rng);
    const auto m = detail::random_input({2, 4, 2, 3}, rng);
    check_input("softmax_axes",
                [&](const DT& x) { return detail::weight_sum(softmax_axes(x, {1}), 27); }, a);
    check_input("softmax_axes/spatial",
                [&](const DT& x) { return detail::weight_sum(softmax_axes(x, {2, 3}), 28); }, m);
    check_input("l2_normalize_axis",
                [&](const DT& x) { return detail::weight_sum(l2_normalize_axis(x, 1), 29); }, a);
  }

  // Batch norm (batch statistics) through input and affine parameters.
  {
    BatchNorm<double> bn(3);
    {
      auto gd = bn.gamma.mutable_data();
      auto bd = bn.beta.mutable_data();
      Rng jitter(8);
      for (auto& v : gd) v = jitter.uniform(0.8, 1.2);
      for (auto& v : bd) v = jitter.uniform(-0.2, 0.2);
    }
    const auto x = detail::random_input({4, 3}, rng);
    check_input("batchnorm/input", [&](const DT& v) {
      return detail::weight_sum(bn.forward(v, BnMode::BatchStats, true), 30);
    }, x);
    out.push_back({"batchnorm/params", detail::fd_through_params([&] {
      return detail::weight_sum(bn.forward(x, BnMode::BatchStats, true), 31);
    }, {bn.gamma, bn.beta})});
  }

  // Pooling and the grouped aggregation that couples maps to features.
  {
    const auto fmap = detail::random_input({2, 4, 3, 3}, rng);
    check_input("global_average_pool",
                [&](const DT& x) { return detail::weight_sum(global_average_pool(x), 32); }, fmap);
    for (const std::size_t h : {std::size_t(1), std::size_t(2), std::size_t(4)}) {
      const auto raw = detail::random_input({2, 4, 3, 3}, rng, 0.1, 1.0);
      const auto maps = softmax_axes(raw, {2, 3}).detach();
      check_input(cat("aggregate_grouped/maps h=", h), [&](const DT& x) {
        return detail::weight_sum(aggregate_grouped(softmax_axes(x, {2, 3}), fmap, h), 33 + h);
      }, raw);
      check_input(cat("aggregate_grouped/features h=", h), [&](const DT& x) {
        return detail::weight_sum(aggregate_grouped(maps, x, h), 37 + h);
      }, fmap);
    }
  }

  // Objectives.
  {
    const auto z1 = detail::random_input({3, 6}, rng);
    const auto z2 = detail::random_input({3, 6}, rng);
    Rng qrng(99);
    NegativeQueue<double> queue(8, 6);
    {
      std::vector<double> rows(8 * 6);
      for (std::size_t i = 0; i < 8; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          rows[i * 6 + j] = qrng.normal();
          sq += rows[i * 6 + j] * rows[i * 6 + j];
        }
        for (std::size_t j = 0; j < 6; ++j) rows[i * 6 + j] /= std::sqrt(sq);
      }
      queue.restore(8, 6, rows);
    }
    check_input("infonce", [&](const DT& x) {
      return infonce(x, stop_gradient(z2), queue.contents(), 0.2);
    }, z1);

    Rng prng(5);
    MlpHead<double> predictor(6, 8, 6, prng);
    {
      // Keep the hidden relu alive for every row so the unit-norm guard in
      // the loss cannot fire at this particular init.
      auto b = predictor.fc1.b.mutable_data();
      std::fill(b.begin(), b.end(), 0.25);
    }
    check_input("byol_mse/input", [&](const DT& x) {
      return byol_mse(x, stop_gradient(z2), predictor, BnMode::BatchStats, true);
    }, z1);
    out.push_back({"byol_mse/predictor", detail::fd_through_params([&] {
      return byol_mse(z1, stop_gradient(z2), predictor, BnMode::BatchStats, true);
    }, {predictor.fc1.w, predictor.fc1.b, predictor.fc2.w, predictor.fc2.b, predictor.bn.gamma,
        predictor.bn.beta})});
  }

  if (!include_losses) return out;

  // Full losses through every trainable parameter, for each group count.
  for (const auto variant : {Variant::LewelM, Variant::LewelB}) {
    for (const std::size_t h : {std::size_t(1), std::size_t(2), std::size_t(4)}) {
      TrainConfig cfg;
      cfg.variant = variant;
      cfg.head.variant = variant;
      cfg.batch_size = 2;
      cfg.queue_capacity = 8;
      cfg.head.encoder_dim = 16;
      cfg.head.embed_dim = 8;
      cfg.head.aligned_dim = 8;
      cfg.head.groups = h;
      cfg.head.hidden = 8;
      cfg.data.canvas = 32;  // feature grid 4x4
      cfg.seed = 31 + h;
      cfg.validate();

      LewelModel<double> model(cfg);
      {
        // Evaluate at a point where every relu row stays alive in both
        // branches; kaiming init at these tiny widths can kill whole rows,
        // which the losses reject as degenerate.
        const auto nudge = [](NamedTensors<double>& set) {
          for (auto& [name, p] : set.items)
            if (name.ends_with(".b")) {
              auto d = p.mutable_data();
              std::fill(d.begin(), d.end(), 0.25);
            }
        };
        nudge(model.online_params);
        nudge(model.pred_params);
        ema_update(model.online_params, model.target_params, 0.0);
      }
      if (variant == Variant::LewelM) {
        Rng qrng(17);
        std::vector<double> rows(4 * cfg.head.embed_dim);
        for (std::size_t i = 0; i < 4; ++i) {
          double sq = 0.0;
          for (std::size_t j = 0; j < cfg.head.embed_dim; ++j) {
            rows[i * cfg.head.embed_dim + j] = qrng.normal();
            sq += rows[i * cfg.head.embed_dim + j] * rows[i * cfg.head.embed_dim + j];
          }
          for (std::size_t j = 0; j < cfg.head.embed_dim; ++j)
            rows[i * cfg.head.embed_dim + j] /= std::sqrt(sq);
        }
        model.queue.restore(cfg.queue_capacity, cfg.head.embed_dim, rows);
      }

      Rng drng(141 + h);
      const auto v1 = detail::random_input({2, 3, 32, 32}, drng, 0.0, 1.0);
      const auto v2 = detail::random_input({2, 3, 32, 32}, drng, 0.0, 1.0);
      std::vector<Tensor<double>> params;
      for (const auto& [name, p] : model.trainable.items) params.push_back(p);
      out.push_back({cat(variant_name(variant), " loss h=", h), detail::fd_through_params([&] {
        return model.step_losses(v1, v2).total;
      }, params)});
    }
  }
  return out;
}

}  // namespace lewel
