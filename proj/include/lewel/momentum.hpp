#pragma once

// Momentum target maintenance. The target branch's tensors (weights, BN
// affine parameters, and BN running statistics alike) trail the online branch
// as an exponential moving average; the coefficient is either fixed or ramps
// to 1 along a half-cosine.

#include <cstddef>
#include <numbers>

#include "lewel/common.hpp"
#include "lewel/nn.hpp"

namespace lewel {

enum class ScheduleKind { Fixed, CosineToOne };

struct MomentumSchedule {
  ScheduleKind kind = ScheduleKind::CosineToOne;
  double base = 0.98;           // starting coefficient
  std::size_t total_steps = 0;  // ramp length for the cosine variant

  void validate() const {
    if (base < 0.0 || base > 1.0)
      throw ConfigError(cat("momentum: base must be in [0,1], got ", base));
    if (kind == ScheduleKind::CosineToOne && total_steps == 0)
      throw ConfigError("momentum: cosine schedule needs total_steps > 0");
  }
};

// Coefficient at a given step: the fixed schedule returns base forever; the
// cosine schedule rises from base at step 0 to exactly 1 at total_steps and
// clamps there.
inline double momentum_at(std::size_t step, const MomentumSchedule& schedule) {
  if (schedule.kind == ScheduleKind::Fixed) return schedule.base;
  if (step >= schedule.total_steps) return 1.0;
  const double phase =
      std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(schedule.total_steps));
  return 1.0 - (1.0 - schedule.base) * (phase + 1.0) / 2.0;
}

// target <- alpha * target + (1 - alpha) * online, in place, over two
// structurally identical tensor sets (same names, shapes, and order).
template <typename T>
void ema_update(const NamedTensors<T>& online, NamedTensors<T>& target, T alpha) {
  if (alpha < T(0) || alpha > T(1))
    throw ConfigError(cat("ema_update: alpha must be in [0,1], got ", alpha));
  if (online.items.size() != target.items.size())
    throw ShapeError(cat("ema_update: ", online.items.size(), " online tensors vs ",
                         target.items.size(), " target tensors"));
  for (std::size_t i = 0; i < online.items.size(); ++i) {
    const auto& [o_name, o_tensor] = online.items[i];
    auto& [t_name, t_tensor] = target.items[i];
    if (o_name != t_name || o_tensor.shape() != t_tensor.shape())
      throw ShapeError(cat("ema_update: mismatch at ", o_name, " vs ", t_name));
    const auto src = o_tensor.data();
    auto dst = t_tensor.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j)
      dst[j] = alpha * dst[j] + (T(1) - alpha) * src[j];
  }
}

}  // namespace lewel
