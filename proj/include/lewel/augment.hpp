#pragma once

#include <array>
#include <optional>
#include <string>

#include "lewel/common.hpp"
#include "lewel/image.hpp"

// Two-view augmentation with fully recorded recipes. A recipe captures every
// random choice, so applying it is a pure function and crop geometry can be
// reasoned about afterwards (view overlap, projecting masks into views).

namespace lewel {

struct ViewRecipe {
  Rect crop;                                   // source-image pixel coords
  bool flip = false;                           // horizontal
  std::array<float, 3> jitter_scale{1, 1, 1};  // per-channel affine
  std::array<float, 3> jitter_shift{0, 0, 0};
  bool grayscale = false;
  double blur_sigma = 0.0;  // 0 = off, <= 3
  std::optional<float> solarize_threshold;     // in [0,1]
};

enum class AugmentPolicy { LewelM, LewelBView1, LewelBView2 };

inline AugmentPolicy view_policy(bool byol_style, std::size_t view_index) {
  if (!byol_style) return AugmentPolicy::LewelM;
  return view_index == 0 ? AugmentPolicy::LewelBView1 : AugmentPolicy::LewelBView2;
}

// Random-resized-crop + distortion draw. Probabilities: flip 0.5, jitter 0.8,
// grayscale 0.2; blur 1.0 / 0.1 for the two asymmetric views and 0.5 for the
// symmetric policy; solarization 0.2 on the second asymmetric view only.
inline ViewRecipe sample_recipe(Rng& rng, AugmentPolicy policy, std::size_t src_h,
                                std::size_t src_w) {
  ViewRecipe r;

  const double src_area = static_cast<double>(src_h) * static_cast<double>(src_w);
  bool placed = false;
  for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
    const double target_area = rng.uniform(0.2, 1.0) * src_area;
    const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double ratio = std::exp(log_ratio);
    auto w = static_cast<std::size_t>(std::lround(std::sqrt(target_area * ratio)));
    auto h = static_cast<std::size_t>(std::lround(std::sqrt(target_area / ratio)));
    w = std::max<std::size_t>(w, 8);
    h = std::max<std::size_t>(h, 8);
    if (w <= src_w && h <= src_h) {
      r.crop.w = w;
      r.crop.h = h;
      r.crop.x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(src_w - w)));
      r.crop.y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(src_h - h)));
      placed = true;
    }
  }
  if (!placed) {  // fall back to the largest centered square
    const std::size_t side = std::max<std::size_t>(8, std::min(src_h, src_w));
    r.crop = {(src_w - side) / 2, (src_h - side) / 2, side, side};
  }

  r.flip = rng.bernoulli(0.5);
  if (rng.bernoulli(0.8)) {
    for (std::size_t c = 0; c < 3; ++c) {
      r.jitter_scale[c] = static_cast<float>(rng.uniform(0.6, 1.4));
      r.jitter_shift[c] = static_cast<float>(rng.uniform(-0.1, 0.1));
    }
  }
  r.grayscale = rng.bernoulli(0.2);
  const double blur_p = policy == AugmentPolicy::LewelM
                            ? 0.5
                            : (policy == AugmentPolicy::LewelBView1 ? 1.0 : 0.1);
  if (rng.bernoulli(blur_p)) r.blur_sigma = rng.uniform(0.1, 2.0);
  if (policy == AugmentPolicy::LewelBView2 && rng.bernoulli(0.2)) r.solarize_threshold = 0.5f;
  return r;
}

// crop -> resize -> flip -> jitter -> grayscale -> blur -> solarize.
inline Tensor<float> apply_recipe(const Tensor<float>& image, const ViewRecipe& recipe,
                                  std::size_t out_size) {
  auto view = crop_resize_bilinear(image, recipe.crop, out_size);
  auto px = view.mutable_data();
  const std::size_t S = out_size;

  if (recipe.flip) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < S; ++y) {
        float* row = px.data() + (c * S + y) * S;
        for (std::size_t x = 0; x < S / 2; ++x) std::swap(row[x], row[S - 1 - x]);
      }
  }

  for (std::size_t c = 0; c < 3; ++c) {
    const float sc = recipe.jitter_scale[c], sh = recipe.jitter_shift[c];
    if (sc != 1.f || sh != 0.f) {
      float* plane = px.data() + c * S * S;
      for (std::size_t i = 0; i < S * S; ++i) plane[i] = std::clamp(plane[i] * sc + sh, 0.f, 1.f);
    }
  }

  if (recipe.grayscale) {
    float* rp = px.data();
    float* gp = px.data() + S * S;
    float* bp = px.data() + 2 * S * S;
    for (std::size_t i = 0; i < S * S; ++i) {
      const float luma = 0.299f * rp[i] + 0.587f * gp[i] + 0.114f * bp[i];
      rp[i] = gp[i] = bp[i] = luma;
    }
  }

  if (recipe.blur_sigma > 0.0) view = gaussian_blur(view, recipe.blur_sigma);

  if (recipe.solarize_threshold) {
    const float thr = *recipe.solarize_threshold;
    auto data = view.mutable_data();
    for (auto& v : data)
      if (v >= thr) v = 1.f - v;
  }
  return view;
}

struct ViewPair {
  Tensor<float> view1, view2;
  ViewRecipe recipe1, recipe2;
  std::string source_id;
};

// ---------------------------------------------------------------------------
// Geometry between a view and its source image
// ---------------------------------------------------------------------------

// Continuous view pixel coordinate -> source pixel coordinate (half-pixel
// centers; undoes the flip first since flipping happens after resizing).
inline std::pair<double, double> view_to_source(const ViewRecipe& r, std::size_t view_size,
                                                double u, double v) {
  if (r.flip) u = static_cast<double>(view_size - 1) - u;
  const double x = static_cast<double>(r.crop.x0) +
                   (u + 0.5) * static_cast<double>(r.crop.w) / static_cast<double>(view_size) - 0.5;
  const double y = static_cast<double>(r.crop.y0) +
                   (v + 0.5) * static_cast<double>(r.crop.h) / static_cast<double>(view_size) - 0.5;
  return {x, y};
}

inline std::pair<double, double> source_to_view(const ViewRecipe& r, std::size_t view_size,
                                                double x, double y) {
  double u = (x - static_cast<double>(r.crop.x0) + 0.5) * static_cast<double>(view_size) /
                 static_cast<double>(r.crop.w) -
             0.5;
  const double v = (y - static_cast<double>(r.crop.y0) + 0.5) * static_cast<double>(view_size) /
                       static_cast<double>(r.crop.h) -
                   0.5;
  if (r.flip) u = static_cast<double>(view_size - 1) - u;
  return {u, v};
}

struct ViewOverlap {
  double iou = 0.0;       // of the two source-space crop rects
  RectF region1, region2; // the shared source region in each view's feature grid
};

// Feature-grid rect of the shared region in one view (boundary-affine map;
// flip mirrors the horizontal extent).
namespace detail {

inline RectF project_region_to_grid(const ViewRecipe& r, const RectF& region, std::size_t grid) {
  const double gw = static_cast<double>(grid);
  double u0 = (region.x0 - static_cast<double>(r.crop.x0)) * gw / static_cast<double>(r.crop.w);
  double u1 = (region.x1() - static_cast<double>(r.crop.x0)) * gw / static_cast<double>(r.crop.w);
  const double v0 = (region.y0 - static_cast<double>(r.crop.y0)) * gw / static_cast<double>(r.crop.h);
  const double v1 = (region.y1() - static_cast<double>(r.crop.y0)) * gw / static_cast<double>(r.crop.h);
  if (r.flip) {
    const double f0 = gw - u1, f1 = gw - u0;
    u0 = f0;
    u1 = f1;
  }
  return RectF{u0, v0, u1 - u0, v1 - v0};
}

}  // namespace detail

inline ViewOverlap view_overlap(const ViewRecipe& r1, const ViewRecipe& r2, std::size_t grid) {
  ViewOverlap out;
  const RectF a = r1.crop.as_f(), b = r2.crop.as_f();
  out.iou = rect_iou(a, b);
  if (auto inter = rect_intersection(a, b)) {
    out.region1 = detail::project_region_to_grid(r1, *inter, grid);
    out.region2 = detail::project_region_to_grid(r2, *inter, grid);
  }
  return out;
}

}  // namespace lewel
