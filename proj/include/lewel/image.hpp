#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lewel/common.hpp"
#include "lewel/tensor.hpp"

// Image utilities: binary PPM (P6) / PGM (P5) at maxval 255, bilinear
// crop+resize geometry, separable Gaussian blur, and heat-map export.
// Images are float tensors in [0,1]: RGB as (3,H,W), grayscale as (H,W).

namespace lewel {

inline std::uint8_t quantize_u8(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

inline float dequantize_u8(std::uint8_t b) { return static_cast<float>(b) / 255.f; }

namespace detail {

// Parses "P6\n{w} {h}\n255\n"-style headers (any single whitespace runs
// between tokens). Returns payload offset; errors carry the byte offset.
struct PnmHeader {
  std::size_t width = 0, height = 0, payload_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes, char magic,
                                  const std::string& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> IoError {
    return IoError(cat(path, ": ", what, " at byte ", pos));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != magic)
    throw fail(cat("expected magic P", magic));
  pos = 2;
  auto is_space = [](std::uint8_t b) { return b == ' ' || b == '\n' || b == '\t' || b == '\r'; };
  auto read_number = [&]() -> std::size_t {
    if (pos >= bytes.size() || !is_space(bytes[pos])) throw fail("expected whitespace");
    while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') throw fail("expected digit");
    std::size_t value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + (bytes[pos] - '0');
      ++pos;
    }
    return value;
  };
  PnmHeader h;
  h.width = read_number();
  h.height = read_number();
  const std::size_t maxval = read_number();
  if (maxval != 255) throw fail(cat("unsupported maxval ", maxval));
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw fail("expected single whitespace before payload");
  ++pos;
  if (h.width == 0 || h.height == 0) throw fail("zero dimension");
  h.payload_offset = pos;
  return h;
}

}  // namespace detail

// img: (3,H,W) in [0,1]; payload is interleaved RGB rows.
inline void save_ppm(const std::string& path, const Tensor<float>& img) {
  if (img.ndim() != 3 || img.size(0) != 3)
    throw ShapeError(cat("save_ppm: expected (3,H,W) image, got ", shape_str(img.shape())));
  const std::size_t H = img.size(1), W = img.size(2);
  const std::string header = cat("P6\n", W, " ", H, "\n255\n");
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + 3 * H * W);
  const auto d = img.data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) bytes.push_back(quantize_u8(d[(c * H + y) * W + x]));
  detail::write_file_bytes(path, bytes);
}

inline Tensor<float> load_ppm(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  const auto h = detail::parse_pnm_header(bytes, '6', path);
  const std::size_t need = 3 * h.width * h.height;
  if (bytes.size() - h.payload_offset < need)
    throw IoError(cat(path, ": truncated payload at byte ", bytes.size(), ", need ",
                      h.payload_offset + need));
  std::vector<float> data(need);
  for (std::size_t y = 0; y < h.height; ++y)
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        data[(c * h.height + y) * h.width + x] =
            dequantize_u8(bytes[h.payload_offset + (y * h.width + x) * 3 + c]);
  return Tensor<float>::from_data({3, h.height, h.width}, std::move(data));
}

// map: (H,W) in [0,1].
inline void save_pgm(const std::string& path, const Tensor<float>& map) {
  if (map.ndim() != 2)
    throw ShapeError(cat("save_pgm: expected (H,W) map, got ", shape_str(map.shape())));
  const std::size_t H = map.size(0), W = map.size(1);
  const std::string header = cat("P5\n", W, " ", H, "\n255\n");
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + H * W);
  for (const float v : map.data()) bytes.push_back(quantize_u8(v));
  detail::write_file_bytes(path, bytes);
}

inline Tensor<float> load_pgm(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  const auto h = detail::parse_pnm_header(bytes, '5', path);
  const std::size_t need = h.width * h.height;
  if (bytes.size() - h.payload_offset < need)
    throw IoError(cat(path, ": truncated payload at byte ", bytes.size(), ", need ",
                      h.payload_offset + need));
  std::vector<float> data(need);
  for (std::size_t i = 0; i < need; ++i) data[i] = dequantize_u8(bytes[h.payload_offset + i]);
  return Tensor<float>::from_data({h.height, h.width}, std::move(data));
}

// Max-normalizes so the hottest cell is 255; a constant map (including all
// zeros) exports as all 255.
inline void save_heatmap_pgm(const std::string& path, const Tensor<float>& map) {
  if (map.ndim() != 2)
    throw ShapeError(cat("save_heatmap_pgm: expected (H,W) map, got ", shape_str(map.shape())));
  float lo = map.data()[0], hi = map.data()[0];
  for (const float v : map.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<float> scaled(map.numel());
  if (hi <= 0.f || lo == hi) {
    std::fill(scaled.begin(), scaled.end(), 1.f);
  } else {
    for (std::size_t i = 0; i < scaled.size(); ++i)
      scaled[i] = std::max(0.f, map.data()[i]) / hi;
  }
  save_pgm(path, Tensor<float>::from_data(map.shape(), std::move(scaled)));
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct RectF {
  double x0 = 0, y0 = 0, w = 0, h = 0;
  double x1() const { return x0 + w; }
  double y1() const { return y0 + h; }
  double area() const { return w * h; }
};

inline double rect_iou(const RectF& a, const RectF& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

inline std::optional<RectF> rect_intersection(const RectF& a, const RectF& b) {
  const double x0 = std::max(a.x0, b.x0), y0 = std::max(a.y0, b.y0);
  const double x1 = std::min(a.x1(), b.x1()), y1 = std::min(a.y1(), b.y1());
  if (x1 <= x0 || y1 <= y0) return std::nullopt;
  return RectF{x0, y0, x1 - x0, y1 - y0};
}

// Crop rect in integer source pixels.
struct Rect {
  std::size_t x0 = 0, y0 = 0, w = 0, h = 0;
  RectF as_f() const {
    return RectF{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(w),
                 static_cast<double>(h)};
  }
};

namespace detail {

inline float sample_bilinear_plane(const float* plane, std::size_t H, std::size_t W, double y,
                                   double x) {
  const double cx = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
  const double cy = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
  const std::size_t x0 = static_cast<std::size_t>(cx);
  const std::size_t y0 = static_cast<std::size_t>(cy);
  const std::size_t x1 = std::min(x0 + 1, W - 1);
  const std::size_t y1 = std::min(y0 + 1, H - 1);
  const float fx = static_cast<float>(cx - static_cast<double>(x0));
  const float fy = static_cast<float>(cy - static_cast<double>(y0));
  const float a = plane[y0 * W + x0], b = plane[y0 * W + x1];
  const float c = plane[y1 * W + x0], d = plane[y1 * W + x1];
  return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy;
}

}  // namespace detail

// Half-pixel-center mapping from an out_size x out_size view into the crop:
// source_x(u) = x0 + (u + 0.5) * w / out - 0.5, clamped inside the crop.
inline Tensor<float> crop_resize_bilinear(const Tensor<float>& img, const Rect& crop,
                                          std::size_t out_size) {
  if (img.ndim() != 3) throw ShapeError(cat("crop_resize: expected (C,H,W), got ", shape_str(img.shape())));
  const std::size_t C = img.size(0), H = img.size(1), W = img.size(2);
  if (crop.w == 0 || crop.h == 0 || crop.x0 + crop.w > W || crop.y0 + crop.h > H)
    throw DataError(cat("crop_resize: rect (", crop.x0, ",", crop.y0, ",", crop.w, ",", crop.h,
                        ") outside ", W, "x", H, " image"));
  std::vector<float> out(C * out_size * out_size);
  const double sx = static_cast<double>(crop.w) / static_cast<double>(out_size);
  const double sy = static_cast<double>(crop.h) / static_cast<double>(out_size);
  for (std::size_t c = 0; c < C; ++c) {
    const float* plane = img.data().data() + c * H * W;
    for (std::size_t v = 0; v < out_size; ++v) {
      const double y = crop.y0 + (static_cast<double>(v) + 0.5) * sy - 0.5;
      const double ylo = static_cast<double>(crop.y0);
      const double yhi = static_cast<double>(crop.y0 + crop.h - 1);
      const double yc = std::min(std::max(y, ylo), yhi);
      for (std::size_t u = 0; u < out_size; ++u) {
        const double x = crop.x0 + (static_cast<double>(u) + 0.5) * sx - 0.5;
        const double xlo = static_cast<double>(crop.x0);
        const double xhi = static_cast<double>(crop.x0 + crop.w - 1);
        const double xc = std::min(std::max(x, xlo), xhi);
        out[(c * out_size + v) * out_size + u] = detail::sample_bilinear_plane(plane, H, W, yc, xc);
      }
    }
  }
  return Tensor<float>::from_data({C, out_size, out_size}, std::move(out));
}

// Separable Gaussian blur with clamp-to-edge borders; a convex combination,
// so values stay inside [0,1].
inline Tensor<float> gaussian_blur(const Tensor<float>& img, double sigma) {
  if (img.ndim() != 3) throw ShapeError(cat("gaussian_blur: expected (C,H,W), got ", shape_str(img.shape())));
  if (sigma <= 0.0) return img.detach();
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<float> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    kernel[i + radius] = static_cast<float>(v);
    norm += v;
  }
  for (auto& k : kernel) k = static_cast<float>(k / norm);

  const std::size_t C = img.size(0), H = img.size(1), W = img.size(2);
  std::vector<float> tmp(img.numel()), out(img.numel());
  const auto src = img.data();
  for (std::size_t c = 0; c < C; ++c) {
    const float* sp = src.data() + c * H * W;
    float* tp = tmp.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const std::ptrdiff_t xx = std::clamp<std::ptrdiff_t>(
              static_cast<std::ptrdiff_t>(x) + i, 0, static_cast<std::ptrdiff_t>(W) - 1);
          acc += kernel[i + radius] * sp[y * W + xx];
        }
        tp[y * W + x] = acc;
      }
    float* op = out.data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const std::ptrdiff_t yy = std::clamp<std::ptrdiff_t>(
              static_cast<std::ptrdiff_t>(y) + i, 0, static_cast<std::ptrdiff_t>(H) - 1);
          acc += kernel[i + radius] * tp[yy * W + x];
        }
        op[y * W + x] = acc;
      }
  }
  return Tensor<float>::from_data(img.shape(), std::move(out));
}

}  // namespace lewel
