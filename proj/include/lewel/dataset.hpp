#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lewel/common.hpp"
#include "lewel/image.hpp"
#include "lewel/tensor.hpp"

// Synthetic dataset: one colored shape per image over a cluttered background,
// with an exact foreground mask and a balanced class label (shape x hue).
// Everything is a pure function of (spec.seed, split, index), so any sample
// can be regenerated in isolation.

namespace lewel {

struct SyntheticSpec {
  std::size_t canvas = 64;        // S
  std::size_t num_classes = 8;    // shape x hue combinations, <= 8
  std::size_t clutter_count = 12; // background distractor strokes
  double clutter_intensity = 0.18;
  std::size_t train_size = 4096;
  std::size_t test_size = 1024;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2 || num_classes > 8)
      throw ConfigError(cat("dataset: num_classes must be in [2,8], got ", num_classes));
    if (train_size < num_classes || test_size < num_classes)
      throw ConfigError("dataset: split sizes must be >= num_classes");
    if (canvas < 16 || canvas % 8 != 0)
      throw ConfigError(cat("dataset: canvas must be >=16 and divisible by 8, got ", canvas));
  }

  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct Sample {
  Tensor<float> image;  // (3,S,S) in [0,1]
  Tensor<float> mask;   // (S,S) in {0,1}
  std::size_t label = 0;
  std::string sample_id;
};

namespace detail {

enum class ShapeKind { Disk, Square, Triangle, Annulus };

struct ShapeParams {
  ShapeKind kind;
  double cx, cy;     // center, pixels
  double size;       // characteristic radius, pixels
  double angle;      // rotation, radians
};

inline bool inside_shape(const ShapeParams& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double ca = std::cos(-p.angle), sa = std::sin(-p.angle);
  const double u = dx * ca - dy * sa, v = dx * sa + dy * ca;
  switch (p.kind) {
    case ShapeKind::Disk:
      return dx * dx + dy * dy <= p.size * p.size;
    case ShapeKind::Square:
      return std::abs(u) <= p.size * 0.886 && std::abs(v) <= p.size * 0.886;  // area-matched
    case ShapeKind::Triangle: {
      // equilateral triangle, circumradius ~1.4*size to match disk area
      const double r = p.size * 1.4;
      const double x1 = 0, y1 = -r;
      const double x2 = r * 0.8660, y2 = r * 0.5;
      const double x3 = -r * 0.8660, y3 = r * 0.5;
      auto side = [&](double ax, double ay, double bx, double by) {
        return (bx - ax) * (v - ay) - (by - ay) * (u - ax);
      };
      const double s1 = side(x1, y1, x2, y2), s2 = side(x2, y2, x3, y3), s3 = side(x3, y3, x1, y1);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
    case ShapeKind::Annulus: {
      const double rr = dx * dx + dy * dy;
      const double ro = p.size * 1.15, ri = p.size * 0.55;  // area-matched ring
      return rr <= ro * ro && rr >= ri * ri;
    }
  }
  return false;
}

inline void draw_stroke(std::vector<float>* rgb, std::size_t S, double x0, double y0, double x1,
                        double y1, const std::array<float, 3>& color) {
  const double len = std::max(1.0, std::hypot(x1 - x0, y1 - y0));
  const int steps = static_cast<int>(len * 2.0);
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= static_cast<int>(S) || y >= static_cast<int>(S)) continue;
    for (std::size_t c = 0; c < 3; ++c)
      rgb[c][static_cast<std::size_t>(y) * S + static_cast<std::size_t>(x)] = color[c];
  }
}

}  // namespace detail

// Any sample is reproducible alone: all randomness comes from a stream
// derived from (seed, split, index).
inline Sample generate_sample(const SyntheticSpec& spec, const std::string& split,
                              std::size_t index) {
  spec.validate();
  const std::size_t S = spec.canvas;
  const std::size_t label = index % spec.num_classes;
  Rng rng = derive_rng(spec.seed, cat("dataset/", split), static_cast<std::uint64_t>(index));

  // background: muted gray with gentle per-pixel noise
  const float base = static_cast<float>(rng.uniform(0.35, 0.55));
  std::vector<float> plane[3];
  for (auto& p : plane) p.assign(S * S, 0.f);
  for (std::size_t i = 0; i < S * S; ++i) {
    const float n = static_cast<float>(rng.uniform(-0.05, 0.05));
    for (std::size_t c = 0; c < 3; ++c) plane[c][i] = std::clamp(base + n, 0.f, 1.f);
  }

  // clutter: low-contrast strokes, drawn under the object
  for (std::size_t k = 0; k < spec.clutter_count; ++k) {
    const double x0 = rng.uniform(0, static_cast<double>(S - 1));
    const double y0 = rng.uniform(0, static_cast<double>(S - 1));
    const double x1 = rng.uniform(0, static_cast<double>(S - 1));
    const double y1 = rng.uniform(0, static_cast<double>(S - 1));
    const float delta =
        static_cast<float>(spec.clutter_intensity * (rng.bernoulli(0.5) ? 1.0 : -1.0));
    std::array<float, 3> col;
    for (std::size_t c = 0; c < 3; ++c)
      col[c] = std::clamp(base + delta + static_cast<float>(rng.uniform(-0.03, 0.03)), 0.f, 1.f);
    detail::draw_stroke(plane, S, x0, y0, x1, y1, col);
  }

  // foreground shape: class = shape x hue; geometry resampled until the mask
  // area fraction lands in [0.05, 0.6]
  const auto kind = static_cast<detail::ShapeKind>(label % 4);
  const std::size_t hue = label / 4;
  std::vector<float> mask(S * S, 0.f);
  double area_fraction = 0.0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    detail::ShapeParams p{kind,
                          rng.uniform(0.30 * S, 0.70 * S),
                          rng.uniform(0.30 * S, 0.70 * S),
                          rng.uniform(0.14 * S, 0.30 * S),
                          rng.uniform(0.0, 6.283185307179586)};
    std::fill(mask.begin(), mask.end(), 0.f);
    std::size_t painted = 0;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        if (detail::inside_shape(p, static_cast<double>(x), static_cast<double>(y))) {
          mask[y * S + x] = 1.f;
          ++painted;
        }
    area_fraction = static_cast<double>(painted) / static_cast<double>(S * S);
    if (area_fraction >= 0.05 && area_fraction <= 0.6) break;
  }
  if (area_fraction < 0.05 || area_fraction > 0.6)
    throw DataError(cat("dataset: could not place shape for sample ", index));

  // hue 0 warm, hue 1 cool; small per-sample jitter keeps hues decidable
  std::array<float, 3> color = hue == 0 ? std::array<float, 3>{0.82f, 0.28f, 0.20f}
                                        : std::array<float, 3>{0.20f, 0.38f, 0.85f};
  for (auto& c : color) c = std::clamp(c + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.f, 1.f);
  for (std::size_t i = 0; i < S * S; ++i)
    if (mask[i] > 0.f)
      for (std::size_t c = 0; c < 3; ++c) plane[c][i] = color[c];

  std::vector<float> rgb(3 * S * S);
  for (std::size_t c = 0; c < 3; ++c)
    std::copy(plane[c].begin(), plane[c].end(), rgb.begin() + c * S * S);

  Sample s;
  s.image = Tensor<float>::from_data({3, S, S}, std::move(rgb));
  s.mask = Tensor<float>::from_data({S, S}, std::move(mask));
  s.label = label;
  char id[32];
  std::snprintf(id, sizeof id, "%s_%06zu", split.c_str(), index);
  s.sample_id = id;
  return s;
}

inline std::vector<Sample> generate(const SyntheticSpec& spec, const std::string& split) {
  spec.validate();
  if (split != "train" && split != "test")
    throw ConfigError(cat("dataset: unknown split '", split, "'"));
  const std::size_t count = split == "train" ? spec.train_size : spec.test_size;
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, split, i));
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: UTF-8 lines "id<TAB>image<TAB>mask<TAB>label", sorted by id.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string sample_id;
  std::string image_path;  // relative to the manifest's directory
  std::string mask_path;
  std::size_t label = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string dir;
  std::vector<ManifestEntry> entries;
};

inline void write_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::vector<const Sample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const Sample* a, const Sample* b) { return a->sample_id < b->sample_id; });

  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw IoError(cat("cannot write manifest in ", dir));
  for (const Sample* s : order) {
    const std::string img_rel = cat("images/", s->sample_id, ".ppm");
    const std::string mask_rel = cat("masks/", s->sample_id, ".pgm");
    save_ppm((fs::path(dir) / img_rel).string(), s->image);
    save_pgm((fs::path(dir) / mask_rel).string(), s->mask);
    manifest << s->sample_id << '\t' << img_rel << '\t' << mask_rel << '\t' << s->label << '\n';
  }
  if (!manifest) throw IoError(cat("short write on manifest in ", dir));
}

inline DatasetManifest read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto path = fs::path(dir) / "manifest.tsv";
  std::ifstream in(path);
  if (!in) throw IoError(cat("cannot open manifest: ", path.string()));
  DatasetManifest m;
  m.dir = dir;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ManifestEntry e;
    std::size_t a = line.find('\t');
    std::size_t b = a == std::string::npos ? a : line.find('\t', a + 1);
    std::size_t c = b == std::string::npos ? b : line.find('\t', b + 1);
    if (c == std::string::npos)
      throw DataError(cat(path.string(), ":", lineno, ": expected 4 tab-separated fields"));
    e.sample_id = line.substr(0, a);
    e.image_path = line.substr(a + 1, b - a - 1);
    e.mask_path = line.substr(b + 1, c - b - 1);
    try {
      e.label = std::stoul(line.substr(c + 1));
    } catch (const std::exception&) {
      throw DataError(cat(path.string(), ":", lineno, ": bad label field"));
    }
    if (!fs::exists(fs::path(dir) / e.image_path))
      throw DataError(cat("manifest references missing file: ", (fs::path(dir) / e.image_path).string()));
    if (!fs::exists(fs::path(dir) / e.mask_path))
      throw DataError(cat("manifest references missing file: ", (fs::path(dir) / e.mask_path).string()));
    m.entries.push_back(std::move(e));
  }
  for (std::size_t i = 1; i < m.entries.size(); ++i)
    if (!(m.entries[i - 1].sample_id < m.entries[i].sample_id))
      throw DataError(cat(path.string(), ": entries not sorted ascending by sample_id near line ", i + 1));
  return m;
}

inline Sample load_sample(const DatasetManifest& m, std::size_t index) {
  namespace fs = std::filesystem;
  const auto& e = m.entries.at(index);
  Sample s;
  s.image = load_ppm((fs::path(m.dir) / e.image_path).string());
  s.mask = load_pgm((fs::path(m.dir) / e.mask_path).string());
  s.label = e.label;
  s.sample_id = e.sample_id;
  return s;
}

}  // namespace lewel
