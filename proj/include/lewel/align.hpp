#pragma once

// Learned spatial alignment. The global projection head is reinterpreted as a
// per-pixel projection: applying it at every position of the feature map and
// normalizing yields one spatial weighting ("alignment map") per embedding
// channel. Aggregating grouped feature channels under those maps produces a
// set of aligned embeddings alongside the usual pooled global embedding, with
// uniform maps recovering plain global average pooling.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "lewel/common.hpp"
#include "lewel/nn.hpp"
#include "lewel/tensor.hpp"

namespace lewel {

enum class Variant { LewelM, LewelB };

inline const char* variant_name(Variant v) { return v == Variant::LewelM ? "lewel_m" : "lewel_b"; }

// Where alignment maps come from. Learned is the mechanism under study;
// Uniform degenerates to GAP and Random is the shuffled-weighting control.
enum class MapSource { Learned, Uniform, Random };

// Structural settings shared by the online and momentum branches.
struct HeadConfig {
  std::size_t encoder_dim = 64;  // channels of the feature map (D)
  std::size_t embed_dim = 32;    // global embedding size = number of maps (d)
  std::size_t aligned_dim = 32;  // aligned embedding size (c)
  std::size_t groups = 4;        // channel groups pooled into one aligned row (h)
  std::size_t hidden = 128;      // hidden width of every MLP head
  Variant variant = Variant::LewelB;
  MapSource map_source = MapSource::Learned;
  BnMode online_bn = BnMode::BatchStats;   // online branch while training
  BnMode momentum_bn = BnMode::EmaStats;   // momentum branch always reads running stats

  // number of aligned embeddings per sample
  std::size_t rows() const { return embed_dim / groups; }

  void validate() const {
    if (encoder_dim == 0 || embed_dim == 0 || aligned_dim == 0 || hidden == 0)
      throw ConfigError("head config: dimensions must be positive");
    if (groups == 0 || embed_dim % groups != 0 || encoder_dim % groups != 0)
      throw ConfigError(cat("head config: groups=", groups, " must divide embed_dim=", embed_dim,
                            " and encoder_dim=", encoder_dim));
  }

  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

// ---------------------------------------------------------------------------
// Alignment maps.
// ---------------------------------------------------------------------------

// Project every position of fmap (N,D,H,W) with the coupled head g, l2-
// normalize each position's channel column, then softmax each channel plane
// over space. Returns (N, d, H, W); every (n, k) plane is nonnegative and
// sums to 1. A position with a zero projection contributes flat logits there.
template <typename T>
Tensor<T> compute_alignment_maps(const Tensor<T>& fmap, MlpHead<T>& g, BnMode mode,
                                 bool training) {
  auto logits = g.forward_perpixel(fmap, mode, training);
  return softmax_axes(l2_normalize_axis(logits, 1), {2, 3});
}

// Uniform maps: aggregation under them is exactly global average pooling.
template <typename T>
Tensor<T> uniform_alignment_maps(std::size_t n, std::size_t d, std::size_t height,
                                 std::size_t width) {
  return Tensor<T>::full({n, d, height, width}, T(1) / static_cast<T>(height * width));
}

// Control mode: softmax of i.i.d. Gaussian logits, carrying no learned signal.
template <typename T>
Tensor<T> random_alignment_maps(std::size_t n, std::size_t d, std::size_t height,
                                std::size_t width, Rng& rng) {
  std::vector<T> logits(n * d * height * width);
  for (auto& v : logits) v = static_cast<T>(rng.normal());
  NoGradGuard guard;
  return softmax_axes(Tensor<T>::from_data({n, d, height, width}, std::move(logits)), {2, 3});
}

// Mean entropy of the maps in nats (log(H*W) when uniform). Diagnostic only.
template <typename T>
double map_entropy(const Tensor<T>& maps) {
  if (maps.ndim() != 4)
    throw ShapeError(cat("map_entropy: expected (N,d,H,W) maps, got ", shape_str(maps.shape())));
  const auto v = maps.data();
  const std::size_t planes = maps.size(0) * maps.size(1);
  const std::size_t hw = maps.size(2) * maps.size(3);
  double total = 0.0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t s = 0; s < hw; ++s) {
      const double w = v[p * hw + s];
      if (w > 0.0) total -= w * std::log(w);
    }
  return planes == 0 ? 0.0 : total / static_cast<double>(planes);
}

// ---------------------------------------------------------------------------
// Aggregation.
// ---------------------------------------------------------------------------

// Weighted spatial sum of one feature block under one map:
// y[c] = sum_{i,j} map[i,j] * part[c,i,j]. A uniform map reproduces GAP and a
// one-hot map selects a single position.
template <typename T>
Tensor<T> aggregate(const Tensor<T>& map, const Tensor<T>& part) {
  if (map.ndim() != 2 || part.ndim() != 3 || map.size(0) != part.size(1) ||
      map.size(1) != part.size(2))
    throw ShapeError(cat("aggregate: map ", shape_str(map.shape()), " does not match features ",
                         shape_str(part.shape())));
  auto weighted = mul(reshape(map, {1, map.size(0), map.size(1)}), part);
  return sum_axes(weighted, {1, 2});
}

// Grouped aggregation. Feature channels split into h equal groups; aligned
// row k (of d/h) concatenates the aggregations of group g under map k*h+g,
// i.e. out[n,k,c] = sum_{i,j} maps[n, k*h + c/(D/h), i, j] * fmap[n,c,i,j].
// Fused forward and backward; kept as one primitive because it is the hot
// inner op and its index pattern fits no existing composition cheaply.
template <typename T>
Tensor<T> aggregate_grouped(const Tensor<T>& maps, const Tensor<T>& fmap, std::size_t h) {
  if (maps.ndim() != 4 || fmap.ndim() != 4)
    throw ShapeError(cat("aggregate_grouped: expected rank-4 maps and features, got ",
                         shape_str(maps.shape()), " and ", shape_str(fmap.shape())));
  const std::size_t N = fmap.size(0), D = fmap.size(1), H = fmap.size(2), W = fmap.size(3);
  const std::size_t d = maps.size(1);
  if (maps.size(0) != N || maps.size(2) != H || maps.size(3) != W)
    throw ShapeError(cat("aggregate_grouped: maps ", shape_str(maps.shape()),
                         " do not match features ", shape_str(fmap.shape())));
  if (h == 0 || d % h != 0 || D % h != 0)
    throw ShapeError(cat("aggregate_grouped: groups=", h, " must divide maps=", d,
                         " and channels=", D));
  const std::size_t K = d / h;   // aligned rows
  const std::size_t G = D / h;   // feature channels per group
  const std::size_t HW = H * W;

  const auto& mv = maps.node()->data;
  const auto& fv = fmap.node()->data;
  std::vector<T> out(N * K * D);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t c = 0; c < D; ++c) {
        const T* pm = mv.data() + (n * d + k * h + c / G) * HW;
        const T* pf = fv.data() + (n * D + c) * HW;
        double acc = 0.0;
        for (std::size_t s = 0; s < HW; ++s) acc += static_cast<double>(pm[s]) * pf[s];
        out[(n * K + k) * D + c] = static_cast<T>(acc);
      }

  auto mn = maps.node();
  auto fn = fmap.node();
  return detail::make_op<T>(
      "aggregate_grouped", {N, K, D}, std::move(out), {maps, fmap},
      [mn, fn, N, d, D, K, G, h, HW](detail::Node<T>& node) {
        const auto& dy = node.grad;  // (N, K, D)
        if (mn->requires_grad) {
          std::vector<T> dm(mn->data.size(), T(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
              for (std::size_t c = 0; c < D; ++c) {
                const T gv = dy[(n * K + k) * D + c];
                const T* pf = fn->data.data() + (n * D + c) * HW;
                T* pd = dm.data() + (n * d + k * h + c / G) * HW;
                for (std::size_t s = 0; s < HW; ++s) pd[s] += gv * pf[s];
              }
          detail::accumulate(*mn, dm);
        }
        if (fn->requires_grad) {
          std::vector<T> df(fn->data.size(), T(0));
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
              for (std::size_t c = 0; c < D; ++c) {
                const T gv = dy[(n * K + k) * D + c];
                const T* pm = mn->data.data() + (n * d + k * h + c / G) * HW;
                T* pd = df.data() + (n * D + c) * HW;
                for (std::size_t s = 0; s < HW; ++s) pd[s] += gv * pm[s];
              }
          detail::accumulate(*fn, df);
        }
      });
}

// ---------------------------------------------------------------------------
// Branch network: encoder + coupled global head g + aligned projector p.
// ---------------------------------------------------------------------------

template <typename T>
struct BranchOutputs {
  Tensor<T> fmap;     // (N, D, H, W) encoder features
  Tensor<T> global;   // (N, d)
  Tensor<T> maps;     // (N, d, H, W); undefined when the aligned path is skipped
  Tensor<T> aligned;  // (N, d/h, c); undefined when the aligned path is skipped
};

template <typename T>
struct BranchNet {
  HeadConfig cfg;
  ToyEncoder<T> encoder;
  MlpHead<T> g;  // global projector; the same parameters generate the maps
  MlpHead<T> p;  // aligned projector applied to every aggregated row

  BranchNet() = default;
  BranchNet(const HeadConfig& config, Rng& rng)
      : cfg((config.validate(), config)),
        encoder(config.encoder_dim, rng),
        g(config.encoder_dim, config.hidden, config.embed_dim, rng),
        p(config.encoder_dim, config.hidden, config.aligned_dim, rng) {}

  // One pass over a batch of views. `map_rng` is consulted only when the
  // config asks for random maps. When `with_aligned` is false the aligned
  // path is skipped entirely (the pure-global baseline).
  BranchOutputs<T> forward(const Tensor<T>& images, BnMode mode, bool training,
                           bool with_aligned = true, Rng* map_rng = nullptr) {
    BranchOutputs<T> out;
    out.fmap = encoder.forward(images, mode, training);
    out.global = g.forward_global(global_average_pool(out.fmap), mode, training);
    if (!with_aligned) return out;

    const std::size_t N = out.fmap.size(0), H = out.fmap.size(2), W = out.fmap.size(3);
    switch (cfg.map_source) {
      case MapSource::Learned:
        out.maps = compute_alignment_maps(out.fmap, g, mode, training);
        break;
      case MapSource::Uniform:
        out.maps = uniform_alignment_maps<T>(N, cfg.embed_dim, H, W);
        break;
      case MapSource::Random:
        if (map_rng == nullptr)
          throw ConfigError("branch: random map source needs an rng");
        out.maps = random_alignment_maps<T>(N, cfg.embed_dim, H, W, *map_rng);
        break;
    }
    auto rows = aggregate_grouped(out.maps, out.fmap, cfg.groups);  // (N, d/h, D)
    auto flat = reshape(rows, {N * cfg.rows(), cfg.encoder_dim});
    out.aligned = reshape(p.forward_rows(flat, mode, training), {N, cfg.rows(), cfg.aligned_dim});
    return out;
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    encoder.collect(prefix + ".encoder", params, buffers);
    g.collect(prefix + ".g", params, buffers);
    p.collect(prefix + ".p", params, buffers);
  }
};

// BYOL-style predictors, online branch only: q follows the global embedding,
// one shared s follows every aligned row.
template <typename T>
struct Predictors {
  MlpHead<T> q, s;

  Predictors() = default;
  Predictors(const HeadConfig& cfg, Rng& rng)
      : q(cfg.embed_dim, cfg.hidden, cfg.embed_dim, rng),
        s(cfg.aligned_dim, cfg.hidden, cfg.aligned_dim, rng) {}

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    q.collect(prefix + ".q", params, buffers);
    s.collect(prefix + ".s", params, buffers);
  }
};

// ---------------------------------------------------------------------------
// Paired forward.
// ---------------------------------------------------------------------------

template <typename T>
struct PairOutputs {
  BranchOutputs<T> online;  // first view through the online branch
  BranchOutputs<T> target;  // second view through the momentum branch, no grad
};

// Run a (view1, view2) batch pair through the two branches. The momentum pass
// records no gradients and never updates its BN running statistics (those are
// maintained by the EMA of the online branch).
template <typename T>
PairOutputs<T> lewel_forward(const Tensor<T>& view1, const Tensor<T>& view2,
                             BranchNet<T>& online, BranchNet<T>& momentum, bool training,
                             bool with_aligned = true, Rng* map_rng = nullptr) {
  if (!(online.cfg == momentum.cfg))
    throw ConfigError("lewel_forward: online and momentum configs differ");
  PairOutputs<T> out;
  out.online = online.forward(view1, training ? online.cfg.online_bn : BnMode::EmaStats,
                              training, with_aligned, map_rng);
  {
    NoGradGuard guard;
    out.target = momentum.forward(view2, momentum.cfg.momentum_bn, /*training=*/false,
                                  with_aligned, map_rng);
  }
  return out;
}

}  // namespace lewel
