#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "lewel/common.hpp"
#include "lewel/tensor.hpp"

// Parameterized layers: linear, 3x3 convolution, batch normalization, the
// two-layer MLP head (applied globally to vectors or per pixel to feature
// maps with shared weights), and the small convolutional encoder.

namespace lewel {

// Ordered name -> tensor registry. Tensors are shared handles, so mutating
// an entry's data mutates the owning layer. Order is insertion order, which
// keeps optimizer/EMA/serialization walks deterministic.
template <typename T>
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  void add(const std::string& name, const Tensor<T>& t) { items.emplace_back(name, t); }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  std::size_t size() const { return items.size(); }
};

namespace init {

// Kaiming-uniform fan-in bound; biases start at zero.
template <typename T>
std::vector<T> kaiming_uniform(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> data(count);
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return data;
}

}  // namespace init

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
  Tensor<T> w;  // (out, in)
  Tensor<T> b;  // (out)

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : w(Tensor<T>::param({out, in}, init::kaiming_uniform<T>(out * in, in, rng))),
        b(Tensor<T>::param({out}, std::vector<T>(out, T(0)), /*wd_exempt=*/true)) {}

  // x: (N, in) -> (N, out)
  Tensor<T> forward(const Tensor<T>& x) const { return add(matmul_nt(x, w), b); }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.add(prefix + ".w", w);
    params.add(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// BatchNorm (fused primitive: one node, hand-written backward)
// ---------------------------------------------------------------------------

enum class BnMode { BatchStats, EmaStats, Identity };

// x: (N,C) or (N,C,H,W); statistics are per channel over batch (x spatial).
// BatchStats normalizes by the current batch and, when training, folds the
// batch statistics into the running ones. EmaStats normalizes by the running
// statistics only. Identity passes the input through untouched.
template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var, BnMode mode,
                            bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  if (mode == BnMode::Identity) return x;
  if (x.ndim() != 2 && x.ndim() != 4)
    throw ShapeError(cat("batchnorm: expected rank 2 or 4 input, got ", shape_str(x.shape())));
  const std::size_t N = x.size(0), C = x.size(1);
  const std::size_t inner = x.ndim() == 4 ? x.size(2) * x.size(3) : 1;
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError(cat("batchnorm: channel mismatch, input has ", C, " channels"));
  const std::size_t M = N * inner;
  if (mode == BnMode::BatchStats && training && M < 2)
    throw NumericError("batchnorm: batch statistics need at least 2 values per channel");

  const auto& in = x.node()->data;
  const auto& g = gamma.node()->data;
  const auto& be = beta.node()->data;

  std::vector<T> mean(C), inv_std(C);
  if (mode == BnMode::BatchStats) {
    for (std::size_t c = 0; c < C; ++c) {
      double sum = 0.0, sumsq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = in.data() + (n * C + c) * inner;
        for (std::size_t s = 0; s < inner; ++s) {
          sum += p[s];
          sumsq += static_cast<double>(p[s]) * p[s];
        }
      }
      const double mu = sum / static_cast<double>(M);
      const double var = std::max(0.0, sumsq / static_cast<double>(M) - mu * mu);  // biased
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      if (training) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        rm[c] = (T(1) - momentum) * rm[c] + momentum * static_cast<T>(mu);
        rv[c] = (T(1) - momentum) * rv[c] + momentum * static_cast<T>(var);
      }
    }
  } else {  // EmaStats
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + static_cast<double>(eps)));
    }
  }

  std::vector<T> xhat(in.size()), out(in.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = in.data() + (n * C + c) * inner;
      T* ph = xhat.data() + (n * C + c) * inner;
      T* po = out.data() + (n * C + c) * inner;
      const T mu = mean[c], is = inv_std[c], ga = g[c], bt = be[c];
      for (std::size_t s = 0; s < inner; ++s) {
        ph[s] = (p[s] - mu) * is;
        po[s] = ga * ph[s] + bt;
      }
    }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const bool batch_coupled = mode == BnMode::BatchStats;
  return detail::make_op<T>(
      "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, N, C, inner, M, batch_coupled, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](detail::Node<T>& node) {
        const auto& dy = node.grad;
        std::vector<T> dgamma(C, T(0)), dbeta(C, T(0));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const T* pg = dy.data() + (n * C + c) * inner;
            const T* ph = xhat.data() + (n * C + c) * inner;
            T sg = 0, sgx = 0;
            for (std::size_t s = 0; s < inner; ++s) {
              sg += pg[s];
              sgx += pg[s] * ph[s];
            }
            dbeta[c] += sg;
            dgamma[c] += sgx;
          }
        if (xn->requires_grad) {
          std::vector<T> dx(xn->data.size());
          const T invM = T(1) / static_cast<T>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const T* pg = dy.data() + (n * C + c) * inner;
              const T* ph = xhat.data() + (n * C + c) * inner;
              T* pd = dx.data() + (n * C + c) * inner;
              const T scale = gn->data[c] * inv_std[c];
              if (batch_coupled) {
                const T mg = dbeta[c] * invM, mgx = dgamma[c] * invM;
                for (std::size_t s = 0; s < inner; ++s)
                  pd[s] = scale * (pg[s] - mg - ph[s] * mgx);
              } else {
                for (std::size_t s = 0; s < inner; ++s) pd[s] = scale * pg[s];
              }
            }
          detail::accumulate(*xn, dx);
        }
        if (gn->requires_grad) detail::accumulate(*gn, dgamma);
        if (bn->requires_grad) detail::accumulate(*bn, dbeta);
      });
}

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor<T>::param({channels}, std::vector<T>(channels, T(1)), /*wd_exempt=*/true)),
        beta(Tensor<T>::param({channels}, std::vector<T>(channels, T(0)), /*wd_exempt=*/true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::ones({channels})) {}

  Tensor<T> forward(const Tensor<T>& x, BnMode mode, bool training) {
    return batchnorm_forward(x, gamma, beta, running_mean, running_var, mode, training, momentum,
                             eps);
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    params.add(prefix + ".gamma", gamma);
    params.add(prefix + ".beta", beta);
    buffers.add(prefix + ".running_mean", running_mean);
    buffers.add(prefix + ".running_var", running_var);
  }
};

// ---------------------------------------------------------------------------
// Conv2d layer
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dLayer {
  Tensor<T> w;  // (out, in, k, k)
  Tensor<T> b;  // (out)
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad_,
              Rng& rng)
      : w(Tensor<T>::param({out, in, k, k}, init::kaiming_uniform<T>(out * in * k * k, in * k * k, rng))),
        b(Tensor<T>::param({out}, std::vector<T>(out, T(0)), /*wd_exempt=*/true)),
        stride(stride_),
        pad(pad_) {}

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

  void collect(const std::string& prefix, NamedTensors<T>& params) const {
    params.add(prefix + ".w", w);
    params.add(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// MlpHead: linear -> BN -> relu -> linear, applied to vectors or per pixel
// with the same parameter storage (the coupling that yields alignment maps).
// ---------------------------------------------------------------------------

template <typename T>
struct MlpHead {
  Linear<T> fc1, fc2;
  BatchNorm<T> bn;
  std::size_t in = 0, hidden = 0, out = 0;

  MlpHead() = default;
  MlpHead(std::size_t in_, std::size_t hidden_, std::size_t out_, Rng& rng)
      : fc1(in_, hidden_, rng), fc2(hidden_, out_, rng), bn(hidden_), in(in_), hidden(hidden_), out(out_) {}

  // rows: (R, in) -> (R, out). The global head over a batch of vectors and the
  // per-pixel head over flattened positions are the same computation.
  Tensor<T> forward_rows(const Tensor<T>& rows, BnMode mode, bool training) {
    if (rows.ndim() != 2 || rows.size(1) != in)
      throw ShapeError(cat("mlp head: expected (*,", in, ") rows, got ", shape_str(rows.shape())));
    auto h = fc1.forward(rows);
    h = bn.forward(h, mode, training);
    h = relu(h);
    return fc2.forward(h);
  }

  Tensor<T> forward_global(const Tensor<T>& y, BnMode mode, bool training) {
    return forward_rows(y, mode, training);
  }

  // fmap: (N, in, H, W) -> (N, out, H, W). Rows are batch x spatial positions,
  // so BN statistics cover batch and space, the convolutional convention.
  Tensor<T> forward_perpixel(const Tensor<T>& fmap, BnMode mode, bool training) {
    if (fmap.ndim() != 4 || fmap.size(1) != in)
      throw ShapeError(cat("mlp head: expected (*,", in, ",H,W) map, got ", shape_str(fmap.shape())));
    const std::size_t N = fmap.size(0), H = fmap.size(2), W = fmap.size(3);
    auto rows = reshape(permute(fmap, {0, 2, 3, 1}), {N * H * W, in});
    auto proj = forward_rows(rows, mode, training);
    return permute(reshape(proj, {N, H, W, out}), {0, 3, 1, 2});
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    fc1.collect(prefix + ".fc1", params);
    bn.collect(prefix + ".bn", params, buffers);
    fc2.collect(prefix + ".fc2", params);
  }
};

// ---------------------------------------------------------------------------
// ToyEncoder: four conv->BN->relu blocks, overall stride 8.
// ---------------------------------------------------------------------------

template <typename T>
struct ToyEncoder {
  std::array<Conv2dLayer<T>, 4> conv;
  std::array<BatchNorm<T>, 4> bn;
  std::size_t out_channels = 0;

  ToyEncoder() = default;
  ToyEncoder(std::size_t d, Rng& rng) : out_channels(d) {
    const std::size_t widths[4] = {std::max<std::size_t>(1, d / 8),
                                   std::max<std::size_t>(1, d / 4),
                                   std::max<std::size_t>(1, d / 2), d};
    std::size_t in = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      conv[i] = Conv2dLayer<T>(in, widths[i], 3, i == 0 ? 1 : 2, 1, rng);
      bn[i] = BatchNorm<T>(widths[i]);
      in = widths[i];
    }
  }

  // images: (N,3,S,S), S divisible by 8 -> (N, out_channels, S/8, S/8)
  Tensor<T> forward(const Tensor<T>& images, BnMode mode, bool training) {
    if (images.ndim() != 4 || images.size(1) != 3)
      throw ShapeError(cat("encoder: expected (N,3,S,S) input, got ", shape_str(images.shape())));
    if (images.size(2) != images.size(3) || images.size(2) % 8 != 0)
      throw ShapeError(cat("encoder: side must be square and divisible by 8, got ",
                           shape_str(images.shape())));
    Tensor<T> h = images;
    for (std::size_t i = 0; i < 4; ++i) {
      h = conv[i].forward(h);
      h = bn[i].forward(h, mode, training);
      h = relu(h);
    }
    return h;
  }

  void collect(const std::string& prefix, NamedTensors<T>& params, NamedTensors<T>& buffers) const {
    for (std::size_t i = 0; i < 4; ++i) {
      conv[i].collect(cat(prefix, ".block", i, ".conv"), params);
      bn[i].collect(cat(prefix, ".block", i, ".bn"), params, buffers);
    }
  }
};

// Spatial average over a feature map: (N,C,H,W) -> (N,C).
template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& fmap) {
  if (fmap.ndim() != 4) throw ShapeError(cat("gap: expected rank-4 map, got ", shape_str(fmap.shape())));
  return mean_axes(fmap, {2, 3});
}

}  // namespace lewel
