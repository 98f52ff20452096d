#pragma once

// Training objectives. The contrastive variant scores each positive pair
// against a FIFO queue of momentum embeddings (global term) or against the
// other images of the batch (aligned term). The predictive variant regresses
// predicted online embeddings onto stop-gradient targets via normalized MSE.
// The total objective is the convex combination of global and aligned terms.

#include <cmath>
#include <cstddef>
#include <vector>

#include "lewel/align.hpp"
#include "lewel/common.hpp"
#include "lewel/nn.hpp"
#include "lewel/tensor.hpp"

namespace lewel {

struct LossConfig {
  Variant variant = Variant::LewelB;
  double beta = 0.5;   // weight of the aligned term
  double tau = 0.2;    // contrastive temperature
  std::size_t queue_capacity = 4096;
  bool symmetrize = true;        // predictive variant averages both view orders
  bool cross_semantics = false;  // aligned negatives may come from other maps

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw ConfigError(cat("loss: beta must be in [0,1], got ", beta));
    if (tau <= 0.0) throw ConfigError(cat("loss: tau must be positive, got ", tau));
    if (queue_capacity == 0) throw ConfigError("loss: queue capacity must be positive");
  }
};

namespace detail {

// Rows of a rank-2 tensor must not be numerically zero (cosine undefined).
template <typename T>
void require_nonzero_rows(const Tensor<T>& x, const char* who) {
  const auto v = x.data();
  const std::size_t n = x.size(0), c = x.size(1);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += static_cast<double>(v[r * c + j]) * v[r * c + j];
    if (std::sqrt(s) < kL2NormFloor<double>)
      throw NumericError(cat(who, ": zero vector at row ", r));
  }
}

template <typename T>
Tensor<T> eye_mask(std::size_t n) {
  std::vector<T> m(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = T(1);
  return Tensor<T>::from_data({n, n}, std::move(m));
}

// Mean over rows of -log p[row, row] for row-stochastic p.
template <typename T>
Tensor<T> mean_diag_nll(const Tensor<T>& logits) {
  auto p = softmax_axes(logits, {1});
  auto diag = sum_axes(mul(p, eye_mask<T>(p.size(0))), {1});
  return neg(mean_all(log(diag)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// FIFO queue of detached momentum embeddings (contrastive negatives).
// ---------------------------------------------------------------------------

template <typename T>
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0 || dim == 0) throw ConfigError("queue: capacity and dim must be positive");
    buffer_.resize(capacity * dim);
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t fill() const { return fill_; }

  // Append a batch of unit-norm rows, evicting the oldest entries on overflow.
  void push(const Tensor<T>& batch) {
    if (batch.ndim() != 2 || batch.size(1) != dim_)
      throw ShapeError(cat("queue: expected (*,", dim_, ") rows, got ", shape_str(batch.shape())));
    const std::size_t b = batch.size(0);
    if (b > capacity_)
      throw ConfigError(cat("queue: batch of ", b, " exceeds capacity ", capacity_));
    const auto v = batch.data();
    for (std::size_t r = 0; r < b; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) s += static_cast<double>(v[r * dim_ + j]) * v[r * dim_ + j];
      if (std::abs(std::sqrt(s) - 1.0) > 1e-6)
        throw NumericError(cat("queue: row ", r, " is not unit-norm"));
    }
    for (std::size_t r = 0; r < b; ++r) {
      // when full this lands on head_, overwriting the oldest entry
      const std::size_t slot = (head_ + fill_) % capacity_;
      std::copy(v.begin() + r * dim_, v.begin() + (r + 1) * dim_, buffer_.begin() + slot * dim_);
      if (fill_ < capacity_) {
        ++fill_;
      } else {
        head_ = (head_ + 1) % capacity_;
      }
    }
  }

  // Snapshot in first-in-first-out order, detached from any graph.
  Tensor<T> contents() const {
    std::vector<T> out(fill_ * dim_);
    for (std::size_t r = 0; r < fill_; ++r) {
      const std::size_t slot = (head_ + r) % capacity_;
      std::copy(buffer_.begin() + slot * dim_, buffer_.begin() + (slot + 1) * dim_,
                out.begin() + r * dim_);
    }
    return Tensor<T>::from_data({fill_, dim_}, std::move(out));
  }

  // Checkpoint plumbing: FIFO-ordered payload; restore resets the ring head.
  std::vector<T> snapshot() const {
    auto t = contents();
    return std::vector<T>(t.data().begin(), t.data().end());
  }
  void restore(std::size_t capacity, std::size_t dim, const std::vector<T>& fifo) {
    if (dim == 0 || capacity == 0 || fifo.size() % dim != 0 || fifo.size() / dim > capacity)
      throw DataError("queue: bad snapshot geometry");
    capacity_ = capacity;
    dim_ = dim;
    buffer_.assign(capacity * dim, T(0));
    std::copy(fifo.begin(), fifo.end(), buffer_.begin());
    fill_ = fifo.size() / dim;
    head_ = 0;
  }

 private:
  std::size_t capacity_ = 0, dim_ = 0;
  std::size_t head_ = 0;  // index of the oldest entry
  std::size_t fill_ = 0;
  std::vector<T> buffer_;
};

// ---------------------------------------------------------------------------
// Contrastive loss.
// ---------------------------------------------------------------------------

// Mean cross entropy of each positive pair (z1_i, z2_i) against the shared
// negatives: row i of the logits is [cos(z1_i,z2_i), cos(z1_i,neg_0), ...]/tau
// and the label is always index 0. With no negatives the loss is exactly 0.
// Gradients flow into any input that carries them.
template <typename T>
Tensor<T> infonce(const Tensor<T>& z1, const Tensor<T>& z2, const Tensor<T>& negatives, T tau) {
  if (tau <= T(0)) throw ConfigError(cat("infonce: tau must be positive, got ", tau));
  if (z1.ndim() != 2 || z2.ndim() != 2 || z1.shape() != z2.shape())
    throw ShapeError(cat("infonce: embeddings must share shape (N,c), got ",
                         shape_str(z1.shape()), " and ", shape_str(z2.shape())));
  detail::require_nonzero_rows(z1, "infonce");
  detail::require_nonzero_rows(z2, "infonce");

  auto z1n = l2_normalize_axis(z1, 1);
  auto z2n = l2_normalize_axis(z2, 1);
  auto pos = reshape(sum_axes(mul(z1n, z2n), {1}), {z1.size(0), std::size_t(1)});
  Tensor<T> logits;
  if (negatives.defined() && negatives.size(0) > 0) {
    if (negatives.ndim() != 2 || negatives.size(1) != z1.size(1))
      throw ShapeError(cat("infonce: negatives must be (K,", z1.size(1), "), got ",
                           shape_str(negatives.shape())));
    detail::require_nonzero_rows(negatives, "infonce");
    auto neg = matmul_nt(z1n, l2_normalize_axis(negatives, 1));
    logits = concat_axis({pos, neg}, 1);
  } else {
    logits = pos;
  }
  auto p = softmax_axes(scale(logits, T(1) / tau), {1});
  return neg(mean_all(log(slice_axis(p, 1, 0, 1))));
}

// Single-pair form: vectors plus an explicit list of negative vectors.
template <typename T>
Tensor<T> infonce(const Tensor<T>& z1, const Tensor<T>& z2,
                  const std::vector<Tensor<T>>& negatives, T tau) {
  if (z1.ndim() != 1 || z2.ndim() != 1)
    throw ShapeError("infonce: single-pair form expects vectors");
  const std::size_t c = z1.size(0);
  Tensor<T> stack;
  if (!negatives.empty()) {
    std::vector<Tensor<T>> rows;
    rows.reserve(negatives.size());
    for (const auto& n : negatives) rows.push_back(reshape(n, {std::size_t(1), c}));
    stack = rows.size() == 1 ? rows[0] : concat_axis(rows, 0);
  }
  return infonce(reshape(z1, {std::size_t(1), c}), reshape(z2, {std::size_t(1), c}), stack, tau);
}

// ---------------------------------------------------------------------------
// Predictive loss.
// ---------------------------------------------------------------------------

// Normalized MSE with stop-gradient: mean_i (2 - 2 cos(q(online_i), target_i)).
// The target never receives gradients; per-row values lie in [0, 4].
template <typename T>
Tensor<T> byol_mse(const Tensor<T>& online, const Tensor<T>& target, MlpHead<T>& predictor,
                   BnMode mode, bool training) {
  if (online.ndim() != 2 || target.ndim() != 2 || online.size(0) != target.size(0))
    throw ShapeError(cat("byol_mse: expected matching (N,*) rows, got ", shape_str(online.shape()),
                         " and ", shape_str(target.shape())));
  auto predicted = predictor.forward_rows(online, mode, training);
  if (predicted.size(1) != target.size(1))
    throw ShapeError(cat("byol_mse: predictor emits ", predicted.size(1), " dims, target has ",
                         target.size(1)));
  detail::require_nonzero_rows(predicted, "byol_mse");
  detail::require_nonzero_rows(target, "byol_mse");
  auto qn = l2_normalize_axis(predicted, 1);
  auto tn = l2_normalize_axis(stop_gradient(target), 1);
  auto sim = mean_all(sum_axes(mul(qn, tn), {1}));
  return add(Tensor<T>::scalar(T(2)), scale(sim, T(-2)));
}

// ---------------------------------------------------------------------------
// Aligned-set loss.
// ---------------------------------------------------------------------------

// Mean over the d/h aligned embeddings of the per-set loss. Contrastive: each
// (i,k) pair is scored against the momentum embeddings of the other batch
// images (same map index k, or every map index with cross_semantics).
// Predictive: normalized MSE through the shared predictor s on every row.
template <typename T>
Tensor<T> aligned_loss(const Tensor<T>& aligned1, const Tensor<T>& aligned2,
                       const LossConfig& cfg, MlpHead<T>* s, BnMode mode, bool training) {
  if (aligned1.ndim() != 3 || aligned2.ndim() != 3 || aligned1.shape() != aligned2.shape())
    throw ShapeError(cat("aligned_loss: expected matching (N,K,c) sets, got ",
                         shape_str(aligned1.shape()), " and ", shape_str(aligned2.shape())));
  const std::size_t N = aligned1.size(0), K = aligned1.size(1), c = aligned1.size(2);
  const T tau = static_cast<T>(cfg.tau);

  if (cfg.variant == Variant::LewelB) {
    if (s == nullptr) throw ConfigError("aligned_loss: predictive variant needs the predictor s");
    auto rows1 = reshape(aligned1, {N * K, c});
    auto rows2 = reshape(aligned2, {N * K, c});
    return byol_mse(rows1, rows2, *s, mode, training);
  }

  auto keys_all = l2_normalize_axis(reshape(aligned2, {N * K, c}), 1);
  if (cfg.cross_semantics) {
    // queries (i,k) against every key (j,*) of other images j != i
    auto queries = l2_normalize_axis(reshape(aligned1, {N * K, c}), 1);
    auto logits = scale(matmul_nt(queries, keys_all), T(1) / tau);
    std::vector<T> gate(N * K * N * K, T(0));
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t j = 0; j < N; ++j)
          for (std::size_t k2 = 0; k2 < K; ++k2) {
            const bool allowed = (i != j) || (k == k2);  // drop same-image off-positives
            if (!allowed) gate[(i * K + k) * N * K + j * K + k2] = T(-1e4);
          }
    logits = add(logits, Tensor<T>::from_data({N * K, N * K}, std::move(gate)));
    return detail::mean_diag_nll(logits);
  }

  // same-k negatives: one (N,N) contrast per map index, averaged
  auto keys_nkc = reshape(keys_all, {N, K, c});
  Tensor<T> total;
  for (std::size_t k = 0; k < K; ++k) {
    auto a1k = l2_normalize_axis(reshape(slice_axis(aligned1, 1, k, 1), {N, c}), 1);
    auto keys = reshape(slice_axis(keys_nkc, 1, k, 1), {N, c});
    auto logits = scale(matmul_nt(a1k, keys), T(1) / tau);
    auto term = detail::mean_diag_nll(logits);
    total = k == 0 ? term : add(total, term);
  }
  return scale(total, T(1) / static_cast<T>(K));
}

// ---------------------------------------------------------------------------
// Combination.
// ---------------------------------------------------------------------------

// L = (1 - beta) * global + beta * aligned.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& global_term, const Tensor<T>& aligned_term, T beta) {
  if (beta < T(0) || beta > T(1))
    throw ConfigError(cat("total_loss: beta must be in [0,1], got ", beta));
  return add(scale(global_term, T(1) - beta), scale(aligned_term, beta));
}

}  // namespace lewel
