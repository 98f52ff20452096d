#pragma once

// Training and evaluation. SGD with Nesterov-free momentum and cosine
// annealing drives a two-branch setup: the online branch learns by gradient,
// the momentum branch trails it by EMA (running BN statistics included), and
// a queue of momentum embeddings supplies contrastive negatives when the
// variant asks for them. Evaluation covers linear probing on frozen pooled
// features, an alignment-quality measurement against the dataset masks, and
// one-axis ablation sweeps written as CSV.
//
// The model bundle is templated on the element type: training runs in float
// (twice the gemm throughput), finite-difference verification instantiates
// the same code in double.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "lewel/align.hpp"
#include "lewel/augment.hpp"
#include "lewel/checkpoint.hpp"
#include "lewel/config.hpp"
#include "lewel/dataset.hpp"
#include "lewel/momentum.hpp"
#include "lewel/objectives.hpp"

namespace lewel {

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

// lr0 * (cos(pi * t / T) + 1) / 2; exactly lr0 at t=0 and exactly 0 at t=T.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (step >= total) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return lr0 * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // parallel to the parameter set

  void ensure(const NamedTensors<T>& params) {
    if (velocity.empty()) {
      velocity.resize(params.items.size());
      for (std::size_t i = 0; i < velocity.size(); ++i)
        velocity[i].assign(params.items[i].second.numel(), T(0));
    }
    if (velocity.size() != params.items.size())
      throw ShapeError(cat("sgd: optimizer state holds ", velocity.size(), " buffers for ",
                           params.items.size(), " params"));
  }
};

// v <- momentum * v + (grad + wd * param); param <- param - lr * v.
// Parameters the loss never touched are skipped; decay-exempt parameters
// (biases, BN affine) skip wd when honor_wd_exempt is set. All gradients are
// validated before anything moves, so a bad step mutates nothing.
template <typename T>
void sgd_step(NamedTensors<T>& params, const GradientTable<T>& grads, SgdState<T>& state,
              double lr, double momentum = 0.9, double weight_decay = 0.0,
              bool honor_wd_exempt = true) {
  state.ensure(params);
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    auto& [name, p] = params.items[i];
    if (!grads.contains(p)) continue;
    const auto g = grads.grad_for(p);
    for (const T v : g.data())
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError(cat("sgd: non-finite gradient for ", name));
    if (state.velocity[i].size() != p.numel())
      throw ShapeError(cat("sgd: velocity buffer for ", name, " has wrong size"));
  }
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    auto& [name, p] = params.items[i];
    if (!grads.contains(p)) continue;
    const auto grad = grads.grad_for(p);
    const auto gv = grad.data();
    const double wd = (honor_wd_exempt && p.wd_exempt()) ? 0.0 : weight_decay;
    auto& v = state.velocity[i];
    auto pd = p.mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = static_cast<T>(momentum * v[j] + (gv[j] + wd * pd[j]));
      pd[j] -= static_cast<T>(lr * v[j]);
    }
  }
}

// ---------------------------------------------------------------------------
// Model bundle: online branch, momentum branch, predictors or queue.
// ---------------------------------------------------------------------------

template <typename T>
struct StepOutputs {
  Tensor<T> total, global_term, aligned_term;
  double entropy = 0.0;      // mean online map entropy; 0 when the aligned path is off
  Tensor<T> queue_rows;      // unit-norm momentum globals to enqueue (contrastive variant)
};

template <typename T>
struct LewelModel {
  TrainConfig cfg;
  LossConfig loss_cfg;
  BranchNet<T> online;
  BranchNet<T> target;
  Predictors<T> preds;      // predictive variant only
  NegativeQueue<T> queue;   // contrastive variant only

  NamedTensors<T> online_params, online_buffers;
  NamedTensors<T> target_params, target_buffers;
  NamedTensors<T> pred_params, pred_buffers;
  NamedTensors<T> trainable;  // online params plus predictor params

  explicit LewelModel(const TrainConfig& config) : cfg(config) {
    cfg.validate();
    loss_cfg.variant = cfg.variant;
    loss_cfg.beta = cfg.beta;
    loss_cfg.tau = cfg.tau;
    loss_cfg.queue_capacity = cfg.queue_capacity;

    Rng rng = derive_rng(cfg.seed, "init");
    online = BranchNet<T>(cfg.head, rng);
    target = BranchNet<T>(cfg.head, rng);
    online.collect("net", online_params, online_buffers);
    target.collect("net", target_params, target_buffers);
    // The momentum branch starts as an exact copy, running stats included.
    ema_update(online_params, target_params, T(0));
    ema_update(online_buffers, target_buffers, T(0));

    if (cfg.variant == Variant::LewelB) {
      preds = Predictors<T>(cfg.head, rng);
      preds.collect("pred", pred_params, pred_buffers);
    } else {
      queue = NegativeQueue<T>(cfg.queue_capacity, cfg.head.embed_dim);
    }

    trainable = online_params;
    for (const auto& item : pred_params.items) trainable.items.push_back(item);
  }

  bool aligned_path_active() const { return cfg.beta > 0.0; }

  // Forward both views and assemble the combined loss for one training step.
  StepOutputs<T> step_losses(const Tensor<T>& view1, const Tensor<T>& view2,
                             Rng* map_rng = nullptr) {
    const bool with_aligned = aligned_path_active();
    const BnMode mode = cfg.head.online_bn;
    StepOutputs<T> out;

    if (cfg.variant == Variant::LewelM) {
      auto po = lewel_forward(view1, view2, online, target, /*training=*/true, with_aligned,
                              map_rng);
      out.global_term = infonce(po.online.global, po.target.global, queue.contents(),
                                static_cast<T>(cfg.tau));
      if (with_aligned) {
        out.aligned_term =
            aligned_loss<T>(po.online.aligned, po.target.aligned, loss_cfg, nullptr, mode, true);
        out.entropy = map_entropy(po.online.maps);
      } else {
        out.aligned_term = Tensor<T>::scalar(T(0));
      }
      // Normalize in double so the stored rows stay unit to well below the
      // queue's tolerance even when T is float.
      NoGradGuard guard;
      out.queue_rows = l2_normalize_axis(po.target.global.template astype<double>(), 1)
                           .template astype<T>();
    } else {
      // Symmetrized: each view passes through both branches; orderings averaged.
      auto ab = lewel_forward(view1, view2, online, target, true, with_aligned, map_rng);
      auto ba = lewel_forward(view2, view1, online, target, true, with_aligned, map_rng);
      auto g1 = byol_mse(ab.online.global, ab.target.global, preds.q, mode, true);
      auto g2 = byol_mse(ba.online.global, ba.target.global, preds.q, mode, true);
      out.global_term = scale(add(g1, g2), T(0.5));
      if (with_aligned) {
        auto a1 = aligned_loss(ab.online.aligned, ab.target.aligned, loss_cfg, &preds.s, mode, true);
        auto a2 = aligned_loss(ba.online.aligned, ba.target.aligned, loss_cfg, &preds.s, mode, true);
        out.aligned_term = scale(add(a1, a2), T(0.5));
        out.entropy = map_entropy(ab.online.maps);
      } else {
        out.aligned_term = Tensor<T>::scalar(T(0));
      }
    }
    out.total = total_loss(out.global_term, out.aligned_term, static_cast<T>(cfg.beta));
    return out;
  }

  Checkpoint to_checkpoint(const SgdState<T>& opt, std::uint64_t step) const {
    Checkpoint ck;
    ck.step = step;
    ck.config_text = canonical_config_text(cfg);
    ck.set_note("variant", variant_name(cfg.variant));
    add_group(ck, "online.", online_params);
    add_group(ck, "online.", online_buffers);
    add_group(ck, "target.", target_params);
    add_group(ck, "target.", target_buffers);
    if (cfg.variant == Variant::LewelB) {
      add_group(ck, "pred.", pred_params);
      add_group(ck, "pred.", pred_buffers);
    } else {
      ck.add("queue", queue.contents());
      ck.set_note("queue.capacity", std::to_string(queue.capacity()));
    }
    if (!opt.velocity.empty()) {
      for (std::size_t i = 0; i < trainable.items.size(); ++i) {
        const auto& [name, p] = trainable.items[i];
        ck.add(cat("opt.", name),
               Tensor<T>::from_data(p.shape(), std::vector<T>(opt.velocity[i])));
      }
    }
    return ck;
  }

  // Restore everything written by to_checkpoint; opt may be null when the
  // optimizer state is not needed (evaluation-only loads).
  void load(const Checkpoint& ck, SgdState<T>* opt) {
    restore_group(ck, "online.", online_params);
    restore_group(ck, "online.", online_buffers);
    restore_group(ck, "target.", target_params);
    restore_group(ck, "target.", target_buffers);
    if (cfg.variant == Variant::LewelB) {
      restore_group(ck, "pred.", pred_params);
      restore_group(ck, "pred.", pred_buffers);
    } else {
      const std::string* cap = ck.note("queue.capacity");
      if (cap == nullptr) throw DataError("checkpoint: missing queue.capacity note");
      const Tensor<T> rows = ck.tensor<T>("queue");
      queue.restore(std::stoull(*cap), rows.size(1),
                    std::vector<T>(rows.data().begin(), rows.data().end()));
    }
    if (opt != nullptr) {
      opt->ensure(trainable);
      for (std::size_t i = 0; i < trainable.items.size(); ++i) {
        const auto& [name, p] = trainable.items[i];
        const Tensor<T> v = ck.tensor<T>(cat("opt.", name));
        if (v.shape() != p.shape())
          throw DataError(cat("checkpoint: optimizer state for ", name, " has wrong shape"));
        opt->velocity[i].assign(v.data().begin(), v.data().end());
      }
    }
  }
};

// Rebuild just the online branch of a checkpointed run (probing, map export).
template <typename T>
BranchNet<T> restore_online_branch(const TrainConfig& cfg, const Checkpoint& ck) {
  Rng rng = derive_rng(cfg.seed, "init");
  BranchNet<T> net(cfg.head, rng);
  NamedTensors<T> params, buffers;
  net.collect("net", params, buffers);
  restore_group(ck, "online.", params);
  restore_group(ck, "online.", buffers);
  return net;
}

inline TrainConfig config_from(const Checkpoint& ck) {
  return resolve_train_config(parse_config_text(ck.config_text, "<checkpoint>"));
}

// ---------------------------------------------------------------------------
// Data plumbing shared by training and evaluation.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Sample> load_split(const TrainConfig& cfg, const std::string& split) {
  if (cfg.data_path.empty()) return generate(cfg.data, split);
  const auto manifest = read_manifest((std::filesystem::path(cfg.data_path) / split).string());
  std::vector<Sample> out;
  out.reserve(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) out.push_back(load_sample(manifest, i));
  return out;
}

// Stack per-sample (3,S,S) float views into one (N,3,S,S) batch.
template <typename T>
Tensor<T> stack_views(const std::vector<Tensor<float>>& views) {
  const std::size_t n = views.size();
  const std::size_t per = views.front().numel();
  std::vector<T> data(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = views[i].data();
    for (std::size_t j = 0; j < per; ++j) data[i * per + j] = static_cast<T>(src[j]);
  }
  const auto& s = views.front().shape();
  return Tensor<T>::from_data({n, s[0], s[1], s[2]}, std::move(data));
}

inline void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pretraining loop.
// ---------------------------------------------------------------------------

struct EpochRow {
  std::size_t epoch = 0;
  double total = 0.0, global_term = 0.0, aligned_term = 0.0;
  double entropy = 0.0;
  double alpha = 0.0, lr = 0.0;  // as of the first step of the epoch
};

struct StepRow {
  std::size_t step = 0;
  double total = 0.0, global_term = 0.0, aligned_term = 0.0;
};

struct PretrainResult {
  std::string checkpoint_path;
  std::string log_path;
  std::vector<EpochRow> epochs;
  std::vector<StepRow> steps;
  Checkpoint checkpoint;  // the final artifact, already loaded
};

// Train from scratch or resume from an epoch-boundary checkpoint. The run is
// deterministic given the config in single-thread mode: every random stream
// (shuffling, per-sample augmentation, random maps) is derived from the seed
// plus stable indices, never from call order. `stop_after_epochs` truncates
// the run while keeping the full-length schedules (for resume tests); 0 runs
// to cfg.epochs.
inline PretrainResult pretrain(const TrainConfig& cfg, const std::string& out_dir,
                               const std::string& resume_from = "",
                               std::size_t stop_after_epochs = 0) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(cat("cannot create output directory ", out_dir, ": ", ec.message()));

  const std::vector<Sample> train = detail::load_split(cfg, "train");
  const std::size_t steps_per_epoch = train.size() / cfg.batch_size;
  if (steps_per_epoch == 0)
    throw ConfigError(cat("pretrain: batch size ", cfg.batch_size, " exceeds the ", train.size(),
                          "-sample training split"));
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const std::size_t image_size = cfg.data.canvas;

  LewelModel<float> model(cfg);
  SgdState<float> opt;
  opt.ensure(model.trainable);
  MomentumSchedule sched;
  sched.kind = cfg.variant == Variant::LewelB ? ScheduleKind::CosineToOne : ScheduleKind::Fixed;
  sched.base = cfg.momentum_base;
  sched.total_steps = total_steps;
  sched.validate();

  std::size_t start_epoch = 0;
  if (!resume_from.empty()) {
    const Checkpoint ck = load_checkpoint(resume_from);
    if (ck.config_text != canonical_config_text(cfg))
      throw ConfigError(cat("resume: checkpoint config does not match the requested run: ",
                            resume_from));
    if (ck.step % steps_per_epoch != 0)
      throw ConfigError(cat("resume: step ", ck.step, " is not an epoch boundary"));
    model.load(ck, &opt);
    start_epoch = static_cast<std::size_t>(ck.step / steps_per_epoch);
    if (start_epoch > cfg.epochs)
      throw ConfigError(cat("resume: checkpoint is past the configured ", cfg.epochs, " epochs"));
  }

  const std::size_t end_epoch =
      stop_after_epochs == 0 ? cfg.epochs : std::min(cfg.epochs, stop_after_epochs);
  if (start_epoch > end_epoch)
    throw ConfigError("pretrain: resume point is past the requested stop epoch");

  {
    std::ofstream snap(fs::path(out_dir) / "resolved_config.toml");
    if (!snap) throw IoError(cat("cannot write config snapshot in ", out_dir));
    snap << canonical_config_text(cfg);
  }

  PretrainResult result;
  result.log_path = (fs::path(out_dir) / "train_log.csv").string();
  std::ofstream log(result.log_path);
  if (!log) throw IoError(cat("cannot write ", result.log_path));
  log << "epoch,total_loss,global_loss,aligned_loss,map_entropy,momentum,lr\n";

  const bool byol_style = cfg.variant == Variant::LewelB;
  std::vector<std::size_t> order(train.size());

  const std::string diverged_path = (fs::path(out_dir) / "checkpoint_diverged.lwlc").string();
  for (std::size_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    // Each epoch permutes the identity ordering from its own derived stream,
    // so the schedule is a pure function of (seed, epoch) and survives resume.
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = derive_rng(cfg.seed, "shuffle", epoch);
    detail::shuffle_indices(order, shuffle_rng);

    EpochRow row;
    row.epoch = epoch;
    row.alpha = momentum_at(epoch * steps_per_epoch, sched);
    row.lr = cosine_lr(epoch * steps_per_epoch, total_steps, cfg.lr0);

    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t step = epoch * steps_per_epoch + b;
      std::vector<Tensor<float>> views1, views2;
      views1.reserve(cfg.batch_size);
      views2.reserve(cfg.batch_size);
      for (std::size_t s = 0; s < cfg.batch_size; ++s) {
        const std::size_t idx = order[b * cfg.batch_size + s];
        const auto& img = train[idx].image;
        Rng aug_rng = derive_rng(cfg.seed, "aug", epoch, idx);
        const auto r1 = sample_recipe(aug_rng, view_policy(byol_style, 0), img.size(1), img.size(2));
        const auto r2 = sample_recipe(aug_rng, view_policy(byol_style, 1), img.size(1), img.size(2));
        views1.push_back(apply_recipe(img, r1, image_size));
        views2.push_back(apply_recipe(img, r2, image_size));
      }
      const auto v1 = detail::stack_views<float>(views1);
      const auto v2 = detail::stack_views<float>(views2);

      try {
        Rng map_rng = derive_rng(cfg.seed, "maps", epoch, b);
        auto losses = model.step_losses(v1, v2, &map_rng);
        const double total_value = static_cast<double>(losses.total.item());
        if (!std::isfinite(total_value))
          throw NumericError(cat("loss is not finite at step ", step));

        const double lr = cosine_lr(step, total_steps, cfg.lr0);
        const double alpha = momentum_at(step, sched);
        auto grads = backward(losses.total);
        sgd_step(model.trainable, grads, opt, lr, 0.9, cfg.weight_decay, cfg.wd_exempt_bias_bn);
        ema_update(model.online_params, model.target_params, static_cast<float>(alpha));
        ema_update(model.online_buffers, model.target_buffers, static_cast<float>(alpha));
        if (cfg.variant == Variant::LewelM) model.queue.push(losses.queue_rows);

        const double g = static_cast<double>(losses.global_term.item());
        const double a = static_cast<double>(losses.aligned_term.item());
        result.steps.push_back({step, total_value, g, a});
        row.total += total_value;
        row.global_term += g;
        row.aligned_term += a;
        row.entropy += losses.entropy;
      } catch (const NumericError& e) {
        // Parameters are still the last good state: the forward/validation
        // threw before any update was applied this step.
        save_checkpoint(diverged_path, model.to_checkpoint(opt, step));
        throw NumericError(cat("pretrain: diverged at step ", step, " (", e.what(),
                               "); last good state saved to ", diverged_path));
      }
    }

    row.total /= static_cast<double>(steps_per_epoch);
    row.global_term /= static_cast<double>(steps_per_epoch);
    row.aligned_term /= static_cast<double>(steps_per_epoch);
    row.entropy /= static_cast<double>(steps_per_epoch);
    result.epochs.push_back(row);
    using detail::fmt_double;
    log << row.epoch << ',' << fmt_double(row.total) << ',' << fmt_double(row.global_term) << ','
        << fmt_double(row.aligned_term) << ',' << fmt_double(row.entropy) << ','
        << fmt_double(row.alpha) << ',' << fmt_double(row.lr) << '\n';
    log.flush();
    if (!log) throw IoError(cat("short write on ", result.log_path));

    const std::size_t done = epoch + 1;
    if (cfg.save_every > 0 && done % cfg.save_every == 0 && done < end_epoch) {
      const auto path = (fs::path(out_dir) / cat("checkpoint_epoch", done, ".lwlc")).string();
      save_checkpoint(path, model.to_checkpoint(opt, done * steps_per_epoch));
    }
  }

  result.checkpoint = model.to_checkpoint(opt, end_epoch * steps_per_epoch);
  result.checkpoint_path = (fs::path(out_dir) / "checkpoint_final.lwlc").string();
  save_checkpoint(result.checkpoint_path, result.checkpoint);
  return result;
}

// ---------------------------------------------------------------------------
// Linear probe.
// ---------------------------------------------------------------------------

struct ProbeResult {
  double top1 = 0.0;               // held-out accuracy in [0, 1]
  double train_accuracy = 0.0;
  std::vector<double> per_class;   // held-out accuracy per label
};

namespace detail {

struct FeatureSet {
  std::vector<double> rows;  // (n, dim) row-major
  std::vector<std::size_t> labels;
  std::size_t dim = 0;
  std::size_t size() const { return labels.size(); }
};

// Frozen pooled encoder features, extracted without augmentation.
template <typename T>
FeatureSet extract_features(BranchNet<T>& net, const std::vector<Sample>& samples,
                            std::size_t batch, std::size_t num_classes) {
  FeatureSet out;
  out.dim = net.cfg.encoder_dim;
  out.rows.reserve(samples.size() * out.dim);
  out.labels.reserve(samples.size());
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch) {
    const std::size_t n = std::min(batch, samples.size() - begin);
    std::vector<Tensor<float>> images;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = samples[begin + i];
      if (s.label >= num_classes)
        throw DataError(cat("probe: sample ", s.sample_id, " has label ", s.label,
                            " outside the ", num_classes, "-class config"));
      images.push_back(s.image);
      out.labels.push_back(s.label);
    }
    const auto x = stack_views<T>(images);
    const auto fmap = net.encoder.forward(x, BnMode::EmaStats, /*training=*/false);
    const auto feats = global_average_pool(fmap);
    const auto v = feats.data();
    for (const T f : v) out.rows.push_back(static_cast<double>(f));
  }
  return out;
}

inline Tensor<double> one_hot(const std::vector<std::size_t>& labels, std::size_t begin,
                              std::size_t n, std::size_t classes) {
  std::vector<double> m(n * classes, 0.0);
  for (std::size_t i = 0; i < n; ++i) m[i * classes + labels[begin + i]] = 1.0;
  return Tensor<double>::from_data({n, classes}, std::move(m));
}

}  // namespace detail

struct LinearClassifier {
  Tensor<double> w;  // (classes, dim)
  Tensor<double> b;  // (classes)
  double train_accuracy = 0.0;

  // Row scores for a (n, dim) feature block; plain inference, no graph.
  std::vector<std::size_t> predict(const detail::FeatureSet& f) const {
    NoGradGuard guard;
    std::vector<std::size_t> out(f.size());
    const std::size_t classes = w.size(0), dim = w.size(1);
    const auto wv = w.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < f.size(); ++i) {
      double best = -1e300;
      std::size_t arg = 0;
      for (std::size_t k = 0; k < classes; ++k) {
        double s = bv[k];
        for (std::size_t j = 0; j < dim; ++j) s += wv[k * dim + j] * f.rows[i * dim + j];
        if (s > best) {
          best = s;
          arg = k;
        }
      }
      out[i] = arg;
    }
    return out;
  }
};

// Multinomial logistic regression on fixed features: SGD with momentum 0.9
// and per-step cosine decay, weights initialized at zero (convex problem).
// Runs in double regardless of the backbone's type.
inline LinearClassifier train_linear_classifier(const detail::FeatureSet& train,
                                                std::size_t classes, std::size_t epochs,
                                                double lr0, std::size_t batch,
                                                std::uint64_t seed) {
  if (train.size() < batch) batch = train.size();
  if (batch == 0) throw DataError("probe: empty training feature set");
  LinearClassifier clf;
  clf.w = Tensor<double>::param({classes, train.dim}, std::vector<double>(classes * train.dim, 0.0));
  clf.b = Tensor<double>::param({classes}, std::vector<double>(classes, 0.0), /*wd_exempt=*/true);
  NamedTensors<double> params;
  params.add("w", clf.w);
  params.add("b", clf.b);
  SgdState<double> opt;

  const std::size_t steps_per_epoch = train.size() / batch;
  const std::size_t total_steps = epochs * steps_per_epoch;
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = derive_rng(seed, "probe-shuffle", epoch);
    detail::shuffle_indices(order, rng);
    for (std::size_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
      std::vector<double> x(batch * train.dim);
      std::vector<std::size_t> labels(batch);
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t idx = order[bstep * batch + i];
        std::copy_n(train.rows.begin() + static_cast<std::ptrdiff_t>(idx * train.dim), train.dim,
                    x.begin() + static_cast<std::ptrdiff_t>(i * train.dim));
        labels[i] = train.labels[idx];
      }
      auto xb = Tensor<double>::from_data({batch, train.dim}, std::move(x));
      auto logits = add(matmul_nt(xb, clf.w), clf.b);
      auto probs = softmax_axes(logits, {1});
      auto picked = sum_axes(mul(probs, detail::one_hot(labels, 0, batch, classes)), {1});
      auto loss = neg(mean_all(log(picked)));

      const double lr = cosine_lr(epoch * steps_per_epoch + bstep, total_steps, lr0);
      auto grads = backward(loss);
      sgd_step(params, grads, opt, lr, 0.9, /*weight_decay=*/0.0);
    }
  }

  const auto predictions = clf.predict(train);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < train.size(); ++i) hits += predictions[i] == train.labels[i];
  clf.train_accuracy = static_cast<double>(hits) / static_cast<double>(train.size());
  return clf;
}

// Probe a frozen backbone: features are GAP of the encoder output, the
// classifier is trained on the labeled train split, accuracy reported on the
// held-out split. The backbone is never touched by the classifier's graph.
template <typename T>
ProbeResult linear_probe(const TrainConfig& cfg, BranchNet<T>& net,
                         const std::vector<Sample>& train_split,
                         const std::vector<Sample>& test_split) {
  const std::size_t classes = cfg.data.num_classes;
  const auto train_f = detail::extract_features(net, train_split, cfg.probe_batch_size, classes);
  const auto test_f = detail::extract_features(net, test_split, cfg.probe_batch_size, classes);
  const auto clf = train_linear_classifier(train_f, classes, cfg.probe_epochs, cfg.probe_lr0,
                                           cfg.probe_batch_size, cfg.seed);

  ProbeResult result;
  result.train_accuracy = clf.train_accuracy;
  result.per_class.assign(classes, 0.0);
  std::vector<std::size_t> totals(classes, 0);
  const auto predictions = clf.predict(test_f);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_f.size(); ++i) {
    ++totals[test_f.labels[i]];
    if (predictions[i] == test_f.labels[i]) {
      ++hits;
      result.per_class[test_f.labels[i]] += 1.0;
    }
  }
  result.top1 = test_f.size() == 0 ? 0.0 : static_cast<double>(hits) / test_f.size();
  for (std::size_t k = 0; k < classes; ++k)
    result.per_class[k] = totals[k] == 0 ? 0.0 : result.per_class[k] / totals[k];
  return result;
}

template <typename T = float>
ProbeResult linear_probe(const TrainConfig& cfg, const Checkpoint& ck,
                         const std::vector<Sample>& train_split,
                         const std::vector<Sample>& test_split) {
  auto net = restore_online_branch<T>(cfg, ck);
  return linear_probe(cfg, net, train_split, test_split);
}

// ---------------------------------------------------------------------------
// Alignment quality against masks.
// ---------------------------------------------------------------------------

struct AlignmentQuality {
  double mean_ratio = 0.0;            // foreground mass / mask area fraction
  double mean_entropy = 0.0;
  std::vector<double> per_map_ratio;  // mean ratio per map index
  std::size_t used = 0;
  std::size_t skipped = 0;            // masks empty after downsampling
};

namespace detail {

// Downsample a pixel mask to the feature grid: a cell is foreground when at
// least half of its pixels are.
inline std::vector<bool> downsample_mask(const Tensor<float>& mask, std::size_t grid_h,
                                         std::size_t grid_w) {
  const std::size_t H = mask.size(0), W = mask.size(1);
  if (grid_h == 0 || grid_w == 0 || H % grid_h != 0 || W % grid_w != 0)
    throw ShapeError(cat("mask ", shape_str(mask.shape()), " does not tile a ", grid_h, "x",
                         grid_w, " grid"));
  const std::size_t cell_h = H / grid_h, cell_w = W / grid_w;
  const auto v = mask.data();
  std::vector<bool> out(grid_h * grid_w, false);
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      std::size_t on = 0;
      for (std::size_t y = gy * cell_h; y < (gy + 1) * cell_h; ++y)
        for (std::size_t x = gx * cell_w; x < (gx + 1) * cell_w; ++x)
          on += v[y * W + x] >= 0.5f;
      out[gy * grid_w + gx] = 2 * on >= cell_h * cell_w;
    }
  return out;
}

// Map mass inside the foreground cells, normalized by the foreground's share
// of the grid. Uniform maps score exactly 1; a map entirely inside a mask of
// area fraction a scores 1/a.
template <typename T>
double foreground_mass_ratio(const T* plane, const std::vector<bool>& cells) {
  const std::size_t on = static_cast<std::size_t>(std::count(cells.begin(), cells.end(), true));
  if (on == 0) throw NumericError("foreground_mass_ratio: mask is empty");
  double mass = 0.0;
  for (std::size_t s = 0; s < cells.size(); ++s)
    if (cells[s]) mass += static_cast<double>(plane[s]);
  return mass * static_cast<double>(cells.size()) / static_cast<double>(on);
}

}  // namespace detail

template <typename T>
AlignmentQuality alignment_quality(const TrainConfig& cfg, BranchNet<T>& net,
                                   const std::vector<Sample>& samples) {
  AlignmentQuality q;
  const std::size_t d = cfg.head.embed_dim;
  q.per_map_ratio.assign(d, 0.0);
  NoGradGuard guard;
  Rng map_rng = derive_rng(cfg.seed, "quality-maps");

  const std::size_t batch = cfg.probe_batch_size;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch) {
    const std::size_t n = std::min(batch, samples.size() - begin);
    std::vector<Tensor<float>> images;
    images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) images.push_back(samples[begin + i].image);
    const auto x = detail::stack_views<T>(images);
    const auto out = net.forward(x, BnMode::EmaStats, /*training=*/false, /*with_aligned=*/true,
                                 &map_rng);
    const std::size_t gh = out.maps.size(2), gw = out.maps.size(3);
    const std::size_t hw = gh * gw;
    const auto maps = out.maps.data();

    for (std::size_t i = 0; i < n; ++i) {
      const auto cells = detail::downsample_mask(samples[begin + i].mask, gh, gw);
      if (std::count(cells.begin(), cells.end(), true) == 0) {
        ++q.skipped;
        continue;
      }
      double sample_sum = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double ratio = detail::foreground_mass_ratio(maps.data() + ((i * d) + k) * hw, cells);
        q.per_map_ratio[k] += ratio;
        sample_sum += ratio;
      }
      q.mean_ratio += sample_sum / static_cast<double>(d);
      ++q.used;
    }
    q.mean_entropy += map_entropy(out.maps) * static_cast<double>(n);
  }

  if (q.used > 0) {
    q.mean_ratio /= static_cast<double>(q.used);
    for (auto& r : q.per_map_ratio) r /= static_cast<double>(q.used);
  }
  if (!samples.empty()) q.mean_entropy /= static_cast<double>(samples.size());
  return q;
}

template <typename T = float>
AlignmentQuality alignment_quality(const TrainConfig& cfg, const Checkpoint& ck,
                                   const std::vector<Sample>& samples) {
  auto net = restore_online_branch<T>(cfg, ck);
  return alignment_quality(cfg, net, samples);
}

// ---------------------------------------------------------------------------
// Ablation sweeps.
// ---------------------------------------------------------------------------

struct AblateRow {
  std::string cell;
  std::uint64_t fingerprint = 0;
  bool ok = false;
  std::string error;
  double probe_top1 = 0.0;
  double align_ratio = 0.0;
  double total = 0.0, global_term = 0.0, aligned_term = 0.0;
};

namespace detail {

inline std::string sanitize_cell(const std::string& cell) {
  std::string out = cell;
  for (auto& c : out)
    if (c == '=' || c == '.' || c == '/' || c == ' ') c = '_';
  return out;
}

inline std::vector<std::pair<std::string, TrainConfig>> ablate_grid(const TrainConfig& base,
                                                                    const std::string& axis) {
  std::vector<std::pair<std::string, TrainConfig>> cells;
  const auto add = [&](const std::string& name, auto&& mutate) {
    TrainConfig cfg = base;
    mutate(cfg);
    cells.emplace_back(name, std::move(cfg));
  };
  if (axis == "beta") {
    for (const double beta : {0.0, 0.3, 0.5, 0.7, 0.9, 1.0})
      add(cat("beta=", fmt_double(beta)), [&](TrainConfig& c) { c.beta = beta; });
  } else if (axis == "h") {
    for (const std::size_t h : {std::size_t(1), std::size_t(2), std::size_t(4), std::size_t(8)})
      add(cat("h=", h), [&](TrainConfig& c) { c.head.groups = h; });
  } else if (axis == "c") {
    for (const std::size_t c : {std::size_t(8), std::size_t(16), std::size_t(32), std::size_t(64)})
      add(cat("c=", c), [&](TrainConfig& cfg) { cfg.head.aligned_dim = c; });
  } else if (axis == "map_source") {
    add("map_source=learned", [](TrainConfig& c) { c.head.map_source = MapSource::Learned; });
    add("map_source=random", [](TrainConfig& c) { c.head.map_source = MapSource::Random; });
  } else {
    throw ConfigError(cat("ablate: unknown axis \"", axis, "\" (beta, h, c, map_source)"));
  }
  return cells;
}

}  // namespace detail

// Run one sweep axis: each cell pretrains under the base config with a single
// field changed, then reports probe accuracy and alignment ratio. A failing
// cell is recorded and the sweep continues. Rows land in ablate_<axis>.csv.
inline std::vector<AblateRow> ablate(const TrainConfig& base, const std::string& axis,
                                     const std::string& out_dir) {
  namespace fs = std::filesystem;
  const auto cells = detail::ablate_grid(base, axis);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(cat("cannot create output directory ", out_dir, ": ", ec.message()));

  std::vector<AblateRow> rows;
  for (const auto& [name, cfg] : cells) {
    AblateRow row;
    row.cell = name;
    try {
      cfg.validate();
      row.fingerprint = config_fingerprint(cfg);
      const std::string cell_dir = (fs::path(out_dir) / cat("cell_", detail::sanitize_cell(name))).string();
      const auto run = pretrain(cfg, cell_dir);
      const auto train_split = detail::load_split(cfg, "train");
      const auto test_split = detail::load_split(cfg, "test");
      const auto probe = linear_probe(cfg, run.checkpoint, train_split, test_split);
      const auto quality = alignment_quality(cfg, run.checkpoint, test_split);
      row.probe_top1 = probe.top1;
      row.align_ratio = quality.mean_ratio;
      const auto& last = run.epochs.back();
      row.total = last.total;
      row.global_term = last.global_term;
      row.aligned_term = last.aligned_term;
      row.ok = true;
    } catch (const Error& e) {
      row.ok = false;
      row.error = e.what();
      for (auto& ch : row.error)
        if (ch == ',' || ch == '\n') ch = ';';
    }
    rows.push_back(std::move(row));
  }

  const std::string csv_path = (fs::path(out_dir) / cat("ablate_", axis, ".csv")).string();
  std::ofstream csv(csv_path);
  if (!csv) throw IoError(cat("cannot write ", csv_path));
  csv << "cell,fingerprint,status,probe_top1,align_ratio,total_loss,global_loss,aligned_loss,message\n";
  using detail::fmt_double;
  for (const auto& row : rows) {
    csv << row.cell << ',' << row.fingerprint << ',' << (row.ok ? "ok" : "error") << ','
        << fmt_double(row.probe_top1) << ',' << fmt_double(row.align_ratio) << ','
        << fmt_double(row.total) << ',' << fmt_double(row.global_term) << ','
        << fmt_double(row.aligned_term) << ',' << row.error << '\n';
  }
  if (!csv) throw IoError(cat("short write on ", csv_path));
  return rows;
}

}  // namespace lewel
