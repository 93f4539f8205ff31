#pragma once

// Online approximate bilevel optimization. The classifier weights (omega) take
// differentiable SGD steps on augmented training batches; the augmenter
// weights (theta) are updated every J steps with the validation-loss gradient
// back-propagated through the last K recorded steps.

#include <chrono>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/autograd.hpp"
#include "bilevel/datasets.hpp"
#include "bilevel/networks.hpp"
#include "bilevel/ops.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"
#include "bilevel/vision.hpp"

namespace bilevel {

enum class OuterOptimizerKind { adam, sgd };

struct HypergradConfig {
  std::size_t K = 1;  // unrolled steps kept for the hypergradient
  std::size_t J = 1;  // inner steps between augmenter updates
  double inner_lr = 0.05;
  double outer_lr = 1e-3;
  OuterOptimizerKind outer_optimizer = OuterOptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 10.0;  // global-norm clipping of both updates; 0 disables
  bool freeze_final_layer = false;

  void validate() const {
    if (K < 1 || J < 1) throw Error("K and J must be at least 1");
    // A window may not straddle an augmenter update.
    if (K > J) throw Error("K must not exceed J");
    if (!(inner_lr > 0.0) || !(outer_lr > 0.0)) throw Error("learning rates must be positive");
    if (weight_decay < 0.0 || clip_norm < 0.0) throw Error("weight_decay and clip_norm must be non-negative");
  }
};

/// One recorded inner update omega_out = omega_in - lr * grads.
struct StepRecord {
  std::size_t step = 0;
  std::vector<Tensor> omega_in;
  std::vector<Tensor> grads;
  std::vector<Tensor> omega_out;
  Tensor loss;
  std::vector<Tensor> theta;  // augmenter leaves the step was recorded with
};

/// The last K differentiable inner steps. Evicting a step cuts the lineage of
/// its output weights, which are the next step's inputs, so no gradient
/// reaches theta through evicted steps.
class UnrollWindow {
 public:
  explicit UnrollWindow(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw Error("UnrollWindow capacity must be positive");
  }

  void push(StepRecord r) {
    steps_.push_back(std::move(r));
    while (steps_.size() > capacity_) {
      for (const Tensor& w : steps_.front().omega_out) w.cut_lineage();
      steps_.pop_front();
    }
  }

  bool empty() const { return steps_.empty(); }
  std::size_t size() const { return steps_.size(); }
  std::size_t capacity() const { return capacity_; }
  const StepRecord& newest() const { return steps_.back(); }
  const StepRecord& oldest() const { return steps_.front(); }
  const std::deque<StepRecord>& steps() const { return steps_; }

  std::vector<std::size_t> step_indices() const {
    std::vector<std::size_t> out;
    for (const auto& s : steps_) out.push_back(s.step);
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<StepRecord> steps_;
};

inline double global_norm(const std::vector<Tensor>& ts) {
  double s = 0.0;
  for (const auto& t : ts)
    for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

/// omega - lr * c * grads, where c rescales the global gradient norm to at
/// most clip_norm. The factor c is treated as a constant.
inline std::vector<Tensor> sgd_update(const std::vector<Tensor>& omega, const std::vector<Tensor>& grads, double lr,
                                      double clip_norm) {
  double factor = 1.0;
  if (clip_norm > 0.0) {
    const double n = global_norm(grads);
    if (n > clip_norm) factor = clip_norm / n;
  }
  std::vector<Tensor> out;
  out.reserve(omega.size());
  for (std::size_t i = 0; i < omega.size(); ++i) out.push_back(sub(omega[i], scale(grads[i], lr * factor)));
  return out;
}

/// Differentiable SGD step on `loss`: gradients are recorded (when
/// retain_graph) so the resulting weights stay a function of theta.
inline StepRecord differentiable_sgd_step(const std::vector<Tensor>& omega, const Tensor& loss, double lr,
                                          double clip_norm, bool retain_graph, std::size_t step) {
  if (!std::isfinite(loss.item())) {
    throw NumericError("non-finite training loss at inner step " + std::to_string(step));
  }
  const GradMap g = backward(loss, omega, retain_graph);
  StepRecord r;
  r.step = step;
  r.omega_in = omega;
  for (const auto& w : omega) r.grads.push_back(g[w]);
  r.omega_out = sgd_update(omega, r.grads, lr, clip_norm);
  r.loss = loss;
  return r;
}

using WeightsLoss = std::function<Tensor(const std::vector<Tensor>& omega)>;

/// Validation-loss gradient with respect to theta through the retained
/// window. `val_loss` must evaluate clean (unaugmented) validation data.
inline GradMap hypergrad_truncated(const UnrollWindow& window, const WeightsLoss& val_loss,
                                   const std::vector<Tensor>& theta, Tensor* val_loss_out = nullptr) {
  if (window.empty()) throw Error("hypergrad_truncated: empty unroll window");
  for (const auto& s : window.steps()) {
    if (s.theta.size() != theta.size()) throw Error("hypergrad_truncated: step recorded with a different theta");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!s.theta[i].same_node(theta[i])) {
        throw Error("hypergrad_truncated: step " + std::to_string(s.step) + " was recorded with stale theta");
      }
    }
  }
  const Tensor lv = val_loss(window.newest().omega_out);
  if (val_loss_out) *val_loss_out = lv;
  return backward(lv, theta, false);
}

/// A small bilevel instance: inner loss L_tr(omega, theta, step), outer loss
/// L_val(omega), SGD with a fixed rate from omega0.
struct BilevelProblem {
  std::vector<Tensor> omega0;
  std::vector<Tensor> theta;
  double lr = 0.1;
  std::function<Tensor(const std::vector<Tensor>& omega, const std::vector<Tensor>& theta, std::size_t step)> inner_loss;
  WeightsLoss val_loss;
};

/// Exact derivative of L_val(omega(T)) with theta fixed across all T steps,
/// built by one plain unrolled loop. Test oracle.
inline std::vector<Tensor> full_unroll_hypergrad(const BilevelProblem& p, std::size_t steps,
                                                 std::size_t max_nodes = 2'000'000) {
  Tape tape;
  std::vector<Tensor> theta, omega;
  for (const auto& t : p.theta) theta.push_back(tape.parameter(t));
  for (const auto& w : p.omega0) omega.push_back(tape.parameter(w));
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor loss = p.inner_loss(omega, theta, t);
    const GradMap g = backward(loss, omega, true);
    std::vector<Tensor> next;
    for (const auto& w : omega) next.push_back(sub(w, scale(g[w], p.lr)));
    omega = std::move(next);
    if (tape.recorded() > max_nodes) throw Error("full_unroll_hypergrad: memory guard exceeded");
  }
  const GradMap hg = backward(p.val_loss(omega), theta, false);
  std::vector<Tensor> out;
  for (const auto& t : theta) out.push_back(hg[t]);
  return out;
}

/// Runs `steps` inner steps through an UnrollWindow of capacity K and returns
/// the truncated hypergradient at the end.
inline std::vector<Tensor> windowed_hypergrad(const BilevelProblem& p, std::size_t steps, std::size_t K) {
  Tape tape;
  std::vector<Tensor> theta, omega;
  for (const auto& t : p.theta) theta.push_back(tape.parameter(t));
  for (const auto& w : p.omega0) omega.push_back(tape.parameter(w));
  UnrollWindow window(K);
  for (std::size_t t = 0; t < steps; ++t) {
    StepRecord r = differentiable_sgd_step(omega, p.inner_loss(omega, theta, t), p.lr, 0.0, true, t);
    r.theta = theta;
    omega = r.omega_out;
    window.push(std::move(r));
  }
  const GradMap hg = hypergrad_truncated(window, p.val_loss, theta);
  std::vector<Tensor> out;
  for (const auto& t : theta) out.push_back(hg[t]);
  return out;
}

/// L_val after `steps` inner steps from omega0 with the given theta values;
/// no recording. Finite-difference oracle for the hypergradient.
inline double unrolled_val_loss(const BilevelProblem& p, const std::vector<Tensor>& theta, std::size_t steps) {
  Tape tape;
  std::vector<Tensor> omega;
  for (const auto& w : p.omega0) omega.push_back(tape.parameter(w));
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor loss = p.inner_loss(omega, theta, t);
    const GradMap g = backward(loss, omega, false);
    std::vector<Tensor> next;
    for (const auto& w : omega) next.push_back(tape.parameter(detach(sub(w, scale(g[w], p.lr)))));
    omega = std::move(next);
  }
  NoGradGuard ng;
  return p.val_loss(omega).item();
}

/// Adam (default) or SGD on theta with L2 weight decay and global-norm
/// clipping. Updates produce fresh leaves.
class OuterOptimizer {
 public:
  explicit OuterOptimizer(const HypergradConfig& cfg) : cfg_(cfg) {}

  std::vector<Tensor> step(const std::vector<Tensor>& theta, const std::vector<Tensor>& grads, const Tape& tape,
                           const std::vector<bool>& frozen = {}) {
    if (grads.size() != theta.size()) throw Error("outer_step: gradient count does not match theta");
    if (m_.empty()) {
      for (const auto& t : theta) {
        m_.emplace_back(t.size(), 0.0);
        v_.emplace_back(t.size(), 0.0);
      }
    }
    ++t_;
    std::vector<std::vector<double>> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      g[i] = grads[i].values();
      if (cfg_.weight_decay > 0.0) {
        for (std::size_t k = 0; k < g[i].size(); ++k) g[i][k] += cfg_.weight_decay * theta[i][k];
      }
    }
    if (cfg_.clip_norm > 0.0) {
      double s = 0.0;
      for (const auto& gi : g)
        for (double v : gi) s += v * v;
      const double n = std::sqrt(s);
      if (n > cfg_.clip_norm) {
        for (auto& gi : g)
          for (double& v : gi) v *= cfg_.clip_norm / n;
      }
    }
    std::vector<Tensor> out;
    out.reserve(theta.size());
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      std::vector<double> w = theta[i].values();
      if (frozen.empty() || !frozen[i]) {
        for (std::size_t k = 0; k < w.size(); ++k) {
          if (cfg_.outer_optimizer == OuterOptimizerKind::sgd) {
            w[k] -= cfg_.outer_lr * g[i][k];
            continue;
          }
          m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g[i][k];
          v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g[i][k] * g[i][k];
          w[k] -= cfg_.outer_lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + cfg_.eps);
        }
      }
      out.push_back(tape.parameter(theta[i].shape(), std::move(w)));
    }
    return out;
  }

  std::size_t steps_taken() const { return t_; }

 private:
  HypergradConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

enum class Mode { none, predefined, transform_invariant, validated_magnitude, learned };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::none: return "none";
    case Mode::predefined: return "predefined";
    case Mode::transform_invariant: return "transform_invariant";
    case Mode::validated_magnitude: return "validated_magnitude";
    case Mode::learned: return "learned";
  }
  return "?";
}

/// Fixed random augmentation ranges for the predefined strategy.
struct PredefinedRanges {
  double translate_px = 3.0;  // uniform in [-px, px] on both axes
  double hue = 0.0;           // uniform in [-hue, hue], 3-channel tasks only
};

struct TrainOptions {
  Mode mode = Mode::none;
  ClassifierSpec classifier;
  AugmenterSpec augmenter;
  HypergradConfig hyper;
  PredefinedRanges predefined;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;
  std::optional<FlipAxis> flip;
};

/// One row per inner step. val_loss is present on steps followed by an
/// augmenter update slot, test_accuracy on the last step of each epoch.
struct MetricsRecord {
  std::size_t epoch = 0;
  std::size_t iteration = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::optional<double> test_accuracy;
  double mean_abs_affine_delta = 0.0;
  double mean_abs_color = 0.0;
  double wall_time_ms = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct TrainResult {
  ParamSet classifier;
  ParamSet augmenter;
  double test_accuracy = 0.0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  std::vector<double> epoch_test_accuracy;
  std::vector<MetricsRecord> metrics;
  std::size_t inner_steps = 0;
  std::size_t outer_steps = 0;
  std::size_t augmenter_eval_calls = 0;
  double wall_time_ms = 0.0;
};

namespace detail {

inline double mean_abs_affine_delta(const Tensor& affine) {
  if (!affine.defined() || affine.size() == 0) return 0.0;
  static constexpr std::array<double, 6> ident{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
  double s = 0.0;
  for (std::size_t i = 0; i < affine.size(); ++i) s += std::abs(affine[i] - ident[i % 6]);
  return s / static_cast<double>(affine.size());
}

inline double mean_abs(const Tensor& t) {
  if (!t.defined() || t.size() == 0) return 0.0;
  double s = 0.0;
  for (double v : t.values()) s += std::abs(v);
  return s / static_cast<double>(t.size());
}

inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& rows, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < rows.size(); i += size) {
    out.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(i),
                     rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), i + size)));
  }
  return out;
}

inline std::vector<bool> final_layer_mask(const ParamSet& ps) {
  std::vector<bool> m(ps.size(), false);
  if (ps.size() >= 2) m[ps.size() - 1] = m[ps.size() - 2] = true;
  return m;
}

}  // namespace detail

/// Trains a classifier under one augmentation strategy. Each epoch reshuffles
/// the training data into a train/validation split; classifier steps use the
/// train part and every J-th step is paired, round-robin, with a disjoint
/// validation minibatch.
inline TrainResult train(const TrainOptions& opt, const Dataset& train_set, const Dataset& test_set,
                         const MetricsSink& sink = {}) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  opt.classifier.validate();
  opt.hyper.validate();
  const bool uses_augmenter = opt.mode == Mode::learned || opt.mode == Mode::transform_invariant;
  if (uses_augmenter) opt.augmenter.validate();
  if (opt.batch_size == 0) throw Error("batch_size must be positive");

  const std::size_t n = train_set.size();
  const auto n_val = static_cast<std::size_t>(std::llround(opt.val_fraction * static_cast<double>(n)));
  if (n < 2 || n_val == 0 || n_val >= n) throw Error("dataset too small to split into train and validation");

  Tape tape;
  Rng cls_init(opt.seed, streams::classifier_init), aug_init(opt.seed, streams::augmenter_init);
  Rng data_rng(opt.seed, streams::data_split), aug_rng(opt.seed, streams::augment);
  Rng flip_rng(opt.seed, streams::flip), eval_rng(opt.seed, streams::eval);

  ParamSet omega = init_weights(opt.classifier, cls_init, tape);
  ParamSet theta;
  if (uses_augmenter) theta = init_weights(opt.augmenter, aug_init, tape);
  const std::vector<bool> frozen = opt.hyper.freeze_final_layer ? detail::final_layer_mask(theta) : std::vector<bool>{};
  OuterOptimizer outer(opt.hyper);
  UnrollWindow window(opt.mode == Mode::learned ? opt.hyper.K : 1);

  TrainResult res;
  const std::size_t size = opt.classifier.height;
  const double lr = opt.hyper.inner_lr;
  const double clip = opt.hyper.clip_norm;

  auto ce = [&](const Tensor& img, const std::vector<std::size_t>& y, const std::vector<Tensor>& w) {
    ParamSet ps{omega.names, w};
    return softmax_cross_entropy(classifier_forward(opt.classifier, img, ps), y);
  };

  auto augment_eval = [&](const Tensor& img) {
    NoGradGuard ng;
    ++res.augmenter_eval_calls;
    const Tensor noise = sample_noise(img.dim(0), opt.augmenter.noise_dim(), eval_rng);
    const AugmentParams ap = augmenter_forward(opt.augmenter, noise, theta, false, eval_rng);
    return apply_augment(img, ap.affine, ap.color, opt.augmenter.transforms.flags());
  };

  auto predict = [&](const Tensor& img) {
    NoGradGuard ng;
    const Tensor x = opt.mode == Mode::transform_invariant ? augment_eval(img) : img;
    return classifier_forward(opt.classifier, x, omega);
  };

  std::vector<std::size_t> all_test(test_set.size());
  std::iota(all_test.begin(), all_test.end(), std::size_t{0});
  const auto [test_x, test_y] = test_set.batch(all_test);

  std::vector<std::size_t> last_val_rows;
  std::size_t since_outer = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    data_rng.shuffle(perm);
    const std::vector<std::size_t> val_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::size_t> tr_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    const auto tr_batches = detail::chunk(tr_rows, opt.batch_size);
    const auto val_batches = detail::chunk(val_rows, opt.batch_size);
    last_val_rows = val_rows;
    std::size_t val_cursor = 0;

    for (std::size_t b = 0; b < tr_batches.size(); ++b) {
      auto [xb, yb] = train_set.batch(tr_batches[b]);
      if (opt.flip) xb = random_flip(xb, *opt.flip, flip_rng);
      MetricsRecord rec;
      rec.epoch = epoch;
      rec.iteration = res.inner_steps;

      Tensor x_aug = xb;
      AugmentParams ap;
      std::vector<Tensor> theta_grads;
      switch (opt.mode) {
        case Mode::learned:
        case Mode::transform_invariant: {
          const Tensor noise = sample_noise(xb.dim(0), opt.augmenter.noise_dim(), aug_rng);
          ap = augmenter_forward(opt.augmenter, noise, theta, true, aug_rng);
          x_aug = apply_augment(xb, ap.affine, ap.color, opt.augmenter.transforms.flags());
          break;
        }
        case Mode::predefined:
        case Mode::validated_magnitude: {
          const std::size_t bn = xb.dim(0);
          const double t = 2.0 * opt.predefined.translate_px / static_cast<double>(size - 1);
          std::vector<double> m(bn * 6);
          for (std::size_t i = 0; i < bn; ++i) {
            const double tx = aug_rng.uniform(-1.0, 1.0) * t, ty = aug_rng.uniform(-1.0, 1.0) * t;
            const std::array<double, 6> row{1.0, 0.0, tx, 0.0, 1.0, ty};
            std::copy(row.begin(), row.end(), m.begin() + static_cast<std::ptrdiff_t>(i * 6));
          }
          Tensor color;
          const bool use_color = opt.predefined.hue > 0.0 && xb.dim(1) == 3;
          if (use_color) {
            std::vector<double> c(bn * 4, 0.0);
            for (std::size_t i = 0; i < bn; ++i) c[i * 4] = aug_rng.uniform(-opt.predefined.hue, opt.predefined.hue);
            color = Tensor::constant({bn, 4}, std::move(c));
          }
          NoGradGuard ng;
          x_aug = apply_augment(xb, Tensor::constant({bn, 6}, std::move(m)), color, {true, use_color});
          break;
        }
        case Mode::none:
          break;
      }

      const Tensor loss = ce(x_aug, yb, omega.tensors);
      StepRecord step;
      if (opt.mode == Mode::transform_invariant) {
        if (!std::isfinite(loss.item())) {
          throw NumericError("non-finite training loss at inner step " + std::to_string(res.inner_steps));
        }
        std::vector<Tensor> wrt = omega.tensors;
        wrt.insert(wrt.end(), theta.tensors.begin(), theta.tensors.end());
        const GradMap g = backward(loss, wrt, false);
        step.step = res.inner_steps;
        step.omega_in = omega.tensors;
        for (const auto& w : omega.tensors) step.grads.push_back(g[w]);
        for (const auto& t : theta.tensors) theta_grads.push_back(g[t]);
        step.omega_out = sgd_update(omega.tensors, step.grads, lr, clip);
        step.loss = loss;
      } else {
        step = differentiable_sgd_step(omega.tensors, loss, lr, clip, opt.mode == Mode::learned, res.inner_steps);
      }
      step.theta = theta.tensors;
      omega.tensors = step.omega_out;
      window.push(std::move(step));
      ++res.inner_steps;
      ++since_outer;

      if (opt.mode == Mode::transform_invariant) {
        theta.tensors = outer.step(theta.tensors, theta_grads, tape, frozen);
        ++res.outer_steps;
      }

      if (since_outer == opt.hyper.J) {
        since_outer = 0;
        const auto& vrows = val_batches[val_cursor++ % val_batches.size()];
        const auto [xv, yv] = train_set.batch(vrows);
        auto val_loss = [&](const std::vector<Tensor>& w) { return ce(xv, yv, w); };
        if (opt.mode == Mode::learned) {
          Tensor lv;
          const GradMap hg = hypergrad_truncated(window, val_loss, theta.tensors, &lv);
          std::vector<Tensor> grads;
          for (const auto& t : theta.tensors) grads.push_back(hg[t]);
          theta.tensors = outer.step(theta.tensors, grads, tape, frozen);
          ++res.outer_steps;
          rec.val_loss = lv.item();
        } else {
          NoGradGuard ng;
          rec.val_loss = val_loss(omega.tensors).item();
        }
      }

      rec.train_loss = loss.item();
      rec.mean_abs_affine_delta = detail::mean_abs_affine_delta(ap.affine);
      rec.mean_abs_color = detail::mean_abs(ap.color);
      if (b + 1 == tr_batches.size()) {
        const double acc = accuracy(predict(test_x), test_y);
        rec.test_accuracy = acc;
        res.epoch_test_accuracy.push_back(acc);
      }
      rec.wall_time_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
      res.metrics.push_back(rec);
      if (sink) sink(rec);
    }
  }

  {
    const auto [xv, yv] = train_set.batch(last_val_rows);
    const Tensor logits = predict(xv);
    res.val_accuracy = accuracy(logits, yv);
    NoGradGuard ng;
    res.val_loss = softmax_cross_entropy(logits, yv).item();
  }
  res.test_accuracy = res.epoch_test_accuracy.empty() ? accuracy(predict(test_x), test_y)
                                                      : res.epoch_test_accuracy.back();
  res.classifier = omega;
  res.augmenter = theta;
  res.wall_time_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  return res;
}

}  // namespace bilevel
