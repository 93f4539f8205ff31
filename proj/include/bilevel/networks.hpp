#pragma once

// Augmenter MLPs (noise -> transformation parameters) and the desk-scale
// classifiers, with parameters stored as named tensors.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "bilevel/ops.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"
#include "bilevel/vision.hpp"

namespace bilevel {

/// Ordered named parameter tensors.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t size() const { return tensors.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  const Tensor& get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return tensors[i];
    }
    throw Error("unknown parameter " + name);
  }

  void add(std::string name, Tensor t) {
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
  }
};

enum class AugmenterSize { small, medium, large };

inline const char* to_string(AugmenterSize s) {
  switch (s) {
    case AugmenterSize::small: return "small";
    case AugmenterSize::medium: return "medium";
    case AugmenterSize::large: return "large";
  }
  return "?";
}

/// Which transformation parameters the augmenter emits.
struct TransformSet {
  bool affine = true;
  bool translation_only = false;  // emit (tx, ty) instead of the full 2x3 matrix
  bool color = false;
  std::array<bool, 4> color_ops{true, true, true, true};  // hue, saturation, contrast, brightness

  std::size_t affine_params() const { return affine ? (translation_only ? 2 : 6) : 0; }
  std::size_t color_params() const { return color ? 4 : 0; }
  std::size_t count() const { return affine_params() + color_params(); }
  TransformFlags flags() const { return {affine, color}; }
};

/// Reachable perturbation box around the identity matrix.
struct ParamBounds {
  double affine_linear = 0.25;
  double affine_translation = 0.30;
};

struct AugmenterSpec {
  AugmenterSize size = AugmenterSize::small;
  TransformSet transforms;
  double dropout_rate = 0.2;
  ParamBounds bounds;

  std::size_t n_params() const { return transforms.count(); }

  void validate() const {
    const std::size_t n = n_params();
    if (n != 2 && n != 4 && n != 6 && n != 10) {
      throw Error("augmenter must emit 2, 4, 6 or 10 parameters, got " + std::to_string(n));
    }
    if (!(bounds.affine_linear > 0.0) || !(bounds.affine_translation > 0.0)) {
      throw Error("augmenter bounds must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw Error("augmenter dropout must be in [0,1)");
  }

  /// Layer widths from input to output.
  std::vector<std::size_t> layer_widths() const {
    const std::size_t n = n_params();
    switch (size) {
      case AugmenterSize::small: return {n, n, 10 * n, n};
      case AugmenterSize::medium: return {100, 64, 32, n};
      case AugmenterSize::large: return {100, 512, 1024, 1024, 512, n};
    }
    return {};
  }

  std::size_t noise_dim() const { return layer_widths().front(); }

  /// Closed-form count of weights and biases.
  std::size_t parameter_count() const {
    const auto w = layer_widths();
    std::size_t total = 0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) total += w[i] * w[i + 1] + w[i + 1];
    return total;
  }
};

enum class ClassifierKind { mlp, small_cnn };

struct ClassifierSpec {
  ClassifierKind kind = ClassifierKind::mlp;
  std::vector<std::size_t> widths{64};  // hidden widths (mlp) or conv channels (small_cnn, two entries)
  std::size_t num_classes = 4;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;

  void validate() const {
    if (num_classes < 2) throw Error("classifier needs at least two classes");
    if (kind == ClassifierKind::small_cnn && widths.size() != 2) {
      throw Error("small_cnn takes exactly two conv widths");
    }
    for (auto w : widths) {
      if (w == 0) throw Error("classifier widths must be positive");
    }
  }
};

inline constexpr double kLeakySlope = 0.2;

namespace detail {

inline Tensor glorot(std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out, Shape shape,
                     Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor::constant(std::move(shape), std::move(v));
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

}  // namespace detail

/// Glorot-uniform hidden weights, zero biases. The augmenter's final layer is
/// all zeros, so a fresh augmenter emits the identity affine transform.
inline ParamSet init_weights(const AugmenterSpec& spec, Rng& rng, const Tape& tape) {
  spec.validate();
  const auto w = spec.layer_widths();
  ParamSet ps;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const bool last = i + 2 == w.size();
    const std::string p = "fc" + std::to_string(i);
    Tensor wt = last ? Tensor::zeros({w[i], w[i + 1]}) : detail::glorot(w[i], w[i + 1], w[i], w[i + 1], {w[i], w[i + 1]}, rng);
    ps.add(p + ".weight", tape.parameter(wt));
    ps.add(p + ".bias", tape.parameter(Tensor::zeros({w[i + 1]})));
  }
  return ps;
}

inline ParamSet init_weights(const ClassifierSpec& spec, Rng& rng, const Tape& tape) {
  spec.validate();
  ParamSet ps;
  if (spec.kind == ClassifierKind::mlp) {
    std::vector<std::size_t> w{spec.channels * spec.height * spec.width};
    w.insert(w.end(), spec.widths.begin(), spec.widths.end());
    w.push_back(spec.num_classes);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      const std::string p = "fc" + std::to_string(i);
      ps.add(p + ".weight", tape.parameter(detail::glorot(w[i], w[i + 1], w[i], w[i + 1], {w[i], w[i + 1]}, rng)));
      ps.add(p + ".bias", tape.parameter(Tensor::zeros({w[i + 1]})));
    }
    return ps;
  }
  std::size_t cin = spec.channels;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t cout = spec.widths[i];
    const std::string p = "conv" + std::to_string(i);
    ps.add(p + ".weight", tape.parameter(detail::glorot(cout, cin * 9, cin * 9, cout * 9, {cout, cin, 3, 3}, rng)));
    ps.add(p + ".bias", tape.parameter(Tensor::zeros({cout, 1, 1})));
    cin = cout;
  }
  ps.add("head.weight", tape.parameter(detail::glorot(cin, spec.num_classes, cin, spec.num_classes,
                                                      {cin, spec.num_classes}, rng)));
  ps.add("head.bias", tape.parameter(Tensor::zeros({spec.num_classes})));
  return ps;
}

/// i.i.d. standard normal noise of shape (batch, dim).
inline Tensor sample_noise(std::size_t batch, std::size_t dim, Rng& rng) {
  if (batch == 0 || dim == 0) throw Error("sample_noise: batch and dim must be positive");
  std::vector<double> v(batch * dim);
  for (auto& x : v) x = rng.normal();
  return Tensor::constant({batch, dim}, std::move(v));
}

/// Transformation parameters for a batch. `affine` is (N,6) rows
/// [a,b,tx,c,d,ty]; `color` is (N,4) rows [hue,saturation,contrast,brightness].
/// Either is undefined when the corresponding transform is disabled.
struct AugmentParams {
  Tensor affine;
  Tensor color;
  Tensor raw;  // tanh outputs u in (-1, 1)^n
};

inline AugmentParams augmenter_forward(const AugmenterSpec& spec, const Tensor& noise, const ParamSet& weights,
                                       bool train_mode, Rng& rng) {
  const auto widths = spec.layer_widths();
  if (noise.rank() != 2 || noise.dim(1) != widths.front()) {
    throw ShapeError("augmenter_forward: noise must be (batch, " + std::to_string(widths.front()) + "), got " +
                     to_string(noise.shape()));
  }
  const std::size_t n = noise.dim(0);
  const std::size_t layers = widths.size() - 1;
  if (weights.size() != 2 * layers) throw Error("augmenter_forward: weight count does not match spec");

  Tensor h = noise;
  const double keep = 1.0 - spec.dropout_rate;
  for (std::size_t i = 0; i < layers; ++i) {
    h = detail::linear(h, weights.tensors[2 * i], weights.tensors[2 * i + 1]);
    if (i + 1 == layers) {
      h = tanh(h);
      break;
    }
    h = relu(h);
    if (train_mode && spec.dropout_rate > 0.0) {
      std::vector<double> mask(h.size());
      for (auto& m : mask) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
      h = dropout(h, Tensor::constant(h.shape(), std::move(mask)));
    }
  }

  AugmentParams out;
  out.raw = h;
  const TransformSet& ts = spec.transforms;
  std::size_t k = 0;
  if (ts.affine) {
    if (ts.translation_only) {
      const Tensor t = scale(slice(h, 1, 0, 2), spec.bounds.affine_translation);
      const Tensor one = Tensor::full({n, 1}, 1.0), zero = Tensor::zeros({n, 1});
      out.affine = concat({one, zero, slice(t, 1, 0, 1), zero, one, slice(t, 1, 1, 2)}, 1);
      k = 2;
    } else {
      const double lb = spec.bounds.affine_linear, tb = spec.bounds.affine_translation;
      const Tensor bounds = Tensor::constant({6}, {lb, lb, tb, lb, lb, tb});
      const Tensor ident = Tensor::constant({6}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
      out.affine = add(mul(slice(h, 1, 0, 6), bounds), ident);
      k = 6;
    }
  }
  if (ts.color) {
    auto u = [&](std::size_t j) { return slice(h, 1, k + j, k + j + 1); };
    const Tensor zero = Tensor::zeros({n, 1});
    const Tensor hue = ts.color_ops[0] ? scale(u(0), 0.5) : zero;
    const Tensor sat = ts.color_ops[1] ? scale(add_scalar(u(1), 1.0), 0.5) : zero;
    const Tensor con = ts.color_ops[2] ? u(2) : zero;
    const Tensor bri = ts.color_ops[3] ? scale(add_scalar(u(3), 1.0), 0.5) : zero;
    out.color = concat({hue, sat, con, bri}, 1);
  }
  return out;
}

/// Logits (batch, num_classes).
inline Tensor classifier_forward(const ClassifierSpec& spec, const Tensor& img, const ParamSet& weights) {
  if (img.rank() != 4 || img.dim(1) != spec.channels || img.dim(2) != spec.height || img.dim(3) != spec.width) {
    throw ShapeError("classifier_forward: image " + to_string(img.shape()) + " does not match spec");
  }
  const std::size_t n = img.dim(0);
  if (spec.kind == ClassifierKind::mlp) {
    Tensor h = reshape(img, {n, spec.channels * spec.height * spec.width});
    const std::size_t layers = weights.size() / 2;
    for (std::size_t i = 0; i < layers; ++i) {
      h = detail::linear(h, weights.tensors[2 * i], weights.tensors[2 * i + 1]);
      if (i + 1 < layers) h = relu(h);
    }
    return h;
  }
  Tensor h = img;
  for (std::size_t i = 0; i < 2; ++i) {
    h = leaky_relu(add(conv2d(h, weights.tensors[2 * i]), weights.tensors[2 * i + 1]), kLeakySlope);
  }
  const std::size_t ch = h.dim(1);
  const Tensor pooled = scale(sum_to(h, {n, ch, 1, 1}), 1.0 / static_cast<double>(spec.height * spec.width));
  return detail::linear(reshape(pooled, {n, ch}), weights.tensors[4], weights.tensors[5]);
}

/// Fraction of rows whose argmax matches the label.
inline double accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    }
    correct += best == labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace bilevel
