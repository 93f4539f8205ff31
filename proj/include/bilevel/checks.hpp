#pragma once

// Self-checks runnable from the command line: finite-difference gradient
// checks for every differentiable op and transform, and the hypergradient
// oracles (closed forms, full unroll, finite differences).

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/autograd.hpp"
#include "bilevel/bilevel.hpp"
#include "bilevel/ops.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"
#include "bilevel/vision.hpp"

namespace bilevel::checks {

struct CheckResult {
  std::string name;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  std::size_t cases = 100;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

/// Normwise relative error max|a - b| / max(max|a|, max|b|, tiny).
inline double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / std::max(scale, 1e-12);
}

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(s));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::constant(s, std::move(v));
}

/// Uniform values in [lo, hi] kept at least `margin` away from every kink.
inline Tensor away_from(const Shape& s, Rng& rng, const std::vector<double>& kinks, double margin, double lo = -1.0,
                        double hi = 1.0) {
  std::vector<double> v(numel(s));
  for (double& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::any_of(kinks.begin(), kinks.end(), [&](double k) { return std::abs(x - k) < margin; }));
  }
  return Tensor::constant(s, std::move(v));
}

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;
using CaseGen = std::function<std::vector<Tensor>(Rng&)>;

/// Compares the reverse-mode VJP of `fn` against central differences of
/// sum(fn(inputs) * R) for a random cotangent R, for each input.
inline double vjp_error(const OpFn& fn, const std::vector<Tensor>& inputs, Rng& rng, double h) {
  Tape tape;
  std::vector<Tensor> params;
  for (const auto& x : inputs) params.push_back(tape.parameter(x));
  const Tensor out = fn(params);
  const Tensor r = random_tensor(out.shape(), rng);
  const GradMap g = backward(sum(mul(out, r)), params);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& xi) {
      NoGradGuard ng;
      std::vector<Tensor> args = inputs;
      args[i] = xi;
      return sum(mul(fn(args), r)).item();
    };
    worst = std::max(worst, rel_error(g[params[i]], finite_diff_gradient(f, inputs[i], h)));
  }
  return worst;
}

/// Same comparison one order up: the gradient of sum_i sum(grad_i * R_i),
/// where grad_i (with respect to input i) comes from a recorded backward pass.
/// Covers mixed partials, so ops linear in each argument are still exercised.
inline double second_order_error(const OpFn& fn, const std::vector<Tensor>& inputs, Rng& rng, double h) {
  Tensor r1;
  std::vector<Tensor> r2;
  {
    NoGradGuard ng;
    r1 = random_tensor(fn(inputs).shape(), rng);
    for (const auto& x : inputs) r2.push_back(random_tensor(x.shape(), rng));
  }
  auto grad_dot = [&](const std::vector<Tensor>& xs, bool record) {
    Tape tape;
    std::vector<Tensor> ps;
    for (const auto& x : xs) ps.push_back(tape.parameter(x));
    const GradMap g1 = backward(sum(mul(fn(ps), r1)), ps, true);
    Tensor s = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < ps.size(); ++i) s = add(s, sum(mul(g1[ps[i]], r2[i])));
    std::vector<Tensor> g2;
    if (record) {
      const GradMap gm = backward(s, ps);
      for (const auto& p : ps) g2.push_back(gm[p]);
    }
    return std::pair{s.item(), g2};
  };
  const auto analytic = grad_dot(inputs, true).second;
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor numeric = finite_diff_gradient(
        [&](const Tensor& x) {
          std::vector<Tensor> xs = inputs;
          xs[i] = x;
          return grad_dot(xs, false).first;
        },
        inputs[i], h);
    worst = std::max(worst, rel_error(analytic[i], numeric));
  }
  return worst;
}

struct GradCase {
  std::string name;
  CaseGen gen;
  OpFn fn;
};

inline IndexMap random_index(std::size_t out_size, std::size_t in_size, Rng& rng) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(out_size);
  for (auto& i : *idx) i = rng.bernoulli(0.15) ? -1 : rng.integer(0, static_cast<long long>(in_size) - 1);
  return idx;
}

/// Theta rows near the identity whose sampling positions on an h x w grid
/// all stay `margin` away from integer pixel coordinates.
inline Tensor smooth_affine(std::size_t n, std::size_t h, std::size_t w, Rng& rng, double margin) {
  for (;;) {
    std::vector<double> v(n * 6);
    for (std::size_t b = 0; b < n; ++b) {
      const std::array<double, 6> ident{1, 0, 0, 0, 1, 0};
      for (std::size_t k = 0; k < 6; ++k) v[b * 6 + k] = ident[k] + rng.uniform(-0.3, 0.3);
    }
    const Tensor theta = Tensor::constant({n, 6}, v);
    const Tensor grid = affine_grid(theta, h, w);
    bool ok = true;
    for (std::size_t k = 0; k < grid.size() && ok; ++k) {
      const double size = static_cast<double>((k % 2 == 0 ? w : h) - 1);
      const double p = (grid[k] + 1.0) * 0.5 * size;
      ok = std::abs(p - std::round(p)) > margin;
    }
    if (ok) return theta;
  }
}

inline Tensor smooth_grid(std::size_t n, std::size_t h, std::size_t w, Rng& rng, double margin) {
  std::vector<double> v(n * h * w * 2);
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double size = static_cast<double>((k % 2 == 0 ? w : h) - 1);
    double p;
    do {
      p = rng.uniform(-0.8, size + 0.8);
    } while (std::abs(p - std::round(p)) < margin);
    v[k] = 2.0 * p / size - 1.0;
  }
  return Tensor::constant({n, h, w, 2}, std::move(v));
}

/// Color parameters for which every pre-clamp output of apply_color stays
/// `margin` inside (0, 1).
inline Tensor smooth_color(const Tensor& img, Rng& rng, double margin) {
  const std::size_t n = img.dim(0);
  for (;;) {
    std::vector<double> v(n * 4);
    for (std::size_t b = 0; b < n; ++b) {
      v[b * 4 + 0] = rng.uniform(-0.5, 0.5);
      v[b * 4 + 1] = rng.uniform(0.0, 0.5);
      v[b * 4 + 2] = rng.uniform(-0.5, 0.5);
      v[b * 4 + 3] = rng.uniform(-0.1, 0.1);
    }
    const Tensor p = Tensor::constant({n, 4}, v);
    NoGradGuard ng;
    auto col = [&](std::size_t k) { return reshape(slice(p, 1, k, k + 1), {n}); };
    Tensor out = adjust_hue(img, col(0));
    out = adjust_saturation(out, col(1));
    out = adjust_contrast(out, col(2));
    out = adjust_brightness(out, col(3));
    const auto vals = out.values();
    if (std::all_of(vals.begin(), vals.end(), [&](double x) { return x > margin && x < 1.0 - margin; })) return p;
  }
}

inline std::vector<GradCase> primitive_cases() {
  const double m = 1e-3;
  std::vector<GradCase> c;
  auto two = [](Shape a, Shape b) {
    return [a, b](Rng& r) { return std::vector<Tensor>{random_tensor(a, r), random_tensor(b, r)}; };
  };
  auto one = [](Shape a, double lo = -1.0, double hi = 1.0) {
    return [a, lo, hi](Rng& r) { return std::vector<Tensor>{random_tensor(a, r, lo, hi)}; };
  };
  c.push_back({"add", two({3, 4}, {1, 4}), [](auto& x) { return add(x[0], x[1]); }});
  c.push_back({"sub", two({2, 3, 2}, {3, 1}), [](auto& x) { return sub(x[0], x[1]); }});
  c.push_back({"mul", two({3, 4}, {3, 1}), [](auto& x) { return mul(x[0], x[1]); }});
  c.push_back({"div",
               [](Rng& r) {
                 return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({1, 4}, r, 0.5, 2.0)};
               },
               [](auto& x) { return div(x[0], x[1]); }});
  c.push_back({"scale", one({5}), [](auto& x) { return scale(x[0], -1.7); }});
  c.push_back({"add_scalar", one({5}), [](auto& x) { return add_scalar(x[0], 0.3); }});
  c.push_back({"matmul", two({3, 4}, {4, 2}), [](auto& x) { return matmul(x[0], x[1]); }});
  c.push_back({"transpose", one({3, 4}), [](auto& x) { return transpose(x[0]); }});
  c.push_back({"conv2d", two({2, 2, 4, 5}, {3, 2, 3, 3}), [](auto& x) { return conv2d(x[0], x[1]); }});
  c.push_back({"conv2d_weight_grad", two({2, 2, 4, 4}, {2, 3, 4, 4}),
               [](auto& x) { return conv2d_weight_grad(x[0], x[1]); }});
  c.push_back({"kernel_flip", one({3, 2, 3, 3}), [](auto& x) { return kernel_flip(x[0]); }});
  c.push_back({"relu", [m](Rng& r) { return std::vector<Tensor>{away_from({4, 3}, r, {0.0}, m)}; },
               [](auto& x) { return relu(x[0]); }});
  c.push_back({"leaky_relu", [m](Rng& r) { return std::vector<Tensor>{away_from({4, 3}, r, {0.0}, m)}; },
               [](auto& x) { return leaky_relu(x[0], 0.2); }});
  c.push_back({"tanh", one({6}, -2.0, 2.0), [](auto& x) { return tanh(x[0]); }});
  c.push_back({"sigmoid", one({6}, -3.0, 3.0), [](auto& x) { return sigmoid(x[0]); }});
  c.push_back({"log", one({6}, 0.2, 3.0), [](auto& x) { return log(x[0]); }});
  c.push_back({"exp", one({6}), [](auto& x) { return exp(x[0]); }});
  c.push_back({"sin", one({6}, -3.0, 3.0), [](auto& x) { return sin(x[0]); }});
  c.push_back({"cos", one({6}, -3.0, 3.0), [](auto& x) { return cos(x[0]); }});
  c.push_back({"sum_to", one({2, 3, 4}), [](auto& x) { return sum_to(x[0], {3, 1}); }});
  c.push_back({"broadcast_to", one({3, 1}), [](auto& x) { return broadcast_to(x[0], {2, 3, 4}); }});
  c.push_back({"reshape", one({2, 6}), [](auto& x) { return reshape(x[0], {3, 4}); }});
  c.push_back({"concat", two({2, 3}, {2, 2}), [](auto& x) { return concat({x[0], x[1]}, 1); }});
  c.push_back({"slice", one({4, 5}), [](auto& x) { return slice(x[0], 1, 1, 4); }});
  c.push_back({"pad_slice", one({4, 2}), [](auto& x) { return pad_slice(x[0], 1, 2, 4, {4, 5}); }});
  c.push_back({"clamp", [m](Rng& r) { return std::vector<Tensor>{away_from({4, 4}, r, {-0.5, 0.5}, m)}; },
               [](auto& x) { return clamp(x[0], -0.5, 0.5); }});
  c.push_back({"dropout", one({4, 4}), [](auto& x) {
                 std::vector<double> mask(16);
                 for (std::size_t i = 0; i < 16; ++i) mask[i] = (i * 7 % 5 == 0) ? 0.0 : 1.25;
                 return dropout(x[0], Tensor::constant({4, 4}, mask));
               }});
  c.push_back({"softmax", one({3, 5}, -2.0, 2.0), [](auto& x) { return softmax(x[0]); }});
  c.push_back({"softmax_cross_entropy", one({4, 3}, -2.0, 2.0),
               [](auto& x) { return softmax_cross_entropy(x[0], {0, 2, 1, 2}); }});
  {
    auto idx = std::make_shared<IndexMap>();
    c.push_back({"gather",
                 [idx](Rng& r) {
                   *idx = random_index(10, 12, r);
                   return std::vector<Tensor>{random_tensor({3, 4}, r)};
                 },
                 [idx](auto& x) { return gather(x[0], *idx, {2, 5}); }});
  }
  {
    auto idx = std::make_shared<IndexMap>();
    c.push_back({"scatter_add",
                 [idx](Rng& r) {
                   *idx = random_index(10, 6, r);
                   return std::vector<Tensor>{random_tensor({10}, r)};
                 },
                 [idx](auto& x) { return scatter_add(x[0], *idx, {2, 3}); }});
  }
  return c;
}

inline std::vector<GradCase> transform_cases() {
  const double m = 1e-3;
  std::vector<GradCase> c;
  auto img = [](Rng& r, std::size_t ch) { return random_tensor({2, ch, 4, 5}, r, 0.2, 0.8); };
  c.push_back({"affine_grid", [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 6}, r)}; },
               [](auto& x) { return affine_grid(x[0], 3, 4); }});
  c.push_back({"grid_sample_bilinear",
               [img, m](Rng& r) { return std::vector<Tensor>{img(r, 3), smooth_grid(2, 4, 5, r, m)}; },
               [](auto& x) { return grid_sample_bilinear(x[0], x[1]); }});
  c.push_back({"apply_affine",
               [img, m](Rng& r) { return std::vector<Tensor>{img(r, 1), smooth_affine(2, 4, 5, r, m)}; },
               [](auto& x) { return apply_affine(x[0], x[1]); }});
  auto color_scalar = [img](double lo, double hi) {
    return [img, lo, hi](Rng& r) { return std::vector<Tensor>{img(r, 3), random_tensor({2}, r, lo, hi)}; };
  };
  c.push_back({"adjust_hue", color_scalar(-0.5, 0.5), [](auto& x) { return adjust_hue(x[0], x[1]); }});
  c.push_back({"adjust_saturation", color_scalar(0.0, 1.0), [](auto& x) { return adjust_saturation(x[0], x[1]); }});
  c.push_back({"adjust_contrast", color_scalar(-1.0, 1.0), [](auto& x) { return adjust_contrast(x[0], x[1]); }});
  c.push_back({"adjust_brightness", color_scalar(0.0, 1.0), [](auto& x) { return adjust_brightness(x[0], x[1]); }});
  c.push_back({"luma", [img](Rng& r) { return std::vector<Tensor>{img(r, 3)}; }, [](auto& x) { return luma(x[0]); }});
  c.push_back({"apply_color",
               [img, m](Rng& r) {
                 const Tensor i = img(r, 3);
                 return std::vector<Tensor>{i, smooth_color(i, r, m)};
               },
               [](auto& x) { return apply_color(x[0], x[1]); }});
  return c;
}

inline CheckResult run_case(const GradCase& gc, const GradcheckOptions& opt, bool second_order = false) {
  Rng rng(opt.seed, std::hash<std::string>{}(gc.name));
  CheckResult res{(second_order ? "d2:" : "") + gc.name, 0, 0.0, opt.tolerance, true};
  const std::size_t n = second_order ? std::max<std::size_t>(1, opt.cases / 5) : opt.cases;
  for (std::size_t i = 0; i < n; ++i) {
    const auto inputs = gc.gen(rng);
    const double e =
        second_order ? second_order_error(gc.fn, inputs, rng, opt.h) : vjp_error(gc.fn, inputs, rng, opt.h);
    res.max_error = std::max(res.max_error, std::isfinite(e) ? e : INFINITY);
    ++res.cases;
  }
  res.passed = res.max_error <= opt.tolerance;
  return res;
}

/// First-order checks for every primitive and transform, plus second-order
/// checks for the ops that appear inside differentiated inner steps.
inline std::vector<CheckResult> gradcheck_suite(const GradcheckOptions& opt = {}) {
  std::vector<CheckResult> out;
  auto cases = primitive_cases();
  const auto tc = transform_cases();
  cases.insert(cases.end(), tc.begin(), tc.end());
  for (const auto& gc : cases) out.push_back(run_case(gc, opt));
  for (const auto& gc : cases) {
    static const std::vector<std::string> smooth{"mul", "div", "matmul", "conv2d", "conv2d_weight_grad", "tanh",
                                                 "sigmoid", "log", "exp", "softmax", "softmax_cross_entropy",
                                                 "adjust_hue", "adjust_contrast", "apply_affine"};
    if (std::find(smooth.begin(), smooth.end(), gc.name) != smooth.end()) out.push_back(run_case(gc, opt, true));
  }
  return out;
}

/// Scalar quadratic bilevel instance: L_tr = (w - theta)^2 / 2,
/// L_val = (w - a)^2 / 2. After T SGD steps from w0,
/// dL_val/dtheta = (w_T - a) (1 - (1 - lr)^T).
struct QuadraticProblem {
  double w0 = 0.0, theta = 1.0, lr = 0.1, a = 2.0;

  BilevelProblem problem() const {
    BilevelProblem p;
    p.omega0 = {Tensor::scalar(w0)};
    p.theta = {Tensor::scalar(theta)};
    p.lr = lr;
    p.inner_loss = [](const std::vector<Tensor>& w, const std::vector<Tensor>& th, std::size_t) {
      const Tensor d = sub(w[0], th[0]);
      return scale(mul(d, d), 0.5);
    };
    const double target = a;
    p.val_loss = [target](const std::vector<Tensor>& w) {
      const Tensor d = add_scalar(w[0], -target);
      return scale(mul(d, d), 0.5);
    };
    return p;
  }

  double w_after(std::size_t steps) const {
    double w = w0;
    for (std::size_t t = 0; t < steps; ++t) w -= lr * (w - theta);
    return w;
  }

  double hypergrad(std::size_t steps) const {
    return (w_after(steps) - a) * (1.0 - std::pow(1.0 - lr, static_cast<double>(steps)));
  }
};

/// Linear regression with learned per-feature input scales exp(theta):
/// 8 training and 8 validation samples, 2 features.
inline BilevelProblem linear_model_problem(std::uint64_t seed = 0) {
  Rng rng(seed, 11);
  const Tensor xtr = random_tensor({8, 2}, rng), xval = random_tensor({8, 2}, rng);
  const Tensor wtrue = Tensor::constant({2, 1}, {1.5, -0.7});
  Tensor ytr, yval;
  {
    NoGradGuard ng;
    ytr = add(matmul(xtr, wtrue), random_tensor({8, 1}, rng, -0.1, 0.1));
    yval = matmul(xval, wtrue);
  }
  BilevelProblem p;
  p.omega0 = {random_tensor({2, 1}, rng, -0.5, 0.5)};
  p.theta = {random_tensor({1, 2}, rng, -0.3, 0.3)};
  p.lr = 0.2;
  p.inner_loss = [xtr, ytr](const std::vector<Tensor>& w, const std::vector<Tensor>& th, std::size_t) {
    const Tensor r = sub(matmul(mul(xtr, exp(th[0])), w[0]), ytr);
    return mean(mul(r, r));
  };
  p.val_loss = [xval, yval](const std::vector<Tensor>& w) {
    const Tensor r = sub(matmul(xval, w[0]), yval);
    return mean(mul(r, r));
  };
  return p;
}

inline std::vector<Tensor> finite_diff_hypergrad(const BilevelProblem& p, std::size_t steps, double h = 1e-5) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < p.theta.size(); ++i) {
    out.push_back(finite_diff_gradient(
        [&](const Tensor& ti) {
          std::vector<Tensor> th = p.theta;
          th[i] = ti;
          return unrolled_val_loss(p, th, steps);
        },
        p.theta[i], h));
  }
  return out;
}

inline double max_rel(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, rel_error(a[i], b[i]));
  return e;
}

inline double max_abs_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) e = std::max(e, std::abs(a[i][k] - b[i][k]));
  return e;
}

/// Hypergradient oracles: the one-step closed form, the geometric-series
/// closed form over several steps, truncated-vs-full unroll agreement and
/// finite differences on the linear model, and one Adam step.
inline std::vector<CheckResult> oracle_suite() {
  std::vector<CheckResult> out;
  auto record = [&](std::string name, std::size_t cases, double err, double tol) {
    out.push_back({std::move(name), cases, err, tol, err <= tol});
  };

  const QuadraticProblem q;
  const auto qp = q.problem();
  record("quadratic_one_step", 1, std::abs(windowed_hypergrad(qp, 1, 1)[0].item() - (-0.19)), 1e-12);

  double geo = 0.0;
  for (std::size_t t = 1; t <= 6; ++t) geo = std::max(geo, std::abs(full_unroll_hypergrad(qp, t)[0].item() - q.hypergrad(t)));
  record("quadratic_geometric_series", 6, geo, 1e-12);

  const auto lp = linear_model_problem();
  double trunc = 0.0, fd_full = 0.0, fd_trunc = 0.0;
  for (std::size_t t = 1; t <= 5; ++t) {
    const auto full = full_unroll_hypergrad(lp, t);
    const auto win = windowed_hypergrad(lp, t, t);
    const auto fd = finite_diff_hypergrad(lp, t);
    trunc = std::max(trunc, max_abs_diff(full, win));
    fd_full = std::max(fd_full, max_rel(full, fd));
    fd_trunc = std::max(fd_trunc, max_rel(win, fd));
  }
  record("linear_truncated_equals_full", 5, trunc, 1e-10);
  record("linear_full_vs_finite_diff", 5, fd_full, 1e-6);
  record("linear_truncated_vs_finite_diff", 5, fd_trunc, 1e-6);

  {
    HypergradConfig cfg;
    cfg.weight_decay = 0.0;
    cfg.clip_norm = 0.0;
    cfg.outer_lr = 1e-3;
    OuterOptimizer opt(cfg);
    Tape tape;
    const Tensor th = tape.parameter({3}, {0.5, -0.2, 1.0});
    const auto next = opt.step({th}, {Tensor::constant({3}, {2.0, -0.01, 300.0})}, tape)[0];
    double err = 0.0;
    const std::array<double, 3> sign{1.0, -1.0, 1.0};
    for (std::size_t i = 0; i < 3; ++i) err = std::max(err, std::abs((th[i] - next[i]) - 1e-3 * sign[i]));
    record("adam_first_step", 3, err, 1e-8);
  }
  return out;
}

}  // namespace bilevel::checks
