#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "bilevel/ops.hpp"
#include "bilevel/tensor.hpp"

namespace bilevel {

/// Gradients keyed by the node id of each differentiation target.
class GradMap {
 public:
  void set(const Tensor& param, Tensor grad) { grads_[param.id()] = std::move(grad); }

  bool contains(const Tensor& param) const { return grads_.count(param.id()) != 0; }

  const Tensor& at(const Tensor& param) const {
    auto it = grads_.find(param.id());
    if (it == grads_.end()) throw Error("no gradient recorded for node " + std::to_string(param.id()));
    return it->second;
  }

  const Tensor& operator[](const Tensor& param) const { return at(param); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Tensor> grads_;
};

namespace detail {

inline Tensor reduce_like(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return sum_to(g, shape);
}

inline Tensor const_mask(const Shape& shape, std::vector<double> m) { return Tensor::constant(shape, std::move(m)); }

// Vector-Jacobian products, written with differentiable ops so that a
// recorded backward pass can itself be differentiated.
inline Tensor vjp(const Tensor& out, std::size_t which, const Tensor& g) {
  const auto& node = *out.node();
  auto in = [&](std::size_t i) { return Tensor(node.inputs[i]); };
  const OpAttrs& at = node.attrs;
  switch (node.kind) {
    case OpKind::leaf:
      break;
    case OpKind::add:
      return reduce_like(g, in(which).shape());
    case OpKind::sub:
      return which == 0 ? reduce_like(g, in(0).shape()) : reduce_like(neg(g), in(1).shape());
    case OpKind::mul:
      return reduce_like(mul(g, in(1 - which)), in(which).shape());
    case OpKind::div:
      if (which == 0) return reduce_like(div(g, in(1)), in(0).shape());
      return reduce_like(neg(mul(g, div(out, in(1)))), in(1).shape());
    case OpKind::scale:
      return scale(g, at.a);
    case OpKind::add_scalar:
      return g;
    case OpKind::matmul:
      return which == 0 ? matmul(g, transpose(in(1))) : matmul(transpose(in(0)), g);
    case OpKind::transpose:
      return transpose(g);
    case OpKind::conv2d:
      return which == 0 ? conv2d(g, kernel_flip(in(1))) : conv2d_weight_grad(in(0), g);
    case OpKind::conv2d_weight_grad:
      // Bilinear in (x, gout): dx = conv2d(gout, flip(V)), dgout = conv2d(x, V).
      return which == 0 ? conv2d(in(1), kernel_flip(g)) : conv2d(in(0), g);
    case OpKind::kernel_flip:
      return kernel_flip(g);
    case OpKind::relu: {
      const auto& x = in(0).values();
      std::vector<double> m(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : 0.0;
      return mul(g, const_mask(in(0).shape(), std::move(m)));
    }
    case OpKind::leaky_relu: {
      const auto& x = in(0).values();
      std::vector<double> m(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : at.a;
      return mul(g, const_mask(in(0).shape(), std::move(m)));
    }
    case OpKind::clamp: {
      const auto& x = in(0).values();
      std::vector<double> m(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) m[i] = (x[i] > at.a && x[i] <= at.b) ? 1.0 : 0.0;
      return mul(g, const_mask(in(0).shape(), std::move(m)));
    }
    case OpKind::tanh:
      return mul(g, add_scalar(neg(mul(out, out)), 1.0));
    case OpKind::sigmoid:
      return mul(g, mul(out, add_scalar(neg(out), 1.0)));
    case OpKind::log:
      return div(g, in(0));
    case OpKind::exp:
      return mul(g, out);
    case OpKind::sin:
      return mul(g, cos(in(0)));
    case OpKind::cos:
      return neg(mul(g, sin(in(0))));
    case OpKind::sum_to:
      return broadcast_to(g, in(0).shape());
    case OpKind::broadcast_to:
      return sum_to(g, in(0).shape());
    case OpKind::reshape:
      return reshape(g, in(0).shape());
    case OpKind::concat: {
      std::size_t begin = 0;
      for (std::size_t i = 0; i < which; ++i) begin += in(i).shape()[at.axis];
      return slice(g, at.axis, begin, begin + in(which).shape()[at.axis]);
    }
    case OpKind::slice:
      return pad_slice(g, at.axis, at.begin, at.end, in(0).shape());
    case OpKind::pad_slice:
      return slice(g, at.axis, at.begin, at.end);
    case OpKind::dropout:
      return which == 0 ? mul(g, in(1)) : mul(g, in(0));
    case OpKind::softmax: {
      const Shape rows{out.shape()[0], 1};
      return mul(out, sub(g, sum_to(mul(g, out), rows)));
    }
    case OpKind::softmax_cross_entropy: {
      const Tensor logits = in(0);
      const std::size_t n = logits.shape()[0], c = logits.shape()[1];
      std::vector<double> onehot(n * c, 0.0);
      for (std::size_t i = 0; i < n; ++i) onehot[i * c + (*at.labels)[i]] = 1.0;
      const Tensor diff = sub(softmax(logits), Tensor::constant(logits.shape(), std::move(onehot)));
      return scale(mul(diff, g), 1.0 / static_cast<double>(n));
    }
    case OpKind::gather:
      return scatter_add(g, at.index, in(0).shape());
    case OpKind::scatter_add:
      return gather(g, at.index, in(0).shape());
  }
  throw Error(std::string("no vjp for op ") + op_name(node.kind));
}

}  // namespace detail

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// Only nodes lying on a path from a target to the loss are visited, each at
/// most once, in decreasing creation order. With `retain_graph` the returned
/// gradients are recorded nodes on the loss's tape and can be differentiated
/// again; otherwise they are constants. Targets unreachable from the loss get
/// zero gradients.
inline GradMap backward(const Tensor& loss, const std::vector<Tensor>& wrt, bool retain_graph = false) {
  if (!loss.defined() || loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
  for (const Tensor& p : wrt) {
    if (!p.defined() || !p.requires_grad()) {
      throw Error("backward: differentiation target does not require grad");
    }
    if (loss.requires_grad() && p.tape_id() != loss.tape_id()) {
      throw Error("backward: target node " + std::to_string(p.id()) + " is not on the loss's tape");
    }
  }

  GradMap result;
  if (!loss.requires_grad()) {
    for (const Tensor& p : wrt) result.set(p, Tensor::zeros(p.shape()));
    return result;
  }

  using NodePtr = std::shared_ptr<detail::Node>;
  std::unordered_set<const detail::Node*> targets;
  for (const Tensor& p : wrt) targets.insert(p.node().get());

  // Collect the reachable subgraph.
  std::vector<NodePtr> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<NodePtr> stack{loss.node()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    NodePtr n = std::move(stack.back());
    stack.pop_back();
    for (const NodePtr& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq < b->seq; });

  // A node is relevant when some target is reachable through its inputs.
  std::unordered_set<const detail::Node*> relevant;
  for (const NodePtr& n : order) {
    bool r = targets.count(n.get()) != 0;
    for (const NodePtr& in : n->inputs) r = r || relevant.count(in.get()) != 0;
    if (r) relevant.insert(n.get());
  }

  std::optional<NoGradGuard> no_grad;
  if (!retain_graph) no_grad.emplace();

  std::unordered_map<const detail::Node*, Tensor> grads;
  grads.emplace(loss.node().get(), Tensor::full(loss.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& n = *it;
    if (!relevant.count(n.get()) || n->inputs.empty()) continue;
    auto git = grads.find(n.get());
    if (git == grads.end()) continue;
    const Tensor g = git->second;
    const Tensor out(n);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const auto* in = n->inputs[i].get();
      if (!in->requires_grad || !relevant.count(in)) continue;
      Tensor gi = detail::vjp(out, i, g);
      auto [slot, fresh] = grads.try_emplace(in, gi);
      if (!fresh) slot->second = add(slot->second, gi);
    }
    if (!targets.count(n.get())) grads.erase(n.get());
  }

  for (const Tensor& p : wrt) {
    auto it = grads.find(p.node().get());
    result.set(p, it != grads.end() ? it->second : Tensor::zeros(p.shape()));
  }
  return result;
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
inline Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error("finite_diff_gradient: step must be positive");
  std::vector<double> base = x.values();
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double orig = base[i];
    base[i] = orig + h;
    const double fp = f(Tensor::constant(x.shape(), base));
    base[i] = orig - h;
    const double fm = f(Tensor::constant(x.shape(), base));
    base[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_gradient: function returned a non-finite value");
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::constant(x.shape(), std::move(grad));
}

}  // namespace bilevel
