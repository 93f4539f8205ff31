#pragma once

#include <memory>
#include <vector>

#include "bilevel/tensor.hpp"

namespace bilevel {

inline Tensor add(const Tensor& a, const Tensor& b) { return record_op(OpKind::add, {a, b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return record_op(OpKind::sub, {a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return record_op(OpKind::mul, {a, b}); }
inline Tensor div(const Tensor& a, const Tensor& b) { return record_op(OpKind::div, {a, b}); }

inline Tensor scale(const Tensor& x, double s) {
  OpAttrs at;
  at.a = s;
  return record_op(OpKind::scale, {x}, at);
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double s) {
  OpAttrs at;
  at.a = s;
  return record_op(OpKind::add_scalar, {x}, at);
}

inline Tensor matmul(const Tensor& a, const Tensor& b) { return record_op(OpKind::matmul, {a, b}); }
inline Tensor transpose(const Tensor& x) { return record_op(OpKind::transpose, {x}); }

/// 3x3 kernel, stride 1, zero padding 1. x: (N,Cin,H,W), w: (Cout,Cin,3,3).
inline Tensor conv2d(const Tensor& x, const Tensor& w) { return record_op(OpKind::conv2d, {x, w}); }

/// Kernel gradient of conv2d for input x and output gradient g.
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g) {
  return record_op(OpKind::conv2d_weight_grad, {x, g});
}

/// Swaps in/out channels and rotates each 3x3 kernel by 180 degrees.
inline Tensor kernel_flip(const Tensor& w) { return record_op(OpKind::kernel_flip, {w}); }

inline Tensor relu(const Tensor& x) { return record_op(OpKind::relu, {x}); }

inline Tensor leaky_relu(const Tensor& x, double slope) {
  OpAttrs at;
  at.a = slope;
  return record_op(OpKind::leaky_relu, {x}, at);
}

inline Tensor tanh(const Tensor& x) { return record_op(OpKind::tanh, {x}); }
inline Tensor sigmoid(const Tensor& x) { return record_op(OpKind::sigmoid, {x}); }
inline Tensor log(const Tensor& x) { return record_op(OpKind::log, {x}); }
inline Tensor exp(const Tensor& x) { return record_op(OpKind::exp, {x}); }
inline Tensor sin(const Tensor& x) { return record_op(OpKind::sin, {x}); }
inline Tensor cos(const Tensor& x) { return record_op(OpKind::cos, {x}); }

inline Tensor sum_to(const Tensor& x, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return record_op(OpKind::sum_to, {x}, at);
}

inline Tensor broadcast_to(const Tensor& x, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return record_op(OpKind::broadcast_to, {x}, at);
}

/// Sum of all elements as a rank-0 tensor.
inline Tensor sum(const Tensor& x) { return sum_to(x, {}); }

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return record_op(OpKind::reshape, {x}, at);
}

inline Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return record_op(OpKind::concat, xs, at);
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return record_op(OpKind::slice, {x}, at);
}

/// Adjoint of slice: embeds x at [begin, end) of a zero tensor of `full` shape.
inline Tensor pad_slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end, Shape full) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  at.shape = std::move(full);
  return record_op(OpKind::pad_slice, {x}, at);
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  OpAttrs at;
  at.a = lo;
  at.b = hi;
  return record_op(OpKind::clamp, {x}, at);
}

/// Multiplies by an externally generated mask (already scaled by 1/keep).
inline Tensor dropout(const Tensor& x, const Tensor& mask) { return record_op(OpKind::dropout, {x, mask}); }

/// Row-wise softmax of a (N,C) tensor.
inline Tensor softmax(const Tensor& x) { return record_op(OpKind::softmax, {x}); }

/// Mean cross-entropy of (N,C) logits against integer labels.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::vector<std::size_t> labels) {
  OpAttrs at;
  at.labels = std::make_shared<const std::vector<std::size_t>>(std::move(labels));
  return record_op(OpKind::softmax_cross_entropy, {logits}, at);
}

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

/// out[i] = x[index[i]], or 0 where index[i] < 0.
inline Tensor gather(const Tensor& x, IndexMap index, Shape out_shape) {
  OpAttrs at;
  at.index = std::move(index);
  at.shape = std::move(out_shape);
  return record_op(OpKind::gather, {x}, at);
}

/// Adjoint of gather: out[index[i]] += g[i].
inline Tensor scatter_add(const Tensor& g, IndexMap index, Shape out_shape) {
  OpAttrs at;
  at.index = std::move(index);
  at.shape = std::move(out_shape);
  return record_op(OpKind::scatter_add, {g}, at);
}

}  // namespace bilevel
