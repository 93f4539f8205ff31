#pragma once

// Reverse-mode tape: tensor handles, recorded nodes and the forward kernels of
// every primitive. Gradients are produced in autograd.hpp.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bilevel {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  scale,
  add_scalar,
  matmul,
  transpose,
  conv2d,
  conv2d_weight_grad,
  kernel_flip,
  relu,
  leaky_relu,
  tanh,
  sigmoid,
  log,
  exp,
  sin,
  cos,
  sum_to,
  broadcast_to,
  reshape,
  concat,
  slice,
  pad_slice,
  clamp,
  dropout,
  softmax,
  softmax_cross_entropy,
  gather,
  scatter_add,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv2d_weight_grad: return "conv2d_weight_grad";
    case OpKind::kernel_flip: return "kernel_flip";
    case OpKind::relu: return "relu";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::sin: return "sin";
    case OpKind::cos: return "cos";
    case OpKind::sum_to: return "sum_to";
    case OpKind::broadcast_to: return "broadcast_to";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::pad_slice: return "pad_slice";
    case OpKind::clamp: return "clamp";
    case OpKind::dropout: return "dropout";
    case OpKind::softmax: return "softmax";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::gather: return "gather";
    case OpKind::scatter_add: return "scatter_add";
  }
  return "?";
}

/// Per-op attributes. Only the fields relevant to a given kind are read.
struct OpAttrs {
  double a = 0.0;  // scale factor, slope, clamp low
  double b = 0.0;  // clamp high
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;  // target shape for reshape/sum_to/broadcast_to/pad_slice/scatter
  std::shared_ptr<const std::vector<std::int64_t>> index;  // gather/scatter, -1 = zero
  std::shared_ptr<const std::vector<std::size_t>> labels;  // cross-entropy targets
};

namespace detail {

struct TapeState {
  std::uint64_t id = 0;
  std::size_t recorded = 0;
  std::vector<std::uint64_t> checkpoints;
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  std::uint64_t seq = next_seq();
  std::shared_ptr<TapeState> tape;  // null for constants
  Shape shape;
  std::vector<double> value;
  OpKind kind = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  OpAttrs attrs;
  bool requires_grad = false;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& checked_mode_flag() {
  thread_local bool checked = [] {
    const char* env = std::getenv("BILEVEL_CHECKED");
    return env != nullptr && std::string(env) == "1";
  }();
  return checked;
}

}  // namespace detail

/// Whether ops applied to tensors requiring grad are recorded.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Checked mode rejects NaN/Inf in op inputs and outputs. Defaults to the
/// BILEVEL_CHECKED environment variable.
inline bool checked_mode() { return detail::checked_mode_flag(); }
inline void set_checked_mode(bool on) { detail::checked_mode_flag() = on; }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool on) : prev_(checked_mode()) { set_checked_mode(on); }
  ~CheckedModeGuard() { set_checked_mode(prev_); }
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool prev_;
};

class Tape;

/// Handle to a node of the computation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor data size " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return constant({}, {v}); }

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return constant(std::move(shape), std::vector<double>(n, v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t id() const { return node_->seq; }
  std::uint64_t tape_id() const { return node_->tape ? node_->tape->id : 0; }
  OpKind op() const { return node_->kind; }
  bool is_leaf() const { return node_->kind == OpKind::leaf; }
  std::size_t num_inputs() const { return node_->inputs.size(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Drops this node's lineage in place: values are kept, the node becomes a
  /// leaf on its tape, and gradients no longer reach its former ancestors.
  void cut_lineage() const {
    node_->inputs.clear();
    node_->kind = OpKind::leaf;
    node_->attrs = OpAttrs{};
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Same values, no tape lineage.
inline Tensor detach(const Tensor& x) { return Tensor::constant(x.shape(), x.values()); }

/// Owner of differentiable leaves. All recorded descendants of its leaves
/// belong to this tape.
class Tape {
 public:
  Tape() : state_(std::make_shared<detail::TapeState>()) {
    static std::atomic<std::uint64_t> next_id{1};
    state_->id = next_id.fetch_add(1, std::memory_order_relaxed);
  }

  std::uint64_t id() const { return state_->id; }
  std::size_t recorded() const { return state_->recorded; }

  Tensor parameter(Shape shape, std::vector<double> values) const {
    Tensor t = Tensor::constant(std::move(shape), std::move(values));
    t.node()->tape = state_;
    t.node()->requires_grad = true;
    ++state_->recorded;
    return t;
  }

  Tensor parameter(const Tensor& values) const { return parameter(values.shape(), values.values()); }

  /// Marks the start of a new inner-step subgraph.
  void checkpoint() const { state_->checkpoints.push_back(detail::next_seq()); }
  const std::vector<std::uint64_t>& checkpoints() const { return state_->checkpoints; }

 private:
  std::shared_ptr<detail::TapeState> state_;
};

namespace detail {

// Strides of `in` aligned to `out` under right-aligned broadcasting; broadcast
// dimensions get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

inline bool broadcastable_to(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) return false;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t di = in[in.size() - 1 - k];
    if (di != 1 && di != out[out.size() - 1 - k]) return false;
  }
  return true;
}

// Visits every output flat index together with the matching input flat index.
template <typename F>
void for_each_broadcast(const Shape& in, const Shape& out, F&& f) {
  const std::size_t total = numel(out);
  if (in == out) {
    for (std::size_t i = 0; i < total; ++i) f(i, i);
    return;
  }
  if (numel(in) == 1) {
    for (std::size_t i = 0; i < total; ++i) f(i, std::size_t{0});
    return;
  }
  const auto strides = broadcast_strides(in, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, src);
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      src += strides[d];
      if (idx[d] < out[d]) break;
      src -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

inline void require_rank(const Node& n, std::size_t r, const char* op) {
  if (n.shape.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     to_string(n.shape));
  }
}

inline void check_finite(const std::vector<double>& v, const char* what, OpKind k) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value in ") + what + " of op " + op_name(k));
    }
  }
}

struct ForwardResult {
  Shape shape;
  std::vector<double> value;
};

template <typename F>
ForwardResult unary_map(const Node& x, F&& f) {
  ForwardResult r{x.shape, std::vector<double>(x.value.size())};
  for (std::size_t i = 0; i < x.value.size(); ++i) r.value[i] = f(x.value[i]);
  return r;
}

template <typename F>
ForwardResult binary_map(const Node& a, const Node& b, F&& f) {
  ForwardResult r;
  r.shape = broadcast_shape(a.shape, b.shape);
  r.value.resize(numel(r.shape));
  if (a.shape == r.shape && b.shape == r.shape) {
    for (std::size_t i = 0; i < r.value.size(); ++i) r.value[i] = f(a.value[i], b.value[i]);
    return r;
  }
  std::vector<std::size_t> ia(r.value.size());
  for_each_broadcast(a.shape, r.shape, [&](std::size_t o, std::size_t s) { ia[o] = s; });
  for_each_broadcast(b.shape, r.shape,
                     [&](std::size_t o, std::size_t s) { r.value[o] = f(a.value[ia[o]], b.value[s]); });
  return r;
}

inline ForwardResult conv2d_forward(const Node& x, const Node& w) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const std::size_t cout = w.shape[0];
  if (w.shape[1] != cin || w.shape[2] != 3 || w.shape[3] != 3) {
    throw ShapeError("conv2d: kernel " + to_string(w.shape) + " incompatible with input " + to_string(x.shape));
  }
  ForwardResult r{{n, cout, h, wd}, std::vector<double>(n * cout * h * wd, 0.0)};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      double* out = &r.value[((b * cout) + o) * h * wd];
      for (std::size_t c = 0; c < cin; ++c) {
        const double* in = &x.value[((b * cin) + c) * h * wd];
        const double* k = &w.value[((o * cin) + c) * 9];
        for (std::size_t ki = 0; ki < 3; ++ki) {
          for (std::size_t kj = 0; kj < 3; ++kj) {
            const double kv = k[ki * 3 + kj];
            for (std::size_t i = 0; i < h; ++i) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ki) - 1;
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
              const std::size_t j0 = kj == 0 ? 1 : 0;
              const std::size_t j1 = kj == 2 ? wd - 1 : wd;
              const double* row = in + static_cast<std::size_t>(si) * wd;
              double* orow = out + i * wd;
              for (std::size_t j = j0; j < j1; ++j) orow[j] += kv * row[j + kj - 1];
            }
          }
        }
      }
    }
  }
  return r;
}

// dW[o,c,ki,kj] = sum_{b,i,j} g[b,o,i,j] * x[b,c,i+ki-1,j+kj-1]
inline ForwardResult conv2d_weight_grad_forward(const Node& x, const Node& g) {
  require_rank(x, 4, "conv2d_weight_grad input");
  require_rank(g, 4, "conv2d_weight_grad output grad");
  const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const std::size_t cout = g.shape[1];
  if (g.shape[0] != n || g.shape[2] != h || g.shape[3] != wd) {
    throw ShapeError("conv2d_weight_grad: mismatched " + to_string(x.shape) + " vs " + to_string(g.shape));
  }
  ForwardResult r{{cout, cin, 3, 3}, std::vector<double>(cout * cin * 9, 0.0)};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double* go = &g.value[((b * cout) + o) * h * wd];
      for (std::size_t c = 0; c < cin; ++c) {
        const double* in = &x.value[((b * cin) + c) * h * wd];
        double* k = &r.value[((o * cin) + c) * 9];
        for (std::size_t ki = 0; ki < 3; ++ki) {
          for (std::size_t kj = 0; kj < 3; ++kj) {
            double acc = 0.0;
            for (std::size_t i = 0; i < h; ++i) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ki) - 1;
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
              const std::size_t j0 = kj == 0 ? 1 : 0;
              const std::size_t j1 = kj == 2 ? wd - 1 : wd;
              const double* row = in + static_cast<std::size_t>(si) * wd;
              const double* grow = go + i * wd;
              for (std::size_t j = j0; j < j1; ++j) acc += grow[j] * row[j + kj - 1];
            }
            k[ki * 3 + kj] += acc;
          }
        }
      }
    }
  }
  return r;
}

// V[c,o,ki,kj] = W[o,c,2-ki,2-kj]; conv2d with V is the adjoint of conv2d with W.
inline ForwardResult kernel_flip_forward(const Node& w) {
  require_rank(w, 4, "kernel_flip");
  const std::size_t cout = w.shape[0], cin = w.shape[1];
  ForwardResult r{{cin, cout, 3, 3}, std::vector<double>(w.value.size())};
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t k = 0; k < 9; ++k) r.value[((c * cout) + o) * 9 + k] = w.value[((o * cin) + c) * 9 + (8 - k)];
  return r;
}

inline ForwardResult matmul_forward(const Node& a, const Node& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) {
    throw ShapeError("matmul: " + to_string(a.shape) + " x " + to_string(b.shape));
  }
  ForwardResult r{{m, n}, std::vector<double>(m * n, 0.0)};
  for (std::size_t i = 0; i < m; ++i) {
    double* out = &r.value[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.value[i * k + p];
      const double* brow = &b.value[p * n];
      for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
    }
  }
  return r;
}

inline ForwardResult softmax_forward(const Node& x) {
  require_rank(x, 2, "softmax");
  const std::size_t n = x.shape[0], c = x.shape[1];
  ForwardResult r{x.shape, std::vector<double>(x.value.size())};
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &x.value[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (r.value[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) r.value[i * c + j] /= z;
  }
  return r;
}

inline ForwardResult cross_entropy_forward(const Node& logits, const std::vector<std::size_t>& labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch");
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* row = &logits.value[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[labels[i]];
  }
  return {{}, {total / static_cast<double>(n)}};
}

inline ForwardResult forward(OpKind kind, const std::vector<const Node*>& in, const OpAttrs& at) {
  auto arity = [&](std::size_t k) {
    if (in.size() != k) throw ShapeError(std::string(op_name(kind)) + ": wrong number of inputs");
  };
  switch (kind) {
    case OpKind::leaf:
      throw Error("leaf is not a recordable op");
    case OpKind::add:
      arity(2);
      return binary_map(*in[0], *in[1], [](double a, double b) { return a + b; });
    case OpKind::sub:
      arity(2);
      return binary_map(*in[0], *in[1], [](double a, double b) { return a - b; });
    case OpKind::mul:
      arity(2);
      return binary_map(*in[0], *in[1], [](double a, double b) { return a * b; });
    case OpKind::div:
      arity(2);
      return binary_map(*in[0], *in[1], [](double a, double b) { return a / b; });
    case OpKind::scale: {
      arity(1);
      const double s = at.a;
      return unary_map(*in[0], [s](double v) { return v * s; });
    }
    case OpKind::add_scalar: {
      arity(1);
      const double s = at.a;
      return unary_map(*in[0], [s](double v) { return v + s; });
    }
    case OpKind::matmul:
      arity(2);
      return matmul_forward(*in[0], *in[1]);
    case OpKind::transpose: {
      arity(1);
      require_rank(*in[0], 2, "transpose");
      const std::size_t m = in[0]->shape[0], n = in[0]->shape[1];
      ForwardResult r{{n, m}, std::vector<double>(m * n)};
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) r.value[j * m + i] = in[0]->value[i * n + j];
      return r;
    }
    case OpKind::conv2d:
      arity(2);
      return conv2d_forward(*in[0], *in[1]);
    case OpKind::conv2d_weight_grad:
      arity(2);
      return conv2d_weight_grad_forward(*in[0], *in[1]);
    case OpKind::kernel_flip:
      arity(1);
      return kernel_flip_forward(*in[0]);
    case OpKind::relu:
      arity(1);
      return unary_map(*in[0], [](double v) { return v > 0.0 ? v : 0.0; });
    case OpKind::leaky_relu: {
      arity(1);
      const double s = at.a;
      return unary_map(*in[0], [s](double v) { return v > 0.0 ? v : s * v; });
    }
    case OpKind::tanh:
      arity(1);
      return unary_map(*in[0], [](double v) { return std::tanh(v); });
    case OpKind::sigmoid:
      arity(1);
      return unary_map(*in[0], [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    case OpKind::log:
      arity(1);
      return unary_map(*in[0], [](double v) { return std::log(v); });
    case OpKind::exp:
      arity(1);
      return unary_map(*in[0], [](double v) { return std::exp(v); });
    case OpKind::sin:
      arity(1);
      return unary_map(*in[0], [](double v) { return std::sin(v); });
    case OpKind::cos:
      arity(1);
      return unary_map(*in[0], [](double v) { return std::cos(v); });
    case OpKind::sum_to: {
      arity(1);
      if (!broadcastable_to(at.shape, in[0]->shape)) {
        throw ShapeError("sum_to: cannot reduce " + to_string(in[0]->shape) + " to " + to_string(at.shape));
      }
      ForwardResult r{at.shape, std::vector<double>(numel(at.shape), 0.0)};
      for_each_broadcast(at.shape, in[0]->shape, [&](std::size_t o, std::size_t s) { r.value[s] += in[0]->value[o]; });
      return r;
    }
    case OpKind::broadcast_to: {
      arity(1);
      if (!broadcastable_to(in[0]->shape, at.shape)) {
        throw ShapeError("broadcast_to: cannot expand " + to_string(in[0]->shape) + " to " + to_string(at.shape));
      }
      ForwardResult r{at.shape, std::vector<double>(numel(at.shape))};
      for_each_broadcast(in[0]->shape, at.shape, [&](std::size_t o, std::size_t s) { r.value[o] = in[0]->value[s]; });
      return r;
    }
    case OpKind::reshape:
      arity(1);
      if (numel(at.shape) != in[0]->value.size()) {
        throw ShapeError("reshape: " + to_string(in[0]->shape) + " to " + to_string(at.shape));
      }
      return {at.shape, in[0]->value};
    case OpKind::concat: {
      if (in.empty()) throw ShapeError("concat: no inputs");
      const Shape& s0 = in[0]->shape;
      const std::size_t ax = at.axis;
      if (ax >= s0.size()) throw ShapeError("concat: axis out of range");
      Shape out = s0;
      out[ax] = 0;
      for (const Node* n : in) {
        if (n->shape.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s0.size(); ++d) {
          if (d != ax && n->shape[d] != s0[d]) throw ShapeError("concat: shape mismatch");
        }
        out[ax] += n->shape[ax];
      }
      const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(ax)));
      const std::size_t inner = numel(Shape(s0.begin() + static_cast<std::ptrdiff_t>(ax) + 1, s0.end()));
      ForwardResult r{out, {}};
      r.value.reserve(numel(out));
      for (std::size_t o = 0; o < outer; ++o) {
        for (const Node* n : in) {
          const std::size_t chunk = n->shape[ax] * inner;
          r.value.insert(r.value.end(), n->value.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                         n->value.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk));
        }
      }
      return r;
    }
    case OpKind::slice:
    case OpKind::pad_slice: {
      arity(1);
      const Shape& s = in[0]->shape;
      const std::size_t ax = at.axis;
      if (ax >= s.size()) throw ShapeError(std::string(op_name(kind)) + ": axis out of range");
      const bool is_slice = kind == OpKind::slice;
      const Shape full = is_slice ? s : at.shape;
      if (at.begin > at.end || at.end > full[ax]) throw ShapeError("slice: bounds out of range");
      Shape part = full;
      part[ax] = at.end - at.begin;
      if (!is_slice && part != s) throw ShapeError("pad_slice: input shape mismatch");
      const std::size_t outer = numel(Shape(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(ax)));
      const std::size_t inner = numel(Shape(full.begin() + static_cast<std::ptrdiff_t>(ax) + 1, full.end()));
      ForwardResult r{is_slice ? part : full, std::vector<double>(numel(is_slice ? part : full), 0.0)};
      const std::size_t fchunk = full[ax] * inner, pchunk = part[ax] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < pchunk; ++k) {
          const std::size_t fi = o * fchunk + at.begin * inner + k;
          const std::size_t pi = o * pchunk + k;
          if (is_slice) {
            r.value[pi] = in[0]->value[fi];
          } else {
            r.value[fi] = in[0]->value[pi];
          }
        }
      }
      return r;
    }
    case OpKind::clamp: {
      arity(1);
      const double lo = at.a, hi = at.b;
      return unary_map(*in[0], [lo, hi](double v) { return std::clamp(v, lo, hi); });
    }
    case OpKind::dropout:
      arity(2);
      if (in[0]->shape != in[1]->shape) throw ShapeError("dropout: mask shape mismatch");
      return binary_map(*in[0], *in[1], [](double a, double m) { return a * m; });
    case OpKind::softmax:
      arity(1);
      return softmax_forward(*in[0]);
    case OpKind::softmax_cross_entropy:
      arity(1);
      return cross_entropy_forward(*in[0], *at.labels);
    case OpKind::gather: {
      arity(1);
      const auto& idx = *at.index;
      if (idx.size() != numel(at.shape)) throw ShapeError("gather: index size mismatch");
      ForwardResult r{at.shape, std::vector<double>(idx.size(), 0.0)};
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) r.value[i] = in[0]->value.at(static_cast<std::size_t>(idx[i]));
      }
      return r;
    }
    case OpKind::scatter_add: {
      arity(1);
      const auto& idx = *at.index;
      if (idx.size() != in[0]->value.size()) throw ShapeError("scatter_add: index size mismatch");
      ForwardResult r{at.shape, std::vector<double>(numel(at.shape), 0.0)};
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) r.value.at(static_cast<std::size_t>(idx[i])) += in[0]->value[i];
      }
      return r;
    }
  }
  throw Error("unknown op");
}

}  // namespace detail

/// Applies one primitive and, when any input requires grad (and grad mode is
/// on), appends a node recording everything backward() needs.
inline Tensor record_op(OpKind kind, const std::vector<Tensor>& inputs, OpAttrs attrs = {}) {
  std::vector<const detail::Node*> raw;
  raw.reserve(inputs.size());
  std::shared_ptr<detail::TapeState> tape;
  bool needs_grad = false;
  for (const Tensor& t : inputs) {
    if (!t.defined()) throw Error(std::string(op_name(kind)) + ": undefined input");
    raw.push_back(t.node().get());
    const auto& tp = t.node()->tape;
    if (tp) {
      if (tape && tape != tp) throw Error(std::string(op_name(kind)) + ": inputs live on different tapes");
      tape = tp;
    }
    needs_grad = needs_grad || t.requires_grad();
  }
  const bool checked = checked_mode();
  if (checked) {
    for (const auto* n : raw) detail::check_finite(n->value, "input", kind);
  }
  auto res = detail::forward(kind, raw, attrs);
  if (checked) detail::check_finite(res.value, "output", kind);

  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(res.shape);
  node->value = std::move(res.value);
  if (needs_grad && grad_enabled()) {
    node->tape = tape;
    node->kind = kind;
    node->requires_grad = true;
    node->attrs = std::move(attrs);
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    ++tape->recorded;
  }
  return Tensor(std::move(node));
}

}  // namespace bilevel
