#pragma once

// Minimal reverse-mode automatic differentiation on 64-bit float tensors.
// A Graph is an eagerly-evaluated tape: every builder computes its value
// immediately, so intermediate values (needed e.g. for detached loss
// weights) can be read while the graph is still being assembled.
//
// Supported ops: matmul, add and mul (with suffix/scalar broadcast), exp,
// log, tanh, pow with a constant exponent, sum over one axis, softmax and
// log_softmax over the last axis, index-gather over the last axis, concat.
// backward() runs once from a scalar loss; zero_grad() re-arms it.
// Softmax subtracts the row max; log_softmax is its own primitive so that
// logits with magnitude up to 1e3 stay finite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace convexlab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Tensor {
  Shape shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {
    if (shape_size(shape) != v.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(v.size()) + " values");
    for (double x : v)
      if (!std::isfinite(x)) throw std::invalid_argument("tensor: non-finite value");
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double x) { return Tensor({}, {x}); }

  std::size_t size() const { return v.size(); }
};

enum class Op {
  kLeaf,
  kConst,
  kMatmul,
  kAdd,
  kMul,
  kExp,
  kLog,
  kTanh,
  kPow,
  kSum,
  kSoftmax,
  kLogSoftmax,
  kGather,
  kConcat,
};

struct NodeRef {
  std::size_t idx = static_cast<std::size_t>(-1);
};

class Graph {
 public:
  NodeRef parameter(std::string name, const Tensor& init) {
    Node n;
    n.op = Op::kLeaf;
    n.shape = init.shape;
    n.value = init.v;
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeRef constant(Tensor t) {
    Node n;
    n.op = Op::kConst;
    n.shape = std::move(t.shape);
    n.value = std::move(t.v);
    return push(std::move(n));
  }

  NodeRef constant_scalar(double x) { return constant(Tensor::scalar(x)); }

  NodeRef matmul(NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    if (nb.shape.size() != 2)
      throw std::invalid_argument("matmul: rhs must be rank 2, got " + shape_str(nb.shape));
    const bool vec = na.shape.size() == 1;
    if (!vec && na.shape.size() != 2)
      throw std::invalid_argument("matmul: lhs must be rank 1 or 2, got " + shape_str(na.shape));
    const std::size_t m = vec ? 1 : na.shape[0];
    const std::size_t k = vec ? na.shape[0] : na.shape[1];
    if (nb.shape[0] != k)
      throw std::invalid_argument("matmul: inner dims differ, " + shape_str(na.shape) + " x " +
                                  shape_str(nb.shape));
    Node n;
    n.op = Op::kMatmul;
    n.shape = vec ? Shape{nb.shape[1]} : Shape{m, nb.shape[1]};
    n.inputs = {a.idx, b.idx};
    return push_forward(std::move(n));
  }

  NodeRef add(NodeRef a, NodeRef b) { return binary(Op::kAdd, a, b); }
  NodeRef mul(NodeRef a, NodeRef b) { return binary(Op::kMul, a, b); }

  NodeRef exp(NodeRef a) { return unary(Op::kExp, a); }
  NodeRef log(NodeRef a) { return unary(Op::kLog, a); }
  NodeRef tanh(NodeRef a) { return unary(Op::kTanh, a); }

  NodeRef pow(NodeRef a, double exponent) {
    Node n;
    n.op = Op::kPow;
    n.shape = node(a).shape;
    n.inputs = {a.idx};
    n.exponent = exponent;
    return push_forward(std::move(n));
  }

  NodeRef sum(NodeRef a, std::size_t axis) {
    const Node& na = node(a);
    if (na.shape.empty() || axis >= na.shape.size())
      throw std::invalid_argument("sum: axis " + std::to_string(axis) + " out of range for " +
                                  shape_str(na.shape));
    Node n;
    n.op = Op::kSum;
    n.shape = na.shape;
    n.shape.erase(n.shape.begin() + static_cast<std::ptrdiff_t>(axis));
    n.inputs = {a.idx};
    n.axis = axis;
    return push_forward(std::move(n));
  }

  NodeRef softmax(NodeRef a) { return rowwise(Op::kSoftmax, a); }
  NodeRef log_softmax(NodeRef a) { return rowwise(Op::kLogSoftmax, a); }

  NodeRef gather(NodeRef a, std::vector<std::size_t> indices) {
    const Node& na = node(a);
    if (na.shape.empty())
      throw std::invalid_argument("gather: input must have rank >= 1");
    const std::size_t last = na.shape.back();
    const std::size_t leading = na.value.size() / last;
    if (indices.size() != leading)
      throw std::invalid_argument("gather: expected " + std::to_string(leading) +
                                  " indices, got " + std::to_string(indices.size()));
    for (std::size_t idx : indices)
      if (idx >= last)
        throw std::invalid_argument("gather: index " + std::to_string(idx) +
                                    " out of range for last dim " + std::to_string(last));
    Node n;
    n.op = Op::kGather;
    n.shape = Shape(na.shape.begin(), na.shape.end() - 1);
    n.inputs = {a.idx};
    n.indices = std::move(indices);
    return push_forward(std::move(n));
  }

  NodeRef concat(std::span<const NodeRef> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& first = node(parts[0]).shape;
    if (first.empty() || axis >= first.size())
      throw std::invalid_argument("concat: axis out of range");
    Shape out = first;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape& s = node(parts[i]).shape;
      if (s.size() != first.size())
        throw std::invalid_argument("concat: rank mismatch");
      for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis && s[d] != first[d])
          throw std::invalid_argument("concat: shapes " + shape_str(first) + " and " +
                                      shape_str(s) + " differ off-axis");
      out[axis] += s[axis];
    }
    Node n;
    n.op = Op::kConcat;
    n.shape = std::move(out);
    n.inputs.reserve(parts.size());
    for (NodeRef r : parts) n.inputs.push_back(r.idx);
    n.axis = axis;
    return push_forward(std::move(n));
  }

  NodeRef concat(std::initializer_list<NodeRef> parts, std::size_t axis) {
    return concat(std::span<const NodeRef>(parts.begin(), parts.size()), axis);
  }

  // --- Values and gradients. ----------------------------------------------

  const Shape& shape(NodeRef r) const { return node(r).shape; }
  const std::vector<double>& value(NodeRef r) const { return node(r).value; }

  double scalar_value(NodeRef r) const {
    const Node& n = node(r);
    if (n.value.size() != 1)
      throw std::invalid_argument("scalar_value: node has " + std::to_string(n.value.size()) +
                                  " elements");
    return n.value[0];
  }

  // Mutable access to a leaf's storage (parameter loading, finite
  // differences). Call recompute() afterwards to refresh downstream values.
  std::vector<double>& leaf_value(NodeRef r) {
    Node& n = nodes_.at(r.idx);
    if (n.op != Op::kLeaf)
      throw std::invalid_argument("leaf_value: node is not a parameter leaf");
    return n.value;
  }

  void backward(NodeRef loss) {
    const Node& ln = node(loss);
    if (ln.value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(ln.shape));
    if (backward_done_)
      throw std::logic_error("backward: already run; call zero_grad() first");
    backward_done_ = true;
    for (Node& n : nodes_) n.grad.assign(n.value.size(), 0.0);
    nodes_[loss.idx].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) backprop(i);
  }

  const std::vector<double>& grad(NodeRef r) const {
    if (!backward_done_) throw std::logic_error("grad: backward has not run");
    return node(r).grad;
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad.clear();
    backward_done_ = false;
  }

  // Re-runs every forward from the current leaf/constant values.
  void recompute() {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op != Op::kLeaf && nodes_[i].op != Op::kConst) forward(i);
  }

  std::size_t node_count() const { return nodes_.size(); }

  std::vector<NodeRef> leaves() const {
    std::vector<NodeRef> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::kLeaf) out.push_back(NodeRef{i});
    return out;
  }

  const std::string& leaf_name(NodeRef r) const { return node(r).name; }

 private:
  struct Node {
    Op op = Op::kConst;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    double exponent = 0.0;              // kPow
    std::size_t axis = 0;               // kSum, kConcat
    std::vector<std::size_t> indices;   // kGather
    std::string name;                   // kLeaf
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;

  const Node& node(NodeRef r) const { return nodes_.at(r.idx); }

  NodeRef push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeRef{nodes_.size() - 1};
  }

  NodeRef push_forward(Node n) {
    NodeRef r = push(std::move(n));
    forward(r.idx);
    return r;
  }

  NodeRef unary(Op op, NodeRef a) {
    Node n;
    n.op = op;
    n.shape = node(a).shape;
    n.inputs = {a.idx};
    return push_forward(std::move(n));
  }

  NodeRef binary(Op op, NodeRef a, NodeRef b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    check_broadcast(na.shape, nb.shape, op == Op::kAdd ? "add" : "mul");
    Node n;
    n.op = op;
    n.shape = na.value.size() >= nb.value.size() ? na.shape : nb.shape;
    n.inputs = {a.idx, b.idx};
    return push_forward(std::move(n));
  }

  NodeRef rowwise(Op op, NodeRef a) {
    const Node& na = node(a);
    if (na.shape.empty())
      throw std::invalid_argument("softmax: input must have rank >= 1");
    Node n;
    n.op = op;
    n.shape = na.shape;
    n.inputs = {a.idx};
    return push_forward(std::move(n));
  }

  // Shapes must be identical, or one operand is a scalar or a strict suffix
  // of the other (broadcast over the leading dims).
  static void check_broadcast(const Shape& a, const Shape& b, const char* what) {
    if (a == b) return;
    const Shape& big = shape_size(a) >= shape_size(b) ? a : b;
    const Shape& small = shape_size(a) >= shape_size(b) ? b : a;
    if (shape_size(small) == 1) return;
    if (small.size() >= big.size())
      throw std::invalid_argument(std::string(what) + ": shapes " + shape_str(a) + " and " +
                                  shape_str(b) + " do not broadcast");
    for (std::size_t d = 0; d < small.size(); ++d)
      if (small[d] != big[big.size() - small.size() + d])
        throw std::invalid_argument(std::string(what) + ": shapes " + shape_str(a) + " and " +
                                    shape_str(b) + " do not broadcast");
  }

  void forward(std::size_t i) {
    Node& n = nodes_[i];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        return;
      case Op::kMatmul: {
        const Node& a = nodes_[n.inputs[0]];
        const Node& b = nodes_[n.inputs[1]];
        const bool vec = a.shape.size() == 1;
        const std::size_t m = vec ? 1 : a.shape[0];
        const std::size_t k = b.shape[0];
        const std::size_t c = b.shape[1];
        n.value.assign(m * c, 0.0);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t t = 0; t < k; ++t) {
            const double av = a.value[r * k + t];
            if (av == 0.0) continue;
            const double* brow = &b.value[t * c];
            double* orow = &n.value[r * c];
            for (std::size_t col = 0; col < c; ++col) orow[col] += av * brow[col];
          }
        return;
      }
      case Op::kAdd:
      case Op::kMul: {
        const Node& a = nodes_[n.inputs[0]];
        const Node& b = nodes_[n.inputs[1]];
        const bool a_big = a.value.size() >= b.value.size();
        const std::vector<double>& big = a_big ? a.value : b.value;
        const std::vector<double>& small = a_big ? b.value : a.value;
        const std::size_t bs = small.size();
        n.value.resize(big.size());
        if (n.op == Op::kAdd) {
          for (std::size_t f = 0; f < big.size(); ++f) n.value[f] = big[f] + small[f % bs];
        } else {
          for (std::size_t f = 0; f < big.size(); ++f) n.value[f] = big[f] * small[f % bs];
        }
        return;
      }
      case Op::kExp: {
        const Node& a = nodes_[n.inputs[0]];
        n.value.resize(a.value.size());
        for (std::size_t f = 0; f < a.value.size(); ++f) n.value[f] = std::exp(a.value[f]);
        return;
      }
      case Op::kLog: {
        const Node& a = nodes_[n.inputs[0]];
        n.value.resize(a.value.size());
        for (std::size_t f = 0; f < a.value.size(); ++f) {
          if (!(a.value[f] > 0.0))
            throw std::domain_error("log: input must be positive");
          n.value[f] = std::log(a.value[f]);
        }
        return;
      }
      case Op::kTanh: {
        const Node& a = nodes_[n.inputs[0]];
        n.value.resize(a.value.size());
        for (std::size_t f = 0; f < a.value.size(); ++f) n.value[f] = std::tanh(a.value[f]);
        return;
      }
      case Op::kPow: {
        const Node& a = nodes_[n.inputs[0]];
        n.value.resize(a.value.size());
        for (std::size_t f = 0; f < a.value.size(); ++f) {
          const double x = a.value[f];
          if (x < 0.0 || (x == 0.0 && n.exponent < 1.0))
            throw std::domain_error("pow: base must be positive (or zero with exponent >= 1)");
          n.value[f] = std::pow(x, n.exponent);
        }
        return;
      }
      case Op::kSum: {
        const Node& a = nodes_[n.inputs[0]];
        const auto [outer, mid, inner] = split_axis(a.shape, n.axis);
        n.value.assign(outer * inner, 0.0);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t in = 0; in < inner; ++in)
              n.value[o * inner + in] += a.value[(o * mid + m) * inner + in];
        return;
      }
      case Op::kSoftmax:
      case Op::kLogSoftmax: {
        const Node& a = nodes_[n.inputs[0]];
        const std::size_t last = a.shape.back();
        const std::size_t rows = a.value.size() / last;
        n.value.resize(a.value.size());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = &a.value[r * last];
          double* y = &n.value[r * last];
          double mx = x[0];
          for (std::size_t j = 1; j < last; ++j) mx = std::max(mx, x[j]);
          double z = 0.0;
          for (std::size_t j = 0; j < last; ++j) z += std::exp(x[j] - mx);
          if (n.op == Op::kSoftmax) {
            for (std::size_t j = 0; j < last; ++j) y[j] = std::exp(x[j] - mx) / z;
          } else {
            const double lz = std::log(z);
            for (std::size_t j = 0; j < last; ++j) y[j] = x[j] - mx - lz;
          }
        }
        return;
      }
      case Op::kGather: {
        const Node& a = nodes_[n.inputs[0]];
        const std::size_t last = a.shape.back();
        n.value.resize(n.indices.size());
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          n.value[r] = a.value[r * last + n.indices[r]];
        return;
      }
      case Op::kConcat: {
        const auto [outer, mid, inner] = split_axis(n.shape, n.axis);
        (void)mid;
        n.value.resize(shape_size(n.shape));
        std::size_t offset = 0;  // running offset along the concat axis
        for (std::size_t part = 0; part < n.inputs.size(); ++part) {
          const Node& a = nodes_[n.inputs[part]];
          const std::size_t pm = a.shape[n.axis];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < pm; ++m)
              for (std::size_t in = 0; in < inner; ++in)
                n.value[(o * n.shape[n.axis] + offset + m) * inner + in] =
                    a.value[(o * pm + m) * inner + in];
          offset += pm;
        }
        return;
      }
    }
  }

  void backprop(std::size_t i) {
    Node& n = nodes_[i];
    bool any = false;
    for (double gv : n.grad)
      if (gv != 0.0) {
        any = true;
        break;
      }
    if (!any) return;
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConst:
        return;
      case Op::kMatmul: {
        Node& a = nodes_[n.inputs[0]];
        Node& b = nodes_[n.inputs[1]];
        const bool vec = a.shape.size() == 1;
        const std::size_t m = vec ? 1 : a.shape[0];
        const std::size_t k = b.shape[0];
        const std::size_t c = b.shape[1];
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t t = 0; t < k; ++t) {
            double acc = 0.0;
            const double* grow = &n.grad[r * c];
            const double* brow = &b.value[t * c];
            for (std::size_t col = 0; col < c; ++col) acc += grow[col] * brow[col];
            a.grad[r * k + t] += acc;
          }
        for (std::size_t t = 0; t < k; ++t)
          for (std::size_t col = 0; col < c; ++col) {
            double acc = 0.0;
            for (std::size_t r = 0; r < m; ++r) acc += a.value[r * k + t] * n.grad[r * c + col];
            b.grad[t * c + col] += acc;
          }
        return;
      }
      case Op::kAdd:
      case Op::kMul: {
        Node& a = nodes_[n.inputs[0]];
        Node& b = nodes_[n.inputs[1]];
        const bool a_big = a.value.size() >= b.value.size();
        Node& big = a_big ? a : b;
        Node& small = a_big ? b : a;
        const std::size_t bs = small.value.size();
        if (n.op == Op::kAdd) {
          for (std::size_t f = 0; f < n.grad.size(); ++f) {
            big.grad[f] += n.grad[f];
            small.grad[f % bs] += n.grad[f];
          }
        } else {
          for (std::size_t f = 0; f < n.grad.size(); ++f) {
            big.grad[f] += n.grad[f] * small.value[f % bs];
            small.grad[f % bs] += n.grad[f] * big.value[f];
          }
        }
        return;
      }
      case Op::kExp: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t f = 0; f < n.grad.size(); ++f) a.grad[f] += n.grad[f] * n.value[f];
        return;
      }
      case Op::kLog: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t f = 0; f < n.grad.size(); ++f) a.grad[f] += n.grad[f] / a.value[f];
        return;
      }
      case Op::kTanh: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t f = 0; f < n.grad.size(); ++f)
          a.grad[f] += n.grad[f] * (1.0 - n.value[f] * n.value[f]);
        return;
      }
      case Op::kPow: {
        Node& a = nodes_[n.inputs[0]];
        for (std::size_t f = 0; f < n.grad.size(); ++f) {
          const double x = a.value[f];
          double d;
          if (n.exponent == 1.0) {
            d = 1.0;
          } else if (x == 0.0) {
            d = 0.0;  // exponent > 1 here; derivative limit is 0
          } else {
            d = n.exponent * std::pow(x, n.exponent - 1.0);
          }
          a.grad[f] += n.grad[f] * d;
        }
        return;
      }
      case Op::kSum: {
        Node& a = nodes_[n.inputs[0]];
        const auto [outer, mid, inner] = split_axis(a.shape, n.axis);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t in = 0; in < inner; ++in)
              a.grad[(o * mid + m) * inner + in] += n.grad[o * inner + in];
        return;
      }
      case Op::kSoftmax: {
        Node& a = nodes_[n.inputs[0]];
        const std::size_t last = a.shape.back();
        const std::size_t rows = a.value.size() / last;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* s = &n.value[r * last];
          const double* gout = &n.grad[r * last];
          double dot = 0.0;
          for (std::size_t j = 0; j < last; ++j) dot += gout[j] * s[j];
          for (std::size_t j = 0; j < last; ++j)
            a.grad[r * last + j] += s[j] * (gout[j] - dot);
        }
        return;
      }
      case Op::kLogSoftmax: {
        Node& a = nodes_[n.inputs[0]];
        const std::size_t last = a.shape.back();
        const std::size_t rows = a.value.size() / last;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = &n.value[r * last];
          const double* gout = &n.grad[r * last];
          double gsum = 0.0;
          for (std::size_t j = 0; j < last; ++j) gsum += gout[j];
          for (std::size_t j = 0; j < last; ++j)
            a.grad[r * last + j] += gout[j] - std::exp(y[j]) * gsum;
        }
        return;
      }
      case Op::kGather: {
        Node& a = nodes_[n.inputs[0]];
        const std::size_t last = a.shape.back();
        for (std::size_t r = 0; r < n.indices.size(); ++r)
          a.grad[r * last + n.indices[r]] += n.grad[r];
        return;
      }
      case Op::kConcat: {
        const auto [outer, mid, inner] = split_axis(n.shape, n.axis);
        (void)mid;
        std::size_t offset = 0;
        for (std::size_t part = 0; part < n.inputs.size(); ++part) {
          Node& a = nodes_[n.inputs[part]];
          const std::size_t pm = a.shape[n.axis];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < pm; ++m)
              for (std::size_t in = 0; in < inner; ++in)
                a.grad[(o * pm + m) * inner + in] +=
                    n.grad[(o * n.shape[n.axis] + offset + m) * inner + in];
          offset += pm;
        }
        return;
      }
    }
  }

  static std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                      std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    return {outer, s[axis], inner};
  }
};

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  double eps = 0.0;
  double tol = 0.0;
  bool pass = false;
};

// Central-difference check of every parameter gradient of a scalar loss.
// rel_err = |a - b| / max(1e-8, |a|, |b|); passes iff max rel_err < tol.
inline FiniteDiffReport finite_diff_check(Graph& g, NodeRef loss, double eps, double tol) {
  if (!(eps >= 1e-6 && eps <= 1e-3))
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-6, 1e-3]");
  if (!(tol > 0.0)) throw std::invalid_argument("finite_diff_check: tol must be positive");

  g.zero_grad();
  g.backward(loss);

  FiniteDiffReport rep;
  rep.eps = eps;
  rep.tol = tol;
  for (NodeRef leaf : g.leaves()) {
    const std::vector<double> analytic = g.grad(leaf);
    std::vector<double>& x = g.leaf_value(leaf);
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double saved = x[c];
      x[c] = saved + eps;
      g.recompute();
      const double up = g.scalar_value(loss);
      x[c] = saved - eps;
      g.recompute();
      const double down = g.scalar_value(loss);
      x[c] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[c];
      const double rel =
          std::abs(a - numeric) / std::max({1e-8, std::abs(a), std::abs(numeric)});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = g.leaf_name(leaf);
        rep.worst_coord = c;
        rep.analytic_at_worst = a;
        rep.numeric_at_worst = numeric;
      }
    }
  }
  g.recompute();
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

}  // namespace convexlab::ad
