// Copyright (c) 2026, The mlora Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape is recorded once (the model graph) and re-executed for every batch:
// forward() binds a Feed of named inputs, evaluates the ancestors of the
// requested node in recording order, and backward() walks the same nodes in
// reverse. Parameters live outside the tape and are referenced by pointer, so
// several tapes (routes through one model) can share them.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mlora/error.hpp"

namespace mlora {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape();
    values_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape();
    if (count(shape_) != values_.size())
      throw ShapeError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(values_.size()) +
                       " values");
  }

  /// Row-major matrix literal: Tensor<double>::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> v;
    std::size_t ncols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != ncols) throw ShapeError("ragged matrix literal");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), ncols}, std::move(v));
  }

  /// 1 x n row vector.
  static Tensor row(std::initializer_list<T> values) { return Tensor({1, values.size()}, std::vector<T>(values)); }

  static Tensor scalar(T v) { return Tensor({1, 1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }

  /// Matrix view: rank-1 tensors are treated as a single row.
  std::size_t rows() const noexcept { return shape_.size() >= 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }
  T* data() noexcept { return values_.data(); }
  const T* data() const noexcept { return values_.data(); }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }
  T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  T item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
  }

  /// Resize to `shape`, reusing capacity; contents are unspecified afterwards.
  void resize(const Shape& shape) {
    shape_ = shape;
    values_.resize(count(shape_));
  }

  void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.values_ == b.values_; }

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  void check_shape() const {
    if (shape_.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto d : shape_)
      if (d == 0) throw ShapeError("tensor shape " + shape_str(shape_) + " has a zero extent");
  }

  Shape shape_;
  std::vector<T> values_;
};

/// A named, externally owned parameter tensor. Tapes hold pointers to these.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

/// Values bound to a tape's named inputs for one forward pass.
template <typename T>
struct Feed {
  std::map<std::string, Tensor<T>, std::less<>> tensors;
  std::map<std::string, std::vector<std::size_t>, std::less<>> indices;
};

enum class OpKind {
  kInput,
  kParam,
  kConst,
  kMatMul,    // a[m,k] . b[k,n]
  kMatMulNT,  // a[m,k] . b[n,k]^T
  kAdd,
  kMul,
  kRelu,
  kSigmoid,
  kSoftmax,
  kConcat,
  kSum,
  kSumLast,
  kMean,
  kGather,
  kScale,
  kSliceCols,
  kBce,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConst: return "const";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kConcat: return "concat";
    case OpKind::kSum: return "sum";
    case OpKind::kSumLast: return "sum_last";
    case OpKind::kMean: return "mean";
    case OpKind::kGather: return "gather";
    case OpKind::kScale: return "scale";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kBce: return "bce";
  }
  return "?";
}

using NodeId = std::size_t;

/// Probabilities are clamped to [kBceClamp, 1 - kBceClamp] inside the BCE op.
inline constexpr double kBceClamp = 1e-7;

template <typename T>
class Tape {
 public:
  struct Node {
    explicit Node(OpKind k) : op(k) {}
    OpKind op;
    std::vector<NodeId> inputs;
    std::string name;  // input / index name, or parameter name
    T scalar{};
    std::size_t start = 0, len = 0;
    Parameter<T>* param = nullptr;
    Tensor<T> constant;
    std::vector<std::size_t> gathered;  // gather: indices used by the last forward
    Tensor<T> value;
    Tensor<T> grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  // ---- recording ---------------------------------------------------------

  NodeId input(std::string name) {
    Node n{OpKind::kInput};
    n.name = std::move(name);
    return push(std::move(n));
  }

  /// Parameters are deduplicated so a parameter used twice accumulates into one gradient.
  NodeId param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    Node n{OpKind::kParam};
    n.name = p.name;
    n.param = &p;
    const NodeId id = push(std::move(n));
    param_nodes_.emplace(&p, id);
    return id;
  }

  NodeId constant(Tensor<T> value) {
    Node n{OpKind::kConst};
    n.constant = std::move(value);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) { return binary(OpKind::kMatMul, a, b); }
  NodeId matmul_nt(NodeId a, NodeId b) { return binary(OpKind::kMatMulNT, a, b); }
  NodeId add(NodeId a, NodeId b) { return binary(OpKind::kAdd, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(OpKind::kMul, a, b); }
  NodeId relu(NodeId a) { return unary(OpKind::kRelu, a); }
  NodeId sigmoid(NodeId a) { return unary(OpKind::kSigmoid, a); }
  NodeId softmax(NodeId a) { return unary(OpKind::kSoftmax, a); }
  NodeId sum(NodeId a) { return unary(OpKind::kSum, a); }
  NodeId sum_last(NodeId a) { return unary(OpKind::kSumLast, a); }
  NodeId mean(NodeId a) { return unary(OpKind::kMean, a); }

  NodeId concat(std::vector<NodeId> parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Node n{OpKind::kConcat};
    n.inputs = std::move(parts);
    return push(std::move(n));
  }

  NodeId scale(NodeId a, T factor) {
    Node n{OpKind::kScale};
    n.inputs = {a};
    n.scalar = factor;
    return push(std::move(n));
  }

  NodeId slice_cols(NodeId a, std::size_t start, std::size_t len) {
    Node n{OpKind::kSliceCols};
    n.inputs = {a};
    n.start = start;
    n.len = len;
    return push(std::move(n));
  }

  /// Rows of `table` selected by the integer indices bound under `index_name`.
  NodeId gather(NodeId table, std::string index_name) {
    Node n{OpKind::kGather};
    n.inputs = {table};
    n.name = std::move(index_name);
    return push(std::move(n));
  }

  /// Mean binary cross-entropy of probabilities `p` against labels `y`.
  NodeId bce(NodeId p, NodeId y) { return binary(OpKind::kBce, p, y); }

  // ---- inspection --------------------------------------------------------

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor<T>& value(NodeId id) const { return operand(nodes_.at(id)); }
  const Tensor<T>& grad(NodeId id) const { return nodes_.at(id).grad; }

  /// Gradient of a parameter from the last backward(), or nullptr when it was
  /// frozen, unreachable, or not part of this tape.
  const Tensor<T>* param_grad(const Parameter<T>& p) const {
    auto it = param_nodes_.find(const_cast<Parameter<T>*>(&p));
    if (it == param_nodes_.end() || !has_grad_.size() || !has_grad_[it->second]) return nullptr;
    return &nodes_[it->second].grad;
  }

  std::vector<Parameter<T>*> parameters() const {
    std::vector<Parameter<T>*> out;
    for (const auto& n : nodes_)
      if (n.op == OpKind::kParam) out.push_back(n.param);
    return out;
  }

  /// Gradients of every trainable parameter reached by the last backward().
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (NodeId id = 0; id < nodes_.size(); ++id)
      if (nodes_[id].op == OpKind::kParam && id < has_grad_.size() && has_grad_[id])
        out.emplace(nodes_[id].name, nodes_[id].grad);
    return out;
  }

  // ---- execution ---------------------------------------------------------

  /// Evaluate `output` and everything it depends on.
  const Tensor<T>& forward(const Feed<T>& feed, NodeId output) {
    const auto& needed = ancestors(output);
    for (NodeId id = 0; id <= output; ++id)
      if (needed[id]) eval(id, feed);
    return operand(nodes_[output]);
  }

  /// Reverse pass from a scalar node. Gradients are only computed along paths
  /// that reach a trainable parameter.
  void backward(NodeId loss, T upstream = T{1}) {
    if (loss >= nodes_.size()) throw ShapeError("backward from unknown node " + std::to_string(loss));
    if (operand(nodes_[loss]).size() != 1)
      throw ShapeError("backward requires a scalar loss; node " + std::to_string(loss) + " has shape " +
                       shape_str(operand(nodes_[loss]).shape()));
    const auto& anc = ancestors(loss);
    has_grad_.assign(nodes_.size(), 0);
    for (NodeId id = 0; id <= loss; ++id) {
      if (!anc[id]) continue;
      const Node& n = nodes_[id];
      if (n.op == OpKind::kParam) {
        has_grad_[id] = n.param->trainable;
      } else if (n.op != OpKind::kInput && n.op != OpKind::kConst) {
        for (NodeId in : n.inputs)
          if (has_grad_[in]) has_grad_[id] = 1;
      }
    }
    for (NodeId id = 0; id <= loss; ++id) {
      if (!has_grad_[id]) continue;
      nodes_[id].grad.resize(operand(nodes_[id]).shape());
      nodes_[id].grad.fill(T{0});
    }
    if (!has_grad_[loss]) return;
    nodes_[loss].grad[0] = upstream;
    for (NodeId id = loss + 1; id-- > 0;)
      if (has_grad_[id]) propagate(id);
  }

 private:
  NodeId push(Node n) {
    for (NodeId in : n.inputs)
      if (in >= nodes_.size()) throw ShapeError("op input refers to unknown node " + std::to_string(in));
    nodes_.push_back(std::move(n));
    ancestor_cache_.clear();
    return nodes_.size() - 1;
  }
  NodeId unary(OpKind k, NodeId a) {
    Node n{k};
    n.inputs = {a};
    return push(std::move(n));
  }
  NodeId binary(OpKind k, NodeId a, NodeId b) {
    Node n{k};
    n.inputs = {a, b};
    return push(std::move(n));
  }

  const std::vector<char>& ancestors(NodeId out) {
    if (out >= nodes_.size()) throw ShapeError("unknown node " + std::to_string(out));
    auto it = ancestor_cache_.find(out);
    if (it != ancestor_cache_.end()) return it->second;
    std::vector<char> mark(nodes_.size(), 0);
    mark[out] = 1;
    for (NodeId id = out + 1; id-- > 0;)
      if (mark[id])
        for (NodeId in : nodes_[id].inputs) mark[in] = 1;
    return ancestor_cache_.emplace(out, std::move(mark)).first->second;
  }

  /// Parameters and constants are read in place rather than copied per forward.
  static const Tensor<T>& operand(const Node& n) {
    if (n.op == OpKind::kParam) return n.param->value;
    if (n.op == OpKind::kConst) return n.constant;
    return n.value;
  }

  [[noreturn]] void fail(NodeId id, const std::string& what) const {
    throw ShapeError("op " + std::to_string(id) + " (" + op_name(nodes_[id].op) + "): " + what);
  }

  void require_matrix(NodeId id, const Tensor<T>& t) const {
    if (t.rank() > 2) fail(id, "operands must have rank <= 2, got " + shape_str(t.shape()));
  }

  static Shape mat_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

  Shape broadcast_shape(NodeId id, const Tensor<T>& a, const Tensor<T>& b) const {
    require_matrix(id, a);
    require_matrix(id, b);
    auto dim = [&](std::size_t x, std::size_t y) {
      if (x == y || y == 1) return x;
      if (x == 1) return y;
      fail(id, "cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
    };
    return mat_shape(dim(a.rows(), b.rows()), dim(a.cols(), b.cols()));
  }

  void eval(NodeId id, const Feed<T>& feed) {
    Node& n = nodes_[id];
    auto in = [&](std::size_t i) -> const Tensor<T>& { return operand(nodes_[n.inputs[i]]); };
    Tensor<T>& out = n.value;
    switch (n.op) {
      case OpKind::kInput: {
        auto it = feed.tensors.find(n.name);
        if (it == feed.tensors.end()) throw ShapeError("unbound input '" + n.name + "'");
        out = it->second;
        break;
      }
      case OpKind::kParam:
      case OpKind::kConst:
        break;
      case OpKind::kMatMul: {
        const auto &a = in(0), &b = in(1);
        require_matrix(id, a);
        require_matrix(id, b);
        if (a.cols() != b.rows()) fail(id, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
        out.resize(mat_shape(m, p));
        out.fill(T{0});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            const T av = a[i * k + t];
            const T* brow = b.data() + t * p;
            T* orow = out.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += av * brow[j];
          }
        break;
      }
      case OpKind::kMatMulNT: {
        const auto &a = in(0), &b = in(1);
        require_matrix(id, a);
        require_matrix(id, b);
        if (a.cols() != b.cols()) fail(id, "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
        const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
        out.resize(mat_shape(m, p));
        for (std::size_t i = 0; i < m; ++i) {
          const T* arow = a.data() + i * k;
          for (std::size_t j = 0; j < p; ++j) {
            const T* brow = b.data() + j * k;
            T acc{0};
            for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
            out[i * p + j] = acc;
          }
        }
        break;
      }
      case OpKind::kAdd:
      case OpKind::kMul: {
        const auto &a = in(0), &b = in(1);
        const Shape s = broadcast_shape(id, a, b);
        const std::size_t r = s[0], c = s[1];
        out.resize(s);
        const bool ar = a.rows() == 1, ac = a.cols() == 1, br = b.rows() == 1, bc = b.cols() == 1;
        const std::size_t ak = a.cols(), bk = b.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const T x = a[(ar ? 0 : i) * ak + (ac ? 0 : j)];
            const T y = b[(br ? 0 : i) * bk + (bc ? 0 : j)];
            out[i * c + j] = n.op == OpKind::kAdd ? x + y : x * y;
          }
        break;
      }
      case OpKind::kRelu: {
        const auto& a = in(0);
        out.resize(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
        break;
      }
      case OpKind::kSigmoid: {
        const auto& a = in(0);
        out.resize(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = sigmoid_value(a[i]);
        break;
      }
      case OpKind::kSoftmax: {
        const auto& a = in(0);
        require_matrix(id, a);
        out.resize(a.shape());
        const std::size_t r = a.rows(), c = a.cols();
        for (std::size_t i = 0; i < r; ++i) {
          const T* src = a.data() + i * c;
          T* dst = out.data() + i * c;
          const T mx = *std::max_element(src, src + c);
          T z{0};
          for (std::size_t j = 0; j < c; ++j) z += dst[j] = std::exp(src[j] - mx);
          for (std::size_t j = 0; j < c; ++j) dst[j] /= z;
        }
        break;
      }
      case OpKind::kConcat: {
        std::size_t r = in(0).rows(), c = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          require_matrix(id, in(p));
          if (in(p).rows() != r) fail(id, "concat row mismatch at part " + std::to_string(p));
          c += in(p).cols();
        }
        out.resize(mat_shape(r, c));
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const auto& part = in(p);
          const std::size_t pc = part.cols();
          for (std::size_t i = 0; i < r; ++i)
            std::copy_n(part.data() + i * pc, pc, out.data() + i * c + off);
          off += pc;
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        const auto& a = in(0);
        T acc{0};
        for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
        if (n.op == OpKind::kMean) acc /= static_cast<T>(a.size());
        out.resize(mat_shape(1, 1));
        out[0] = acc;
        break;
      }
      case OpKind::kSumLast: {
        const auto& a = in(0);
        require_matrix(id, a);
        const std::size_t r = a.rows(), c = a.cols();
        out.resize(mat_shape(r, 1));
        for (std::size_t i = 0; i < r; ++i) {
          T acc{0};
          for (std::size_t j = 0; j < c; ++j) acc += a[i * c + j];
          out[i] = acc;
        }
        break;
      }
      case OpKind::kGather: {
        const auto& table = in(0);
        require_matrix(id, table);
        auto it = feed.indices.find(n.name);
        if (it == feed.indices.end()) throw ShapeError("unbound input '" + n.name + "'");
        const auto& idx = it->second;
        if (idx.empty()) fail(id, "empty index list '" + n.name + "'");
        const std::size_t c = table.cols(), v = table.rows();
        out.resize(mat_shape(idx.size(), c));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          if (idx[i] >= v)
            fail(id, "index " + std::to_string(idx[i]) + " of '" + n.name + "' out of range [0, " +
                         std::to_string(v) + ")");
          std::copy_n(table.data() + idx[i] * c, c, out.data() + i * c);
        }
        n.gathered = idx;
        break;
      }
      case OpKind::kScale: {
        const auto& a = in(0);
        out.resize(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * n.scalar;
        break;
      }
      case OpKind::kSliceCols: {
        const auto& a = in(0);
        require_matrix(id, a);
        if (n.len == 0 || n.start + n.len > a.cols())
          fail(id, "column slice [" + std::to_string(n.start) + ", " + std::to_string(n.start + n.len) +
                       ") of " + shape_str(a.shape()));
        const std::size_t r = a.rows(), c = a.cols();
        out.resize(mat_shape(r, n.len));
        for (std::size_t i = 0; i < r; ++i) std::copy_n(a.data() + i * c + n.start, n.len, out.data() + i * n.len);
        break;
      }
      case OpKind::kBce: {
        const auto &p = in(0), &y = in(1);
        if (p.size() != y.size())
          fail(id, "probabilities " + shape_str(p.shape()) + " vs labels " + shape_str(y.shape()));
        const T lo = static_cast<T>(kBceClamp), hi = T{1} - static_cast<T>(kBceClamp);
        T acc{0};
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T q = std::clamp(p[i], lo, hi);
          acc += y[i] * std::log(q) + (T{1} - y[i]) * std::log(T{1} - q);
        }
        out.resize(mat_shape(1, 1));
        out[0] = -acc / static_cast<T>(p.size());
        break;
      }
    }
  }

  static T sigmoid_value(T x) {
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
  }

  static T broadcast_at(const Tensor<T>& t, std::size_t i, std::size_t j) {
    return t[(t.rows() == 1 ? 0 : i) * t.cols() + (t.cols() == 1 ? 0 : j)];
  }

  /// dst += g * other (other == nullptr means 1), summed over broadcast axes of dst.
  static void accumulate_reduced(Tensor<T>& dst, const Tensor<T>& g, const Tensor<T>* other) {
    const std::size_t r = g.rows(), c = g.cols();
    const bool rr = dst.rows() == 1, cr = dst.cols() == 1;
    const std::size_t dc = dst.cols();
    if (!rr && !cr && !other) {
      for (std::size_t i = 0; i < r * c; ++i) dst[i] += g[i];
      return;
    }
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const T term = other ? g[i * c + j] * broadcast_at(*other, i, j) : g[i * c + j];
        dst[(rr ? 0 : i) * dc + (cr ? 0 : j)] += term;
      }
  }

  void propagate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor<T>& g = n.grad;
    auto val = [&](std::size_t i) -> const Tensor<T>& { return operand(nodes_[n.inputs[i]]); };
    auto wants = [&](std::size_t i) { return has_grad_[n.inputs[i]] != 0; };
    auto dst = [&](std::size_t i) -> Tensor<T>& { return nodes_[n.inputs[i]].grad; };
    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kParam:
      case OpKind::kConst:
        break;
      case OpKind::kMatMul: {
        const auto &a = val(0), &b = val(1);
        const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
        if (wants(0)) {  // dA = dC . B^T
          auto& da = dst(0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              T acc{0};
              for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * b[t * p + j];
              da[i * k + t] += acc;
            }
        }
        if (wants(1)) {  // dB = A^T . dC
          auto& db = dst(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t t = 0; t < k; ++t) {
              const T av = a[i * k + t];
              for (std::size_t j = 0; j < p; ++j) db[t * p + j] += av * g[i * p + j];
            }
        }
        break;
      }
      case OpKind::kMatMulNT: {
        const auto &a = val(0), &b = val(1);
        const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
        if (wants(0)) {  // dA = dC . B
          auto& da = dst(0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const T gv = g[i * p + j];
              const T* brow = b.data() + j * k;
              T* arow = da.data() + i * k;
              for (std::size_t t = 0; t < k; ++t) arow[t] += gv * brow[t];
            }
        }
        if (wants(1)) {  // dB = dC^T . A
          auto& db = dst(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const T gv = g[i * p + j];
              const T* arow = a.data() + i * k;
              T* brow = db.data() + j * k;
              for (std::size_t t = 0; t < k; ++t) brow[t] += gv * arow[t];
            }
        }
        break;
      }
      case OpKind::kAdd: {
        for (std::size_t s = 0; s < 2; ++s)
          if (wants(s)) accumulate_reduced(dst(s), g, nullptr);
        break;
      }
      case OpKind::kMul: {
        if (wants(0)) accumulate_reduced(dst(0), g, &val(1));
        if (wants(1)) accumulate_reduced(dst(1), g, &val(0));
        break;
      }
      case OpKind::kRelu: {
        const auto& a = val(0);
        auto& da = dst(0);
        for (std::size_t i = 0; i < a.size(); ++i)
          if (a[i] > T{0}) da[i] += g[i];
        break;
      }
      case OpKind::kSigmoid: {
        auto& da = dst(0);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = n.value[i];
          da[i] += g[i] * s * (T{1} - s);
        }
        break;
      }
      case OpKind::kSoftmax: {
        auto& da = dst(0);
        const std::size_t r = n.value.rows(), c = n.value.cols();
        for (std::size_t i = 0; i < r; ++i) {
          const T* s = n.value.data() + i * c;
          const T* gr = g.data() + i * c;
          T dot{0};
          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * s[j];
          for (std::size_t j = 0; j < c; ++j) da[i * c + j] += s[j] * (gr[j] - dot);
        }
        break;
      }
      case OpKind::kConcat: {
        const std::size_t r = n.value.rows(), c = n.value.cols();
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const std::size_t pc = val(p).cols();
          if (wants(p)) {
            auto& dp = dst(p);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < pc; ++j) dp[i * pc + j] += g[i * c + off + j];
          }
          off += pc;
        }
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        auto& da = dst(0);
        T gv = g[0];
        if (n.op == OpKind::kMean) gv /= static_cast<T>(da.size());
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += gv;
        break;
      }
      case OpKind::kSumLast: {
        auto& da = dst(0);
        const std::size_t r = da.rows(), c = da.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) da[i * c + j] += g[i];
        break;
      }
      case OpKind::kGather: {
        // Scatter-add into the table rows; repeated indices accumulate.
        auto& dt = dst(0);
        const std::size_t c = dt.cols();
        const std::size_t rows = n.value.rows();
        for (std::size_t i = 0; i < rows; ++i) {
          const std::size_t row = n.gathered[i];
          for (std::size_t j = 0; j < c; ++j) dt[row * c + j] += g[i * c + j];
        }
        break;
      }
      case OpKind::kScale: {
        auto& da = dst(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.scalar;
        break;
      }
      case OpKind::kSliceCols: {
        auto& da = dst(0);
        const std::size_t r = da.rows(), c = da.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < n.len; ++j) da[i * c + n.start + j] += g[i * n.len + j];
        break;
      }
      case OpKind::kBce: {
        if (!wants(0)) break;
        const auto &p = val(0), &y = val(1);
        auto& dp = dst(0);
        const T lo = static_cast<T>(kBceClamp), hi = T{1} - static_cast<T>(kBceClamp);
        const T inv_n = g[0] / static_cast<T>(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] < lo || p[i] > hi) continue;  // clamped: flat
          dp[i] += -inv_n * (y[i] / p[i] - (T{1} - y[i]) / (T{1} - p[i]));
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<Parameter<T>*, NodeId> param_nodes_;
  std::map<NodeId, std::vector<char>> ancestor_cache_;
  std::vector<char> has_grad_;
};

namespace detail {
template <typename T>
void check_eps(T eps) {
  if (!(eps >= T(1e-6) * T(0.999999) && eps <= T(1e-4) * T(1.000001)))
    throw ConfigError("grad_check eps must lie in [1e-6, 1e-4]");
}
template <typename T>
T finite_or_throw(T v) {
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return v;
}
template <typename T>
T rel_error(T analytic, T numeric) {
  return std::abs(analytic - numeric) / std::max(T{1}, std::abs(numeric));
}
}  // namespace detail

/// Compare an analytic gradient against central differences of `f` at `theta`.
/// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <typename T>
T grad_check(const std::function<T(const Tensor<T>&)>& f, const std::function<Tensor<T>(const Tensor<T>&)>& grad,
             Tensor<T> theta, T eps) {
  detail::check_eps(eps);
  detail::finite_or_throw(f(theta));
  const Tensor<T> analytic = grad(theta);
  if (analytic.shape() != theta.shape()) throw ShapeError("grad_check: gradient shape differs from parameter shape");
  T worst{0};
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T orig = theta[i];
    theta[i] = orig + eps;
    const T up = detail::finite_or_throw(f(theta));
    theta[i] = orig - eps;
    const T down = detail::finite_or_throw(f(theta));
    theta[i] = orig;
    worst = std::max(worst, detail::rel_error(analytic[i], (up - down) / (T{2} * eps)));
  }
  return worst;
}

/// Tape flavour: checks every coordinate of every trainable parameter feeding `loss`.
template <typename T>
T grad_check(Tape<T>& tape, NodeId loss, const Feed<T>& feed, T eps) {
  detail::check_eps(eps);
  detail::finite_or_throw(tape.forward(feed, loss).item());
  tape.backward(loss);
  std::vector<std::pair<Parameter<T>*, Tensor<T>>> analytic;
  for (Parameter<T>* p : tape.parameters())
    if (const Tensor<T>* g = tape.param_grad(*p)) analytic.emplace_back(p, *g);
  T worst{0};
  for (auto& [p, g] : analytic) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T orig = p->value[i];
      p->value[i] = orig + eps;
      const T up = detail::finite_or_throw(tape.forward(feed, loss).item());
      p->value[i] = orig - eps;
      const T down = detail::finite_or_throw(tape.forward(feed, loss).item());
      p->value[i] = orig;
      worst = std::max(worst, detail::rel_error(g[i], (up - down) / (T{2} * eps)));
    }
  }
  return worst;
}

}  // namespace mlora
