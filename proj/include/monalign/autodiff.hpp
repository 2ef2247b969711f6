// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "monalign/align.hpp"
#include "monalign/error.hpp"

namespace monalign::ad {

/// Dense row-major array of rank 1 to 3. Tape operations view rank-1 tensors
/// as 1 x n rows and require rank <= 2.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty() || shape_.size() > 3) {
      throw ShapeError("tensor rank must be 1..3, got " +
                       std::to_string(shape_.size()));
    }
    std::size_t n = 1;
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    if (n != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape product " + std::to_string(n));
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return {std::move(shape), std::vector<double>(n, 0.0)};
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data) {
    return {{rows, cols}, std::move(data)};
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return rank() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return rank() == 1 ? shape_[0] : shape_[1]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols() + j];
  }

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSubtract,
  kMultiply,
  kScale,
  kMatMul,
  kTranspose,
  kTanh,
  kSigmoid,
  kColumnSoftmax,
  kConv1d,
  kEmbedding,
  kConcat,
  kSum,
  kMse,
  kAlignmentLoss,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSubtract: return "subtract";
    case Op::kMultiply: return "multiply";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kColumnSoftmax: return "column_softmax";
    case Op::kConv1d: return "conv1d";
    case Op::kEmbedding: return "embedding";
    case Op::kConcat: return "concat";
    case Op::kSum: return "sum";
    case Op::kMse: return "mse";
    case Op::kAlignmentLoss: return "alignment_loss";
  }
  return "unknown";
}

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t index = 0;
};

/// Append-only record of forward operations. Values and gradients live in
/// two flat buffers addressed by per-node offsets, so clearing a tape keeps
/// its capacity for the next example.
class Tape {
 public:
  /// Differentiable input.
  Var leaf(const Tensor& t) { return leaf(t.rows(), t.cols(), t.data()); }
  Var leaf(std::size_t rows, std::size_t cols, std::span<const double> data) {
    return make_leaf(rows, cols, data, true);
  }

  /// Input whose gradient is never needed; backward skips work feeding it.
  Var constant(const Tensor& t) { return constant(t.rows(), t.cols(), t.data()); }
  Var constant(std::size_t rows, std::size_t cols, std::span<const double> data) {
    return make_leaf(rows, cols, data, false);
  }

  std::size_t rows(Var v) const { return node(v).rows; }
  std::size_t cols(Var v) const { return node(v).cols; }
  std::size_t size() const { return nodes_.size(); }

  std::span<const double> value(Var v) const {
    const Node& n = node(v);
    return {values_.data() + n.offset, n.rows * n.cols};
  }
  double scalar(Var v) const { return values_[node(v).offset]; }
  Tensor value_tensor(Var v) const {
    auto s = value(v);
    return Tensor::matrix(rows(v), cols(v), {s.begin(), s.end()});
  }

  /// Gradient from the last backward(); zero for nodes it did not reach.
  std::span<const double> grad(Var v) const {
    const Node& n = node(v);
    if (grads_.size() < n.offset + n.rows * n.cols) {
      throw ShapeError("grad: backward has not been run on this tape");
    }
    return {grads_.data() + n.offset, n.rows * n.cols};
  }
  Tensor grad_tensor(Var v) const {
    auto s = grad(v);
    return Tensor::matrix(rows(v), cols(v), {s.begin(), s.end()});
  }

  void clear() {
    nodes_.clear();
    values_.clear();
    grads_.clear();
    aux_.clear();
  }

  /// Test fixture: scales the upstream gradient of every node of `op` by 1.5
  /// during backward so that gradient checks must fail for it.
  void corrupt_backward(std::optional<Op> op) { corrupted_ = op; }

  /// Accumulates d(root)/d(node) into every node's gradient. Fan-out adds.
  void backward(Var root) {
    const Node& r = node(root);
    if (r.rows != 1 || r.cols != 1) {
      throw ShapeError("backward: root must be scalar, got " +
                       std::to_string(r.rows) + "x" + std::to_string(r.cols));
    }
    grads_.assign(values_.size(), 0.0);
    grads_[r.offset] = 1.0;
    for (std::size_t k = root.index + 1; k-- > 0;) backward_node(nodes_[k]);
  }

  // Recording operations. Free functions below forward to these.
  Var add(Var a, Var b);
  Var subtract(Var a, Var b);
  Var multiply(Var a, Var b);
  Var scale(Var a, double c);
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var column_softmax(Var a);
  Var conv1d(Var x, Var kernels, std::size_t padding);
  Var embedding(Var table, std::span<const int> ids);
  Var concat(std::span<const Var> parts, int axis);
  Var sum(Var a);
  Var mse(Var prediction, Var target);
  Var alignment_loss(Var a, double delta);

 private:
  static constexpr std::uint32_t kNone = 0xffffffffu;

  struct Node {
    Op op;
    std::size_t rows;
    std::size_t cols;
    std::size_t offset;
    std::uint32_t in0;
    std::uint32_t in1;
    double param = 0.0;
    bool requires_grad = false;
    std::size_t aux_offset = 0;
    std::size_t aux_size = 0;
  };

  const Node& node(Var v) const {
    if (v.tape != this || v.index >= nodes_.size()) {
      throw ShapeError("variable does not belong to this tape");
    }
    return nodes_[v.index];
  }

  Var push(Op op, std::size_t rows, std::size_t cols, std::uint32_t in0,
           std::uint32_t in1, double param = 0.0) {
    const std::size_t offset = values_.size();
    values_.resize(offset + rows * cols, 0.0);
    const bool requires_grad = (in0 != kNone && nodes_[in0].requires_grad) ||
                               (in1 != kNone && nodes_[in1].requires_grad);
    nodes_.push_back({op, rows, cols, offset, in0, in1, param, requires_grad});
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var make_leaf(std::size_t rows, std::size_t cols, std::span<const double> data,
                bool requires_grad) {
    if (data.size() != rows * cols) {
      throw ShapeError("leaf: data length does not match " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
    Var v = push(Op::kLeaf, rows, cols, kNone, kNone);
    nodes_[v.index].requires_grad = requires_grad;
    std::copy(data.begin(), data.end(), values_.begin() + nodes_[v.index].offset);
    check_finite(v);
    return v;
  }

  bool needs(std::uint32_t k) const { return nodes_[k].requires_grad; }

  double* val(std::uint32_t k) { return values_.data() + nodes_[k].offset; }
  double* grd(std::uint32_t k) { return grads_.data() + nodes_[k].offset; }

  void check_finite(Var v) const {
    for (double x : value(v)) {
      if (!std::isfinite(x)) {
        throw NumericalError(std::string(op_name(node(v).op)) +
                             " produced a non-finite value");
      }
    }
  }

  [[noreturn]] void shape_error(Op op, Var a, Var b) const {
    throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " +
                     std::to_string(rows(a)) + "x" + std::to_string(cols(a)) +
                     " and " + std::to_string(rows(b)) + "x" +
                     std::to_string(cols(b)));
  }

  void backward_node(const Node& n);

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> grads_;
  std::vector<std::uint32_t> aux_;
  std::optional<Op> corrupted_;
};

inline Var Tape::add(Var a, Var b) {
  const bool same = rows(a) == rows(b) && cols(a) == cols(b);
  const bool row_broadcast = rows(b) == 1 && cols(a) == cols(b);
  if (!same && !row_broadcast) shape_error(Op::kAdd, a, b);
  Var out = push(Op::kAdd, rows(a), cols(a), a.index, b.index);
  const std::size_t r = rows(a), c = cols(a);
  const double* x = val(a.index);
  const double* y = val(b.index);
  double* z = val(out.index);
  for (std::size_t i = 0; i < r; ++i) {
    const double* yr = same ? y + i * c : y;
    for (std::size_t j = 0; j < c; ++j) z[i * c + j] = x[i * c + j] + yr[j];
  }
  check_finite(out);
  return out;
}

inline Var Tape::subtract(Var a, Var b) {
  if (rows(a) != rows(b) || cols(a) != cols(b)) {
    shape_error(Op::kSubtract, a, b);
  }
  Var out = push(Op::kSubtract, rows(a), cols(a), a.index, b.index);
  const double* x = val(a.index);
  const double* y = val(b.index);
  double* z = val(out.index);
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k) z[k] = x[k] - y[k];
  check_finite(out);
  return out;
}

inline Var Tape::multiply(Var a, Var b) {
  if (rows(a) != rows(b) || cols(a) != cols(b)) {
    shape_error(Op::kMultiply, a, b);
  }
  Var out = push(Op::kMultiply, rows(a), cols(a), a.index, b.index);
  const double* x = val(a.index);
  const double* y = val(b.index);
  double* z = val(out.index);
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k) z[k] = x[k] * y[k];
  check_finite(out);
  return out;
}

inline Var Tape::scale(Var a, double c) {
  Var out = push(Op::kScale, rows(a), cols(a), a.index, kNone, c);
  const double* x = val(a.index);
  double* z = val(out.index);
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k) z[k] = c * x[k];
  check_finite(out);
  return out;
}

inline Var Tape::matmul(Var a, Var b) {
  if (cols(a) != rows(b)) shape_error(Op::kMatMul, a, b);
  const std::size_t r = rows(a), inner = cols(a), c = cols(b);
  Var out = push(Op::kMatMul, r, c, a.index, b.index);
  const double* x = val(a.index);
  const double* y = val(b.index);
  double* z = val(out.index);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < inner; ++k) {
      const double xik = x[i * inner + k];
      const double* yk = y + k * c;
      for (std::size_t j = 0; j < c; ++j) z[i * c + j] += xik * yk[j];
    }
  }
  check_finite(out);
  return out;
}

inline Var Tape::transpose(Var a) {
  const std::size_t r = rows(a), c = cols(a);
  Var out = push(Op::kTranspose, c, r, a.index, kNone);
  const double* x = val(a.index);
  double* z = val(out.index);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) z[j * r + i] = x[i * c + j];
  return out;
}

inline Var Tape::tanh(Var a) {
  Var out = push(Op::kTanh, rows(a), cols(a), a.index, kNone);
  const double* x = val(a.index);
  double* z = val(out.index);
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k)
    z[k] = std::tanh(x[k]);
  check_finite(out);
  return out;
}

inline Var Tape::sigmoid(Var a) {
  Var out = push(Op::kSigmoid, rows(a), cols(a), a.index, kNone);
  const double* x = val(a.index);
  double* z = val(out.index);
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k)
    z[k] = 1.0 / (1.0 + std::exp(-x[k]));
  check_finite(out);
  return out;
}

inline Var Tape::column_softmax(Var a) {
  const std::size_t r = rows(a), c = cols(a);
  Var out = push(Op::kColumnSoftmax, r, c, a.index, kNone);
  const double* x = val(a.index);
  double* z = val(out.index);
  for (std::size_t j = 0; j < c; ++j) {
    double peak = x[j];
    for (std::size_t i = 1; i < r; ++i) peak = std::max(peak, x[i * c + j]);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      z[i * c + j] = std::exp(x[i * c + j] - peak);
      total += z[i * c + j];
    }
    for (std::size_t i = 0; i < r; ++i) z[i * c + j] /= total;
  }
  check_finite(out);
  return out;
}

/// x is an N x 1 signal, kernels is filters x width. Output is
/// (N + 2 padding - width + 1) x filters with zero padding, stride 1.
inline Var Tape::conv1d(Var x, Var kernels, std::size_t padding) {
  if (cols(x) != 1) shape_error(Op::kConv1d, x, kernels);
  const std::size_t n = rows(x);
  const std::size_t filters = rows(kernels), width = cols(kernels);
  if (n + 2 * padding < width) shape_error(Op::kConv1d, x, kernels);
  const std::size_t out_len = n + 2 * padding - width + 1;
  Var out = push(Op::kConv1d, out_len, filters, x.index, kernels.index,
                 static_cast<double>(padding));
  const double* s = val(x.index);
  const double* k = val(kernels.index);
  double* z = val(out.index);
  for (std::size_t i = 0; i < out_len; ++i) {
    for (std::size_t t = 0; t < width; ++t) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + t) -
                                 static_cast<std::ptrdiff_t>(padding);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      const double sv = s[src];
      for (std::size_t f = 0; f < filters; ++f)
        z[i * filters + f] += k[f * width + t] * sv;
    }
  }
  check_finite(out);
  return out;
}

inline Var Tape::embedding(Var table, std::span<const int> ids) {
  const std::size_t vocab = rows(table), dim = cols(table);
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) +
                       " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  Var out = push(Op::kEmbedding, ids.size(), dim, table.index, kNone);
  Node& n = nodes_[out.index];
  n.aux_offset = aux_.size();
  n.aux_size = ids.size();
  for (int id : ids) aux_.push_back(static_cast<std::uint32_t>(id));
  const double* t = val(table.index);
  double* z = val(out.index);
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(t + static_cast<std::size_t>(ids[r]) * dim, dim, z + r * dim);
  return out;
}

/// axis 0 stacks rows (equal column counts); axis 1 joins columns.
inline Var Tape::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  std::size_t r = rows(parts[0]), c = cols(parts[0]);
  for (std::size_t p = 1; p < parts.size(); ++p) {
    if (axis == 0) {
      if (cols(parts[p]) != c) shape_error(Op::kConcat, parts[0], parts[p]);
      r += rows(parts[p]);
    } else {
      if (rows(parts[p]) != r) shape_error(Op::kConcat, parts[0], parts[p]);
      c += cols(parts[p]);
    }
  }
  Var out = push(Op::kConcat, r, c, kNone, kNone, static_cast<double>(axis));
  Node& n = nodes_[out.index];
  n.aux_offset = aux_.size();
  n.aux_size = parts.size();
  for (Var p : parts) {
    aux_.push_back(p.index);
    n.requires_grad = n.requires_grad || nodes_[p.index].requires_grad;
  }
  double* z = val(out.index);
  std::size_t at = 0;
  for (Var p : parts) {
    const double* x = val(p.index);
    const std::size_t pr = rows(p), pc = cols(p);
    if (axis == 0) {
      std::copy_n(x, pr * pc, z + at * c);
      at += pr;
    } else {
      for (std::size_t i = 0; i < pr; ++i)
        std::copy_n(x + i * pc, pc, z + i * c + at);
      at += pc;
    }
  }
  return out;
}

inline Var Tape::sum(Var a) {
  Var out = push(Op::kSum, 1, 1, a.index, kNone);
  const double* x = val(a.index);
  double total = 0.0;
  for (std::size_t k = 0, n = rows(a) * cols(a); k < n; ++k) total += x[k];
  *val(out.index) = total;
  check_finite(out);
  return out;
}

inline Var Tape::mse(Var prediction, Var target) {
  if (rows(prediction) != rows(target) || cols(prediction) != cols(target)) {
    shape_error(Op::kMse, prediction, target);
  }
  Var out = push(Op::kMse, 1, 1, prediction.index, target.index);
  const double* p = val(prediction.index);
  const double* t = val(target.index);
  const std::size_t n = rows(prediction) * cols(prediction);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = p[k] - t[k];
    total += d * d;
  }
  *val(out.index) = total / static_cast<double>(n);
  check_finite(out);
  return out;
}

/// Monotonic alignment penalty of an N x M attention matrix. The input must
/// be a valid alignment matrix.
inline Var Tape::alignment_loss(Var a, double delta) {
  const std::size_t n = rows(a), m = cols(a);
  auto s = value(a);
  const AlignmentMatrix checked(n, m, {s.begin(), s.end()});
  const double loss = monalign::alignment_loss(checked, delta);
  Var out = push(Op::kAlignmentLoss, 1, 1, a.index, kNone, delta);
  *val(out.index) = loss;
  return out;
}

inline void Tape::backward_node(const Node& n) {
  if (n.op == Op::kLeaf || !n.requires_grad) return;
  const std::size_t size = n.rows * n.cols;
  const double* g = grads_.data() + n.offset;
  const double* y = values_.data() + n.offset;
  std::vector<double> corrupted_grad;
  if (corrupted_ && *corrupted_ == n.op) {
    corrupted_grad.assign(g, g + size);
    for (double& v : corrupted_grad) v *= 1.5;
    g = corrupted_grad.data();
  }
  const bool need_a = n.in0 != kNone && needs(n.in0);
  const bool need_b = n.in1 != kNone && needs(n.in1);
  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      if (need_a) {
        double* ga = grd(n.in0);
        for (std::size_t k = 0; k < size; ++k) ga[k] += g[k];
      }
      if (need_b) {
        double* gb = grd(n.in1);
        if (nodes_[n.in1].rows == n.rows) {
          for (std::size_t k = 0; k < size; ++k) gb[k] += g[k];
        } else {
          for (std::size_t i = 0; i < n.rows; ++i)
            for (std::size_t j = 0; j < n.cols; ++j) gb[j] += g[i * n.cols + j];
        }
      }
      break;
    }
    case Op::kSubtract: {
      if (need_a) {
        double* ga = grd(n.in0);
        for (std::size_t k = 0; k < size; ++k) ga[k] += g[k];
      }
      if (need_b) {
        double* gb = grd(n.in1);
        for (std::size_t k = 0; k < size; ++k) gb[k] -= g[k];
      }
      break;
    }
    case Op::kMultiply: {
      const double* a = val(n.in0);
      const double* b = val(n.in1);
      if (need_a) {
        double* ga = grd(n.in0);
        for (std::size_t k = 0; k < size; ++k) ga[k] += g[k] * b[k];
      }
      if (need_b) {
        double* gb = grd(n.in1);
        for (std::size_t k = 0; k < size; ++k) gb[k] += g[k] * a[k];
      }
      break;
    }
    case Op::kScale: {
      double* ga = grd(n.in0);
      for (std::size_t k = 0; k < size; ++k) ga[k] += n.param * g[k];
      break;
    }
    case Op::kMatMul: {
      const std::size_t r = n.rows, c = n.cols, inner = nodes_[n.in0].cols;
      const double* a = val(n.in0);
      const double* b = val(n.in1);
      if (need_a) {
        double* ga = grd(n.in0);
        for (std::size_t i = 0; i < r; ++i) {
          const double* gi = g + i * c;
          for (std::size_t k = 0; k < inner; ++k) {
            const double* bk = b + k * c;
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += gi[j] * bk[j];
            ga[i * inner + k] += acc;
          }
        }
      }
      if (need_b) {
        double* gb = grd(n.in1);
        for (std::size_t i = 0; i < r; ++i) {
          const double* gi = g + i * c;
          for (std::size_t k = 0; k < inner; ++k) {
            const double aik = a[i * inner + k];
            double* gbk = gb + k * c;
            for (std::size_t j = 0; j < c; ++j) gbk[j] += aik * gi[j];
          }
        }
      }
      break;
    }
    case Op::kTranspose: {
      double* ga = grd(n.in0);
      // Output is rows x cols; input was cols x rows.
      for (std::size_t i = 0; i < n.rows; ++i)
        for (std::size_t j = 0; j < n.cols; ++j)
          ga[j * n.rows + i] += g[i * n.cols + j];
      break;
    }
    case Op::kTanh: {
      double* ga = grd(n.in0);
      for (std::size_t k = 0; k < size; ++k) ga[k] += g[k] * (1.0 - y[k] * y[k]);
      break;
    }
    case Op::kSigmoid: {
      double* ga = grd(n.in0);
      for (std::size_t k = 0; k < size; ++k) ga[k] += g[k] * y[k] * (1.0 - y[k]);
      break;
    }
    case Op::kColumnSoftmax: {
      double* ga = grd(n.in0);
      for (std::size_t j = 0; j < n.cols; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n.rows; ++i)
          dot += g[i * n.cols + j] * y[i * n.cols + j];
        for (std::size_t i = 0; i < n.rows; ++i) {
          const std::size_t k = i * n.cols + j;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
      break;
    }
    case Op::kConv1d: {
      const std::size_t len = nodes_[n.in0].rows;
      const std::size_t filters = nodes_[n.in1].rows;
      const std::size_t width = nodes_[n.in1].cols;
      const auto padding = static_cast<std::ptrdiff_t>(n.param);
      const double* s = val(n.in0);
      const double* k = val(n.in1);
      double* gs = grd(n.in0);
      double* gk = grd(n.in1);
      for (std::size_t i = 0; i < n.rows; ++i) {
        for (std::size_t t = 0; t < width; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + t) - padding;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          for (std::size_t f = 0; f < filters; ++f) {
            const double go = g[i * filters + f];
            if (need_a) gs[src] += go * k[f * width + t];
            if (need_b) gk[f * width + t] += go * s[src];
          }
        }
      }
      break;
    }
    case Op::kEmbedding: {
      double* gt = grd(n.in0);
      for (std::size_t r = 0; r < n.aux_size; ++r) {
        const std::size_t id = aux_[n.aux_offset + r];
        for (std::size_t d = 0; d < n.cols; ++d)
          gt[id * n.cols + d] += g[r * n.cols + d];
      }
      break;
    }
    case Op::kConcat: {
      const int axis = static_cast<int>(n.param);
      std::size_t at = 0;
      for (std::size_t p = 0; p < n.aux_size; ++p) {
        const std::uint32_t in = aux_[n.aux_offset + p];
        const std::size_t pr = nodes_[in].rows, pc = nodes_[in].cols;
        if (needs(in)) {
          double* gp = grd(in);
          if (axis == 0) {
            for (std::size_t k = 0; k < pr * pc; ++k) gp[k] += g[at * n.cols + k];
          } else {
            for (std::size_t i = 0; i < pr; ++i)
              for (std::size_t j = 0; j < pc; ++j)
                gp[i * pc + j] += g[i * n.cols + at + j];
          }
        }
        at += axis == 0 ? pr : pc;
      }
      break;
    }
    case Op::kSum: {
      double* ga = grd(n.in0);
      const std::size_t len = nodes_[n.in0].rows * nodes_[n.in0].cols;
      for (std::size_t k = 0; k < len; ++k) ga[k] += g[0];
      break;
    }
    case Op::kMse: {
      const std::size_t len = nodes_[n.in0].rows * nodes_[n.in0].cols;
      const double* p = val(n.in0);
      const double* t = val(n.in1);
      const double coeff = 2.0 * g[0] / static_cast<double>(len);
      for (std::size_t k = 0; k < len; ++k) {
        const double d = coeff * (p[k] - t[k]);
        if (need_a) grd(n.in0)[k] += d;
        if (need_b) grd(n.in1)[k] -= d;
      }
      break;
    }
    case Op::kAlignmentLoss: {
      // A zero upstream gradient (lambda = 0) leaves the attention untouched.
      if (g[0] == 0.0) break;
      const Node& in = nodes_[n.in0];
      const auto grad = kernel::alignment_loss_grad(
          {val(n.in0), in.rows * in.cols}, in.rows, in.cols, n.param);
      double* ga = grd(n.in0);
      for (std::size_t k = 0; k < grad.size(); ++k) ga[k] += g[0] * grad[k];
      break;
    }
  }
}

inline Var add(Var a, Var b) { return a.tape->add(a, b); }
inline Var subtract(Var a, Var b) { return a.tape->subtract(a, b); }
inline Var multiply(Var a, Var b) { return a.tape->multiply(a, b); }
inline Var scale(Var a, double c) { return a.tape->scale(a, c); }
inline Var matmul(Var a, Var b) { return a.tape->matmul(a, b); }
inline Var transpose(Var a) { return a.tape->transpose(a); }
inline Var tanh(Var a) { return a.tape->tanh(a); }
inline Var sigmoid(Var a) { return a.tape->sigmoid(a); }
inline Var column_softmax(Var a) { return a.tape->column_softmax(a); }
inline Var conv1d(Var x, Var kernels, std::size_t padding) {
  return x.tape->conv1d(x, kernels, padding);
}
inline Var embedding(Var table, std::span<const int> ids) {
  return table.tape->embedding(table, ids);
}
inline Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  return parts[0].tape->concat(parts, axis);
}
inline Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}
inline Var sum(Var a) { return a.tape->sum(a); }
inline Var mse(Var prediction, Var target) {
  return prediction.tape->mse(prediction, target);
}
inline Var alignment_loss(Var a, double delta) {
  return a.tape->alignment_loss(a, delta);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Scalar function recorded on a tape from a single input leaf.
using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares reverse-mode gradients of `f` at `x` against central
/// differences (f(x + h e_k) - f(x - h e_k)) / 2h. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x,
                                         double step,
                                         std::optional<Op> corrupt = {}) {
  if (!(step > 0.0)) throw ConfigError("finite difference step must be > 0");
  GradCheckResult result;
  {
    Tape tape;
    tape.corrupt_backward(corrupt);
    Var in = tape.leaf(x);
    Var out = f(tape, in);
    tape.backward(out);
    auto g = tape.grad(in);
    result.analytic.assign(g.begin(), g.end());
  }
  Tensor probe = x;
  Tape tape;
  auto eval = [&] {
    tape.clear();
    return tape.scalar(f(tape, tape.leaf(probe)));
  };
  result.numeric.resize(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + step;
    const double up = eval();
    probe[k] = saved - step;
    const double down = eval();
    probe[k] = saved;
    result.numeric[k] = (up - down) / (2.0 * step);
    const double a = result.analytic[k], b = result.numeric[k];
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    result.max_rel_error = std::max(result.max_rel_error, std::abs(a - b) / denom);
  }
  return result;
}

}  // namespace monalign::ad
