#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every operation appends a node to a Tape. Backward passes are themselves
// recorded on the same tape with differentiable ops, so a gradient can be
// differentiated again (second-order meta-gradients, Hessian-vector
// products). Node ids are append-only, which keeps the tape topologically
// ordered: a node's inputs always have smaller ids.

#include <Eigen/Core>

#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "roto/errors.hpp"
#include "roto/tensor.hpp"

namespace roto::ad {

enum class OpKind : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  MatMul,
  Relu,
  Abs,
  Tanh,
  Exp,
  Log,
  Sqrt,
  LogSoftmax,
  Linear,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::Relu: return "relu";
    case OpKind::Abs: return "abs";
    case OpKind::Tanh: return "tanh";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Linear: return "linear";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Linear maps. Each knows its adjoint, which is what makes structural ops
// (reshape, reductions, broadcasts, im2col, pooling) differentiable to any
// order without dedicated backward kernels.

class LinearMap {
 public:
  virtual ~LinearMap() = default;
  virtual std::string_view name() const = 0;
  virtual Shape out_shape(const Shape& in) const = 0;
  virtual void apply(const Tensor& in, Tensor& out) const = 0;
  /// Adjoint of this map when applied to inputs of shape `in`.
  virtual std::shared_ptr<const LinearMap> adjoint(const Shape& in) const = 0;

  Tensor operator()(const Tensor& in) const {
    Tensor out(out_shape(in.shape()));
    apply(in, out);
    return out;
  }
};

using MapPtr = std::shared_ptr<const LinearMap>;

namespace maps {

inline void need_rank(const Shape& s, std::size_t r, std::string_view who) {
  if (s.rank() != r)
    throw ShapeError(std::string(who) + ": expected rank " + std::to_string(r) + ", got " + s.str());
}

class Transpose final : public LinearMap {
 public:
  std::string_view name() const override { return "transpose"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 2, name());
    return Shape{in[1], in[0]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t r = in.dim(0), c = in.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<Transpose>(); }
};

class Reshape final : public LinearMap {
 public:
  explicit Reshape(Shape to) : to_(to) {}
  std::string_view name() const override { return "reshape"; }
  Shape out_shape(const Shape& in) const override {
    if (in.numel() != to_.numel()) throw ShapeError("reshape " + in.str() + " -> " + to_.str());
    return to_;
  }
  void apply(const Tensor& in, Tensor& out) const override {
    std::copy(in.data().begin(), in.data().end(), out.data().begin());
  }
  MapPtr adjoint(const Shape& in) const override { return std::make_shared<Reshape>(in); }

 private:
  Shape to_;
};

class BroadcastScalar;

class SumAll final : public LinearMap {
 public:
  std::string_view name() const override { return "sum"; }
  Shape out_shape(const Shape&) const override { return Shape{}; }
  void apply(const Tensor& in, Tensor& out) const override {
    double s = 0.0;
    for (double v : in.data()) s += v;
    out[0] = s;
  }
  MapPtr adjoint(const Shape& in) const override;
};

class BroadcastScalar final : public LinearMap {
 public:
  explicit BroadcastScalar(Shape to) : to_(to) {}
  std::string_view name() const override { return "broadcast_scalar"; }
  Shape out_shape(const Shape& in) const override {
    if (in.numel() != 1) throw ShapeError("broadcast_scalar: input is not a scalar: " + in.str());
    return to_;
  }
  void apply(const Tensor& in, Tensor& out) const override {
    std::fill(out.data().begin(), out.data().end(), in[0]);
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<SumAll>(); }

 private:
  Shape to_;
};

inline MapPtr SumAll::adjoint(const Shape& in) const { return std::make_shared<BroadcastScalar>(in); }

class BroadcastCols;

/// [B, n] -> [B, 1]
class RowSum final : public LinearMap {
 public:
  std::string_view name() const override { return "row_sum"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 2, name());
    return Shape{in[0], 1};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t r = in.dim(0), c = in.dim(1);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += in[i * c + j];
      out[i] = s;
    }
  }
  MapPtr adjoint(const Shape& in) const override;
};

/// [B, 1] -> [B, n]
class BroadcastCols final : public LinearMap {
 public:
  explicit BroadcastCols(std::size_t cols) : cols_(cols) {}
  std::string_view name() const override { return "broadcast_cols"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 2, name());
    if (in[1] != 1) throw ShapeError("broadcast_cols: expected [B,1], got " + in.str());
    return Shape{in[0], cols_};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t r = in.dim(0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out[i * cols_ + j] = in[i];
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<RowSum>(); }

 private:
  std::size_t cols_;
};

inline MapPtr RowSum::adjoint(const Shape& in) const { return std::make_shared<BroadcastCols>(in[1]); }

/// [B, n] -> [n]
class ColSum final : public LinearMap {
 public:
  std::string_view name() const override { return "col_sum"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 2, name());
    return Shape{in[1]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t r = in.dim(0), c = in.dim(1);
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += in[i * c + j];
  }
  MapPtr adjoint(const Shape& in) const override;
};

/// [n] -> [B, n]
class BroadcastRows final : public LinearMap {
 public:
  explicit BroadcastRows(std::size_t rows) : rows_(rows) {}
  std::string_view name() const override { return "broadcast_rows"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 1, name());
    return Shape{rows_, in[0]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t c = in.size();
    for (std::size_t i = 0; i < rows_; ++i)
      std::copy(in.data().begin(), in.data().end(), out.data().begin() + i * c);
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<ColSum>(); }

 private:
  std::size_t rows_;
};

inline MapPtr ColSum::adjoint(const Shape& in) const { return std::make_shared<BroadcastRows>(in[0]); }

/// Unit-stride valid-padding patch extraction over NHWC maps:
/// [B, H, W, C] -> [B*Ho*Wo, k*k*C], columns ordered (row offset, col offset, channel).
class Im2Col final : public LinearMap {
 public:
  explicit Im2Col(std::size_t k) : k_(k) {}
  std::string_view name() const override { return "im2col"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 4, name());
    if (in[1] < k_ || in[2] < k_) throw ShapeError("im2col: kernel larger than map " + in.str());
    return Shape{in[0] * (in[1] - k_ + 1) * (in[2] - k_ + 1), k_ * k_ * in[3]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), C = in.dim(3);
    const std::size_t Ho = H - k_ + 1, Wo = W - k_ + 1, cols = k_ * k_ * C;
    std::size_t row = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j, ++row) {
          double* dst = out.data().data() + row * cols;
          for (std::size_t di = 0; di < k_; ++di) {
            const double* src = in.data().data() + ((b * H + i + di) * W + j) * C;
            std::copy(src, src + k_ * C, dst + di * k_ * C);
          }
        }
  }
  MapPtr adjoint(const Shape& in) const override;

 private:
  std::size_t k_;
};

class Col2Im final : public LinearMap {
 public:
  Col2Im(std::size_t k, Shape image) : k_(k), image_(image) {}
  std::string_view name() const override { return "col2im"; }
  Shape out_shape(const Shape& in) const override {
    const Shape expect = Im2Col(k_).out_shape(image_);
    if (!(in == expect)) throw ShapeError("col2im: expected " + expect.str() + ", got " + in.str());
    return image_;
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = image_[0], H = image_[1], W = image_[2], C = image_[3];
    const std::size_t Ho = H - k_ + 1, Wo = W - k_ + 1, cols = k_ * k_ * C;
    std::fill(out.data().begin(), out.data().end(), 0.0);
    std::size_t row = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j, ++row) {
          const double* src = in.data().data() + row * cols;
          for (std::size_t di = 0; di < k_; ++di) {
            double* dst = out.data().data() + ((b * H + i + di) * W + j) * C;
            for (std::size_t q = 0; q < k_ * C; ++q) dst[q] += src[di * k_ * C + q];
          }
        }
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<Im2Col>(k_); }

 private:
  std::size_t k_;
  Shape image_;
};

inline MapPtr Im2Col::adjoint(const Shape& in) const { return std::make_shared<Col2Im>(k_, in); }

/// Stride-2 2x2 mean pooling over NHWC maps; an odd trailing row/column is dropped.
class AvgPool2 final : public LinearMap {
 public:
  std::string_view name() const override { return "avg_pool2"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 4, name());
    if (in[1] < 2 || in[2] < 2) throw ShapeError("avg_pool2: map too small " + in.str());
    return Shape{in[0], in[1] / 2, in[2] / 2, in[3]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = in.dim(0), H = in.dim(1), W = in.dim(2), C = in.dim(3);
    const std::size_t Ho = H / 2, Wo = W / 2;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j)
          for (std::size_t c = 0; c < C; ++c) {
            auto at = [&](std::size_t y, std::size_t x) { return in[((b * H + y) * W + x) * C + c]; };
            out[((b * Ho + i) * Wo + j) * C + c] =
                0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
          }
  }
  MapPtr adjoint(const Shape& in) const override;
};

class AvgPool2Adjoint final : public LinearMap {
 public:
  explicit AvgPool2Adjoint(Shape image) : image_(image) {}
  std::string_view name() const override { return "avg_pool2_adjoint"; }
  Shape out_shape(const Shape& in) const override {
    const Shape expect = AvgPool2().out_shape(image_);
    if (!(in == expect)) throw ShapeError("avg_pool2_adjoint: expected " + expect.str() + ", got " + in.str());
    return image_;
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = image_[0], H = image_[1], W = image_[2], C = image_[3];
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j)
          for (std::size_t c = 0; c < C; ++c) {
            const double v = 0.25 * in[((b * Ho + i) * Wo + j) * C + c];
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) out[((b * H + 2 * i + dy) * W + 2 * j + dx) * C + c] = v;
          }
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<AvgPool2>(); }

 private:
  Shape image_;
};

inline MapPtr AvgPool2::adjoint(const Shape& in) const { return std::make_shared<AvgPool2Adjoint>(in); }

/// [B, H, W, C] -> [B, C], mean over spatial positions.
class SpatialMean final : public LinearMap {
 public:
  std::string_view name() const override { return "spatial_mean"; }
  Shape out_shape(const Shape& in) const override {
    need_rank(in, 4, name());
    return Shape{in[0], in[3]};
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = in.dim(0), HW = in.dim(1) * in.dim(2), C = in.dim(3);
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < HW; ++p) s += in[(b * HW + p) * C + c];
        out[b * C + c] = s * inv;
      }
  }
  MapPtr adjoint(const Shape& in) const override;
};

class SpatialBroadcast final : public LinearMap {
 public:
  explicit SpatialBroadcast(Shape image) : image_(image) {}
  std::string_view name() const override { return "spatial_broadcast"; }
  Shape out_shape(const Shape& in) const override {
    if (!(in == Shape{image_[0], image_[3]})) throw ShapeError("spatial_broadcast: got " + in.str());
    return image_;
  }
  void apply(const Tensor& in, Tensor& out) const override {
    const std::size_t B = image_[0], HW = image_[1] * image_[2], C = image_[3];
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < C; ++c) out[(b * HW + p) * C + c] = in[b * C + c] * inv;
  }
  MapPtr adjoint(const Shape&) const override { return std::make_shared<SpatialMean>(); }

 private:
  Shape image_;
};

inline MapPtr SpatialMean::adjoint(const Shape& in) const { return std::make_shared<SpatialBroadcast>(in); }

}  // namespace maps

// ---------------------------------------------------------------------------

struct Node {
  OpKind op = OpKind::Constant;
  int a = -1;
  int b = -1;
  double scalar = 0.0;
  std::uint8_t flags = 0;  // matmul: bit0 transpose lhs, bit1 transpose rhs
  bool requires_grad = false;
  Tensor value;
  Tensor aux;  // relu / abs derivative masks
  MapPtr map;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline void same_shape(const Tensor& a, const Tensor& b, std::string_view who) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(who) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

inline Tensor matmul_value(const Tensor& a, const Tensor& b, std::uint8_t flags) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: operands must be rank 2, got " + a.shape().str() + " and " + b.shape().str());
  const bool ta = flags & 1u, tb = flags & 2u;
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t ka = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (ka != kb) throw ShapeError("matmul: inner extents differ: " + a.shape().str() + " x " + b.shape().str());
  Tensor out(Shape{m, n});
  ConstMap A(a.data().data(), a.dim(0), a.dim(1));
  ConstMap B(b.data().data(), b.dim(0), b.dim(1));
  MutMap C(out.data().data(), m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();
  return out;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f, std::string_view who) {
  same_shape(a, b, who);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline Tensor log_softmax_value(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("log_softmax: expected rank 2, got " + x.shape().str());
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] - lse;
  }
  return out;
}

/// Forward evaluation shared by recording and replay.
inline Tensor evaluate(const Node& n, const Tensor* a, const Tensor* b, Tensor* aux) {
  switch (n.op) {
    case OpKind::Leaf:
    case OpKind::Constant:
      return n.value;
    case OpKind::Add: return binary(*a, *b, [](double x, double y) { return x + y; }, "add");
    case OpKind::Sub: return binary(*a, *b, [](double x, double y) { return x - y; }, "sub");
    case OpKind::Mul: return binary(*a, *b, [](double x, double y) { return x * y; }, "mul");
    case OpKind::Div: return binary(*a, *b, [](double x, double y) { return x / y; }, "div");
    case OpKind::Scale: {
      const double c = n.scalar;
      return unary(*a, [c](double x) { return c * x; });
    }
    case OpKind::MatMul: return matmul_value(*a, *b, n.flags);
    case OpKind::Relu:
      *aux = unary(*a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
      return unary(*a, [](double x) { return x > 0.0 ? x : 0.0; });
    case OpKind::Abs:
      *aux = unary(*a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
      return unary(*a, [](double x) { return std::abs(x); });
    case OpKind::Tanh: return unary(*a, [](double x) { return std::tanh(x); });
    case OpKind::Exp: return unary(*a, [](double x) { return std::exp(x); });
    case OpKind::Log: return unary(*a, [](double x) { return std::log(x); });
    case OpKind::Sqrt: return unary(*a, [](double x) { return std::sqrt(x); });
    case OpKind::LogSoftmax: return log_softmax_value(*a);
    case OpKind::Linear: return (*n.map)(*a);
  }
  throw Error("unknown op");
}

}  // namespace detail

/// Append-only record of operations. Single owner; not thread-safe while
/// recording. Nodes live in a deque so references stay valid on append.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var variable(Tensor value) {
    Node n;
    n.op = OpKind::Leaf;
    n.requires_grad = true;
    n.value = std::move(value);
    check_finite(n);
    return push(std::move(n));
  }

  /// Input excluded from differentiation.
  Var constant(Tensor value) {
    Node n;
    n.op = OpKind::Constant;
    n.value = std::move(value);
    check_finite(n);
    return push(std::move(n));
  }

  Var record(OpKind op, Var a, Var b = {}, double scalar = 0.0, MapPtr map = nullptr, std::uint8_t flags = 0) {
    own(a);
    if (b.valid()) own(b);
    Node n;
    n.op = op;
    n.a = a.id;
    n.b = b.valid() ? b.id : -1;
    n.scalar = scalar;
    n.flags = flags;
    n.map = std::move(map);
    n.requires_grad = nodes_[a.id].requires_grad || (b.valid() && nodes_[b.id].requires_grad);
    n.value = detail::evaluate(n, &nodes_[a.id].value, b.valid() ? &nodes_[b.id].value : nullptr, &n.aux);
    check_finite(n);
    return push(std::move(n));
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }
  bool owns(Var v) const { return v.tape == this && v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(); }

  /// Recompute every node with new leaf values (in leaf creation order).
  /// Constants keep their recorded values.
  std::vector<Tensor> replay(std::span<const Tensor> leaves) const {
    std::vector<Tensor> vals;
    vals.reserve(nodes_.size());
    std::size_t next_leaf = 0;
    for (const Node& n : nodes_) {
      if (n.op == OpKind::Leaf) {
        if (next_leaf >= leaves.size()) throw PreconditionError("replay: too few leaf values");
        if (!(leaves[next_leaf].shape() == n.value.shape())) throw ShapeError("replay: leaf shape changed");
        vals.push_back(leaves[next_leaf++]);
        continue;
      }
      if (n.op == OpKind::Constant) {
        vals.push_back(n.value);
        continue;
      }
      Tensor aux;
      vals.push_back(detail::evaluate(n, &vals[n.a], n.b >= 0 ? &vals[n.b] : nullptr, &aux));
    }
    if (next_leaf != leaves.size()) throw PreconditionError("replay: too many leaf values");
    return vals;
  }

  std::size_t leaf_count() const {
    std::size_t k = 0;
    for (const Node& n : nodes_) k += n.op == OpKind::Leaf;
    return k;
  }

 private:
  void own(Var v) const {
    if (!owns(v)) throw PreconditionError("variable does not belong to this tape");
  }
  static void check_finite(const Node& n) {
    if (!n.value.all_finite())
      throw NumericError("non-finite value produced by " + std::string(op_name(n.op)));
  }
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->node(id).value; }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

// ---------------------------------------------------------------------------
// Ops

inline Var add(Var a, Var b) { return a.tape->record(OpKind::Add, a, b); }
inline Var sub(Var a, Var b) { return a.tape->record(OpKind::Sub, a, b); }
inline Var mul(Var a, Var b) { return a.tape->record(OpKind::Mul, a, b); }
inline Var div(Var a, Var b) { return a.tape->record(OpKind::Div, a, b); }
inline Var scale(Var a, double c) { return a.tape->record(OpKind::Scale, a, {}, c); }
inline Var neg(Var a) { return scale(a, -1.0); }
inline Var relu(Var a) { return a.tape->record(OpKind::Relu, a); }
inline Var abs(Var a) { return a.tape->record(OpKind::Abs, a); }
inline Var tanh(Var a) { return a.tape->record(OpKind::Tanh, a); }
inline Var exp(Var a) { return a.tape->record(OpKind::Exp, a); }
inline Var log(Var a) { return a.tape->record(OpKind::Log, a); }
inline Var sqrt(Var a) { return a.tape->record(OpKind::Sqrt, a); }
inline Var log_softmax(Var a) { return a.tape->record(OpKind::LogSoftmax, a); }

/// op(a) * op(b) where op transposes when requested.
inline Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false) {
  const std::uint8_t flags = static_cast<std::uint8_t>((transpose_a ? 1u : 0u) | (transpose_b ? 2u : 0u));
  return a.tape->record(OpKind::MatMul, a, b, 0.0, nullptr, flags);
}

inline Var apply(MapPtr map, Var a) { return a.tape->record(OpKind::Linear, a, {}, 0.0, std::move(map)); }

inline Var transpose(Var a) { return ad::apply(std::make_shared<maps::Transpose>(), a); }
inline Var reshape(Var a, Shape to) { return ad::apply(std::make_shared<maps::Reshape>(to), a); }
inline Var sum(Var a) { return ad::apply(std::make_shared<maps::SumAll>(), a); }
inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }
inline Var row_sum(Var a) { return ad::apply(std::make_shared<maps::RowSum>(), a); }
inline Var col_sum(Var a) { return ad::apply(std::make_shared<maps::ColSum>(), a); }
inline Var broadcast_rows(Var a, std::size_t rows) { return ad::apply(std::make_shared<maps::BroadcastRows>(rows), a); }
inline Var broadcast_cols(Var a, std::size_t cols) { return ad::apply(std::make_shared<maps::BroadcastCols>(cols), a); }
inline Var broadcast_scalar(Var a, Shape to) { return ad::apply(std::make_shared<maps::BroadcastScalar>(to), a); }
inline Var im2col(Var a, std::size_t k) { return ad::apply(std::make_shared<maps::Im2Col>(k), a); }
inline Var avg_pool2(Var a) { return ad::apply(std::make_shared<maps::AvgPool2>(), a); }
inline Var spatial_mean(Var a) { return ad::apply(std::make_shared<maps::SpatialMean>(), a); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }

/// Sum of elementwise products.
inline Var inner(Var a, Var b) { return sum(mul(a, b)); }

inline Var l1_norm(Var a) { return sum(abs(a)); }
inline Var l2_norm(Var a) { return sqrt(inner(a, a)); }

/// x[B, in] * W[in, out] + b[out]
inline Var dense(Var x, Var w, std::optional<Var> bias) {
  Var y = matmul(x, w);
  if (bias) y = add(y, broadcast_rows(*bias, y.shape()[0]));
  return y;
}

/// Unit-stride valid convolution over NHWC input. w has shape [k, k, C, O].
inline Var conv2d(Var x, Var w, std::optional<Var> bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.rank() != 4 || ws.rank() != 4) throw ShapeError("conv2d: expected NHWC input and [k,k,C,O] kernel");
  if (ws[0] != ws[1]) throw ShapeError("conv2d: kernel must be square");
  if (ws[2] != xs[3]) throw ShapeError("conv2d: channel mismatch " + xs.str() + " vs " + ws.str());
  const std::size_t k = ws[0], O = ws[3];
  const std::size_t Ho = xs[1] - k + 1, Wo = xs[2] - k + 1;
  Var cols = im2col(x, k);
  Var y = matmul(cols, reshape(w, Shape{k * k * ws[2], O}));
  if (bias) y = add(y, broadcast_rows(*bias, y.shape()[0]));
  return reshape(y, Shape{xs[0], Ho, Wo, O});
}

/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.rank() != 2 || s[0] != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + s.str() + " vs " + std::to_string(labels.size()) + " labels");
  Tensor onehot(s);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1])
      throw PreconditionError("softmax_cross_entropy: label out of range");
    onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  Var oh = logits.tape->constant(std::move(onehot));
  return scale(inner(log_softmax(logits), oh), -1.0 / static_cast<double>(s[0]));
}

/// Mean squared error against a constant target.
inline Var mse(Var pred, const Tensor& target) {
  if (!(pred.shape() == target.shape()))
    throw ShapeError("mse: prediction " + pred.shape().str() + " vs target " + target.shape().str());
  Var d = sub(pred, pred.tape->constant(target));
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Differentiation

namespace detail {

inline void accumulate(Tape& t, std::vector<int>& adj, int id, Var g) {
  if (id < 0 || !t.node(id).requires_grad) return;
  if (adj[id] < 0) adj[id] = g.id;
  else adj[id] = add(Var{&t, adj[id]}, g).id;
}

inline Var ones_like(Tape& t, const Shape& s) { return t.constant(Tensor(s, 1.0)); }

}  // namespace detail

/// Gradients of a scalar `output` with respect to each node in `wrt`.
/// The returned variables live on the same tape and are themselves
/// differentiable. Nodes that `output` does not depend on get zeros.
inline std::vector<Var> grad(Var output, std::span<const Var> wrt) {
  if (!output.valid()) throw PreconditionError("grad: invalid output");
  Tape& t = *output.tape;
  if (output.value().size() != 1) throw ShapeError("grad: output is not a scalar: " + output.shape().str());
  int lo = output.id;
  for (const Var& w : wrt) {
    if (!t.owns(w)) throw PreconditionError("grad: detached node (not on the output's tape)");
    lo = std::min(lo, w.id);
  }
  std::vector<int> adj(static_cast<std::size_t>(output.id) + 1, -1);
  if (t.node(output.id).requires_grad) adj[output.id] = detail::ones_like(t, output.shape()).id;

  for (int id = output.id; id >= lo; --id) {
    if (adj[id] < 0) continue;
    const Node& n = t.node(id);
    if (!n.requires_grad) continue;
    const Var g{&t, adj[id]};
    const Var y{&t, id};
    const Var A{&t, n.a};
    const Var B{&t, n.b};
    const bool ga = n.a >= 0 && t.node(n.a).requires_grad;
    const bool gb = n.b >= 0 && t.node(n.b).requires_grad;
    switch (n.op) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::Add:
        if (ga) detail::accumulate(t, adj, n.a, g);
        if (gb) detail::accumulate(t, adj, n.b, g);
        break;
      case OpKind::Sub:
        if (ga) detail::accumulate(t, adj, n.a, g);
        if (gb) detail::accumulate(t, adj, n.b, neg(g));
        break;
      case OpKind::Mul:
        if (ga) detail::accumulate(t, adj, n.a, mul(g, B));
        if (gb) detail::accumulate(t, adj, n.b, mul(g, A));
        break;
      case OpKind::Div:
        if (ga) detail::accumulate(t, adj, n.a, div(g, B));
        if (gb) detail::accumulate(t, adj, n.b, neg(div(mul(g, y), B)));
        break;
      case OpKind::Scale:
        detail::accumulate(t, adj, n.a, scale(g, n.scalar));
        break;
      case OpKind::MatMul: {
        const bool ta = n.flags & 1u, tb = n.flags & 2u;
        if (ga) {
          Var d = !ta ? matmul(g, B, false, !tb) : (!tb ? matmul(B, g, false, true) : matmul(B, g, true, true));
          detail::accumulate(t, adj, n.a, d);
        }
        if (gb) {
          Var d = !tb ? (!ta ? matmul(A, g, true, false) : matmul(A, g, false, false))
                      : (!ta ? matmul(g, A, true, false) : matmul(g, A, true, true));
          detail::accumulate(t, adj, n.b, d);
        }
        break;
      }
      case OpKind::Relu:
      case OpKind::Abs:
        detail::accumulate(t, adj, n.a, mul(g, t.constant(n.aux)));
        break;
      case OpKind::Tanh:
        detail::accumulate(t, adj, n.a, sub(g, mul(mul(g, y), y)));
        break;
      case OpKind::Exp:
        detail::accumulate(t, adj, n.a, mul(g, y));
        break;
      case OpKind::Log:
        detail::accumulate(t, adj, n.a, div(g, A));
        break;
      case OpKind::Sqrt:
        detail::accumulate(t, adj, n.a, scale(div(g, y), 0.5));
        break;
      case OpKind::LogSoftmax: {
        const std::size_t cols = y.shape()[1];
        detail::accumulate(t, adj, n.a, sub(g, mul(exp(y), broadcast_cols(row_sum(g), cols))));
        break;
      }
      case OpKind::Linear:
        detail::accumulate(t, adj, n.a, ad::apply(n.map->adjoint(A.shape()), g));
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (adj[w.id] >= 0) out.push_back(Var{&t, adj[w.id]});
    else out.push_back(t.constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

inline std::vector<Var> grad(Var output, std::initializer_list<Var> wrt) {
  return grad(output, std::span<const Var>(wrt.begin(), wrt.size()));
}

inline std::vector<Tensor> values(std::span<const Var> vs) {
  std::vector<Tensor> out;
  out.reserve(vs.size());
  for (const Var& v : vs) out.push_back(v.value());
  return out;
}

/// Hessian-vector product (d^2 loss / d params^2) * v, with v laid out as
/// the concatenation of the parameters' entries.
inline std::vector<double> hvp(Var loss, std::span<const Var> params, std::span<const double> v) {
  std::size_t total = 0;
  for (const Var& p : params) total += p.value().size();
  if (v.size() != total)
    throw ShapeError("hvp: vector has " + std::to_string(v.size()) + " entries, parameters have " +
                     std::to_string(total));
  Tape& t = *loss.tape;
  std::vector<Var> g = grad(loss, params);
  std::optional<Var> dot_gv;
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape s = params[i].shape();
    Tensor vi(s, std::vector<double>(v.begin() + off, v.begin() + off + s.numel()));
    off += s.numel();
    Var term = inner(g[i], t.constant(std::move(vi)));
    dot_gv = dot_gv ? add(*dot_gv, term) : term;
  }
  if (!dot_gv) return {};
  std::vector<Var> hv = grad(*dot_gv, params);
  std::vector<Tensor> vals = values(hv);
  return flatten(vals);
}

}  // namespace roto::ad
