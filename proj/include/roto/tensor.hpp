#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "roto/errors.hpp"

namespace roto {

/// Extents of a dense row-major array. Rank 0 is a scalar.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ShapeError("rank exceeds 4");
    for (auto d : dims) dims_[rank_++] = d;
  }
  explicit Shape(std::span<const std::size_t> dims) {
    if (dims.size() > kMaxRank) throw ShapeError("rank exceeds 4");
    for (auto d : dims) dims_[rank_++] = d;
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }
  std::span<const std::size_t> dims() const { return {dims_.data(), rank_}; }

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i)
      if (a.dims_[i] != b.dims_[i]) return false;
    return true;
  }

  std::string str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::uint8_t rank_ = 0;
};

/// Dense 64-bit real array.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<double> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(s, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  Tensor reshaped(Shape s) const {
    if (s.numel() != data_.size()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Concatenate the entries of several tensors into one flat vector.
inline std::vector<double> flatten(std::span<const Tensor> ts) {
  std::vector<double> out;
  std::size_t n = 0;
  for (const auto& t : ts) n += t.size();
  out.reserve(n);
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

/// Inverse of flatten: split `flat` into tensors shaped like `like`.
inline std::vector<Tensor> unflatten(std::span<const double> flat, std::span<const Tensor> like) {
  std::vector<Tensor> out;
  out.reserve(like.size());
  std::size_t off = 0;
  for (const auto& t : like) {
    if (off + t.size() > flat.size()) throw ShapeError("unflatten: vector too short");
    out.emplace_back(t.shape(), std::vector<double>(flat.begin() + off, flat.begin() + off + t.size()));
    off += t.size();
  }
  if (off != flat.size()) throw ShapeError("unflatten: vector too long");
  return out;
}

}  // namespace roto
