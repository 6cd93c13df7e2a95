#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner: central finite differences and a catalogue of op cases.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "roto/autodiff.hpp"
#include "roto/random.hpp"
#include "roto/tensor.hpp"

namespace oracle {

using roto::Rng;
using roto::Shape;
using roto::Tensor;
using roto::ad::Tape;
using roto::ad::Var;

inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
  return std::sqrt(diff) / scale;
}

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

/// Central differences of f with respect to every entry of every input.
inline std::vector<double> fd_gradient(const ScalarFn& f, std::vector<Tensor> at, double h = 1e-6) {
  std::vector<double> out;
  for (std::size_t t = 0; t < at.size(); ++t)
    for (std::size_t i = 0; i < at[t].size(); ++i) {
      const double x0 = at[t][i];
      at[t][i] = x0 + h;
      const double fp = f(at);
      at[t][i] = x0 - h;
      const double fm = f(at);
      at[t][i] = x0;
      out.push_back((fp - fm) / (2.0 * h));
    }
  return out;
}

inline Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// A differentiable op under test: inputs are leaves, output is any tensor.
struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  std::function<Var(std::span<const Var>)> build;
  double lo = -1.0, hi = 1.0;  // input sampling range
};

inline std::vector<OpCase> op_cases() {
  namespace ad = roto::ad;
  std::vector<OpCase> c;
  c.push_back({"add", {Shape{3, 4}, Shape{3, 4}}, [](auto v) { return ad::add(v[0], v[1]); }});
  c.push_back({"sub", {Shape{3, 4}, Shape{3, 4}}, [](auto v) { return ad::sub(v[0], v[1]); }});
  c.push_back({"mul", {Shape{3, 4}, Shape{3, 4}}, [](auto v) { return ad::mul(v[0], v[1]); }});
  c.push_back({"div", {Shape{5}, Shape{5}}, [](auto v) { return ad::div(v[0], v[1]); }, 0.5, 2.0});
  c.push_back({"scale", {Shape{2, 3}}, [](auto v) { return ad::scale(v[0], -2.5); }});
  c.push_back({"matmul", {Shape{3, 4}, Shape{4, 2}}, [](auto v) { return ad::matmul(v[0], v[1]); }});
  c.push_back({"matmul_ta", {Shape{4, 3}, Shape{4, 2}}, [](auto v) { return ad::matmul(v[0], v[1], true, false); }});
  c.push_back({"matmul_tb", {Shape{3, 4}, Shape{2, 4}}, [](auto v) { return ad::matmul(v[0], v[1], false, true); }});
  c.push_back({"matmul_tab", {Shape{4, 3}, Shape{2, 4}}, [](auto v) { return ad::matmul(v[0], v[1], true, true); }});
  c.push_back({"relu", {Shape{4, 5}}, [](auto v) { return ad::relu(v[0]); }});
  c.push_back({"abs", {Shape{6}}, [](auto v) { return ad::abs(v[0]); }});
  c.push_back({"tanh", {Shape{6}}, [](auto v) { return ad::tanh(v[0]); }});
  c.push_back({"exp", {Shape{6}}, [](auto v) { return ad::exp(v[0]); }});
  c.push_back({"log", {Shape{6}}, [](auto v) { return ad::log(v[0]); }, 0.5, 3.0});
  c.push_back({"sqrt", {Shape{6}}, [](auto v) { return ad::sqrt(v[0]); }, 0.5, 3.0});
  c.push_back({"log_softmax", {Shape{3, 5}}, [](auto v) { return ad::log_softmax(v[0]); }});
  c.push_back({"transpose", {Shape{3, 4}}, [](auto v) { return ad::transpose(v[0]); }});
  c.push_back({"reshape", {Shape{3, 4}}, [](auto v) { return ad::reshape(v[0], Shape{2, 6}); }});
  c.push_back({"sum", {Shape{3, 4}}, [](auto v) { return ad::sum(v[0]); }});
  c.push_back({"mean", {Shape{3, 4}}, [](auto v) { return ad::mean(v[0]); }});
  c.push_back({"row_sum", {Shape{3, 4}}, [](auto v) { return ad::row_sum(v[0]); }});
  c.push_back({"col_sum", {Shape{3, 4}}, [](auto v) { return ad::col_sum(v[0]); }});
  c.push_back({"broadcast_rows", {Shape{4}}, [](auto v) { return ad::broadcast_rows(v[0], 3); }});
  c.push_back({"broadcast_cols", {Shape{3, 1}}, [](auto v) { return ad::broadcast_cols(v[0], 4); }});
  c.push_back({"broadcast_scalar", {Shape{}}, [](auto v) { return ad::broadcast_scalar(v[0], Shape{2, 3}); }});
  c.push_back({"im2col", {Shape{2, 4, 5, 2}}, [](auto v) { return ad::im2col(v[0], 3); }});
  c.push_back({"avg_pool2", {Shape{2, 5, 4, 3}}, [](auto v) { return ad::avg_pool2(v[0]); }});
  c.push_back({"spatial_mean", {Shape{2, 3, 3, 4}}, [](auto v) { return ad::spatial_mean(v[0]); }});
  c.push_back({"conv2d", {Shape{2, 5, 5, 2}, Shape{3, 3, 2, 3}, Shape{3}},
               [](auto v) { return ad::conv2d(v[0], v[1], v[2]); }});
  c.push_back({"dense", {Shape{4, 3}, Shape{3, 2}, Shape{2}}, [](auto v) { return ad::dense(v[0], v[1], v[2]); }});
  c.push_back({"softmax_cross_entropy", {Shape{4, 5}}, [](auto v) {
                 static const std::vector<int> labels{0, 3, 4, 1};
                 return ad::softmax_cross_entropy(v[0], labels);
               }});
  c.push_back({"mse", {Shape{4, 2}}, [](auto v) {
                 return ad::mse(v[0], Tensor(Shape{4, 2}, {0.1, -0.2, 0.3, 0.0, 1.0, -1.0, 0.5, 0.25}));
               }});
  c.push_back({"l1_norm", {Shape{7}}, [](auto v) { return ad::l1_norm(v[0]); }});
  c.push_back({"l2_norm", {Shape{7}}, [](auto v) { return ad::l2_norm(v[0]); }});
  return c;
}

/// Relative error between the tape gradient and central differences of
/// sum(op(inputs) * R) for a random projection R.
inline double op_gradient_error(const OpCase& oc, Rng& rng) {
  std::vector<Tensor> in;
  for (const auto& s : oc.inputs) in.push_back(random_tensor(s, rng, oc.lo, oc.hi));
  Tensor proj;
  {
    Tape t;
    std::vector<Var> v;
    for (const auto& x : in) v.push_back(t.variable(x));
    proj = random_tensor(oc.build(v).shape(), rng);
  }
  auto f = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> v;
    for (const auto& x : xs) v.push_back(t.variable(x));
    return roto::ad::inner(oc.build(v), t.constant(proj)).item();
  };
  Tape t;
  std::vector<Var> v;
  for (const auto& x : in) v.push_back(t.variable(x));
  Var out = roto::ad::inner(oc.build(v), t.constant(proj));
  auto g = roto::ad::grad(out, v);
  std::vector<Tensor> gv = roto::ad::values(g);
  const auto analytic = roto::flatten(gv);
  const auto numeric = fd_gradient(f, in);
  return rel_err(analytic, numeric);
}

}  // namespace oracle
