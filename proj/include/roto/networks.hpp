#pragma once

// Encoder f_theta: R^d -> R^m and classifier head c_phi: R^m -> R^n.
//
// Parameters are a flat list of tensors: encoder tensors first (weight, then
// bias when present, per layer), followed by the head's weight and bias.
// Conv layers use NHWC layout with kernels shaped [k, k, C_in, C_out].

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roto/autodiff.hpp"
#include "roto/errors.hpp"
#include "roto/isi.hpp"
#include "roto/random.hpp"
#include "roto/tensor.hpp"

namespace roto {

/// Inputs plus either class labels (classification) or real targets (regression).
struct LabeledSet {
  Tensor x;
  std::vector<int> labels;
  std::vector<double> targets;

  std::size_t size() const { return x.rank() == 0 ? 0 : x.dim(0); }
  bool regression() const { return labels.empty() && !targets.empty(); }
};

}  // namespace roto

namespace roto::nn {

using ad::Tape;
using ad::Var;

enum class LayerKind { Dense, Conv };
enum class Activation { None, Relu, Tanh };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 3;
  Activation act = Activation::Relu;
  bool bias = true;
  bool pool = false;  // stride-2 mean pooling after activation (conv only)
};

struct Architecture {
  std::string name = "custom";
  Shape input;  // per example: {d} for dense encoders, {H, W, C} for conv
  std::vector<LayerSpec> encoder;
  bool global_pool = false;  // conv encoders: spatial mean to [B, C]
  std::size_t outputs = 1;
  bool head_bias = true;

  bool is_conv() const { return !encoder.empty() && encoder.front().kind == LayerKind::Conv; }

  /// Feature width m.
  std::size_t feature_dim() const {
    if (encoder.empty()) return input.numel();
    if (!is_conv()) return encoder.back().out;
    Shape s = conv_output_shape(encoder.size());
    return global_pool ? s[2] : s.numel();
  }

  /// Per-example NHWC extent after the first `layers` conv layers.
  Shape conv_output_shape(std::size_t layers) const {
    std::size_t H = input[0], W = input[1], C = input[2];
    for (std::size_t i = 0; i < layers; ++i) {
      const auto& l = encoder[i];
      if (H < l.kernel || W < l.kernel) throw ShapeError("architecture: map too small for conv layer " + std::to_string(i));
      H = H - l.kernel + 1;
      W = W - l.kernel + 1;
      C = l.out;
      if (l.pool) {
        H /= 2;
        W /= 2;
      }
    }
    return Shape{H, W, C};
  }

  std::size_t encoder_tensor_count() const {
    std::size_t n = 0;
    for (const auto& l : encoder) n += l.bias ? 2 : 1;
    return n;
  }

  std::vector<Shape> param_shapes() const {
    std::vector<Shape> s;
    for (const auto& l : encoder) {
      if (l.kind == LayerKind::Dense) s.push_back(Shape{l.in, l.out});
      else s.push_back(Shape{l.kernel, l.kernel, l.in, l.out});
      if (l.bias) s.push_back(Shape{l.out});
    }
    s.push_back(Shape{feature_dim(), outputs});
    if (head_bias) s.push_back(Shape{outputs});
    return s;
  }

  void validate() const {
    if (encoder.empty()) {
      if (input.rank() != 1) throw ShapeError("architecture: identity encoder needs flat inputs");
    } else if (is_conv()) {
      if (input.rank() != 3) throw ShapeError("architecture: conv encoder needs [H,W,C] inputs");
      std::size_t c = input[2];
      for (const auto& l : encoder) {
        if (l.kind != LayerKind::Conv) throw ShapeError("architecture: mixed dense/conv encoders are not supported");
        if (l.in != c) throw ShapeError("architecture: conv channel mismatch");
        c = l.out;
      }
      (void)conv_output_shape(encoder.size());
    } else {
      if (input.rank() != 1) throw ShapeError("architecture: dense encoder needs flat inputs");
      std::size_t w = input[0];
      for (const auto& l : encoder) {
        if (l.kind != LayerKind::Dense) throw ShapeError("architecture: mixed dense/conv encoders are not supported");
        if (l.in != w) throw ShapeError("architecture: dense width mismatch");
        w = l.out;
      }
    }
    if (outputs < 1) throw ShapeError("architecture: head needs at least one output");
  }
};

/// Two 64-wide ReLU dense layers.
inline Architecture mlp_small(std::size_t input_dim, std::size_t outputs) {
  Architecture a;
  a.name = "mlp-small";
  a.input = Shape{input_dim};
  a.encoder = {LayerSpec{LayerKind::Dense, input_dim, 64, 0, Activation::Relu, true, false},
               LayerSpec{LayerKind::Dense, 64, 64, 0, Activation::Relu, true, false}};
  a.outputs = outputs;
  return a;
}

/// Three 3x3 conv layers with 16 channels for 16x16 single-channel images.
/// 16 -> conv 14 -> pool 7 -> conv 5 -> conv 3 -> global mean; m = 16.
inline Architecture conv_tiny(std::size_t outputs, std::size_t side = 16, std::size_t channels = 1) {
  Architecture a;
  a.name = "conv-tiny";
  a.input = Shape{side, side, channels};
  a.encoder = {LayerSpec{LayerKind::Conv, channels, 16, 3, Activation::Relu, true, true},
               LayerSpec{LayerKind::Conv, 16, 16, 3, Activation::Relu, true, false},
               LayerSpec{LayerKind::Conv, 16, 16, 3, Activation::Relu, true, false}};
  a.global_pool = true;
  a.outputs = outputs;
  return a;
}

struct ModelParams {
  Architecture arch;
  std::vector<Tensor> tensors;

  std::size_t encoder_tensors() const { return arch.encoder_tensor_count(); }
  std::span<const Tensor> encoder() const { return {tensors.data(), encoder_tensors()}; }
  std::span<const Tensor> head() const {
    return {tensors.data() + encoder_tensors(), tensors.size() - encoder_tensors()};
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  /// He-normal weights for ReLU layers, 1/fan_in variance otherwise; zero biases.
  static ModelParams init(const Architecture& arch, Rng& rng) {
    arch.validate();
    ModelParams p;
    p.arch = arch;
    auto fill = [&](Shape s, double fan_in, bool relu) {
      Tensor t(s);
      const double sd = std::sqrt((relu ? 2.0 : 1.0) / fan_in);
      for (auto& v : t.data()) v = rng.normal(0.0, sd);
      return t;
    };
    for (const auto& l : arch.encoder) {
      const bool relu = l.act == Activation::Relu;
      if (l.kind == LayerKind::Dense) p.tensors.push_back(fill(Shape{l.in, l.out}, static_cast<double>(l.in), relu));
      else p.tensors.push_back(fill(Shape{l.kernel, l.kernel, l.in, l.out}, static_cast<double>(l.kernel * l.kernel * l.in), relu));
      if (l.bias) p.tensors.emplace_back(Shape{l.out}, 0.0);
    }
    p.tensors.push_back(fill(Shape{arch.feature_dim(), arch.outputs}, static_cast<double>(arch.feature_dim()), false));
    if (arch.head_bias) p.tensors.emplace_back(Shape{arch.outputs}, 0.0);
    return p;
  }

  static ModelParams zeros(const Architecture& arch) {
    arch.validate();
    ModelParams p;
    p.arch = arch;
    for (const auto& s : arch.param_shapes()) p.tensors.emplace_back(s, 0.0);
    return p;
  }
};

/// ISI attachment for a forward pass.
struct IsiHook {
  const isi::ISIConfig* cfg = nullptr;
  Rng* rng = nullptr;
  bool training = false;

  bool active_for(std::size_t layer) const {
    if (cfg == nullptr || !cfg->enabled || !training) return false;
    for (auto l : cfg->hooked_layers)
      if (l == layer) return true;
    return false;
  }
};

struct ForwardTrace {
  std::vector<Var> activations;  // encoder layer outputs, post activation/mask/pool
  Var features;                  // z, [B, m]
  std::optional<Var> rotated;    // z gamma^T when a rotation was applied
  Var logits;
  std::vector<Tensor> isi_masks;  // one per hooked layer that fired
};

inline Var activate(Var x, Activation a) {
  switch (a) {
    case Activation::None: return x;
    case Activation::Relu: return ad::relu(x);
    case Activation::Tanh: return ad::tanh(x);
  }
  return x;
}

/// Encoder forward pass. `theta` holds the encoder tensors in layout order.
inline ForwardTrace encoder_forward(const Architecture& arch, std::span<const Var> theta, Var inputs,
                                    const IsiHook* hook = nullptr) {
  if (theta.size() != arch.encoder_tensor_count())
    throw ShapeError("encoder_forward: expected " + std::to_string(arch.encoder_tensor_count()) + " tensors");
  const Shape& xs = inputs.shape();
  if (xs.rank() != arch.input.rank() + 1)
    throw ShapeError("encoder_forward: input rank " + xs.str() + " does not match architecture input " + arch.input.str());
  for (std::size_t i = 0; i < arch.input.rank(); ++i)
    if (xs[i + 1] != arch.input[i])
      throw ShapeError("encoder_forward: input " + xs.str() + " does not match architecture input " + arch.input.str());

  ForwardTrace tr;
  Var h = inputs;
  std::size_t k = 0;
  for (std::size_t li = 0; li < arch.encoder.size(); ++li) {
    const LayerSpec& l = arch.encoder[li];
    Var w = theta[k++];
    std::optional<Var> b;
    if (l.bias) b = theta[k++];
    const Var layer_in = h;
    h = l.kind == LayerKind::Dense ? ad::dense(h, w, b) : ad::conv2d(h, w, b);
    h = activate(h, l.act);
    if (hook && hook->active_for(li)) {
      if (l.kind != LayerKind::Conv) throw ShapeError("isi: hooks attach to conv layers only");
      Tensor mask = isi::batch_mask(layer_in.value(), h.shape(), *hook->cfg, *hook->rng);
      h = ad::mul(h, h.tape->constant(mask));
      tr.isi_masks.push_back(std::move(mask));
    }
    if (l.pool) h = ad::avg_pool2(h);
    tr.activations.push_back(h);
  }
  if (arch.is_conv()) {
    if (arch.global_pool) h = ad::spatial_mean(h);
    else h = ad::reshape(h, Shape{xs[0], h.value().size() / xs[0]});
  }
  tr.features = h;
  return tr;
}

/// Linear head: logits = features * W + b.
inline Var classifier_forward(const Architecture& arch, std::span<const Var> phi, Var features) {
  const std::size_t expect = arch.head_bias ? 2 : 1;
  if (phi.size() != expect) throw ShapeError("classifier_forward: expected " + std::to_string(expect) + " tensors");
  if (features.shape().rank() != 2 || features.shape()[1] != arch.feature_dim())
    throw ShapeError("classifier_forward: features " + features.shape().str() + " but m = " +
                     std::to_string(arch.feature_dim()));
  std::optional<Var> b;
  if (arch.head_bias) b = phi[1];
  return ad::dense(features, phi[0], b);
}

inline Tensor to_tensor(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

/// Row-wise rotation of features: each row z becomes gamma * z.
inline Var rotate_features(Var z, const Eigen::MatrixXd& gamma) {
  const std::size_t m = z.shape()[1];
  if (static_cast<std::size_t>(gamma.rows()) != m || static_cast<std::size_t>(gamma.cols()) != m)
    throw ShapeError("rotate_features: rotation size does not match feature width");
  return ad::matmul(z, z.tape->constant(to_tensor(gamma)), false, true);
}

/// Mean cross-entropy for classification sets, mean squared error for regression sets.
inline Var task_loss(Var logits, const LabeledSet& data) {
  if (data.regression()) {
    Tensor target(Shape{data.targets.size(), 1}, data.targets);
    return ad::mse(logits, target);
  }
  return ad::softmax_cross_entropy(logits, data.labels);
}

/// Forward both halves of the network on one tape.
inline ForwardTrace forward(const Architecture& arch, std::span<const Var> params, Var inputs,
                            const IsiHook* hook = nullptr, const Eigen::MatrixXd* rotation = nullptr) {
  const std::size_t ne = arch.encoder_tensor_count();
  ForwardTrace tr = encoder_forward(arch, params.subspan(0, ne), inputs, hook);
  Var f = tr.features;
  if (rotation) {
    tr.rotated = rotate_features(f, *rotation);
    f = *tr.rotated;
  }
  tr.logits = classifier_forward(arch, params.subspan(ne), f);
  return tr;
}

inline std::vector<Var> as_variables(Tape& t, std::span<const Tensor> ts) {
  std::vector<Var> v;
  v.reserve(ts.size());
  for (const auto& x : ts) v.push_back(t.variable(x));
  return v;
}

/// Predicted class per row.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t r = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace roto::nn
