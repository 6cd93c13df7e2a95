#pragma once

// Invariant self-information dropout.
//
// Each k x k window of a feature map is scored by the Gaussian-kernel
// self-information of the window against its (2C+1)^2 grid neighbourhood.
// Windows that look like their surroundings (texture, flat background) score
// low and are dropped with higher probability; distinctive windows (shape
// outlines) survive. Active during meta-training only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "roto/errors.hpp"
#include "roto/random.hpp"
#include "roto/tensor.hpp"

namespace roto::isi {

struct ISIConfig {
  bool enabled = false;
  /// Encoder layer indices whose outputs are masked.
  std::vector<std::size_t> hooked_layers{0, 1};
  std::size_t patch = 3;
  std::size_t stride = 1;
  std::size_t radius = 2;  // C
  double bandwidth = 1.0;  // h
  double temperature = 1.0;  // T
  double drop_rate = 0.1;  // r, mean drop probability over a grid
  /// Rescale each map to unit standard deviation before scoring.
  bool normalize = true;
  double info_cap = 50.0;

  void validate() const {
    require(patch >= 1, "isi: patch size must be >= 1");
    require(stride >= 1, "isi: stride must be >= 1");
    require(radius >= 1, "isi: radius must be >= 1");
    require(bandwidth > 0.0, "isi: bandwidth must be > 0");
    require(temperature > 0.0, "isi: temperature must be > 0");
    require(drop_rate >= 0.0 && drop_rate < 1.0, "isi: drop rate must be in [0, 1)");
  }
};

/// Windows of one feature map, laid out on a rows x cols grid.
struct PatchGrid {
  std::size_t rows = 0, cols = 0;
  std::size_t k = 0, stride = 1, channels = 0;
  /// Row-major over the grid; each window is k*k*channels values.
  std::vector<double> patches;
  std::vector<double> info;
  std::vector<std::size_t> neighborhood_size;
  std::vector<double> drop_prob;
  std::vector<std::uint8_t> mask;  // 1 = dropped

  std::size_t count() const { return rows * cols; }
  std::size_t patch_len() const { return k * k * channels; }
  std::span<const double> patch(std::size_t idx) const {
    return {patches.data() + idx * patch_len(), patch_len()};
  }
  std::pair<std::size_t, std::size_t> coord(std::size_t idx) const {
    return {(idx / cols) * stride, (idx % cols) * stride};
  }
};

/// Extract all valid windows of a single [H, W, C] (or [H, W]) map.
inline PatchGrid extract_patches(const Tensor& map, std::size_t k, std::size_t stride) {
  if (map.rank() != 2 && map.rank() != 3) throw ShapeError("extract_patches: expected [H,W] or [H,W,C], got " + map.shape().str());
  require(k >= 1 && stride >= 1, "extract_patches: k and stride must be >= 1");
  const std::size_t H = map.dim(0), W = map.dim(1), C = map.rank() == 3 ? map.dim(2) : 1;
  if (k > H || k > W) throw ShapeError("extract_patches: window " + std::to_string(k) + " larger than map " + map.shape().str());
  PatchGrid g;
  g.k = k;
  g.stride = stride;
  g.channels = C;
  g.rows = (H - k) / stride + 1;
  g.cols = (W - k) / stride + 1;
  g.patches.resize(g.count() * g.patch_len());
  double* dst = g.patches.data();
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c)
      for (std::size_t di = 0; di < k; ++di) {
        const double* src = map.data().data() + ((r * stride + di) * W + c * stride) * C;
        dst = std::copy(src, src + k * C, dst);
      }
  return g;
}

/// -log sum_{p' in neighbours} exp(-|p - p'|^2 / (2h^2)), capped at `cap`.
inline double self_information(std::span<const double> p, std::span<const std::span<const double>> neighbours,
                               double bandwidth, double cap = 50.0) {
  require(!neighbours.empty(), "self_information: empty neighbourhood");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  std::vector<double> e;
  e.reserve(neighbours.size());
  for (auto q : neighbours) {
    if (q.size() != p.size()) throw ShapeError("self_information: patch length mismatch");
    double d2 = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d2 += (p[i] - q[i]) * (p[i] - q[i]);
    e.push_back(-d2 * inv);
  }
  const double mx = *std::max_element(e.begin(), e.end());
  double s = 0.0;
  for (double v : e) s += std::exp(v - mx);
  const double info = -(mx + std::log(s));
  return std::min(info, cap);
}

/// Score every window of `g` against its clamped Chebyshev neighbourhood of
/// radius `radius` (itself included).
inline void score_grid(PatchGrid& g, std::size_t radius, double bandwidth, double cap = 50.0) {
  const std::size_t n = g.count();
  g.info.assign(n, 0.0);
  g.neighborhood_size.assign(n, 0);
  std::vector<std::span<const double>> nb;
  const auto R = static_cast<std::ptrdiff_t>(radius);
  for (std::size_t idx = 0; idx < n; ++idx) {
    const auto r = static_cast<std::ptrdiff_t>(idx / g.cols), c = static_cast<std::ptrdiff_t>(idx % g.cols);
    nb.clear();
    for (std::ptrdiff_t dr = -R; dr <= R; ++dr)
      for (std::ptrdiff_t dc = -R; dc <= R; ++dc) {
        const std::ptrdiff_t rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(g.rows) || cc >= static_cast<std::ptrdiff_t>(g.cols)) continue;
        nb.push_back(g.patch(static_cast<std::size_t>(rr) * g.cols + static_cast<std::size_t>(cc)));
      }
    g.neighborhood_size[idx] = nb.size();
    g.info[idx] = self_information(g.patch(idx), nb, bandwidth, cap);
  }
}

/// Drop probabilities proportional to exp(-I/T), scaled to mean `rate`, clipped to [0, 1].
/// Mass above 1 is redistributed over the remaining windows.
inline std::vector<double> drop_coefficients(std::span<const double> infos, double temperature, double rate) {
  require(rate >= 0.0 && rate < 1.0, "drop_coefficients: rate must be in [0, 1)");
  require(temperature > 0.0, "drop_coefficients: temperature must be > 0");
  const std::size_t K = infos.size();
  std::vector<double> p(K, 0.0);
  if (K == 0) return p;
  double mx = -infos[0] / temperature;
  for (double v : infos) mx = std::max(mx, -v / temperature);
  double s = 0.0;
  for (std::size_t j = 0; j < K; ++j) {
    p[j] = std::exp(-infos[j] / temperature - mx);
    s += p[j];
  }
  // Clip at 1 and hand the excess to the unclipped windows until the mean is `rate`.
  std::vector<std::uint8_t> full(K, 0);
  double budget = rate * static_cast<double>(K);
  for (bool changed = true; changed;) {
    changed = false;
    const double scale = budget / s;
    for (std::size_t j = 0; j < K; ++j)
      if (!full[j] && p[j] * scale >= 1.0) {
        full[j] = 1;
        budget -= 1.0;
        s -= p[j];
        changed = true;
      }
    if (!changed)
      for (std::size_t j = 0; j < K; ++j) p[j] = full[j] ? 1.0 : std::min(p[j] * scale, 1.0);
  }
  return p;
}

/// Multiplicative mask for one [H, W, C] map whose spatial grid matches
/// `probs` (H*W entries): 0 for dropped positions, 1/(1-p) for survivors.
inline Tensor sample_mask(const Shape& map_shape, std::span<const double> probs, Rng& rng,
                          std::vector<std::uint8_t>* dropped = nullptr) {
  if (map_shape.rank() != 3) throw ShapeError("sample_mask: expected [H,W,C], got " + map_shape.str());
  const std::size_t HW = map_shape[0] * map_shape[1], C = map_shape[2];
  if (probs.size() != HW) throw ShapeError("sample_mask: probability grid does not match map " + map_shape.str());
  Tensor mask(map_shape);
  if (dropped) dropped->assign(HW, 0);
  for (std::size_t j = 0; j < HW; ++j) {
    double v = 1.0;
    if (probs[j] > 0.0) {
      const bool drop = rng.bernoulli(probs[j]);
      if (dropped) (*dropped)[j] = drop;
      v = drop ? 0.0 : 1.0 / (1.0 - probs[j]);
    }
    std::fill_n(mask.data().begin() + static_cast<std::ptrdiff_t>(j * C), C, v);
  }
  return mask;
}

/// Apply per-position dropout to one [H, W, C] map. Identity when not training.
inline Tensor apply_isi(const Tensor& map, std::span<const double> probs, Rng& rng, bool training) {
  if (!training) return map;
  Tensor mask = sample_mask(map.shape(), probs, rng);
  Tensor out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] * mask[i];
  return out;
}

/// Rescale a map to unit standard deviation (no-op for constant maps).
inline Tensor unit_normalized(const Tensor& map) {
  const double n = static_cast<double>(map.size());
  double mu = 0.0;
  for (double v : map.data()) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : map.data()) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12)) return map;
  Tensor out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] / sd;
  return out;
}

/// Full pipeline for one image: score the windows of the layer's input map
/// and compute drop probabilities for the layer's output grid.
inline PatchGrid analyse(const Tensor& input_map, const ISIConfig& cfg) {
  const Tensor m = cfg.normalize ? unit_normalized(input_map) : input_map;
  PatchGrid g = extract_patches(m, cfg.patch, cfg.stride);
  score_grid(g, cfg.radius, cfg.bandwidth, cfg.info_cap);
  g.drop_prob = drop_coefficients(g.info, cfg.temperature, cfg.drop_rate);
  return g;
}

/// Batch mask for a hooked layer. `input` is the layer's NHWC input,
/// `output_shape` its NHWC output; their window grid must coincide with the
/// output's spatial grid.
inline Tensor batch_mask(const Tensor& input, const Shape& output_shape, const ISIConfig& cfg, Rng& rng) {
  if (input.rank() != 4 || output_shape.rank() != 4) throw ShapeError("isi: hooks need NHWC feature maps");
  const std::size_t B = input.dim(0), H = input.dim(1), W = input.dim(2), C = input.dim(3);
  const Shape out_img{output_shape[1], output_shape[2], output_shape[3]};
  Tensor mask(output_shape);
  const std::size_t img = H * W * C, out_len = out_img.numel();
  for (std::size_t b = 0; b < B; ++b) {
    Tensor x(Shape{H, W, C}, std::vector<double>(input.data().begin() + static_cast<std::ptrdiff_t>(b * img),
                                                 input.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * img)));
    PatchGrid g = analyse(x, cfg);
    if (g.rows != out_img[0] || g.cols != out_img[1])
      throw ShapeError("isi: window grid " + std::to_string(g.rows) + "x" + std::to_string(g.cols) +
                       " does not match layer output " + output_shape.str());
    Tensor m = sample_mask(out_img, g.drop_prob, rng);
    std::copy(m.data().begin(), m.data().end(), mask.data().begin() + static_cast<std::ptrdiff_t>(b * out_len));
  }
  return mask;
}

}  // namespace roto::isi
