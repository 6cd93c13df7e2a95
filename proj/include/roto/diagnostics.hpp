#pragma once

// Measurements on task gradients: pairwise differences and their cosine
// decomposition, empirical gradient-norm and smoothness constants, the TVD
// bound check on discrete families, homogeneity summaries, SmoothGrad
// saliency, and the ISI shape-vs-texture rank statistic.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "roto/autodiff.hpp"
#include "roto/errors.hpp"
#include "roto/homogenizer.hpp"
#include "roto/isi.hpp"
#include "roto/networks.hpp"
#include "roto/random.hpp"
#include "roto/taskgen.hpp"
#include "roto/tensor.hpp"

namespace roto::diag {

/// |g_i - g_j|.
inline double gradient_difference(std::span<const double> gi, std::span<const double> gj) {
  if (gi.size() != gj.size())
    throw ShapeError("gradient_difference: lengths " + std::to_string(gi.size()) + " and " + std::to_string(gj.size()));
  double s = 0.0;
  for (std::size_t k = 0; k < gi.size(); ++k) s += (gi[k] - gj[k]) * (gi[k] - gj[k]);
  return std::sqrt(s);
}

struct CosineParts {
  double norm_i = 0.0, norm_j = 0.0;
  double cosine = 0.0;
  double distance = 0.0;  // rebuilt from the three parts
  bool degenerate = false;  // a zero vector; cosine reported as 0
};

inline CosineParts cosine_decomposition(std::span<const double> gi, std::span<const double> gj) {
  if (gi.size() != gj.size()) throw ShapeError("cosine_decomposition: length mismatch");
  CosineParts c;
  c.norm_i = norm2(gi);
  c.norm_j = norm2(gj);
  if (c.norm_i == 0.0 || c.norm_j == 0.0) {
    c.degenerate = true;
  } else {
    c.cosine = std::clamp(dot(gi, gj) / (c.norm_i * c.norm_j), -1.0, 1.0);
  }
  const double sq = c.norm_i * c.norm_i + c.norm_j * c.norm_j - 2.0 * c.norm_i * c.norm_j * c.cosine;
  c.distance = std::sqrt(std::max(sq, 0.0));
  return c;
}

/// Pairwise geometry of a set of task gradients.
struct GradReport {
  std::vector<double> norms;
  Eigen::MatrixXd distances;  // d_ij
  Eigen::MatrixXd cosines;
  double magnitude_cv = 0.0;  // std / mean of the magnitudes
  double mean_cosine = 0.0;   // over pairs i < j

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["norms"] = norms;
    j["magnitude_cv"] = magnitude_cv;
    j["mean_cosine"] = mean_cosine;
    std::vector<double> d, c;
    for (Eigen::Index a = 0; a < distances.rows(); ++a)
      for (Eigen::Index b = a + 1; b < distances.cols(); ++b) {
        d.push_back(distances(a, b));
        c.push_back(cosines(a, b));
      }
    j["pair_distances"] = d;
    j["pair_cosines"] = c;
    return j;
  }
};

inline double coefficient_of_variation(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double n = static_cast<double>(v.size());
  double mu = 0.0;
  for (double x : v) mu += x;
  mu /= n;
  if (mu == 0.0) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  return std::sqrt(var / n) / mu;
}

/// `magnitudes` overrides the vector norms for the coefficient of variation.
inline GradReport grad_report(std::span<const Eigen::VectorXd> g, std::span<const double> magnitudes = {}) {
  const std::size_t n = g.size();
  require(n >= 2, "grad_report: need at least two gradients");
  GradReport r;
  r.distances = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  r.cosines = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (const auto& v : g) r.norms.push_back(v.norm());
  double sum = 0.0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      std::span<const double> x(g[a].data(), static_cast<std::size_t>(g[a].size()));
      std::span<const double> y(g[b].data(), static_cast<std::size_t>(g[b].size()));
      CosineParts c = cosine_decomposition(x, y);
      const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
      r.distances(ia, ib) = r.distances(ib, ia) = gradient_difference(x, y);
      r.cosines(ia, ib) = r.cosines(ib, ia) = c.cosine;
      sum += c.cosine;
    }
  r.mean_cosine = sum / static_cast<double>(n * (n - 1) / 2);
  r.magnitude_cv = coefficient_of_variation(magnitudes.empty() ? std::span<const double>(r.norms) : magnitudes);
  return r;
}

/// Task gradients before homogenization (g_i, |dL/dtheta|) and after it
/// (gamma_i g_i, omega_i |dL/dtheta|).
struct HomogeneityReport {
  GradReport before, after;

  nlohmann::json to_json() const { return {{"before", before.to_json()}, {"after", after.to_json()}}; }
};

inline HomogeneityReport homogeneity_report(const homog::GradSnapshot& s) {
  require(s.size() >= 2, "homogeneity_report: need N >= 2");
  HomogeneityReport h;
  h.before = grad_report(s.feature_grads, s.encoder_norms);
  h.after = grad_report(s.rotated_grads, s.weighted_norms);
  return h;
}

// ---------------------------------------------------------------------------
// Empirical G and L.

/// Gradient of the single-point loss at `point` for the flat parameters.
using PointGradient = std::function<std::vector<double>(std::span<const double> psi, std::size_t point)>;

struct GLEstimate {
  double G = 0.0;
  double L = 0.0;
  std::size_t g_samples = 0;
  std::size_t l_samples = 0;
  std::size_t skipped = 0;  // identical parameter pairs
};

/// Empirical maxima of |grad| and |grad(psi) - grad(psi')| / |psi - psi'|
/// over parameters in the ball of `radius` around `center` (which is always
/// one of the G samples). Half the pairs are independent draws in the ball,
/// half are local pairs at log-uniform scales. Both numbers are lower bounds
/// of the true constants.
inline GLEstimate estimate_G_L(const PointGradient& grad, std::size_t points, std::span<const double> center,
                               double radius, std::size_t budget, Rng& rng) {
  require(budget >= 2, "estimate_G_L: budget must be >= 2");
  require(points >= 1, "estimate_G_L: no data points");
  require(radius >= 0.0, "estimate_G_L: radius must be >= 0");
  const std::size_t n = center.size();
  auto in_ball = [&](double r) {
    std::vector<double> d(n);
    for (auto& v : d) v = rng.normal();
    const double len = norm2(d);
    const double scale = len > 0.0 ? r * std::pow(rng.uniform(), 1.0 / static_cast<double>(n)) / len : 0.0;
    for (std::size_t i = 0; i < n; ++i) d[i] = center[i] + scale * d[i];
    return d;
  };
  auto near = [&](const std::vector<double>& x) {
    std::vector<double> d(n);
    double len = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d[i] = x[i] + 0.1 * radius * rng.normal() / std::sqrt(static_cast<double>(n)) - center[i];
      len += d[i] * d[i];
    }
    len = std::sqrt(len);
    const double shrink = len > radius ? radius / len : 1.0;
    for (std::size_t i = 0; i < n; ++i) d[i] = center[i] + shrink * d[i];
    return d;
  };
  std::vector<std::vector<double>> best(points), best_g(points);
  std::vector<double> best_ratio(points, 0.0);
  auto record = [&](std::size_t p, const std::vector<double>& a, double ratio) {
    if (ratio > best_ratio[p]) {
      best_ratio[p] = ratio;
      best[p] = a;
    }
  };
  GLEstimate e;
  for (std::size_t p = 0; p < points; ++p) {
    e.G = std::max(e.G, norm2(grad(center, p)));
    ++e.g_samples;
  }
  for (std::size_t s = 0; s < budget; ++s) {
    const std::size_t p = s % points;
    // Draws 2 and 3 of every four search near the best points found so far.
    std::vector<double> a;
    if (s % 4 == 2 && !best[p].empty()) a = near(best[p]);
    else if (s % 4 == 3 && !best_g[p].empty()) a = near(best_g[p]);
    else a = in_ball(radius);
    const std::vector<double> ga = grad(a, p);
    const double ng = norm2(ga);
    if (ng > e.G || best_g[p].empty()) best_g[p] = a;
    e.G = std::max(e.G, ng);
    ++e.g_samples;
    if (s % 4 == 0) {
      const std::vector<double> b = in_ball(radius);
      const double dist = gradient_difference(a, b);
      if (!(dist > 0.0)) {
        ++e.skipped;
        continue;
      }
      const double ratio = gradient_difference(ga, grad(b, p)) / dist;
      record(p, a, ratio);
      e.L = std::max(e.L, ratio);
      ++e.l_samples;
      continue;
    }
    // Local pair at a log-uniform scale; the direction is refined by a few
    // power-iteration steps on the gradient difference.
    const double r = radius * std::pow(10.0, -3.0 * rng.uniform());
    std::vector<double> d(n);
    for (auto& v : d) v = rng.normal();
    for (int it = 0; it < 3; ++it) {
      const double len = norm2(d);
      if (!(len > 0.0) || !(r > 0.0)) {
        ++e.skipped;
        break;
      }
      std::vector<double> b = a;
      for (std::size_t i = 0; i < n; ++i) b[i] += r * d[i] / len;
      const double dist = gradient_difference(a, b);
      if (!(dist > 0.0)) {
        ++e.skipped;
        break;
      }
      const std::vector<double> gb = grad(b, p);
      for (std::size_t i = 0; i < n; ++i) d[i] = gb[i] - ga[i];
      const double ratio = norm2(d) / dist;
      record(p, a, ratio);
      e.L = std::max(e.L, ratio);
      if (it == 0) ++e.l_samples;
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// TVD bound on discrete families.

enum class BoundMode { Exact, Sampled };

struct BoundCheckResult {
  BoundMode mode = BoundMode::Exact;
  double d = 0.0;
  double bound = 0.0;  // 4 eta G L TVD
  double slack = 0.0;  // bound - d
  bool pass = false;   // d <= bound + 1e-9
  double tvd = 0.0;
  double eta = 0.0;
  GLEstimate constants;

  nlohmann::json to_json() const {
    return {{"mode", mode == BoundMode::Exact ? "exact" : "sampled"},
            {"d_ij", d},
            {"bound", bound},
            {"slack", slack},
            {"pass", pass},
            {"tvd", tvd},
            {"eta_base", eta},
            {"G", constants.G},
            {"L", constants.L},
            {"g_samples", constants.g_samples},
            {"l_samples", constants.l_samples}};
  }
};

inline BoundCheckResult bound_result(BoundMode mode, double d, double eta, const GLEstimate& gl, double tvd) {
  BoundCheckResult r;
  r.mode = mode;
  r.d = d;
  r.eta = eta;
  r.constants = gl;
  r.tvd = tvd;
  r.bound = 4.0 * eta * gl.G * gl.L * tvd;
  r.slack = r.bound - d;
  r.pass = d <= r.bound + 1e-9;
  return r;
}

/// The union of two discrete measures' atoms with both probability vectors.
struct JointSupport {
  std::vector<std::vector<double>> atoms;
  std::vector<int> labels;
  std::vector<double> p, q;
};

inline JointSupport joint_support(const tasks::DiscreteMeasure& a, const tasks::DiscreteMeasure& b) {
  a.validate();
  b.validate();
  JointSupport j;
  auto add = [&](const tasks::DiscreteMeasure& m, bool first) {
    for (std::size_t i = 0; i < m.atoms.size(); ++i) {
      std::size_t k = 0;
      while (k < j.atoms.size() && !(j.atoms[k] == m.atoms[i] && j.labels[k] == m.labels[i])) ++k;
      if (k == j.atoms.size()) {
        if (!j.atoms.empty() && j.atoms[0].size() != m.atoms[i].size())
          throw ShapeError("bound_check: atoms of different dimension");
        j.atoms.push_back(m.atoms[i]);
        j.labels.push_back(m.labels[i]);
        j.p.push_back(0.0);
        j.q.push_back(0.0);
      }
      (first ? j.p : j.q)[k] += m.probs[i];
    }
  };
  add(a, true);
  add(b, false);
  return j;
}

/// Single-example classification gradient of a model for each atom.
class AtomGradients {
 public:
  AtomGradients(nn::Architecture arch, std::vector<Tensor> like, JointSupport support)
      : arch_(std::move(arch)), like_(std::move(like)), s_(std::move(support)) {}

  std::vector<double> operator()(std::span<const double> psi, std::size_t atom) const {
    std::vector<Tensor> ts = unflatten(psi, like_);
    ad::Tape t;
    std::vector<ad::Var> p = nn::as_variables(t, ts);
    const auto& x = s_.atoms[atom];
    Shape xs = arch_.input;
    std::vector<std::size_t> dims{1};
    for (std::size_t i = 0; i < xs.rank(); ++i) dims.push_back(xs[i]);
    LabeledSet one{Tensor(Shape(dims), x), {s_.labels[atom]}, {}};
    nn::ForwardTrace tr = nn::forward(arch_, p, t.constant(one.x));
    std::vector<ad::Var> g = ad::grad(nn::task_loss(tr.logits, one), p);
    std::vector<Tensor> gv = ad::values(g);
    return flatten(gv);
  }

  const JointSupport& support() const { return s_; }

 private:
  nn::Architecture arch_;
  std::vector<Tensor> like_;
  JointSupport s_;
};

/// Expected gradient sum_x w(x) grad(psi, x).
inline std::vector<double> expected_gradient(const AtomGradients& g, std::span<const double> psi,
                                             std::span<const double> w) {
  std::vector<double> out(psi.size(), 0.0);
  for (std::size_t a = 0; a < w.size(); ++a) {
    if (w[a] == 0.0) continue;
    const std::vector<double> ga = g(psi, a);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += w[a] * ga[k];
  }
  return out;
}

/// Exact one-step gradient difference. Each task takes one SGD step on its
/// expected support gradient, psi_i = psi - eta E_{P_i} grad(psi, x); the two
/// task gradients are then compared on the maximally coupled query draw,
/// i.e. on the overlap measure min(P_i, P_j):
///   d_ij = | sum_x min(P_i, P_j)(x) [grad(psi_i, x) - grad(psi_j, x)] |.
inline double exact_gradient_difference(const AtomGradients& g, std::span<const double> psi, double eta) {
  const JointSupport& s = g.support();
  auto adapted = [&](const std::vector<double>& w) {
    std::vector<double> in = expected_gradient(g, psi, w);
    std::vector<double> out(psi.begin(), psi.end());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] -= eta * in[k];
    return out;
  };
  const std::vector<double> pi = adapted(s.p), pj = adapted(s.q);
  std::vector<double> overlap(s.p.size());
  for (std::size_t a = 0; a < overlap.size(); ++a) overlap[a] = std::min(s.p[a], s.q[a]);
  return gradient_difference(expected_gradient(g, pi, overlap), expected_gradient(g, pj, overlap));
}

inline std::size_t draw(std::span<const double> w, Rng& rng) {
  double u = rng.uniform(), acc = 0.0;
  for (std::size_t a = 0; a < w.size(); ++a) {
    acc += w[a];
    if (u < acc) return a;
  }
  for (std::size_t a = w.size(); a-- > 0;)
    if (w[a] > 0.0) return a;
  return 0;
}

/// Finite-sample version: n_support draws per task for the inner step and
/// n_query maximally coupled query pairs. Can exceed the bound by chance.
inline double sampled_gradient_difference(const AtomGradients& g, std::span<const double> psi, double eta,
                                          std::size_t n_support, std::size_t n_query, Rng& rng) {
  require(n_support >= 1 && n_query >= 1, "sampled_gradient_difference: empty sets");
  const JointSupport& s = g.support();
  const std::size_t K = s.p.size();
  auto empirical = [&](std::span<const double> w) {
    std::vector<double> c(K, 0.0);
    for (std::size_t i = 0; i < n_support; ++i) c[draw(w, rng)] += 1.0 / static_cast<double>(n_support);
    return c;
  };
  auto adapted = [&](const std::vector<double>& w) {
    std::vector<double> in = expected_gradient(g, psi, w);
    std::vector<double> out(psi.begin(), psi.end());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] -= eta * in[k];
    return out;
  };
  const std::vector<double> pi = adapted(empirical(s.p)), pj = adapted(empirical(s.q));
  // Maximal coupling: with probability 1 - TVD both tasks share a query point.
  std::vector<double> overlap(K), rest_i(K), rest_j(K);
  double tv = 0.0;
  for (std::size_t a = 0; a < K; ++a) {
    overlap[a] = std::min(s.p[a], s.q[a]);
    rest_i[a] = s.p[a] - overlap[a];
    rest_j[a] = s.q[a] - overlap[a];
    tv += rest_i[a];
  }
  std::vector<double> wi(K, 0.0), wj(K, 0.0);
  for (std::size_t k = 0; k < n_query; ++k) {
    const double step = 1.0 / static_cast<double>(n_query);
    if (tv > 0.0 && rng.uniform() < tv) {
      std::vector<double> ri = rest_i, rj = rest_j;
      for (auto& v : ri) v /= tv;
      for (auto& v : rj) v /= tv;
      wi[draw(ri, rng)] += step;
      wj[draw(rj, rng)] += step;
    } else {
      std::vector<double> o = overlap;
      for (auto& v : o) v /= (1.0 - tv);
      const std::size_t a = draw(o, rng);
      wi[a] += step;
      wj[a] += step;
    }
  }
  return gradient_difference(expected_gradient(g, pi, wi), expected_gradient(g, pj, wj));
}

struct BoundCheckConfig {
  double eta = 0.01;
  std::size_t budget = 1000;
  double radius = 0.5;  // G/L sampling ball around the evaluation point
  std::size_t trials = 100;
  double perturbation = 0.1;  // trial t > 0 evaluates at psi + N(0, sd^2)
  BoundMode mode = BoundMode::Exact;
  std::size_t n_support = 5, n_query = 15;  // sampled mode
};

/// One result per trial for the family pair, at parameters near `params`.
inline std::vector<BoundCheckResult> bound_check(const nn::Architecture& arch, const std::vector<Tensor>& params,
                                                 const tasks::TaskDistribution& fi, const tasks::TaskDistribution& fj,
                                                 const BoundCheckConfig& cfg, Rng& rng) {
  if (!fi.spec.base_measure || !fj.spec.base_measure)
    throw PreconditionError("bound_check: both families need a discrete base measure for exact TVD");
  require(cfg.eta > 0.0, "bound_check: eta must be > 0");
  const double tv = tasks::tvd(fi, fj);
  AtomGradients g(arch, params, joint_support(*fi.spec.base_measure, *fj.spec.base_measure));
  const std::vector<double> psi0 = flatten(std::span<const Tensor>(params));
  std::vector<BoundCheckResult> out;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    std::vector<double> psi = psi0;
    if (t > 0)
      for (auto& v : psi) v += rng.normal(0.0, cfg.perturbation);
    const std::size_t K = g.support().p.size();
    GLEstimate gl = estimate_G_L(g, K, psi, cfg.radius, cfg.budget, rng);
    const double d = cfg.mode == BoundMode::Exact
                         ? exact_gradient_difference(g, psi, cfg.eta)
                         : sampled_gradient_difference(g, psi, cfg.eta, cfg.n_support, cfg.n_query, rng);
    out.push_back(bound_result(cfg.mode, d, cfg.eta, gl, tv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Saliency.

/// Mean input gradient of the top logit over n noisy copies of `image`
/// (one example, shaped like the architecture input).
inline Tensor smoothgrad_saliency(const nn::Architecture& arch, std::span<const Tensor> params, const Tensor& image,
                                  double sigma, std::size_t n, Rng& rng) {
  require(n >= 1, "smoothgrad: n must be >= 1");
  require(sigma >= 0.0, "smoothgrad: sigma must be >= 0");
  if (!(image.shape() == arch.input)) throw ShapeError("smoothgrad: image " + image.shape().str() + " does not match input " + arch.input.str());
  std::vector<std::size_t> dims{1};
  for (std::size_t i = 0; i < image.rank(); ++i) dims.push_back(image.dim(i));
  Tensor sum(image.shape());
  for (std::size_t s = 0; s < n; ++s) {
    Tensor x = image.reshaped(Shape(dims));
    if (sigma > 0.0)
      for (auto& v : x.data()) v += rng.normal(0.0, sigma);
    ad::Tape t;
    std::vector<ad::Var> p;
    for (const auto& w : params) p.push_back(t.constant(w));
    ad::Var xv = t.variable(x);
    nn::ForwardTrace tr = nn::forward(arch, p, xv);
    const std::size_t top = static_cast<std::size_t>(nn::argmax_rows(tr.logits.value())[0]);
    Tensor pick(tr.logits.shape(), 0.0);
    pick[top] = 1.0;
    ad::Var f = ad::inner(tr.logits, t.constant(pick));
    const Tensor& g = ad::grad(f, {xv})[0].value();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += g[i];
  }
  for (auto& v : sum.data()) v /= static_cast<double>(n);
  return sum;
}

/// 8-bit binary PGM of |map| scaled to its maximum ([H, W] or [H, W, 1]).
inline void write_pgm(std::ostream& os, const Tensor& map) {
  if (map.rank() < 2) throw ShapeError("write_pgm: need a 2-D map");
  const std::size_t H = map.dim(0), W = map.dim(1), C = map.size() / (H * W);
  double mx = 0.0;
  for (double v : map.data()) mx = std::max(mx, std::abs(v));
  os << "P5\n" << W << " " << H << "\n255\n";
  for (std::size_t i = 0; i < H * W; ++i) {
    double a = 0.0;
    for (std::size_t c = 0; c < C; ++c) a += std::abs(map[i * C + c]);
    a /= static_cast<double>(C);
    const auto b = static_cast<unsigned char>(mx > 0.0 ? std::lround(255.0 * a / mx) : 0);
    os.put(static_cast<char>(b));
  }
}

// ---------------------------------------------------------------------------
// ISI shape sensitivity.

struct ShapeSensitivity {
  double rank_statistic = 0.0;  // mean over images of P(I_boundary > I_interior)
  double mean_boundary = 0.0;
  double mean_interior = 0.0;
  std::size_t images = 0;  // images with both patch kinds
};

/// Scores each rendered image's windows and compares windows that straddle
/// the shape outline with windows lying fully inside the textured interior.
/// Only windows with a full (2C+1)^2 neighbourhood take part.
inline ShapeSensitivity isi_shape_sensitivity(const tasks::FamilySpec& spec, std::size_t images,
                                              const isi::ISIConfig& cfg, Rng& rng) {
  const std::size_t S = spec.image_side, full = (2 * cfg.radius + 1) * (2 * cfg.radius + 1);
  ShapeSensitivity out;
  double nb = 0.0, ni = 0.0;
  for (std::size_t im = 0; im < images; ++im) {
    tasks::ShapeImage img = tasks::render_shape(spec, im % tasks::kShapeCount, rng);
    isi::PatchGrid g = isi::analyse(Tensor(Shape{S, S, 1}, img.pixels), cfg);
    std::vector<double> boundary, interior;
    for (std::size_t idx = 0; idx < g.count(); ++idx) {
      if (g.neighborhood_size[idx] != full) continue;
      auto [r, c] = g.coord(idx);
      std::size_t in = 0;
      for (std::size_t i = 0; i < cfg.patch; ++i)
        for (std::size_t j = 0; j < cfg.patch; ++j) in += img.inside[(r + i) * S + c + j];
      if (in == cfg.patch * cfg.patch) interior.push_back(g.info[idx]);
      else if (in > 0) boundary.push_back(g.info[idx]);
    }
    if (boundary.empty() || interior.empty()) continue;
    double wins = 0.0;
    for (double b : boundary)
      for (double i : interior) wins += b > i ? 1.0 : (b == i ? 0.5 : 0.0);
    out.rank_statistic += wins / static_cast<double>(boundary.size() * interior.size());
    for (double b : boundary) out.mean_boundary += b;
    for (double i : interior) out.mean_interior += i;
    nb += static_cast<double>(boundary.size());
    ni += static_cast<double>(interior.size());
    ++out.images;
  }
  if (out.images > 0) {
    out.rank_statistic /= static_cast<double>(out.images);
    out.mean_boundary /= nb;
    out.mean_interior /= ni;
  }
  return out;
}

}  // namespace roto::diag
