#pragma once

// Bi-level meta-learning: SGD adaptation on each task's support set, then an
// Adam step on the mean of the tasks' (optionally weighted and rotated)
// query losses at the adapted parameters.
//
//   maml     second-order gradient through the inner loop
//   fomaml   query gradient at the adapted point, inner loop detached
//   anil     second-order, inner loop adapts the head only
//   reptile  difference between the initial point and the adapted point,
//            where the last step uses the query loss
//   imaml    inner loop with a proximal term lambda/2 |p - p0|^2; the
//            gradient is (I + H/lambda)^-1 g_query, solved by CG on HVPs

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roto/autodiff.hpp"
#include "roto/errors.hpp"
#include "roto/homogenizer.hpp"
#include "roto/isi.hpp"
#include "roto/networks.hpp"
#include "roto/random.hpp"
#include "roto/taskgen.hpp"
#include "roto/tensor.hpp"

namespace roto::gbml {

using ad::Tape;
using ad::Var;

enum class Backbone { Maml, Fomaml, Anil, Reptile, Imaml };

inline std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::Maml: return "maml";
    case Backbone::Fomaml: return "fomaml";
    case Backbone::Anil: return "anil";
    case Backbone::Reptile: return "reptile";
    case Backbone::Imaml: return "imaml";
  }
  return "?";
}

inline Backbone backbone_from(const std::string& s) {
  if (s == "maml") return Backbone::Maml;
  if (s == "fomaml") return Backbone::Fomaml;
  if (s == "anil") return Backbone::Anil;
  if (s == "reptile") return Backbone::Reptile;
  if (s == "imaml") return Backbone::Imaml;
  throw ConfigError("unknown backbone '" + s + "'");
}

struct GbmlConfig {
  Backbone backbone = Backbone::Imaml;
  std::size_t inner_steps = 5;  // tau
  double inner_rate = 0.01;     // eta_base
  double outer_rate = 1e-3;     // eta_meta
  double imaml_lambda = 1.0;
  std::size_t cg_iters = 20;
  double cg_tol = 1e-8;
  /// A capped CG solve whose relative residual exceeds this is an error.
  double cg_max_residual = 1e-2;

  void validate() const {
    require(inner_steps >= 1, "gbml: inner steps must be >= 1");
    require(inner_rate > 0.0 && outer_rate > 0.0, "gbml: rates must be > 0");
    require(imaml_lambda > 0.0, "gbml: lambda must be > 0");
    require(cg_iters >= 1, "gbml: cg iterations must be >= 1");
  }
};

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Tensor> m, v;
  std::uint64_t t = 0;

  void step(std::vector<Tensor>& params, std::span<const Tensor> grads, double lr) {
    if (grads.size() != params.size()) throw ShapeError("adam: gradient count does not match parameters");
    if (m.empty()) {
      for (const auto& p : params) {
        m.emplace_back(p.shape(), 0.0);
        v.emplace_back(p.shape(), 0.0);
      }
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!(grads[k].shape() == params[k].shape())) throw ShapeError("adam: gradient shape mismatch");
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        const double g = grads[k][i];
        m[k][i] = beta1 * m[k][i] + (1.0 - beta1) * g;
        v[k][i] = beta2 * v[k][i] + (1.0 - beta2) * g * g;
        params[k][i] -= lr * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
      }
    }
  }
};

struct MetaState {
  nn::ModelParams params;
  GbmlConfig cfg;
  Adam adam;
  std::uint64_t step = 0;

  static MetaState init(const nn::Architecture& arch, const GbmlConfig& cfg, Rng& rng) {
    cfg.validate();
    MetaState s;
    s.params = nn::ModelParams::init(arch, rng);
    s.cfg = cfg;
    return s;
  }
};

struct AdaptResult {
  std::vector<Var> adapted;    // on the caller's tape
  std::vector<double> losses;  // support loss before each step
  bool second_order = false;
};

namespace detail {

inline Var support_loss(const nn::Architecture& arch, std::span<const Var> p, const LabeledSet& support,
                        const nn::IsiHook* hook) {
  Tape& t = *p[0].tape;
  nn::ForwardTrace tr = nn::forward(arch, p, t.constant(support.x), hook);
  return nn::task_loss(tr.logits, support);
}

inline Var proximal(std::span<const Var> p, std::span<const Tensor> anchor, double lambda) {
  Tape& t = *p[0].tape;
  std::optional<Var> s;
  for (std::size_t k = 0; k < p.size(); ++k) {
    Var d = ad::sub(p[k], t.constant(anchor[k]));
    Var term = ad::inner(d, d);
    s = s ? ad::add(*s, term) : term;
  }
  return ad::scale(*s, 0.5 * lambda);
}

}  // namespace detail

/// tau SGD steps on the support loss. MAML and ANIL keep the steps on `tape`
/// (second order); the other backbones run each step on a scratch tape and
/// place the adapted values on `tape` as fresh leaves.
inline AdaptResult inner_adapt(Tape& tape, const nn::Architecture& arch, std::span<const Var> init,
                               const LabeledSet& support, const GbmlConfig& cfg, const nn::IsiHook* hook = nullptr) {
  require(cfg.inner_steps >= 1, "inner_adapt: inner steps must be >= 1");
  require(support.size() >= 1, "inner_adapt: empty support set");
  const Backbone b = cfg.backbone;
  const std::size_t first = b == Backbone::Anil ? arch.encoder_tensor_count() : 0;
  AdaptResult r;
  r.second_order = b == Backbone::Maml || b == Backbone::Anil;
  std::size_t s = 0;
  try {
    if (r.second_order) {
      std::vector<Var> p(init.begin(), init.end());
      for (s = 0; s < cfg.inner_steps; ++s) {
        Var loss = detail::support_loss(arch, p, support, hook);
        r.losses.push_back(loss.item());
        std::span<const Var> upd(p.data() + first, p.size() - first);
        std::vector<Var> g = ad::grad(loss, upd);
        for (std::size_t k = 0; k < g.size(); ++k) p[first + k] = ad::sub(p[first + k], ad::scale(g[k], cfg.inner_rate));
      }
      r.adapted = std::move(p);
    } else {
      std::vector<Tensor> p0 = ad::values(init);
      std::vector<Tensor> cur = p0;
      for (s = 0; s < cfg.inner_steps; ++s) {
        Tape scratch;
        std::vector<Var> p = nn::as_variables(scratch, cur);
        Var loss = detail::support_loss(arch, p, support, hook);
        r.losses.push_back(loss.item());
        if (b == Backbone::Imaml) loss = ad::add(loss, detail::proximal(p, p0, cfg.imaml_lambda));
        std::vector<Var> g = ad::grad(loss, p);
        for (std::size_t k = 0; k < cur.size(); ++k) {
          const Tensor& gk = g[k].value();
          for (std::size_t i = 0; i < cur[k].size(); ++i) cur[k][i] -= cfg.inner_rate * gk[i];
          if (!cur[k].all_finite()) throw NumericError("non-finite parameter");
        }
      }
      for (auto& t : cur) r.adapted.push_back(tape.variable(std::move(t)));
    }
  } catch (const NumericError& e) {
    throw NumericError("inner loop diverged at step " + std::to_string(s) + ": " + e.what());
  }
  return r;
}

/// Constant per-task weight and rotation for the outer loss. Both absent
/// means the plain (vanilla) task loss.
struct Homogenization {
  const Eigen::MatrixXd* rotation = nullptr;
  std::optional<double> weight;
};

struct OuterLoss {
  Var weighted;  // omega * raw (same node as raw when no weight is given)
  Var raw;
  Var features;                // z
  std::optional<Var> rotated;  // gamma z
  Var logits;
};

/// omega * loss(head(gamma * encoder(x_query))) at the adapted parameters.
inline OuterLoss outer_task_loss(const nn::Architecture& arch, const AdaptResult& adapt, const LabeledSet& query,
                                 const Homogenization& h = {}, const nn::IsiHook* hook = nullptr) {
  if (h.rotation && homog::orthogonality_error(*h.rotation) > 1e-6)
    throw PreconditionError("outer_task_loss: rotation is not orthogonal");
  if (h.weight && !(*h.weight > 0.0)) throw PreconditionError("outer_task_loss: weight must be > 0");
  Tape& t = *adapt.adapted[0].tape;
  nn::ForwardTrace tr = nn::forward(arch, adapt.adapted, t.constant(query.x), hook, h.rotation);
  OuterLoss o;
  o.features = tr.features;
  o.rotated = tr.rotated;
  o.logits = tr.logits;
  o.raw = nn::task_loss(tr.logits, query);
  o.weighted = h.weight ? ad::scale(o.raw, *h.weight) : o.raw;
  return o;
}

struct CgResult {
  std::vector<double> x;
  std::size_t iterations = 0;
  double residual = 0.0;  // relative to |b|
  bool converged = false;
};

using LinearOperator = std::function<std::vector<double>(std::span<const double>)>;

/// Conjugate gradient for a symmetric positive definite operator.
inline CgResult conjugate_gradient(const LinearOperator& A, std::span<const double> b, std::size_t max_iter, double tol) {
  const std::size_t n = b.size();
  CgResult r;
  r.x.assign(n, 0.0);
  const double bn = norm2(b);
  if (bn == 0.0) {
    r.converged = true;
    return r;
  }
  std::vector<double> res(b.begin(), b.end()), p = res;
  double rr = dot(res, res);
  for (std::size_t it = 0; it < max_iter; ++it) {
    const std::vector<double> Ap = A(p);
    const double pAp = dot(p, Ap);
    if (!(pAp > 0.0) || !std::isfinite(pAp))
      throw SolverError("conjugate gradient breakdown: p'Ap = " + std::to_string(pAp) + " at iteration " +
                        std::to_string(it));
    const double alpha = rr / pAp;
    for (std::size_t i = 0; i < n; ++i) {
      r.x[i] += alpha * p[i];
      res[i] -= alpha * Ap[i];
    }
    const double rr_new = dot(res, res);
    r.iterations = it + 1;
    r.residual = std::sqrt(rr_new) / bn;
    if (r.residual <= tol) {
      r.converged = true;
      return r;
    }
    const double beta = rr_new / rr;
    for (std::size_t i = 0; i < n; ++i) p[i] = res[i] + beta * p[i];
    rr = rr_new;
  }
  return r;
}

/// Solve (I + H/lambda) x = g, H the support-loss Hessian at `adapted`.
inline CgResult imaml_meta_gradient(const nn::Architecture& arch, std::span<const Tensor> adapted,
                                    const LabeledSet& support, std::span<const double> query_grad, double lambda,
                                    std::size_t cg_iters, double tol = 1e-8) {
  require(lambda > 0.0, "imaml_meta_gradient: lambda must be > 0");
  Tape t;
  std::vector<Var> p = nn::as_variables(t, adapted);
  Var loss = detail::support_loss(arch, p, support, nullptr);
  std::vector<Var> g = ad::grad(loss, p);
  LinearOperator op = [&](std::span<const double> v) {
    std::optional<Var> dot_gv;
    std::size_t off = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const Shape s = p[k].shape();
      Tensor vk(s, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(off),
                                       v.begin() + static_cast<std::ptrdiff_t>(off + s.numel())));
      off += s.numel();
      Var term = ad::inner(g[k], t.constant(std::move(vk)));
      dot_gv = dot_gv ? ad::add(*dot_gv, term) : term;
    }
    std::vector<Var> hv = ad::grad(*dot_gv, p);
    std::vector<Tensor> hvals = ad::values(hv);
    std::vector<double> out = flatten(hvals);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + out[i] / lambda;
    return out;
  };
  return conjugate_gradient(op, query_grad, cg_iters, tol);
}

/// Implicit gradient of the plain query loss.
inline CgResult imaml_meta_gradient(const nn::Architecture& arch, std::span<const Tensor> adapted,
                                    const LabeledSet& support, const LabeledSet& query, double lambda,
                                    std::size_t cg_iters, double tol = 1e-8) {
  Tape t;
  std::vector<Var> p = nn::as_variables(t, adapted);
  nn::ForwardTrace tr = nn::forward(arch, p, t.constant(query.x));
  std::vector<Var> g = ad::grad(nn::task_loss(tr.logits, query), p);
  std::vector<Tensor> gv = ad::values(g);
  return imaml_meta_gradient(arch, adapted, support, flatten(gv), lambda, cg_iters, tol);
}

/// One task's contribution to the meta-gradient.
struct TaskGradient {
  std::vector<Tensor> grad;     // d(weighted outer loss)/d(initial params), per backbone
  double loss = 0.0;            // unweighted query loss
  double weighted_loss = 0.0;
  Eigen::VectorXd rotated_grad;  // dL/d(gamma z), averaged over query rows
  Eigen::VectorXd feature_grad;  // dL/dz = gamma' rotated_grad
  double encoder_norm = 0.0;     // |theta part of grad| / omega
  std::vector<double> inner_losses;
  std::optional<CgResult> cg;
};

inline TaskGradient task_meta_gradient(const nn::Architecture& arch, const GbmlConfig& cfg,
                                       std::span<const Tensor> params, const tasks::Episode& ep,
                                       const Homogenization& h = {}, const nn::IsiHook* hook = nullptr) {
  Tape tape;
  std::vector<Var> init = nn::as_variables(tape, params);
  AdaptResult ad_res = inner_adapt(tape, arch, init, ep.support, cfg, hook);
  OuterLoss o = outer_task_loss(arch, ad_res, ep.query, h, hook);

  TaskGradient tg;
  tg.loss = o.raw.item();
  tg.weighted_loss = o.weighted.item();
  tg.inner_losses = ad_res.losses;
  const double omega = h.weight.value_or(1.0);

  std::vector<Var> wrt = ad_res.second_order ? init : ad_res.adapted;
  const Var zhat = o.rotated ? *o.rotated : o.features;
  wrt.push_back(zhat);
  std::vector<Var> g = ad::grad(o.weighted, wrt);
  const Tensor& gz = g.back().value();
  g.pop_back();
  std::vector<Tensor> gp = ad::values(g);

  const auto rows = static_cast<Eigen::Index>(gz.dim(0)), m = static_cast<Eigen::Index>(gz.dim(1));
  tg.rotated_grad = Eigen::VectorXd::Zero(m);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < m; ++j) tg.rotated_grad(j) += gz[static_cast<std::size_t>(i * m + j)];
  tg.rotated_grad /= omega;  // column sum of a mean loss: the average per-example gradient
  tg.feature_grad = h.rotation ? Eigen::VectorXd(h.rotation->transpose() * tg.rotated_grad) : tg.rotated_grad;

  switch (cfg.backbone) {
    case Backbone::Maml:
    case Backbone::Anil:
    case Backbone::Fomaml:
      tg.grad = std::move(gp);
      break;
    case Backbone::Reptile: {
      tg.grad.reserve(params.size());
      for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor d(params[k].shape());
        const Tensor& a = ad_res.adapted[k].value();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = params[k][i] - (a[i] - cfg.inner_rate * gp[k][i]);
        tg.grad.push_back(std::move(d));
      }
      break;
    }
    case Backbone::Imaml: {
      std::vector<Tensor> adapted = ad::values(ad_res.adapted);
      CgResult cg = imaml_meta_gradient(arch, adapted, ep.support, flatten(gp), cfg.imaml_lambda, cfg.cg_iters,
                                        cfg.cg_tol);
      if (!cg.converged && cg.residual > cfg.cg_max_residual)
        throw SolverError("conjugate gradient stopped after " + std::to_string(cg.iterations) +
                          " iterations with relative residual " + std::to_string(cg.residual) +
                          " (lambda = " + std::to_string(cfg.imaml_lambda) + ")");
      tg.grad = unflatten(cg.x, params);
      tg.cg = std::move(cg);
      break;
    }
  }

  double th = 0.0;
  for (std::size_t k = 0; k < arch.encoder_tensor_count(); ++k)
    for (double v : tg.grad[k].data()) th += v * v;
  tg.encoder_norm = std::sqrt(th) / omega;
  return tg;
}

using TraceFn = std::function<void(const std::string& event)>;

struct MetaStepResult {
  std::vector<Tensor> meta_grad;
  homog::GradSnapshot snapshot;  // indexed by slot
  double mean_loss = 0.0;
  double mean_weighted_loss = 0.0;
  std::vector<TaskGradient> tasks;  // in episode order
};

/// One outer step: per-task gradients, their mean in episode order, Adam.
/// With `homog` set, episode e uses slot binding[e]'s weight and rotation.
inline MetaStepResult meta_step(MetaState& meta, const tasks::MetaBatch& batch, const homog::HomogenizerState* homog,
                                std::span<const std::size_t> binding, const isi::ISIConfig* isi_cfg, Rng& isi_rng,
                                double outer_rate, const TraceFn& trace = {}) {
  const std::size_t N = batch.size();
  require(N >= 1, "meta_step: empty batch");
  if (homog) {
    if (homog->slots() != N)
      throw PreconditionError("meta_step: batch of " + std::to_string(N) + " tasks for " +
                              std::to_string(homog->slots()) + " homogenizer slots");
    if (binding.size() != N) throw PreconditionError("meta_step: slot binding does not cover the batch");
  }
  const nn::Architecture& arch = meta.params.arch;
  nn::IsiHook hook{isi_cfg, &isi_rng, true};
  const nn::IsiHook* hp = (isi_cfg && isi_cfg->enabled) ? &hook : nullptr;

  MetaStepResult res;
  if (homog) res.snapshot.resize(N);
  for (std::size_t e = 0; e < N; ++e) {
    Homogenization h;
    std::size_t slot = e;
    if (homog) {
      slot = binding[e];
      h.rotation = &homog->rotation[slot];
      h.weight = homog->omega[slot];
    }
    if (trace) trace("inner_loop task=" + std::to_string(e) + (hp ? " isi=on" : " isi=off"));
    TaskGradient tg = task_meta_gradient(arch, meta.cfg, meta.params.tensors, batch.episodes[e], h, hp);
    if (trace) {
      if (homog) trace("rotate_features task=" + std::to_string(e) + " slot=" + std::to_string(slot));
      trace("outer_loss task=" + std::to_string(e) + (homog ? " weighted" : " plain"));
    }
    if (homog) {
      auto& s = res.snapshot;
      s.losses[slot] = tg.loss;
      s.feature_grads[slot] = tg.feature_grad;
      s.rotated_grads[slot] = tg.rotated_grad;
      s.encoder_norms[slot] = tg.encoder_norm;
      s.weighted_norms[slot] = homog->omega[slot] * tg.encoder_norm;
    }
    res.mean_loss += tg.loss / static_cast<double>(N);
    res.mean_weighted_loss += tg.weighted_loss / static_cast<double>(N);
    if (res.meta_grad.empty()) {
      res.meta_grad = tg.grad;
    } else {
      for (std::size_t k = 0; k < res.meta_grad.size(); ++k)
        for (std::size_t i = 0; i < res.meta_grad[k].size(); ++i) res.meta_grad[k][i] += tg.grad[k][i];
    }
    res.tasks.push_back(std::move(tg));
  }
  for (auto& t : res.meta_grad)
    for (auto& v : t.data()) v /= static_cast<double>(N);
  if (homog) res.snapshot.finalize();

  meta.adam.step(meta.params.tensors, res.meta_grad, outer_rate);
  ++meta.step;
  if (trace) trace("update_params step=" + std::to_string(meta.step));
  return res;
}

struct EpisodeScore {
  double loss = 0.0;
  double accuracy = 0.0;  // classification only
};

/// Fine-tune a copy of the parameters on the support set (no ISI, no
/// homogenization) and score the query set.
inline EpisodeScore evaluate_episode(const nn::ModelParams& params, const GbmlConfig& cfg, const tasks::Episode& ep,
                                     std::size_t steps) {
  const nn::Architecture& arch = params.arch;
  const std::size_t first = cfg.backbone == Backbone::Anil ? arch.encoder_tensor_count() : 0;
  std::vector<Tensor> cur = params.tensors;
  for (std::size_t s = 0; s < steps; ++s) {
    Tape t;
    std::vector<Var> p = nn::as_variables(t, cur);
    Var loss = detail::support_loss(arch, p, ep.support, nullptr);
    std::vector<Var> g = ad::grad(loss, p);
    for (std::size_t k = first; k < cur.size(); ++k) {
      const Tensor& gk = g[k].value();
      for (std::size_t i = 0; i < cur[k].size(); ++i) cur[k][i] -= cfg.inner_rate * gk[i];
    }
  }
  Tape t;
  std::vector<Var> p = nn::as_variables(t, cur);
  nn::ForwardTrace tr = nn::forward(arch, p, t.constant(ep.query.x));
  EpisodeScore sc;
  sc.loss = nn::task_loss(tr.logits, ep.query).item();
  if (!ep.query.regression()) {
    auto pred = nn::argmax_rows(tr.logits.value());
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ep.query.labels[i];
    sc.accuracy = static_cast<double>(hit) / static_cast<double>(pred.size());
  }
  return sc;
}

}  // namespace roto::gbml
