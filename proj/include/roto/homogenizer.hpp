#pragma once

// Per-slot gradient homogenization: a weight omega_i rescales each task's
// outer loss and a rotation gamma_i = cayley(A_i) turns its features.
// Both are updated after the network step from a GradSnapshot of the same
// batch, on a slower, decaying schedule than the network (the leader).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "roto/errors.hpp"

namespace roto::homog {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Per-task quantities read off the outer-loss tape, indexed by slot.
struct GradSnapshot {
  std::vector<double> losses;             // L_i, unweighted query loss
  std::vector<VectorXd> feature_grads;    // g_i: dL_i/dz averaged over query rows
  std::vector<VectorXd> rotated_grads;    // g_ri = gamma_i g_i
  std::vector<double> encoder_norms;      // ||dL_i/dtheta||
  std::vector<double> weighted_norms;     // g_wi = omega_i ||dL_i/dtheta||
  VectorXd mean_rotated;                  // mean of g_ri
  double mean_weighted = 0.0;             // mean of g_wi

  std::size_t size() const { return losses.size(); }

  void resize(std::size_t n) {
    losses.assign(n, 0.0);
    feature_grads.assign(n, VectorXd());
    rotated_grads.assign(n, VectorXd());
    encoder_norms.assign(n, 0.0);
    weighted_norms.assign(n, 0.0);
  }

  void finalize() {
    const std::size_t n = size();
    require(n >= 1, "snapshot: empty");
    mean_rotated = VectorXd::Zero(rotated_grads[0].size());
    mean_weighted = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mean_rotated += rotated_grads[i];
      mean_weighted += weighted_norms[i];
    }
    mean_rotated /= static_cast<double>(n);
    mean_weighted /= static_cast<double>(n);
  }
};

inline bool is_skew(const MatrixXd& A, double tol = 0.0) {
  return A.rows() == A.cols() && (A + A.transpose()).norm() <= tol;
}

/// (I - A)(I + A)^-1 for skew-symmetric A.
inline MatrixXd cayley(const MatrixXd& A) {
  if (A.rows() != A.cols()) throw ShapeError("cayley: matrix is not square");
  if (!is_skew(A, 1e-12 * std::max(1.0, A.norm()))) throw PreconditionError("cayley: matrix is not skew-symmetric");
  const auto m = A.rows();
  const MatrixXd I = MatrixXd::Identity(m, m);
  // (I - A) and (I + A)^-1 commute.
  return (I + A).partialPivLu().solve(I - A);
}

inline double orthogonality_error(const MatrixXd& g) {
  return (g.transpose() * g - MatrixXd::Identity(g.rows(), g.cols())).norm();
}

/// Relative training progress L_i/L0_i, normalized to sum to one.
/// All-zero losses give the uniform vector.
inline std::vector<double> inverse_rate(std::span<const double> losses, std::span<const double> anchors) {
  if (losses.size() != anchors.size()) throw ShapeError("inverse_rate: losses and anchors differ in length");
  require(!losses.empty(), "inverse_rate: empty input");
  std::vector<double> r(losses.size());
  double s = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    require(anchors[i] > 0.0, "inverse_rate: anchors must be > 0");
    r[i] = losses[i] / anchors[i];
    s += r[i];
  }
  if (!(s > 0.0)) return std::vector<double>(losses.size(), 1.0 / static_cast<double>(losses.size()));
  for (double& v : r) v /= s;
  return r;
}

/// Initial-loss anchor for an n-way classification task: the uniform-prediction loss.
inline double classification_anchor(std::size_t n_way) { return std::log(static_cast<double>(n_way)); }

struct ScheduleConfig {
  double meta_rate = 1e-3;    // follower base rate
  double leader_rate = 5e-4;  // leader base rate
  double p_follower = 0.0;
  double p_leader = 0.51;
  double t0 = 1000.0;

  void validate() const {
    require(meta_rate > 0.0 && leader_rate > 0.0, "schedule: rates must be > 0");
    require(p_follower >= 0.0, "schedule: follower exponent must be >= 0");
    require(p_leader > p_follower, "schedule: leader exponent must exceed the follower exponent");
    require(t0 > 0.0, "schedule: t0 must be > 0");
  }
};

struct Rates {
  double follower;
  double leader;
};

inline Rates stackelberg_schedule(std::uint64_t t, const ScheduleConfig& c) {
  c.validate();
  const double base = 1.0 + static_cast<double>(t) / c.t0;
  return {c.meta_rate * std::pow(base, -c.p_follower), c.leader_rate * std::pow(base, -c.p_leader)};
}

struct HomogenizerConfig {
  std::size_t slots = 4;        // N
  std::size_t feature_dim = 0;  // m
  double beta = 0.1;
  double weight_rate = 5e-4;    // eta_omega at t = 0
  double rotation_rate = 5e-4;  // eta_gamma at t = 0
  double omega_min = 1e-3;
  bool normalize = true;
  bool reset_per_batch = false;
  /// Slot anchors L0_i; a value <= 0 is replaced by the first observed loss.
  double anchor = 0.0;

  void validate() const {
    require(slots >= 1, "homogenizer: need at least one slot");
    require(feature_dim >= 1, "homogenizer: feature dimension must be >= 1");
    require(beta >= 0.0, "homogenizer: beta must be >= 0");
    require(weight_rate > 0.0 && rotation_rate > 0.0, "homogenizer: rates must be > 0");
    require(omega_min > 0.0 && omega_min < 1.0, "homogenizer: omega_min must be in (0, 1)");
  }
};

struct HomogenizerState {
  HomogenizerConfig cfg;
  std::vector<double> omega;
  std::vector<MatrixXd> skew;      // A_i
  std::vector<MatrixXd> rotation;  // cayley(A_i)
  std::vector<double> anchors;
  std::vector<std::uint64_t> slot_family;
  std::vector<std::uint8_t> slot_bound;
  std::uint64_t leader_steps = 0;
  std::uint64_t batches = 0;
  std::uint64_t skipped_reweights = 0;
  std::uint64_t skipped_rotations = 0;

  static HomogenizerState init(const HomogenizerConfig& cfg) {
    cfg.validate();
    HomogenizerState s;
    s.cfg = cfg;
    s.anchors.assign(cfg.slots, cfg.anchor);
    s.slot_family.assign(cfg.slots, 0);
    s.slot_bound.assign(cfg.slots, 0);
    s.omega.assign(cfg.slots, 1.0);
    s.skew.assign(cfg.slots, MatrixXd::Zero(static_cast<Eigen::Index>(cfg.feature_dim), static_cast<Eigen::Index>(cfg.feature_dim)));
    s.rotation.assign(cfg.slots, MatrixXd::Identity(static_cast<Eigen::Index>(cfg.feature_dim), static_cast<Eigen::Index>(cfg.feature_dim)));
    return s;
  }

  std::size_t slots() const { return omega.size(); }

  void reset_slot(std::size_t i) {
    omega[i] = 1.0;
    skew[i].setZero();
    rotation[i].setIdentity();
    anchors[i] = cfg.anchor;
  }
};

/// Floor, then rescale so that the left-to-right sum of w is exactly N.
inline void renormalize(std::vector<double>& w, double floor) {
  const double N = static_cast<double>(w.size());
  for (double& v : w) v = std::max(v, floor);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v *= N / s;
  const double head = std::accumulate(w.begin(), w.end() - 1, 0.0);
  w.back() = N - head;
}

/// Bind slots to the episodes of an incoming batch and return the slot of
/// each episode. With `by_family`, a slot keeps following the family it was
/// first bound to; otherwise slot i takes episode i.
inline std::vector<std::size_t> reset_for_batch(HomogenizerState& s, std::span<const std::uint64_t> family_ids,
                                                bool by_family) {
  const std::size_t N = s.slots();
  if (family_ids.size() != N)
    throw PreconditionError("homogenizer: batch has " + std::to_string(family_ids.size()) + " episodes, expected " +
                            std::to_string(N));
  if (s.cfg.reset_per_batch)
    for (std::size_t i = 0; i < N; ++i) s.reset_slot(i);
  std::vector<std::size_t> binding(N, N);
  if (!by_family) {
    for (std::size_t i = 0; i < N; ++i) binding[i] = i;
  } else {
    std::vector<std::uint8_t> used(N, 0);
    for (std::size_t e = 0; e < N; ++e)
      for (std::size_t i = 0; i < N; ++i)
        if (!used[i] && s.slot_bound[i] && s.slot_family[i] == family_ids[e]) {
          binding[e] = i;
          used[i] = 1;
          break;
        }
    for (std::size_t e = 0; e < N; ++e) {
      if (binding[e] < N) continue;
      std::size_t pick = N;
      for (std::size_t i = 0; i < N && pick == N; ++i)
        if (!used[i] && !s.slot_bound[i]) pick = i;
      for (std::size_t i = 0; i < N && pick == N; ++i)
        if (!used[i]) pick = i;
      if (s.slot_bound[pick]) s.reset_slot(pick);  // slot changes owner
      s.slot_bound[pick] = 1;
      s.slot_family[pick] = family_ids[e];
      used[pick] = 1;
      binding[e] = pick;
    }
  }
  ++s.batches;
  return binding;
}

struct ReweightReport {
  bool skipped = false;
  double loss = 0.0;  // l1 balance loss before the step
  std::vector<double> targets;
};

/// One sign-gradient step on sum_i |omega_i n_i - t_i| with the targets
/// t_i = mean(g_w) * (N I_i)^beta held fixed, then floor and renormalize.
inline ReweightReport reweight_update(HomogenizerState& s, const GradSnapshot& snap, double rate) {
  const std::size_t N = s.slots();
  if (snap.size() != N) throw PreconditionError("reweight_update: snapshot does not cover every slot");
  ReweightReport rep;
  for (std::size_t i = 0; i < N; ++i)
    if (!(s.anchors[i] > 0.0)) s.anchors[i] = snap.losses[i] > 0.0 ? snap.losses[i] : 1.0;
  std::vector<double> gw(N);
  double mean = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    gw[i] = s.omega[i] * snap.encoder_norms[i];
    mean += gw[i];
  }
  mean /= static_cast<double>(N);
  if (!(mean > 0.0)) {
    rep.skipped = true;
    ++s.skipped_reweights;
    return rep;
  }
  const auto I = inverse_rate(snap.losses, s.anchors);
  rep.targets.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    rep.targets[i] = mean * std::pow(static_cast<double>(N) * I[i], s.cfg.beta);
    rep.loss += std::abs(gw[i] - rep.targets[i]);
  }
  for (std::size_t i = 0; i < N; ++i) {
    const double d = gw[i] - rep.targets[i];
    const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    s.omega[i] -= rate * sign * snap.encoder_norms[i];
  }
  renormalize(s.omega, s.cfg.omega_min);
  return rep;
}

/// l1 balance loss as a value: sum_i |g_wi - mean(g_w) * (N I_i)^beta|.
inline double reweight_loss(std::span<const double> gw, std::span<const double> inverse, double beta) {
  const double N = static_cast<double>(gw.size());
  const double mean = std::accumulate(gw.begin(), gw.end(), 0.0) / N;
  double l = 0.0;
  for (std::size_t i = 0; i < gw.size(); ++i) l += std::abs(gw[i] - mean * std::pow(N * inverse[i], beta));
  return l;
}

/// Gradient of f(A) = -v' cayley(A) u with respect to the entries of A.
inline MatrixXd rotation_objective_gradient(const MatrixXd& A, const VectorXd& u, const VectorXd& v) {
  const auto m = A.rows();
  const MatrixXd I = MatrixXd::Identity(m, m);
  const MatrixXd gamma = cayley(A);
  const MatrixXd Minv_t = (I + A).transpose().partialPivLu().inverse();
  return (I + gamma).transpose() * v * u.transpose() * Minv_t;
}

/// Mean of gamma_i g_i under the state's current rotations.
inline VectorXd rotated_mean(const HomogenizerState& s, const GradSnapshot& snap) {
  VectorXd mean = VectorXd::Zero(snap.feature_grads[0].size());
  for (std::size_t i = 0; i < s.slots(); ++i) mean += s.rotation[i] * snap.feature_grads[i];
  return mean / static_cast<double>(s.slots());
}

/// sum_i cos(gamma_i g_i, mean_j gamma_j g_j).
inline double rotation_objective(const HomogenizerState& s, const GradSnapshot& snap) {
  const VectorXd mean = rotated_mean(s, snap);
  const double mn = mean.norm();
  if (mn < 1e-12) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < s.slots(); ++i) {
    const VectorXd r = s.rotation[i] * snap.feature_grads[i];
    const double rn = r.norm();
    if (rn >= 1e-12) total += r.dot(mean) / (rn * mn);
  }
  return total;
}

struct RotationReport {
  std::size_t updated = 0;
  std::size_t skipped = 0;
};

/// One step on -sum_i <gamma_i u_i, v> over the skew parameters, with
/// v = mean rotated gradient held fixed. u_i and v are unit vectors when
/// cfg.normalize is set.
inline RotationReport rotation_update(HomogenizerState& s, const GradSnapshot& snap, double rate) {
  const std::size_t N = s.slots();
  if (snap.feature_grads.size() != N) throw PreconditionError("rotation_update: snapshot does not cover every slot");
  RotationReport rep;
  ++s.leader_steps;
  if (N == 1) return rep;  // a single gradient is its own mean
  VectorXd v = rotated_mean(s, snap);
  const double vn = v.norm();
  if (vn < 1e-12) {
    rep.skipped = N;
    s.skipped_rotations += N;
    return rep;
  }
  if (s.cfg.normalize) v /= vn;
  for (std::size_t i = 0; i < N; ++i) {
    const VectorXd& g = snap.feature_grads[i];
    const double gn = g.norm();
    if (gn < 1e-12) {
      ++rep.skipped;
      ++s.skipped_rotations;
      continue;
    }
    const VectorXd u = s.cfg.normalize ? VectorXd(g / gn) : g;
    const MatrixXd G = rotation_objective_gradient(s.skew[i], u, v);
    s.skew[i] -= rate * (G - G.transpose());
    s.rotation[i] = cayley(s.skew[i]);
    ++rep.updated;
  }
  return rep;
}

}  // namespace roto::homog
