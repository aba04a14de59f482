#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedkei/clustering.hpp"
#include "fedkei/errors.hpp"
#include "fedkei/model.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/part.hpp"
#include "fedkei/rng.hpp"

namespace fedkei {

/// Anything that scores a task module on a batch and returns its gradient.
/// Model satisfies this; tests plug in closed-form objectives.
template <class O>
concept TaskObjective = requires(const O& o, const TaskModule& m, const TaskBatch& b) {
  { o.forward_loss(m, b) } -> std::convertible_to<double>;
  { o.grad_module(m, b) } -> std::same_as<TaskModule>;
};

/// Global intra-cluster weights; beta[c] weighs all M pooled modules for cluster c.
struct IntraWeights {
  std::vector<std::vector<double>> beta;

  std::size_t k() const noexcept { return beta.size(); }
  std::size_t m() const noexcept { return beta.empty() ? 0 : beta.front().size(); }
  friend bool operator==(const IntraWeights&, const IntraWeights&) = default;
};

/// Per-client inter-cluster weights over the K cluster modules.
struct InterWeights {
  std::vector<double> alpha;

  static InterWeights uniform(std::size_t k) { return {std::vector<double>(k, 1.0 / static_cast<double>(k))}; }
  std::size_t k() const noexcept { return alpha.size(); }
  friend bool operator==(const InterWeights&, const InterWeights&) = default;
};

using ClusterSet = std::vector<ModuleVector>;

struct BiLevelConfig {
  /// Inner-loop (alpha) learning rate.
  double eta1 = 0.05;
  /// Outer-loop (beta) learning rate.
  double eta2 = 0.05;
  std::size_t inner_batch_size = 32;
  /// Inner loop runs this many passes over the client's training split...
  std::size_t inner_epochs = 1;
  /// ...capped at this many steps (0: no cap).
  std::size_t inner_max_steps = 0;
  std::size_t outer_steps = 1;
  /// Learning rate for the final alpha fit; defaults to eta1 when unset.
  std::optional<double> actual_lr;
  std::size_t actual_max_epochs = 50;
  double actual_rel_tol = 1e-5;
  std::size_t actual_patience = 3;

  double actual_learning_rate() const noexcept { return actual_lr.value_or(eta1); }

  void validate() const {
    if (!(eta1 >= 0.0) || !std::isfinite(eta1)) throw ConfigError("bilevel: eta1 must be >= 0");
    if (!(eta2 >= 0.0) || !std::isfinite(eta2)) throw ConfigError("bilevel: eta2 must be >= 0");
    if (outer_steps < 1) throw ConfigError("bilevel: outer_steps must be >= 1");
    if (inner_batch_size == 0) throw ConfigError("bilevel: inner_batch_size must be >= 1");
    if (inner_epochs == 0) throw ConfigError("bilevel: inner_epochs must be >= 1");
    if (!(actual_learning_rate() >= 0.0)) throw ConfigError("bilevel: actual_lr must be >= 0");
    if (actual_max_epochs == 0) throw ConfigError("bilevel: actual_max_epochs must be >= 1");
  }
};

/// beta_c <- B[c,:] / sum_j B[c,j]
inline IntraWeights init_beta(const ClusterAssignment& a) { return {normalized_rows(a)}; }

/// theta_c = sum_j beta[c][j] * theta_j for every cluster.
inline ClusterSet cluster_modules_from_beta(const IntraWeights& w, const ModuleMatrix& mods) {
  if (w.m() != mods.cols()) throw InvalidInput("intra weights do not match module count");
  ClusterSet out;
  out.reserve(w.k());
  for (const auto& row : w.beta) out.push_back(weighted_sum(mods, row));
  return out;
}

/// theta~ = sum_c alpha_c * theta_c
inline ModuleVector aggregate_inter(const InterWeights& w, std::span<const ModuleVector> thetas) {
  if (w.k() != thetas.size()) throw InvalidInput("aggregate_inter: alpha length does not match cluster count");
  return weighted_sum(thetas, w.alpha);
}

inline TaskModule aggregate_inter(const PerPart<InterWeights>& w, const PerPart<ClusterSet>& thetas) {
  return {aggregate_inter(w.adapter, thetas.adapter), aggregate_inter(w.head, thetas.head)};
}

/// alpha -= lr * Theta_K^T g
inline void alpha_step(InterWeights& w, std::span<const ModuleVector> thetas, const ModuleVector& g, double lr) {
  const auto grad = transpose_product(thetas, g);
  for (std::size_t c = 0; c < w.k(); ++c) w.alpha[c] -= lr * grad[c];
}

/// Gradient of theta~(alpha) -> L with respect to alpha: Theta_K^T dL/dtheta~.
template <TaskObjective O>
PerPart<std::vector<double>> alpha_gradient(const O& obj, const PerPart<InterWeights>& alpha,
                                            const PerPart<ClusterSet>& thetas, const TaskBatch& batch) {
  const TaskModule g = obj.grad_module(aggregate_inter(alpha, thetas), batch);
  return {transpose_product(thetas.adapter, g.adapter), transpose_product(thetas.head, g.head)};
}

struct InnerResult {
  PerPart<InterWeights> alpha_updated;
  /// dL/dtheta~ at the initial alpha (first inner step).
  std::optional<TaskModule> g0;
  /// dL/dtheta~ at the updated alpha, on a fresh mini-batch.
  TaskModule v;
  /// dL/dtheta_c per cluster, what the client uploads.
  PerPart<ClusterSet> cluster_grads;
  std::size_t steps = 0;
  /// True when more than one inner step ran; the single-step Jacobian is then
  /// applied with the final alpha and the first step's g0.
  bool approximate = false;
};

/// Gradient of L with respect to each cluster module through one inner step,
/// using the rank-1 form of the Jacobian
///   d theta~ / d theta_c = alpha'_c I - eta1 theta_c g0^T,
/// so dL/dtheta_c = alpha'_c v - eta1 (theta_c . v) g0. No dim x dim matrix is formed.
inline ClusterSet client_outer_grad(const ModuleVector& g0, const ModuleVector& v, std::span<const ModuleVector> thetas,
                                    const InterWeights& alpha_updated, double eta1) {
  if (alpha_updated.k() != thetas.size()) throw InvalidInput("client_outer_grad: alpha/cluster count mismatch");
  if (g0.dim() != v.dim()) throw InvalidInput("client_outer_grad: g0 and v differ in dim");
  ClusterSet out;
  out.reserve(thetas.size());
  for (std::size_t c = 0; c < thetas.size(); ++c) {
    if (thetas[c].dim() != v.dim()) throw InvalidInput("client_outer_grad: cluster module dim mismatch");
    const double proj = dot(thetas[c], v);
    ModuleVector g(v.dim());
    for (std::size_t d = 0; d < v.dim(); ++d) g[d] = alpha_updated.alpha[c] * v[d] - eta1 * proj * g0[d];
    out.push_back(std::move(g));
  }
  return out;
}

inline PerPart<ClusterSet> client_outer_grad(const InnerResult& inner, const PerPart<ClusterSet>& thetas, double eta1) {
  if (!inner.g0) throw ProtocolError("client_outer_grad: inner loop recorded no g0");
  PerPart<ClusterSet> out;
  for (Part p : kParts) out[p] = client_outer_grad((*inner.g0)[p], inner.v[p], thetas[p], inner.alpha_updated[p], eta1);
  return out;
}

/// Variant that evaluates v itself on `v_batch` at the updated alpha.
template <TaskObjective O>
PerPart<ClusterSet> client_outer_grad(const O& obj, const InnerResult& inner, const PerPart<ClusterSet>& thetas,
                                      const TaskBatch& v_batch, double eta1) {
  if (!inner.g0) throw ProtocolError("client_outer_grad: inner loop recorded no g0");
  const TaskModule v = obj.grad_module(aggregate_inter(inner.alpha_updated, thetas), v_batch);
  PerPart<ClusterSet> out;
  for (Part p : kParts) out[p] = client_outer_grad((*inner.g0)[p], v[p], thetas[p], inner.alpha_updated[p], eta1);
  return out;
}

/// Inner loop at one client: gradient steps on alpha over mini-batches of the
/// training split (one epoch by default), then the per-cluster gradients to
/// send back. The gradient v at the updated alpha uses the next mini-batch
/// drawn from the same seeded stream.
template <TaskObjective O>
InnerResult inner_update_alpha(const O& obj, const PerPart<InterWeights>& alpha, const PerPart<ClusterSet>& thetas,
                               const TaskBatch& train, const BiLevelConfig& cfg, std::uint64_t seed) {
  if (!(cfg.eta1 >= 0.0)) throw InvalidInput("inner_update_alpha: eta1 must be >= 0");
  if (train.empty()) throw InvalidInput("inner_update_alpha: empty task data");
  for (Part p : kParts) {
    if (alpha[p].k() != thetas[p].size()) throw InvalidInput("inner_update_alpha: alpha/cluster count mismatch");
  }
  InnerResult r;
  r.alpha_updated = alpha;
  Rng rng(seed);
  for (std::size_t e = 0; e < cfg.inner_epochs; ++e) {
    for (const auto& rows : minibatches(train.size(), cfg.inner_batch_size, rng)) {
      if (cfg.inner_max_steps != 0 && r.steps >= cfg.inner_max_steps) break;
      const TaskBatch mb = train.subset(rows);
      const TaskModule theta = aggregate_inter(r.alpha_updated, thetas);
      const double loss = obj.forward_loss(theta, mb);
      if (!std::isfinite(loss)) throw DivergenceError("inner_update_alpha: non-finite loss", r.steps);
      const TaskModule g = obj.grad_module(theta, mb);
      if (!r.g0) r.g0 = g;
      for (Part p : kParts) {
        alpha_step(r.alpha_updated[p], thetas[p], g[p], cfg.eta1);
        for (double a : r.alpha_updated[p].alpha) {
          if (!std::isfinite(a)) throw DivergenceError("inner_update_alpha: alpha became non-finite", r.steps);
        }
      }
      ++r.steps;
    }
  }
  r.approximate = r.steps > 1;
  const auto fresh = minibatches(train.size(), cfg.inner_batch_size, rng);
  r.v = obj.grad_module(aggregate_inter(r.alpha_updated, thetas), train.subset(fresh.front()));
  r.cluster_grads = client_outer_grad(r, thetas, cfg.eta1);
  for (Part p : kParts) {
    for (const auto& g : r.cluster_grads[p]) {
      if (!g.all_finite()) throw DivergenceError("inner_update_alpha: non-finite cluster gradient", r.steps);
    }
  }
  return r;
}

/// Outer update at the server:
///   beta_c <- beta_c - eta2 * sum_i Theta_M^T (dL_i/dtheta_c)
/// Reports are indexed by client id and summed in ascending id order, so the
/// result does not depend on arrival order. Any missing report aborts the
/// round and leaves beta untouched.
inline IntraWeights server_update_beta(const IntraWeights& beta, const ModuleMatrix& mods,
                                       const std::vector<std::optional<ClusterSet>>& client_grads, double eta2) {
  for (std::size_t i = 0; i < client_grads.size(); ++i) {
    if (!client_grads[i]) throw IncompleteRound("server_update_beta: missing report from client " + std::to_string(i));
  }
  if (beta.m() != mods.cols()) throw InvalidInput("server_update_beta: beta does not match module count");
  IntraWeights next = beta;
  for (std::size_t c = 0; c < beta.k(); ++c) {
    std::vector<double> total(beta.m(), 0.0);
    for (const auto& report : client_grads) {
      if (report->size() != beta.k()) throw InvalidInput("server_update_beta: report has wrong cluster count");
      const auto g = transpose_product(mods.columns(), (*report)[c]);
      for (std::size_t j = 0; j < g.size(); ++j) total[j] += g[j];
    }
    for (std::size_t j = 0; j < beta.m(); ++j) {
      next.beta[c][j] -= eta2 * total[j];
      if (!std::isfinite(next.beta[c][j])) throw DivergenceError("server_update_beta: beta became non-finite", 0);
    }
  }
  return next;
}

struct ActualAlphaResult {
  PerPart<InterWeights> alpha;
  std::size_t epochs = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Fits the client's own inter-cluster weights on the optimized cluster
/// modules, starting from uniform. Mini-batch gradient descent on alpha alone;
/// stops after `actual_max_epochs` or once the relative full-split loss
/// improvement stays below `actual_rel_tol` for `actual_patience` epochs.
template <TaskObjective O>
ActualAlphaResult learn_alpha_actual(const O& obj, const PerPart<ClusterSet>& thetas, const TaskBatch& train,
                                     const BiLevelConfig& cfg, std::uint64_t seed) {
  if (train.empty()) throw InvalidInput("learn_alpha_actual: empty task data");
  ActualAlphaResult r;
  for (Part p : kParts) r.alpha[p] = InterWeights::uniform(thetas[p].size());
  const double lr = cfg.actual_learning_rate();
  Rng rng(seed);
  double prev = obj.forward_loss(aggregate_inter(r.alpha, thetas), train);
  if (!std::isfinite(prev)) throw DivergenceError("learn_alpha_actual: non-finite initial loss", 0);
  r.initial_loss = prev;
  std::size_t stall = 0;
  for (std::size_t e = 0; e < cfg.actual_max_epochs; ++e) {
    for (const auto& rows : minibatches(train.size(), cfg.inner_batch_size, rng)) {
      const TaskModule g = obj.grad_module(aggregate_inter(r.alpha, thetas), train.subset(rows));
      for (Part p : kParts) {
        alpha_step(r.alpha[p], thetas[p], g[p], lr);
        for (double a : r.alpha[p].alpha) {
          if (!std::isfinite(a)) throw DivergenceError("learn_alpha_actual: alpha became non-finite", e);
        }
      }
    }
    r.epochs = e + 1;
    const double loss = obj.forward_loss(aggregate_inter(r.alpha, thetas), train);
    if (!std::isfinite(loss)) throw DivergenceError("learn_alpha_actual: non-finite loss", e + 1);
    const double rel = (prev - loss) / std::max(std::abs(prev), 1e-300);
    stall = rel < cfg.actual_rel_tol ? stall + 1 : 0;
    prev = loss;
    if (stall >= cfg.actual_patience) break;
  }
  r.final_loss = prev;
  return r;
}

/// theta~ = sum_c alpha_hat_c * (sum_j beta[c][j] theta_j), per part.
inline TaskModule build_init(const PerPart<InterWeights>& alpha_hat, const PerPart<IntraWeights>& beta,
                             const PerPart<ModuleMatrix>& mods) {
  TaskModule out;
  for (Part p : kParts) {
    if (alpha_hat[p].k() != beta[p].k()) throw InvalidInput("build_init: alpha and beta disagree on K");
    out[p] = aggregate_inter(alpha_hat[p], cluster_modules_from_beta(beta[p], mods[p]));
  }
  return out;
}

}  // namespace fedkei
