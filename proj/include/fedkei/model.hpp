#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedkei/errors.hpp"
#include "fedkei/metrics.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/part.hpp"
#include "fedkei/rng.hpp"

namespace fedkei {

/// Trainable parameters for one task: adapter (omega) and head (phi).
using TaskModule = PerPart<ModuleVector>;

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t feature_dim = 32;
  std::size_t rank = 2;
  std::uint64_t backbone_seed = 7;
  /// Standard deviation of random (Rand) module initialization.
  double init_scale = 0.1;

  std::size_t adapter_dim() const noexcept { return 2 * input_dim * rank; }
  std::size_t head_dim() const noexcept { return feature_dim + 1; }
  std::size_t module_dim() const noexcept { return adapter_dim() + head_dim(); }

  void validate() const {
    if (input_dim == 0 || feature_dim == 0 || rank == 0) throw ConfigError("model dims and rank must be positive");
    if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) throw ConfigError("model init_scale must be >= 0");
  }
};

/// Labelled examples, stored row-major.
class TaskBatch {
 public:
  TaskBatch() = default;
  TaskBatch(std::size_t dim, std::vector<double> features, std::vector<int> labels)
      : dim_(dim), features_(std::move(features)), labels_(std::move(labels)) {
    if (dim_ == 0) throw InvalidInput("task batch: zero feature dim");
    if (features_.size() != dim_ * labels_.size()) throw InvalidInput("task batch: feature/label count mismatch");
    for (int y : labels_) {
      if (y != 0 && y != 1) throw InvalidInput("task batch: labels must be binary");
    }
    for (double v : features_) {
      if (!std::isfinite(v)) throw InvalidInput("task batch: non-finite feature");
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t dim() const noexcept { return dim_; }
  std::span<const double> row(std::size_t i) const { return {features_.data() + i * dim_, dim_}; }
  std::span<const double> features() const noexcept { return features_; }
  std::span<const int> labels() const noexcept { return labels_; }
  int label(std::size_t i) const { return labels_[i]; }

  TaskBatch subset(std::span<const std::size_t> rows) const {
    std::vector<double> f;
    std::vector<int> y;
    f.reserve(rows.size() * dim_);
    y.reserve(rows.size());
    for (auto r : rows) {
      auto x = row(r);
      f.insert(f.end(), x.begin(), x.end());
      y.push_back(labels_[r]);
    }
    return TaskBatch(dim_, std::move(f), std::move(y));
  }

  friend bool operator==(const TaskBatch&, const TaskBatch&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
};

/// Fixed random projection followed by tanh; stands in for a frozen
/// pretrained backbone. Never modified after construction.
class Backbone {
 public:
  Backbone(std::size_t input_dim, std::size_t feature_dim, std::uint64_t seed)
      : input_dim_(input_dim), feature_dim_(feature_dim), projection_(input_dim * feature_dim) {
    Rng rng(derive_seed(seed, {0xbac4b0e}));
    std::normal_distribution<double> n01(0.0, 1.0);
    for (auto& w : projection_) w = n01(rng);
  }

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  /// Row-major input_dim x feature_dim.
  std::span<const double> projection() const noexcept { return projection_; }
  double weight(std::size_t d, std::size_t f) const { return projection_[d * feature_dim_ + f]; }

  friend bool operator==(const Backbone&, const Backbone&) = default;

 private:
  std::size_t input_dim_;
  std::size_t feature_dim_;
  std::vector<double> projection_;
};

struct FinetuneConfig {
  std::size_t epochs = 30;
  double lr = 0.005;
  std::size_t batch_size = 32;
};

struct FinetuneResult {
  TaskModule module;
  /// Evaluation AUC after each epoch.
  std::vector<double> auc_trace;
};

/// Shuffled mini-batch index lists covering 0..n-1 once.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw InvalidInput("batch size must be positive");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(s),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  }
  return out;
}

/// Frozen backbone with a low-rank input adapter and a linear logistic head.
///
/// For input x the model computes
///   z = x + U (V^T x)          adapter, U and V are input_dim x rank
///   a = tanh(W^T z)            backbone, W fixed
///   logit = w . a + b          head
/// and the loss is the mean binary cross-entropy over the batch. The adapter
/// vector stores U then V, both row-major; the head stores w then b.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_((cfg.validate(), cfg)), backbone_(cfg.input_dim, cfg.feature_dim, cfg.backbone_seed) {}

  const ModelConfig& config() const noexcept { return cfg_; }
  const Backbone& backbone() const noexcept { return backbone_; }

  TaskModule zero_module() const { return {ModuleVector(cfg_.adapter_dim()), ModuleVector(cfg_.head_dim())}; }

  /// Fresh Gaussian initialization; what the Rand baseline uses for every task.
  TaskModule random_init(std::uint64_t seed) const {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, cfg_.init_scale);
    TaskModule m = zero_module();
    for (auto& v : m.adapter.values()) v = n(rng);
    for (auto& v : m.head.values()) v = n(rng);
    return m;
  }

  /// Backbone features for one input after the adapter.
  std::vector<double> features(const TaskModule& m, std::span<const double> x) const {
    check(m);
    if (x.size() != cfg_.input_dim) throw InvalidInput("model: input dim mismatch");
    std::vector<double> s(cfg_.rank), z(cfg_.input_dim), a(cfg_.feature_dim);
    forward_one(m, x, s, z, a);
    return a;
  }

  /// Sigmoid of the head applied to a feature vector.
  double head_score(const ModuleVector& head, std::span<const double> feats) const {
    if (head.dim() != cfg_.head_dim() || feats.size() != cfg_.feature_dim) throw InvalidInput("model: head dim mismatch");
    return sigmoid(logit_from_features(head, feats));
  }

  double forward_loss(const TaskModule& m, const TaskBatch& batch) const {
    check(m, batch);
    std::vector<double> s(cfg_.rank), z(cfg_.input_dim), a(cfg_.feature_dim);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double l = forward_one(m, batch.row(i), s, z, a);
      total += bce(l, batch.label(i));
    }
    return total / static_cast<double>(batch.size());
  }

  /// Exact gradient of forward_loss with respect to (adapter, head).
  TaskModule grad_module(const TaskModule& m, const TaskBatch& batch) const {
    check(m, batch);
    const std::size_t D = cfg_.input_dim, F = cfg_.feature_dim, R = cfg_.rank;
    const std::size_t v_off = D * R;
    TaskModule g = zero_module();
    std::vector<double> s(R), z(D), a(F), dh(F), dz(D), ds(R);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    const auto& U = m.adapter;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto x = batch.row(i);
      const double l = forward_one(m, x, s, z, a);
      const double delta = (sigmoid(l) - batch.label(i)) * inv_n;
      for (std::size_t f = 0; f < F; ++f) {
        g.head[f] += delta * a[f];
        dh[f] = delta * m.head[f] * (1.0 - a[f] * a[f]);
      }
      g.head[F] += delta;
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t f = 0; f < F; ++f) acc += backbone_.weight(d, f) * dh[f];
        dz[d] = acc;
      }
      std::fill(ds.begin(), ds.end(), 0.0);
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t k = 0; k < R; ++k) {
          g.adapter[d * R + k] += dz[d] * s[k];
          ds[k] += U[d * R + k] * dz[d];
        }
      }
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t k = 0; k < R; ++k) g.adapter[v_off + d * R + k] += x[d] * ds[k];
      }
    }
    return g;
  }

  std::vector<double> predict_scores(const TaskModule& m, const TaskBatch& inputs) const {
    check(m, inputs);
    std::vector<double> s(cfg_.rank), z(cfg_.input_dim), a(cfg_.feature_dim);
    std::vector<double> out(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) out[i] = sigmoid(forward_one(m, inputs.row(i), s, z, a));
    return out;
  }

  double eval_auc(const TaskModule& m, const TaskBatch& eval) const {
    const auto scores = predict_scores(m, eval);
    return auc(scores, eval.labels());
  }

  /// Mini-batch gradient descent from `init`, evaluating on `eval` after every epoch.
  FinetuneResult local_finetune(const TaskModule& init, const TaskBatch& train, const TaskBatch& eval,
                                const FinetuneConfig& cfg, std::uint64_t seed) const {
    if (train.empty()) throw InvalidInput("local_finetune: empty training split");
    if (cfg.epochs == 0) throw InvalidInput("local_finetune: epochs must be >= 1");
    if (!(cfg.lr >= 0.0)) throw InvalidInput("local_finetune: lr must be >= 0");
    check(init, train);
    FinetuneResult res{init, {}};
    res.auc_trace.reserve(cfg.epochs);
    Rng rng(seed);
    std::size_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      for (const auto& rows : minibatches(train.size(), cfg.batch_size, rng)) {
        const TaskBatch mb = train.subset(rows);
        const TaskModule g = grad_module(res.module, mb);
        for (Part p : kParts) axpy(-cfg.lr, g[p], res.module[p]);
        if (!res.module.adapter.all_finite() || !res.module.head.all_finite()) {
          throw DivergenceError("local_finetune: parameters became non-finite", step);
        }
        ++step;
      }
      res.auc_trace.push_back(eval_auc(res.module, eval));
    }
    return res;
  }

  void check(const TaskModule& m) const {
    if (m.adapter.dim() != cfg_.adapter_dim()) throw InvalidInput("model: adapter dim mismatch");
    if (m.head.dim() != cfg_.head_dim()) throw InvalidInput("model: head dim mismatch");
  }

  void check(const TaskModule& m, const TaskBatch& batch) const {
    check(m);
    if (batch.empty()) throw InvalidInput("model: empty batch");
    if (batch.dim() != cfg_.input_dim) throw InvalidInput("model: batch feature dim mismatch");
  }

  static double sigmoid(double l) noexcept {
    if (l >= 0.0) return 1.0 / (1.0 + std::exp(-l));
    const double e = std::exp(l);
    return e / (1.0 + e);
  }

  /// softplus(l) - y * l, the stable form of binary cross-entropy on a logit.
  static double bce(double l, int y) noexcept {
    return std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - (y == 1 ? l : 0.0);
  }

 private:
  double logit_from_features(const ModuleVector& head, std::span<const double> a) const {
    double l = head[cfg_.feature_dim];
    for (std::size_t f = 0; f < cfg_.feature_dim; ++f) l += head[f] * a[f];
    return l;
  }

  double forward_one(const TaskModule& m, std::span<const double> x, std::vector<double>& s, std::vector<double>& z,
                     std::vector<double>& a) const {
    const std::size_t D = cfg_.input_dim, F = cfg_.feature_dim, R = cfg_.rank;
    const std::size_t v_off = D * R;
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t k = 0; k < R; ++k) s[k] += m.adapter[v_off + d * R + k] * x[d];
    }
    for (std::size_t d = 0; d < D; ++d) {
      double acc = x[d];
      for (std::size_t k = 0; k < R; ++k) acc += m.adapter[d * R + k] * s[k];
      z[d] = acc;
    }
    for (std::size_t f = 0; f < F; ++f) {
      double h = 0.0;
      for (std::size_t d = 0; d < D; ++d) h += backbone_.weight(d, f) * z[d];
      a[f] = std::tanh(h);
    }
    return logit_from_features(m.head, a);
  }

  ModelConfig cfg_;
  Backbone backbone_;
};

}  // namespace fedkei
