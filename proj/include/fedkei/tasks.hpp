#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedkei/digest.hpp"
#include "fedkei/errors.hpp"
#include "fedkei/model.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/rng.hpp"

namespace fedkei {

struct StreamConfig {
  std::size_t clients = 5;
  std::size_t tasks = 5;
  std::size_t input_dim = 16;
  double dirichlet_alpha = 0.5;
  std::size_t train_per_task = 200;
  std::size_t eval_per_task = 200;
  /// Every class gets at least this many samples in each split of each task.
  std::size_t min_per_class = 4;
  double noise_sigma = 0.3;
  /// Correlation of class prototypes through a shared drifting component.
  double transfer_strength = 0.8;
  std::uint64_t seed = 0;

  std::size_t classes() const noexcept { return tasks + 1; }

  void validate() const {
    if (clients < 2) throw ConfigError("stream: need at least 2 clients");
    if (tasks < 1) throw ConfigError("stream: need at least 1 task");
    if (input_dim < 2) throw ConfigError("stream: input_dim must be >= 2");
    if (!(dirichlet_alpha > 0.0) || !std::isfinite(dirichlet_alpha)) throw ConfigError("stream: dirichlet_alpha must be > 0");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("stream: noise_sigma must be >= 0");
    if (!(transfer_strength >= 0.0 && transfer_strength <= 1.0)) throw ConfigError("stream: transfer_strength must lie in [0,1]");
    if (min_per_class == 0) throw ConfigError("stream: min_per_class must be >= 1");
    const std::size_t need = classes() * min_per_class;
    if (train_per_task < need || eval_per_task < need) {
      throw ConfigError("stream: infeasible sample counts, each split needs at least " + std::to_string(need) +
                        " samples for " + std::to_string(classes()) + " classes");
    }
  }
};

/// One binary class-incremental task: the positive class is new to the client,
/// the negatives are every class it has seen before.
struct SyntheticTask {
  std::size_t client_id = 0;
  std::size_t task_time = 1;
  std::size_t positive_class = 0;
  std::vector<std::size_t> negative_classes;
  TaskBatch train;
  TaskBatch eval;
};

struct TaskStream {
  StreamConfig config;
  /// Unit-norm class prototypes, one per class.
  std::vector<std::vector<double>> prototypes;
  /// shares[k][i]: fraction of class k held by client i (each row sums to 1).
  std::vector<std::vector<double>> shares;
  /// tasks[i][t-1] is client i's task at time t.
  std::vector<std::vector<SyntheticTask>> tasks;
};

namespace detail {

inline std::vector<double> normalized(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw InvariantViolation("cannot normalize a zero vector");
  for (auto& x : v) x /= n;
  return v;
}

inline std::vector<double> gaussian_vector(std::size_t dim, double sd, Rng& rng) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(dim);
  for (auto& x : v) x = n(rng);
  return v;
}

/// Largest-remainder split of `total` into parts proportional to `w`, each at
/// least `floor_each`.
inline std::vector<std::size_t> allocate_counts(std::size_t total, const std::vector<double>& w, std::size_t floor_each) {
  const std::size_t k = w.size();
  std::vector<std::size_t> out(k, floor_each);
  const std::size_t spare = total - k * floor_each;
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  std::vector<double> frac(k);
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const double exact = wsum > 0.0 ? spare * w[c] / wsum : static_cast<double>(spare) / k;
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    out[c] += whole;
    used += whole;
    frac[c] = exact - static_cast<double>(whole);
  }
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; used < spare; ++r, ++used) out[idx[r % k]] += 1;
  return out;
}

}  // namespace detail

/// Class prototypes: each is normalize(sqrt(s) * u_k + sqrt(1-s) * g_k), where
/// g_k is an independent Gaussian direction and u_k walks along a quarter arc
/// in a fixed random plane as k grows. With s > 0 consecutive tasks share a
/// discriminative direction; with s = 0 prototypes are independent.
inline std::vector<std::vector<double>> generate_prototypes(std::size_t classes, std::size_t dim, double strength,
                                                            Rng& rng) {
  auto b = detail::normalized(detail::gaussian_vector(dim, 1.0, rng));
  auto s = detail::gaussian_vector(dim, 1.0, rng);
  const double proj = std::inner_product(s.begin(), s.end(), b.begin(), 0.0);
  for (std::size_t d = 0; d < dim; ++d) s[d] -= proj * b[d];
  s = detail::normalized(std::move(s));

  std::vector<std::vector<double>> protos;
  protos.reserve(classes);
  const double denom = classes > 1 ? static_cast<double>(classes - 1) : 1.0;
  for (std::size_t k = 0; k < classes; ++k) {
    const double angle = 0.5 * std::numbers::pi * static_cast<double>(k) / denom;
    auto g = detail::gaussian_vector(dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    std::vector<double> raw(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      const double shared = std::cos(angle) * b[d] + std::sin(angle) * s[d];
      raw[d] = std::sqrt(strength) * shared + std::sqrt(1.0 - strength) * g[d];
    }
    protos.push_back(detail::normalized(std::move(raw)));
  }
  return protos;
}

/// Per-class client shares drawn from a symmetric Dirichlet.
inline std::vector<std::vector<double>> dirichlet_shares(std::size_t classes, std::size_t clients, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<std::vector<double>> shares(classes, std::vector<double>(clients));
  for (auto& row : shares) {
    double total = 0.0;
    for (auto& v : row) {
      v = gamma(rng);
      total += v;
    }
    if (total <= 0.0) {
      std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(clients));
      continue;
    }
    for (auto& v : row) v /= total;
  }
  return shares;
}

namespace detail {

inline TaskBatch sample_split(const TaskStream& st, std::size_t client, std::size_t task_time, std::size_t total,
                              Rng& rng) {
  const auto& cfg = st.config;
  std::vector<double> w(task_time + 1);
  for (std::size_t k = 0; k <= task_time; ++k) w[k] = st.shares[k][client];
  const auto counts = allocate_counts(total, w, cfg.min_per_class);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
  const double noise_on = cfg.noise_sigma > 0.0 ? 1.0 : 0.0;
  std::vector<double> feats;
  std::vector<int> labels;
  feats.reserve(total * cfg.input_dim);
  labels.reserve(total);
  for (std::size_t k = 0; k <= task_time; ++k) {
    for (std::size_t n = 0; n < counts[k]; ++n) {
      for (std::size_t d = 0; d < cfg.input_dim; ++d) feats.push_back(st.prototypes[k][d] + noise_on * noise(rng));
      labels.push_back(k == task_time ? 1 : 0);
    }
  }
  return TaskBatch(cfg.input_dim, std::move(feats), std::move(labels));
}

}  // namespace detail

/// Builds the per-client task streams. Task t asks client i to separate class
/// t (new) from classes 0..t-1 (seen before). Class mixes differ per client
/// through the Dirichlet shares.
inline TaskStream generate_stream(const StreamConfig& cfg) {
  cfg.validate();
  TaskStream st;
  st.config = cfg;
  Rng proto_rng(derive_seed(cfg.seed, {seed_tag::stream, 1}));
  st.prototypes = generate_prototypes(cfg.classes(), cfg.input_dim, cfg.transfer_strength, proto_rng);
  Rng share_rng(derive_seed(cfg.seed, {seed_tag::stream, 2}));
  st.shares = dirichlet_shares(cfg.classes(), cfg.clients, cfg.dirichlet_alpha, share_rng);

  st.tasks.resize(cfg.clients);
  for (std::size_t i = 0; i < cfg.clients; ++i) {
    for (std::size_t t = 1; t <= cfg.tasks; ++t) {
      Rng rng(derive_seed(cfg.seed, {seed_tag::stream, 3, i, t}));
      SyntheticTask task;
      task.client_id = i;
      task.task_time = t;
      task.positive_class = t;
      for (std::size_t k = 0; k < t; ++k) task.negative_classes.push_back(k);
      task.train = detail::sample_split(st, i, t, cfg.train_per_task, rng);
      task.eval = detail::sample_split(st, i, t, cfg.eval_per_task, rng);
      st.tasks[i].push_back(std::move(task));
    }
  }
  return st;
}

enum class OrderMode { synchronous, reversed, shuffled };

inline OrderMode order_mode_from_string(const std::string& s) {
  if (s == "synchronous") return OrderMode::synchronous;
  if (s == "reversed") return OrderMode::reversed;
  if (s == "shuffled") return OrderMode::shuffled;
  throw ConfigError("unknown task order mode '" + s + "'");
}

inline std::string to_string(OrderMode m) {
  switch (m) {
    case OrderMode::synchronous: return "synchronous";
    case OrderMode::reversed: return "reversed";
    case OrderMode::shuffled: return "shuffled";
  }
  return "synchronous";
}

/// Reorders every client's task list. Task times are renumbered to the new
/// positions; the positive/negative class ids travel with each task.
inline TaskStream shuffle_orders(TaskStream st, OrderMode mode, std::uint64_t seed) {
  for (std::size_t i = 0; i < st.tasks.size(); ++i) {
    auto& list = st.tasks[i];
    if (mode == OrderMode::reversed) {
      std::reverse(list.begin(), list.end());
    } else if (mode == OrderMode::shuffled) {
      Rng rng(derive_seed(seed, {seed_tag::order, i}));
      std::shuffle(list.begin(), list.end(), rng);
    }
    for (std::size_t t = 0; t < list.size(); ++t) list[t].task_time = t + 1;
  }
  return st;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// CSV rendering of one task: feature columns, label, split.
inline std::string task_csv(const SyntheticTask& task) {
  std::ostringstream os;
  const std::size_t dim = task.train.dim();
  for (std::size_t d = 0; d < dim; ++d) os << 'x' << d << ',';
  os << "label,split\n";
  auto emit = [&](const TaskBatch& b, const char* split) {
    for (std::size_t r = 0; r < b.size(); ++r) {
      for (double v : b.row(r)) os << format_double(v) << ',';
      os << b.label(r) << ',' << split << '\n';
    }
  };
  emit(task.train, "train");
  emit(task.eval, "eval");
  return os.str();
}

/// Content hash of the whole stream (git blob id of the concatenated task CSVs).
inline std::string dataset_hash(const TaskStream& st) {
  std::string all;
  for (const auto& client : st.tasks) {
    for (const auto& task : client) {
      all += "client " + std::to_string(task.client_id) + " time " + std::to_string(task.task_time) + " positive " +
             std::to_string(task.positive_class) + '\n';
      all += task_csv(task);
    }
  }
  return git_blob_hash(all);
}

inline nlohmann::json to_json(const StreamConfig& c) {
  return {{"clients", c.clients},
          {"tasks", c.tasks},
          {"input_dim", c.input_dim},
          {"dirichlet_alpha", c.dirichlet_alpha},
          {"train_per_task", c.train_per_task},
          {"eval_per_task", c.eval_per_task},
          {"min_per_class", c.min_per_class},
          {"noise_sigma", c.noise_sigma},
          {"transfer_strength", c.transfer_strength},
          {"seed", c.seed}};
}

/// Writes one CSV per task plus manifest.json into `dir`. Returns the manifest.
inline nlohmann::json export_stream(const TaskStream& st, const std::filesystem::path& dir,
                                    const nlohmann::json& resolved_config = nullptr) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  nlohmann::json manifest;
  manifest["config"] = resolved_config.is_null() ? to_json(st.config) : resolved_config;
  manifest["dataset_hash"] = dataset_hash(st);
  manifest["tasks"] = nlohmann::json::array();
  for (const auto& client : st.tasks) {
    for (const auto& task : client) {
      const std::string name = "task_c" + std::to_string(task.client_id) + "_t" + std::to_string(task.task_time) + ".csv";
      const std::string body = task_csv(task);
      std::ofstream out(dir / name, std::ios::binary);
      if (!out) throw ConfigError("cannot write '" + (dir / name).string() + "'");
      out << body;
      manifest["tasks"].push_back({{"client_id", task.client_id},
                                   {"task_time", task.task_time},
                                   {"positive_class", task.positive_class},
                                   {"negative_classes", task.negative_classes},
                                   {"file", name},
                                   {"n_train", task.train.size()},
                                   {"n_eval", task.eval.size()},
                                   {"crc32", hex32(crc32_of(body))}});
    }
  }
  std::ofstream mf(dir / "manifest.json", std::ios::binary);
  if (!mf) throw ConfigError("cannot write manifest in '" + dir.string() + "'");
  mf << manifest.dump(2) << '\n';
  return manifest;
}

}  // namespace fedkei
