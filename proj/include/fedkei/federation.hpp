#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "fedkei/bilevel.hpp"
#include "fedkei/clustering.hpp"
#include "fedkei/errors.hpp"
#include "fedkei/metrics.hpp"
#include "fedkei/model.hpp"
#include "fedkei/paramspace.hpp"
#include "fedkei/part.hpp"
#include "fedkei/pool.hpp"
#include "fedkei/rng.hpp"
#include "fedkei/tasks.hpp"

namespace fedkei {

/// Initialization strategies compared by the simulator. Each ablation
/// variant adds one component to its predecessor.
enum class Variant : std::uint8_t {
  rand,         // fresh random init per task
  fedavg_init,  // plain mean of every pooled module
  variant_a,    // learned alpha over per-client aggregates
  variant_b,    // learned alpha over k-means cluster modules
  variant_c,    // + beta learned by direct gradient descent
  fedkei,       // + beta learned through the inner alpha step (bi-level)
};

inline constexpr std::array<Variant, 6> kAllVariants{Variant::rand,      Variant::fedavg_init, Variant::variant_a,
                                                     Variant::variant_b, Variant::variant_c,   Variant::fedkei};

constexpr std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::rand: return "Rand";
    case Variant::fedavg_init: return "FedAvgInit";
    case Variant::variant_a: return "A";
    case Variant::variant_b: return "B";
    case Variant::variant_c: return "C";
    case Variant::fedkei: return "FedKEI";
  }
  return "?";
}

inline Variant variant_from_string(std::string_view s) {
  for (auto v : kAllVariants) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected Rand, FedAvgInit, A, B, C or FedKEI)");
}

// ---------------------------------------------------------------------------
// Wire format

enum class MessageKind : std::uint8_t {
  cluster_modules_down = 0,
  client_grad_up = 1,
  optimized_modules_down = 2,
  task_module_up = 3,
};

inline constexpr std::size_t kMessageKinds = 4;

constexpr std::string_view to_string(MessageKind k) noexcept {
  switch (k) {
    case MessageKind::cluster_modules_down: return "ClusterModulesDown";
    case MessageKind::client_grad_up: return "ClientGradUp";
    case MessageKind::optimized_modules_down: return "OptimizedModulesDown";
    case MessageKind::task_module_up: return "TaskModuleUp";
  }
  return "?";
}

constexpr bool is_downlink(MessageKind k) noexcept {
  return k == MessageKind::cluster_modules_down || k == MessageKind::optimized_modules_down;
}

inline constexpr std::uint32_t kServerId = 0xffffffffu;

/// One protocol message. The payload is module-shaped vectors only (cluster
/// modules, gradients with respect to them, or a trained module); there is no
/// field that could carry training examples.
struct Message {
  MessageKind kind = MessageKind::cluster_modules_down;
  std::uint32_t task_time = 0;
  std::uint32_t phase = 0;
  std::uint32_t sender = kServerId;
  Part part = Part::adapter;
  std::vector<ModuleVector> payload;

  friend bool operator==(const Message&, const Message&) = default;
};

/// Envelope: u32 length of the rest, u8 kind, u32 task_time, u32 phase,
/// u32 sender, u8 part, u32 vector count, then each vector in the binary
/// module format. All integers little-endian.
inline std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> body;
  body.push_back(static_cast<std::uint8_t>(m.kind));
  put_u32(body, m.task_time);
  put_u32(body, m.phase);
  put_u32(body, m.sender);
  body.push_back(static_cast<std::uint8_t>(m.part));
  put_u32(body, static_cast<std::uint32_t>(m.payload.size()));
  for (const auto& v : m.payload) serialize_into(v, body);
  std::vector<std::uint8_t> out;
  out.reserve(body.size() + 4);
  put_u32(out, static_cast<std::uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline Message decode(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  const std::uint32_t len = in.u32();
  if (len != in.remaining()) throw InvalidInput("message: length prefix does not match envelope size");
  Message m;
  const std::uint8_t kind = in.u8();
  if (kind >= kMessageKinds) throw InvalidInput("message: unknown kind " + std::to_string(kind));
  m.kind = static_cast<MessageKind>(kind);
  m.task_time = in.u32();
  m.phase = in.u32();
  m.sender = in.u32();
  m.part = part_from_u8(in.u8());
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) m.payload.push_back(deserialize(in));
  if (in.remaining() != 0) throw InvalidInput("message: trailing bytes");
  return m;
}

// ---------------------------------------------------------------------------
// Communication ledger

struct TrafficCount {
  std::size_t messages = 0;
  std::size_t vectors = 0;
  /// Scalar parameters carried.
  std::size_t params = 0;
  /// Serialized vector bytes (dim header + f64 values).
  std::size_t payload_bytes = 0;
  /// Full envelope bytes on the wire.
  std::size_t wire_bytes = 0;

  TrafficCount& operator+=(const TrafficCount& o) {
    messages += o.messages;
    vectors += o.vectors;
    params += o.params;
    payload_bytes += o.payload_bytes;
    wire_bytes += o.wire_bytes;
    return *this;
  }
  friend bool operator==(const TrafficCount&, const TrafficCount&) = default;
};

struct LedgerRow {
  std::array<TrafficCount, kMessageKinds> by_kind{};

  TrafficCount total() const {
    TrafficCount t;
    for (const auto& k : by_kind) t += k;
    return t;
  }
  friend bool operator==(const LedgerRow&, const LedgerRow&) = default;
};

/// Traffic per (client, task_time), both directions.
class CommLedger {
 public:
  using Key = std::pair<std::size_t, std::size_t>;

  void record(std::size_t client, const Message& m, std::size_t wire_size) {
    auto& c = rows_[{client, m.task_time}].by_kind[static_cast<std::size_t>(m.kind)];
    c.messages += 1;
    c.vectors += m.payload.size();
    c.wire_bytes += wire_size;
    for (const auto& v : m.payload) {
      c.params += v.dim();
      c.payload_bytes += serialized_size(v.dim());
    }
  }

  void merge(const CommLedger& other) {
    for (const auto& [k, row] : other.rows_) {
      auto& dst = rows_[k];
      for (std::size_t i = 0; i < kMessageKinds; ++i) dst.by_kind[i] += row.by_kind[i];
    }
  }

  LedgerRow row(std::size_t client, std::size_t task_time) const {
    auto it = rows_.find({client, task_time});
    return it == rows_.end() ? LedgerRow{} : it->second;
  }

  /// Parameters moved for (client, task) expressed in whole modules of
  /// `module_dim` = |adapter| + |head|.
  double module_transfers(std::size_t client, std::size_t task_time, std::size_t module_dim) const {
    return static_cast<double>(row(client, task_time).total().params) / static_cast<double>(module_dim);
  }

  const std::map<Key, LedgerRow>& rows() const noexcept { return rows_; }
  friend bool operator==(const CommLedger&, const CommLedger&) = default;

 private:
  std::map<Key, LedgerRow> rows_;
};

// ---------------------------------------------------------------------------
// Protocol monitor

/// Validates message order. Round tags (task_time, phase) must strictly
/// increase on every (client, direction, part) channel, uplinks must come
/// from the client they claim, and a ClientGradUp for a round is accepted
/// only after that client received the matching ClusterModulesDown.
class ProtocolMonitor {
 public:
  void on_send(std::size_t client, const Message& m) {
    const bool down = is_downlink(m.kind);
    if (down && m.sender != kServerId) throw ProtocolError("downlink message not sent by the server");
    if (!down && m.sender != client) throw ProtocolError("uplink sender does not match its channel");
    const auto chan = std::tuple(client, down, static_cast<int>(m.part));
    const auto round = std::pair(m.task_time, m.phase);
    if (auto it = last_.find(chan); it != last_.end() && !(it->second < round)) {
      throw ProtocolError("round tag did not increase on channel to/from client " + std::to_string(client));
    }
    if (m.kind == MessageKind::client_grad_up) {
      if (m.phase == 0) throw ProtocolError("ClientGradUp cannot open a task");
      const auto key = std::tuple(client, m.task_time, m.phase - 1, static_cast<int>(m.part));
      if (pending_.erase(key) == 0) {
        throw ProtocolError("ClientGradUp from client " + std::to_string(client) + " for task " +
                            std::to_string(m.task_time) + " without a preceding ClusterModulesDown");
      }
    }
    if (m.kind == MessageKind::cluster_modules_down) {
      pending_.insert(std::tuple(client, m.task_time, m.phase, static_cast<int>(m.part)));
    }
    last_[chan] = round;
  }

 private:
  std::map<std::tuple<std::size_t, bool, int>, std::pair<std::uint32_t, std::uint32_t>> last_;
  std::set<std::tuple<std::size_t, std::uint32_t, std::uint32_t, int>> pending_;
};

/// In-process reliable ordered transport. Every message is encoded to bytes,
/// checked by the monitor, and charged to the ledger before delivery.
class Network {
 public:
  Network(std::size_t clients, CommLedger& ledger, ProtocolMonitor& monitor)
      : down_(clients), ledger_(ledger), monitor_(monitor) {}

  void send_down(std::size_t client, const Message& m) {
    if (!is_downlink(m.kind)) throw ProtocolError("send_down with an uplink message kind");
    auto bytes = encode(m);
    std::lock_guard lock(mu_);
    monitor_.on_send(client, m);
    ledger_.record(client, m, bytes.size());
    down_.at(client).push_back(std::move(bytes));
  }

  void send_up(const Message& m) {
    if (is_downlink(m.kind)) throw ProtocolError("send_up with a downlink message kind");
    auto bytes = encode(m);
    std::lock_guard lock(mu_);
    if (m.sender >= down_.size()) throw ProtocolError("uplink from unknown client");
    monitor_.on_send(m.sender, m);
    ledger_.record(m.sender, m, bytes.size());
    up_.push_back(std::move(bytes));
  }

  Message recv_at_client(std::size_t client) {
    std::lock_guard lock(mu_);
    auto& q = down_.at(client);
    if (q.empty()) throw ProtocolError("client " + std::to_string(client) + " has no pending message");
    auto bytes = std::move(q.front());
    q.pop_front();
    return decode(bytes);
  }

  std::optional<Message> recv_at_server() {
    std::lock_guard lock(mu_);
    if (up_.empty()) return std::nullopt;
    auto bytes = std::move(up_.front());
    up_.pop_front();
    return decode(bytes);
  }

 private:
  std::mutex mu_;
  std::vector<std::deque<std::vector<std::uint8_t>>> down_;
  std::deque<std::vector<std::uint8_t>> up_;
  CommLedger& ledger_;
  ProtocolMonitor& monitor_;
};

/// Gathers one uplink per (client, part) into slots indexed by client id.
/// The result is independent of the order messages arrived in.
class RoundBarrier {
 public:
  RoundBarrier(std::size_t clients, MessageKind kind, std::uint32_t task_time, std::uint32_t phase)
      : kind_(kind), task_time_(task_time), phase_(phase), slots_{std::vector<std::optional<ClusterSet>>(clients),
                                                                   std::vector<std::optional<ClusterSet>>(clients)} {}

  void accept(Message m) {
    if (m.kind != kind_ || m.task_time != task_time_ || m.phase != phase_) {
      throw ProtocolError("unexpected " + std::string(to_string(m.kind)) + " at barrier for task " +
                          std::to_string(task_time_) + " phase " + std::to_string(phase_));
    }
    auto& slot = slots_[m.part].at(m.sender);
    if (slot) throw ProtocolError("duplicate report from client " + std::to_string(m.sender));
    slot = std::move(m.payload);
  }

  const std::vector<std::optional<ClusterSet>>& reports(Part p) const { return slots_[p]; }

 private:
  MessageKind kind_;
  std::uint32_t task_time_;
  std::uint32_t phase_;
  PerPart<std::vector<std::optional<ClusterSet>>> slots_;
};

// ---------------------------------------------------------------------------
// Orchestration

struct ClusterConfig {
  std::size_t k = 3;
  /// Candidates per k-means++ step; 0 selects 2 + floor(ln K).
  std::size_t local_trials = 0;
  LloydOptions lloyd;
  /// Cluster on L2-normalized module vectors (aggregation still uses the raw ones).
  bool normalize = false;
};

struct FederationConfig {
  Variant variant = Variant::fedkei;
  ClusterConfig clustering;
  BiLevelConfig bilevel;
  FinetuneConfig finetune;
  bool learn_actual_alpha = true;
  bool concurrent_clients = false;

  void validate() const {
    if (clustering.k < 1) throw ConfigError("clustering: K must be >= 1");
    bilevel.validate();
    if (finetune.epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
    if (!(finetune.lr >= 0.0) || !std::isfinite(finetune.lr)) throw ConfigError("finetune: lr must be >= 0");
    if (finetune.batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  }
};

struct TaskOutcome {
  std::size_t client_id = 0;
  std::size_t task_time = 0;
  std::size_t positive_class = 0;
  std::string init_source;
  TaskModule init;
  std::vector<double> auc_trace;
  double final_auc = 0.0;
  double lca = 0.0;
  PerPart<std::vector<double>> alpha_hat;
  std::size_t inner_steps = 0;
  std::size_t actual_alpha_epochs = 0;
};

struct StepInfo {
  std::size_t task_time = 0;
  std::size_t pooled = 0;
  PerPart<std::size_t> k{};
  PerPart<std::vector<std::size_t>> cluster_sizes;
  std::size_t outer_steps = 0;
  bool approximate_inner = false;
};

/// Failure inside one task step; carries where it happened.
class TaskStepError : public Error {
 public:
  static constexpr std::size_t kNoClient = static_cast<std::size_t>(-1);

  TaskStepError(std::size_t task_time, std::size_t client, std::exception_ptr cause, const std::string& what,
                bool divergence)
      : Error("task " + std::to_string(task_time) +
              (client == kNoClient ? std::string() : ", client " + std::to_string(client)) + ": " + what),
        task_time_(task_time), client_(client), cause_(std::move(cause)), divergence_(divergence) {}

  std::size_t task_time() const noexcept { return task_time_; }
  std::size_t client() const noexcept { return client_; }
  bool divergence() const noexcept { return divergence_; }
  std::exception_ptr cause() const noexcept { return cause_; }

 private:
  std::size_t task_time_;
  std::size_t client_;
  std::exception_ptr cause_;
  bool divergence_;
};

namespace detail {

struct ClientFailure {
  std::size_t client;
  std::exception_ptr error;
};

/// Runs fn(i) for every client, sequentially or one thread per client.
/// Failures are reported for the lowest failing client id, whatever order
/// the threads finished in.
template <class F>
void for_each_client(std::size_t n, bool concurrent, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (concurrent && n > 1) {
    std::vector<std::thread> workers;
    workers.reserve(n);
    for (std::size_t i = 0; i < n; ++i) workers.emplace_back(guarded, i);
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) throw ClientFailure{i, errors[i]};
  }
}

inline std::string describe(const std::exception_ptr& e, bool& divergence) {
  try {
    std::rethrow_exception(e);
  } catch (const DivergenceError& d) {
    divergence = true;
    return d.what();
  } catch (const std::exception& x) {
    return x.what();
  } catch (...) {
    return "unknown error";
  }
}

}  // namespace detail

/// Server plus simulated clients running the per-task protocol.
///
/// Per task t (all clients advance together):
///   1. cluster the pooled adapters and heads separately (skipped at t = 1),
///   2. outer rounds: ClusterModulesDown, client inner alpha steps,
///      ClientGradUp, barrier, beta update,
///   3. OptimizedModulesDown, client alpha fit, initialization,
///   4. local fine-tuning and TaskModuleUp into the pool.
/// Which of these run depends on the variant. A failing step leaves pool,
/// ledger and protocol state exactly as they were before it.
class Federation {
 public:
  Federation(const Model& model, const TaskStream& stream, FederationConfig cfg, std::uint64_t seed)
      : model_(model), stream_(stream), cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    if (stream_.tasks.empty()) throw InvalidInput("federation: empty task stream");
    if (stream_.config.input_dim != model_.config().input_dim) {
      throw ConfigError("federation: stream input_dim does not match model input_dim");
    }
  }

  std::size_t clients() const noexcept { return stream_.tasks.size(); }
  std::size_t tasks() const noexcept { return stream_.tasks.front().size(); }
  std::size_t completed() const noexcept { return completed_; }
  const KnowledgePool& pool() const noexcept { return pool_; }
  const CommLedger& ledger() const noexcept { return ledger_; }
  const std::vector<std::vector<TaskOutcome>>& outcomes() const noexcept { return outcomes_; }
  const std::vector<StepInfo>& steps() const noexcept { return steps_; }
  const FederationConfig& config() const noexcept { return cfg_; }

  void run_task_step(std::size_t t) {
    if (t != completed_ + 1) throw ProtocolError("tasks must run in order; expected t=" + std::to_string(completed_ + 1));
    CommLedger staged_ledger;
    ProtocolMonitor staged_monitor = monitor_;
    try {
      auto [outcomes, info, entries] = execute(t, staged_ledger, staged_monitor);
      // Commit.
      KnowledgePool next_pool = pool_;
      for (auto& e : entries) next_pool.insert(std::move(e));
      pool_ = std::move(next_pool);
      ledger_.merge(staged_ledger);
      monitor_ = std::move(staged_monitor);
      outcomes_.push_back(std::move(outcomes));
      steps_.push_back(std::move(info));
      completed_ = t;
    } catch (const detail::ClientFailure& f) {
      bool div = false;
      const auto what = detail::describe(f.error, div);
      throw TaskStepError(t, f.client, f.error, what, div);
    } catch (const TaskStepError&) {
      throw;
    } catch (...) {
      auto e = std::current_exception();
      bool div = false;
      const auto what = detail::describe(e, div);
      throw TaskStepError(t, TaskStepError::kNoClient, e, what, div);
    }
  }

  void run_all() {
    for (std::size_t t = completed_ + 1; t <= tasks(); ++t) run_task_step(t);
  }

 private:
  struct StepOutput {
    std::vector<TaskOutcome> outcomes;
    StepInfo info;
    std::vector<PoolEntry> entries;
  };

  const SyntheticTask& task_of(std::size_t client, std::size_t t) const { return stream_.tasks.at(client).at(t - 1); }

  bool uses_clusters() const noexcept {
    return cfg_.variant == Variant::variant_a || cfg_.variant == Variant::variant_b ||
           cfg_.variant == Variant::variant_c || cfg_.variant == Variant::fedkei;
  }

  bool uses_outer_rounds() const noexcept {
    return cfg_.variant == Variant::variant_c || cfg_.variant == Variant::fedkei;
  }

  ClusterAssignment assign(const ModuleMatrix& mods, Part part, std::size_t t) const {
    if (cfg_.variant == Variant::variant_a) {
      const auto keys = pool_.snapshot_keys(part, t);
      std::vector<std::size_t> labels;
      std::map<std::size_t, std::size_t> group;
      for (const auto& k : keys) group.emplace(k.client_id, 0);
      std::size_t g = 0;
      for (auto& [client, idx] : group) idx = g++;
      for (const auto& k : keys) labels.push_back(group.at(k.client_id));
      return assignment_from_labels(mods, std::move(labels), group.size());
    }
    const std::uint64_t s = derive_seed(seed_, {seed_tag::kmeans, t, static_cast<std::uint64_t>(part)});
    if (!cfg_.clustering.normalize) return kmeans(mods, cfg_.clustering.k, s, cfg_.clustering.lloyd, cfg_.clustering.local_trials);
    ModuleMatrix unit;
    for (const auto& col : mods.columns()) {
      const double n = std::sqrt(dot(col, col));
      ModuleVector u = col;
      if (n > 0.0) {
        for (auto& x : u.values()) x /= n;
      }
      unit.push_back(std::move(u));
    }
    auto a = kmeans(unit, cfg_.clustering.k, s, cfg_.clustering.lloyd, cfg_.clustering.local_trials);
    // Centroids and inertia refer to the raw modules from here on.
    return assignment_from_labels(mods, a.labels, a.k);
  }

  StepOutput execute(std::size_t t, CommLedger& ledger, ProtocolMonitor& monitor) {
    const std::size_t n = clients();
    Network net(n, ledger, monitor);
    StepOutput out;
    out.info.task_time = t;
    out.info.pooled = pool_.count(Part::adapter, t);
    out.outcomes.resize(n);
    std::vector<TaskModule> inits(n);
    const auto tt = static_cast<std::uint32_t>(t);
    std::uint32_t next_phase = 0;

    const bool history = t >= 2 && out.info.pooled > 0;
    if (!history || cfg_.variant == Variant::rand) {
      for (std::size_t i = 0; i < n; ++i) {
        inits[i] = model_.random_init(derive_seed(seed_, {seed_tag::init, i, t}));
        out.outcomes[i].init_source = "random";
      }
      next_phase = 1;
    } else if (cfg_.variant == Variant::fedavg_init) {
      PerPart<ClusterSet> mean;
      for (Part p : kParts) {
        const auto mods = pool_.snapshot(p, t);
        const std::vector<double> w(mods.cols(), 1.0 / static_cast<double>(mods.cols()));
        mean[p] = {weighted_sum(mods, w)};
        out.info.k[p] = 1;
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (Part p : kParts) net.send_down(i, {MessageKind::optimized_modules_down, tt, 0, kServerId, p, mean[p]});
      }
      detail::for_each_client(n, cfg_.concurrent_clients, [&](std::size_t i) {
        const auto recv = receive_modules(net, i, MessageKind::optimized_modules_down, tt, 0);
        inits[i] = aggregate_inter(PerPart<InterWeights>{InterWeights::uniform(1), InterWeights::uniform(1)}, recv);
        out.outcomes[i].init_source = "pool_mean";
      });
      next_phase = 1;
    } else {
      PerPart<ModuleMatrix> mods;
      PerPart<IntraWeights> beta;
      for (Part p : kParts) {
        mods[p] = pool_.snapshot(p, t);
        const auto a = assign(mods[p], p, t);
        beta[p] = init_beta(a);
        out.info.k[p] = a.k;
        out.info.cluster_sizes[p] = a.row_sizes();
      }
      std::uint32_t phase = 0;
      if (uses_outer_rounds()) {
        BiLevelConfig inner_cfg = cfg_.bilevel;
        // Variant C differentiates the loss at theta~(alpha, beta) directly, without the inner step.
        if (cfg_.variant == Variant::variant_c) inner_cfg.eta1 = 0.0;
        for (std::size_t s = 0; s < cfg_.bilevel.outer_steps; ++s, phase += 2) {
          PerPart<ClusterSet> thetas;
          for (Part p : kParts) thetas[p] = cluster_modules_from_beta(beta[p], mods[p]);
          for (std::size_t i = 0; i < n; ++i) {
            for (Part p : kParts) net.send_down(i, {MessageKind::cluster_modules_down, tt, phase, kServerId, p, thetas[p]});
          }
          detail::for_each_client(n, cfg_.concurrent_clients, [&](std::size_t i) {
            const auto recv = receive_modules(net, i, MessageKind::cluster_modules_down, tt, phase);
            PerPart<InterWeights> alpha{InterWeights::uniform(recv.adapter.size()), InterWeights::uniform(recv.head.size())};
            const auto inner = inner_update_alpha(model_, alpha, recv, task_of(i, t).train, inner_cfg,
                                                  derive_seed(seed_, {seed_tag::inner, t, i, s}));
            out.outcomes[i].inner_steps += inner.steps;
            for (Part p : kParts) {
              net.send_up({MessageKind::client_grad_up, tt, phase + 1, static_cast<std::uint32_t>(i), p,
                           inner.cluster_grads[p]});
            }
            if (inner.approximate) out.info.approximate_inner = true;
          });
          RoundBarrier barrier(n, MessageKind::client_grad_up, tt, phase + 1);
          while (auto m = net.recv_at_server()) barrier.accept(std::move(*m));
          PerPart<IntraWeights> next;
          for (Part p : kParts) next[p] = server_update_beta(beta[p], mods[p], barrier.reports(p), cfg_.bilevel.eta2);
          beta = std::move(next);
          out.info.outer_steps += 1;
        }
      }
      PerPart<ClusterSet> optimized;
      for (Part p : kParts) optimized[p] = cluster_modules_from_beta(beta[p], mods[p]);
      for (std::size_t i = 0; i < n; ++i) {
        for (Part p : kParts) net.send_down(i, {MessageKind::optimized_modules_down, tt, phase, kServerId, p, optimized[p]});
      }
      const char* source = cfg_.variant == Variant::variant_a   ? "client_groups"
                           : cfg_.variant == Variant::variant_b ? "clusters"
                           : cfg_.variant == Variant::variant_c ? "clusters_direct_beta"
                                                                : "clusters_bilevel_beta";
      detail::for_each_client(n, cfg_.concurrent_clients, [&](std::size_t i) {
        const auto recv = receive_modules(net, i, MessageKind::optimized_modules_down, tt, phase);
        PerPart<InterWeights> alpha_hat{InterWeights::uniform(recv.adapter.size()), InterWeights::uniform(recv.head.size())};
        if (cfg_.learn_actual_alpha) {
          const auto fit = learn_alpha_actual(model_, recv, task_of(i, t).train, cfg_.bilevel,
                                              derive_seed(seed_, {seed_tag::actual_alpha, t, i}));
          alpha_hat = fit.alpha;
          out.outcomes[i].actual_alpha_epochs = fit.epochs;
        }
        inits[i] = aggregate_inter(alpha_hat, recv);
        out.outcomes[i].alpha_hat = {alpha_hat.adapter.alpha, alpha_hat.head.alpha};
        out.outcomes[i].init_source = source;
      });
      next_phase = phase + 1;
    }

    // Local fine-tuning and upload.
    detail::for_each_client(n, cfg_.concurrent_clients, [&](std::size_t i) {
      const auto& task = task_of(i, t);
      auto res = model_.local_finetune(inits[i], task.train, task.eval, cfg_.finetune,
                                       derive_seed(seed_, {seed_tag::finetune, t, i}));
      auto& o = out.outcomes[i];
      o.client_id = i;
      o.task_time = t;
      o.positive_class = task.positive_class;
      o.init = inits[i];
      o.final_auc = res.auc_trace.back();
      o.lca = lca(res.auc_trace);
      o.auc_trace = std::move(res.auc_trace);
      for (Part p : kParts) {
        net.send_up({MessageKind::task_module_up, tt, next_phase, static_cast<std::uint32_t>(i), p, {res.module[p]}});
      }
    });
    while (auto m = net.recv_at_server()) {
      if (m->kind != MessageKind::task_module_up || m->task_time != tt || m->payload.size() != 1) {
        throw ProtocolError("unexpected uplink while collecting task modules");
      }
      out.entries.push_back({{m->sender, t, m->part}, std::move(m->payload.front())});
    }
    if (out.entries.size() != 2 * n) throw IncompleteRound("missing task module uploads");
    return out;
  }

  PerPart<ClusterSet> receive_modules(Network& net, std::size_t client, MessageKind kind, std::uint32_t t,
                                      std::uint32_t phase) const {
    PerPart<ClusterSet> recv;
    PerPart<bool> seen{false, false};
    for (int r = 0; r < 2; ++r) {
      auto m = net.recv_at_client(client);
      if (m.kind != kind || m.task_time != t || m.phase != phase) {
        throw ProtocolError("client " + std::to_string(client) + " received unexpected " + std::string(to_string(m.kind)));
      }
      if (seen[m.part]) throw ProtocolError("duplicate part in downlink");
      seen[m.part] = true;
      const std::size_t want = m.part == Part::adapter ? model_.config().adapter_dim() : model_.config().head_dim();
      for (const auto& v : m.payload) {
        if (v.dim() != want) throw ProtocolError("downlink payload size does not match the part dim");
      }
      recv[m.part] = std::move(m.payload);
    }
    return recv;
  }

  const Model& model_;
  const TaskStream& stream_;
  FederationConfig cfg_;
  std::uint64_t seed_;
  KnowledgePool pool_;
  CommLedger ledger_;
  ProtocolMonitor monitor_;
  std::vector<std::vector<TaskOutcome>> outcomes_;
  std::vector<StepInfo> steps_;
  std::size_t completed_ = 0;
};

}  // namespace fedkei
