#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fedkei/bilevel.hpp"
#include "fedkei/errors.hpp"
#include "fedkei/federation.hpp"
#include "fedkei/metrics.hpp"
#include "fedkei/model.hpp"
#include "fedkei/rng.hpp"
#include "fedkei/tasks.hpp"

namespace fedkei {

using nlohmann::json;

/// Everything a run needs. `execution` settings change how work is
/// scheduled, never the results, so they are left out of the resolved config
/// embedded in output files.
struct RunConfig {
  StreamConfig stream;
  OrderMode order = OrderMode::synchronous;
  ModelConfig model;
  FederationConfig federation;
  std::vector<std::size_t> k_sweep{3};
  std::vector<std::uint64_t> seeds{1};
  std::string out = "out";
  std::size_t workers = 1;

  void validate() const {
    stream.validate();
    model.validate();
    federation.validate();
    if (model.input_dim != stream.input_dim) throw ConfigError("model input_dim must equal stream input_dim");
    if (k_sweep.empty()) throw ConfigError("clustering.k must list at least one value");
    for (auto k : k_sweep) {
      if (k < 1) throw ConfigError("clustering.k values must be >= 1");
    }
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw ConfigError("seeds must be distinct");
    }
    if (workers < 1) throw ConfigError("execution.workers must be >= 1");
  }
};

namespace detail {

inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

/// Reads optional keys from a JSON object and rejects unknown ones.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void get_unsigned(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    if (!is_count(*it)) throw ConfigError(where_ + "." + key + ": expected a non-negative integer");
    out = it->template get<T>();
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      std::size_t used = 0;
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(item.substr(0, dash), &used);
        const auto hi = std::stoull(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("seed range '" + item + "' is descending");
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      } else {
        out.push_back(std::stoull(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("cannot parse seed '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

inline std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (auto s : parse_seed_list(text)) out.push_back(static_cast<std::size_t>(s));
  return out;
}

}  // namespace detail

/// Builds a RunConfig from JSON. Missing keys keep their defaults; unknown keys
/// and wrong types are config errors.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  detail::Fields top(j, "config");
  if (const json* s = top.sub("stream")) {
    detail::Fields f(*s, "stream");
    f.get_unsigned("clients", c.stream.clients);
    f.get_unsigned("tasks", c.stream.tasks);
    f.get_unsigned("input_dim", c.stream.input_dim);
    f.get("dirichlet_alpha", c.stream.dirichlet_alpha);
    f.get_unsigned("train_per_task", c.stream.train_per_task);
    f.get_unsigned("eval_per_task", c.stream.eval_per_task);
    f.get_unsigned("min_per_class", c.stream.min_per_class);
    f.get("noise_sigma", c.stream.noise_sigma);
    f.get("transfer_strength", c.stream.transfer_strength);
    std::string order = to_string(c.order);
    f.get("order", order);
    c.order = order_mode_from_string(order);
    f.finish();
  }
  c.model.input_dim = c.stream.input_dim;
  if (const json* m = top.sub("model")) {
    detail::Fields f(*m, "model");
    f.get_unsigned("feature_dim", c.model.feature_dim);
    f.get_unsigned("rank", c.model.rank);
    f.get_unsigned("backbone_seed", c.model.backbone_seed);
    f.get("init_scale", c.model.init_scale);
    f.finish();
  }
  auto& fed = c.federation;
  if (const json* b = top.sub("bilevel")) {
    detail::Fields f(*b, "bilevel");
    f.get("eta1", fed.bilevel.eta1);
    f.get("eta2", fed.bilevel.eta2);
    f.get_unsigned("inner_batch_size", fed.bilevel.inner_batch_size);
    f.get_unsigned("inner_epochs", fed.bilevel.inner_epochs);
    f.get_unsigned("inner_max_steps", fed.bilevel.inner_max_steps);
    f.get_unsigned("outer_steps", fed.bilevel.outer_steps);
    double actual_lr = -1.0;
    f.get("actual_lr", actual_lr);
    if (actual_lr >= 0.0) fed.bilevel.actual_lr = actual_lr;
    else if (b->contains("actual_lr") && !(*b)["actual_lr"].is_null()) throw ConfigError("bilevel.actual_lr must be >= 0");
    f.get_unsigned("actual_max_epochs", fed.bilevel.actual_max_epochs);
    f.get("actual_rel_tol", fed.bilevel.actual_rel_tol);
    f.get_unsigned("actual_patience", fed.bilevel.actual_patience);
    f.get("learn_actual_alpha", fed.learn_actual_alpha);
    f.finish();
  }
  if (const json* k = top.sub("clustering")) {
    detail::Fields f(*k, "clustering");
    if (const json* ks = f.sub("k")) {
      c.k_sweep.clear();
      if (detail::is_count(*ks)) {
        c.k_sweep.push_back(ks->get<std::size_t>());
      } else if (ks->is_array()) {
        for (const auto& v : *ks) {
          if (!detail::is_count(v)) throw ConfigError("clustering.k: expected non-negative integers");
          c.k_sweep.push_back(v.get<std::size_t>());
        }
      } else {
        throw ConfigError("clustering.k: expected an integer or a list of integers");
      }
    }
    f.get_unsigned("local_trials", fed.clustering.local_trials);
    f.get_unsigned("max_iter", fed.clustering.lloyd.max_iter);
    f.get("tol", fed.clustering.lloyd.tol);
    f.get("normalize", fed.clustering.normalize);
    f.finish();
  }
  if (const json* ft = top.sub("finetune")) {
    detail::Fields f(*ft, "finetune");
    f.get_unsigned("epochs", fed.finetune.epochs);
    f.get("lr", fed.finetune.lr);
    f.get_unsigned("batch_size", fed.finetune.batch_size);
    f.finish();
  }
  std::string variant(to_string(fed.variant));
  top.get("variant", variant);
  fed.variant = variant_from_string(variant);
  if (const json* s = top.sub("seeds")) {
    if (!s->is_array()) throw ConfigError("seeds: expected a list of integers");
    c.seeds.clear();
    for (const auto& v : *s) {
      if (!detail::is_count(v)) throw ConfigError("seeds: expected non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  top.get("out", c.out);
  if (const json* e = top.sub("execution")) {
    detail::Fields f(*e, "execution");
    f.get_unsigned("workers", c.workers);
    f.get("concurrent_clients", fed.concurrent_clients);
    f.finish();
  }
  top.finish();
  if (!(fed.clustering.lloyd.tol >= 0.0)) throw ConfigError("clustering.tol must be >= 0");
  fed.clustering.k = c.k_sweep.front();
  return c;
}

/// Parses a config file (JSON; // and /* */ comments allowed). FEDKEI_SEED,
/// when set, replaces the seed list ("7", "1,2,3" or "1-10").
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  if (const char* env = std::getenv("FEDKEI_SEED"); env && *env) c.seeds = detail::parse_seed_list(env);
  c.validate();
  return c;
}

/// The configuration that determines results, with K fixed to `k`.
inline json resolved_config(const RunConfig& c, std::optional<std::size_t> k = std::nullopt) {
  const auto& fed = c.federation;
  json stream = to_json(c.stream);
  stream.erase("seed");
  stream["order"] = to_string(c.order);
  json bilevel = {{"eta1", fed.bilevel.eta1},
                  {"eta2", fed.bilevel.eta2},
                  {"inner_batch_size", fed.bilevel.inner_batch_size},
                  {"inner_epochs", fed.bilevel.inner_epochs},
                  {"inner_max_steps", fed.bilevel.inner_max_steps},
                  {"outer_steps", fed.bilevel.outer_steps},
                  {"actual_lr", fed.bilevel.actual_learning_rate()},
                  {"actual_max_epochs", fed.bilevel.actual_max_epochs},
                  {"actual_rel_tol", fed.bilevel.actual_rel_tol},
                  {"actual_patience", fed.bilevel.actual_patience},
                  {"learn_actual_alpha", fed.learn_actual_alpha}};
  json clustering = {{"k", k ? json(*k) : json(c.k_sweep)},
                     {"local_trials", fed.clustering.local_trials},
                     {"max_iter", fed.clustering.lloyd.max_iter},
                     {"tol", fed.clustering.lloyd.tol},
                     {"normalize", fed.clustering.normalize}};
  return {{"stream", stream},
          {"model",
           {{"feature_dim", c.model.feature_dim},
            {"rank", c.model.rank},
            {"backbone_seed", c.model.backbone_seed},
            {"init_scale", c.model.init_scale}}},
          {"bilevel", bilevel},
          {"clustering", clustering},
          {"finetune", {{"epochs", fed.finetune.epochs}, {"lr", fed.finetune.lr}, {"batch_size", fed.finetune.batch_size}}},
          {"variant", to_string(fed.variant)},
          {"seeds", c.seeds}};
}

/// The task stream a seed runs on; shared by every variant.
inline TaskStream stream_for_seed(const RunConfig& c, std::uint64_t seed) {
  StreamConfig sc = c.stream;
  sc.seed = seed;
  return shuffle_orders(generate_stream(sc), c.order, derive_seed(seed, {seed_tag::order}));
}

// ---------------------------------------------------------------------------
// Reports

struct TaskSummary {
  std::size_t task_time = 0;
  /// Means over clients.
  double auc = 0.0;
  double lca = 0.0;
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::vector<TaskSummary> tasks;
  double overall_auc = 0.0;
  double overall_lca = 0.0;
  std::vector<std::vector<TaskOutcome>> outcomes;
  std::vector<StepInfo> steps;
  CommLedger ledger;
};

struct RunReport {
  Variant variant = Variant::fedkei;
  std::size_t k = 0;
  std::size_t module_dim = 0;
  json config;
  std::vector<SeedReport> seeds;

  std::vector<double> overall_auc() const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.overall_auc);
    return v;
  }
  std::vector<double> overall_lca() const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.overall_lca);
    return v;
  }
};

/// Failure of one seed, carrying where it happened.
class SeedRunError : public Error {
 public:
  SeedRunError(std::uint64_t seed, const TaskStepError& e)
      : Error("seed " + std::to_string(seed) + ", " + e.what()), seed_(seed), task_time_(e.task_time()),
        client_(e.client()), divergence_(e.divergence()) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t task_time() const noexcept { return task_time_; }
  std::size_t client() const noexcept { return client_; }
  bool divergence() const noexcept { return divergence_; }

 private:
  std::uint64_t seed_;
  std::size_t task_time_;
  std::size_t client_;
  bool divergence_;
};

inline SeedReport summarize(std::uint64_t seed, std::string hash, const Federation& fed) {
  SeedReport r;
  r.seed = seed;
  r.dataset_hash = std::move(hash);
  r.outcomes = fed.outcomes();
  r.steps = fed.steps();
  r.ledger = fed.ledger();
  std::vector<double> aucs, lcas;
  for (const auto& step : r.outcomes) {
    std::vector<double> a, l;
    for (const auto& o : step) {
      a.push_back(o.final_auc);
      l.push_back(o.lca);
    }
    TaskSummary ts{step.front().task_time, mean(a), mean(l)};
    aucs.push_back(ts.auc);
    lcas.push_back(ts.lca);
    r.tasks.push_back(ts);
  }
  r.overall_auc = mean(aucs);
  r.overall_lca = mean(lcas);
  return r;
}

inline SeedReport run_seed(const RunConfig& c, Variant v, std::size_t k, std::uint64_t seed) {
  const TaskStream stream = stream_for_seed(c, seed);
  FederationConfig fc = c.federation;
  fc.variant = v;
  fc.clustering.k = k;
  Model model(c.model);
  Federation fed(model, stream, fc, seed);
  try {
    fed.run_all();
  } catch (const TaskStepError& e) {
    throw SeedRunError(seed, e);
  }
  return summarize(seed, dataset_hash(stream), fed);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Errors are rethrown
/// for the lowest failing index.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t w = std::min(std::max<std::size_t>(workers, 1), n);
  if (w <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < w; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// One variant over every configured seed at a fixed K.
inline RunReport run_variant(const RunConfig& c, Variant v, std::size_t k) {
  c.validate();
  RunReport r;
  r.variant = v;
  r.k = k;
  r.module_dim = c.model.module_dim();
  RunConfig rc = c;
  rc.federation.variant = v;
  r.config = resolved_config(rc, k);
  r.seeds.resize(c.seeds.size());
  parallel_for(c.seeds.size(), c.workers, [&](std::size_t i) { r.seeds[i] = run_seed(c, v, k, c.seeds[i]); });
  return r;
}

inline json to_json(const TrafficCount& t) {
  return {{"messages", t.messages},
          {"vectors", t.vectors},
          {"params", t.params},
          {"payload_bytes", t.payload_bytes},
          {"wire_bytes", t.wire_bytes}};
}

inline json to_json(const RunReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    json tasks = json::array();
    for (std::size_t ti = 0; ti < s.tasks.size(); ++ti) {
      json clients = json::array();
      for (const auto& o : s.outcomes[ti]) {
        clients.push_back({{"client_id", o.client_id},
                           {"positive_class", o.positive_class},
                           {"init_source", o.init_source},
                           {"final_auc", o.final_auc},
                           {"lca", o.lca},
                           {"alpha_hat", {{"adapter", o.alpha_hat.adapter}, {"head", o.alpha_hat.head}}},
                           {"inner_steps", o.inner_steps},
                           {"actual_alpha_epochs", o.actual_alpha_epochs},
                           {"module_transfers", s.ledger.module_transfers(o.client_id, o.task_time, r.module_dim)}});
      }
      const auto& st = s.steps[ti];
      tasks.push_back({{"task_time", s.tasks[ti].task_time},
                       {"auc", s.tasks[ti].auc},
                       {"lca", s.tasks[ti].lca},
                       {"pooled_modules", st.pooled},
                       {"k", {{"adapter", st.k.adapter}, {"head", st.k.head}}},
                       {"cluster_sizes", {{"adapter", st.cluster_sizes.adapter}, {"head", st.cluster_sizes.head}}},
                       {"outer_steps", st.outer_steps},
                       {"approximate_inner", st.approximate_inner},
                       {"clients", clients}});
    }
    TrafficCount total;
    for (const auto& [key, row] : s.ledger.rows()) total += row.total();
    seeds.push_back({{"seed", s.seed},
                     {"dataset_hash", s.dataset_hash},
                     {"overall_auc", s.overall_auc},
                     {"overall_lca", s.overall_lca},
                     {"ledger_total", to_json(total)},
                     {"tasks", tasks}});
  }
  const auto auc = r.overall_auc(), lcas = r.overall_lca();
  return {{"config", r.config},
          {"variant", to_string(r.variant)},
          {"k", r.k},
          {"module_dim", r.module_dim},
          {"replicates", r.seeds.size()},
          {"summary",
           {{"auc_mean", mean(auc)},
            {"auc_std", sample_std(auc)},
            {"lca_mean", mean(lcas)},
            {"lca_std", sample_std(lcas)}}},
          {"seeds", seeds}};
}

/// Comment lines that open every CSV: the resolved config and the dataset hash of each seed.
inline std::string csv_preamble(const json& config, const std::vector<std::pair<std::uint64_t, std::string>>& hashes) {
  std::string s = "# config=" + config.dump() + "\n";
  for (const auto& [seed, h] : hashes) s += "# dataset_hash[seed=" + std::to_string(seed) + "]=" + h + "\n";
  return s;
}

inline std::vector<std::pair<std::uint64_t, std::string>> seed_hashes(const RunReport& r) {
  std::vector<std::pair<std::uint64_t, std::string>> v;
  for (const auto& s : r.seeds) v.emplace_back(s.seed, s.dataset_hash);
  return v;
}

/// Per-epoch evaluation AUC for every (seed, client, task).
inline std::string traces_csv(const RunReport& r) {
  std::ostringstream os;
  os << csv_preamble(r.config, seed_hashes(r));
  os << "variant,seed,client_id,task_time,epoch,auc\n";
  for (const auto& s : r.seeds) {
    for (const auto& step : s.outcomes) {
      for (const auto& o : step) {
        for (std::size_t e = 0; e < o.auc_trace.size(); ++e) {
          os << to_string(r.variant) << ',' << s.seed << ',' << o.client_id << ',' << o.task_time << ',' << e + 1 << ','
             << format_double(o.auc_trace[e]) << '\n';
        }
      }
    }
  }
  return os.str();
}

/// Communication per (seed, client, task, message kind).
inline std::string ledger_csv(const RunReport& r) {
  std::ostringstream os;
  os << csv_preamble(r.config, seed_hashes(r));
  os << "variant,seed,client_id,task_time,kind,messages,vectors,params,payload_bytes,wire_bytes,module_transfers\n";
  for (const auto& s : r.seeds) {
    for (const auto& [key, row] : s.ledger.rows()) {
      for (std::size_t k = 0; k < kMessageKinds; ++k) {
        const auto& c = row.by_kind[k];
        if (c.messages == 0) continue;
        os << to_string(r.variant) << ',' << s.seed << ',' << key.first << ',' << key.second << ','
           << to_string(static_cast<MessageKind>(k)) << ',' << c.messages << ',' << c.vectors << ',' << c.params << ','
           << c.payload_bytes << ',' << c.wire_bytes << ','
           << format_double(static_cast<double>(c.params) / static_cast<double>(r.module_dim)) << '\n';
      }
    }
  }
  return os.str();
}

/// Per-task means across clients for every seed, from a report JSON.
inline std::string tasks_csv(const json& report) {
  std::ostringstream os;
  std::vector<std::pair<std::uint64_t, std::string>> hashes;
  for (const auto& s : report.at("seeds")) hashes.emplace_back(s.at("seed").get<std::uint64_t>(), s.at("dataset_hash").get<std::string>());
  os << csv_preamble(report.at("config"), hashes);
  os << "variant,seed,task_time,auc,lca\n";
  const auto variant = report.at("variant").get<std::string>();
  for (const auto& s : report.at("seeds")) {
    for (const auto& t : s.at("tasks")) {
      os << variant << ',' << s.at("seed").get<std::uint64_t>() << ',' << t.at("task_time").get<std::size_t>() << ','
         << format_double(t.at("auc").get<double>()) << ',' << format_double(t.at("lca").get<double>()) << '\n';
    }
  }
  return os.str();
}

/// Per-client final AUC and LCA, from a report JSON.
inline std::string clients_csv(const json& report) {
  std::ostringstream os;
  std::vector<std::pair<std::uint64_t, std::string>> hashes;
  for (const auto& s : report.at("seeds")) hashes.emplace_back(s.at("seed").get<std::uint64_t>(), s.at("dataset_hash").get<std::string>());
  os << csv_preamble(report.at("config"), hashes);
  os << "variant,seed,task_time,client_id,positive_class,init_source,final_auc,lca,module_transfers\n";
  const auto variant = report.at("variant").get<std::string>();
  for (const auto& s : report.at("seeds")) {
    for (const auto& t : s.at("tasks")) {
      for (const auto& c : t.at("clients")) {
        os << variant << ',' << s.at("seed").get<std::uint64_t>() << ',' << t.at("task_time").get<std::size_t>() << ','
           << c.at("client_id").get<std::size_t>() << ',' << c.at("positive_class").get<std::size_t>() << ','
           << c.at("init_source").get<std::string>() << ',' << format_double(c.at("final_auc").get<double>()) << ','
           << format_double(c.at("lca").get<double>()) << ',' << format_double(c.at("module_transfers").get<double>())
           << '\n';
      }
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation

struct MetricCell {
  double mean = 0.0;
  double std = 0.0;
  std::optional<double> incr;
  std::optional<double> p;
};

struct AblationRow {
  Variant variant;
  MetricCell auc;
  MetricCell lca;
};

/// Per-variant means and std over seeds, increment over the previous row, and
/// Welch p against the FedKEI row (omitted for FedKEI itself).
inline std::vector<AblationRow> compare(const std::vector<RunReport>& runs) {
  const RunReport* ref = nullptr;
  for (const auto& r : runs) {
    if (r.variant == Variant::fedkei) ref = &r;
  }
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    AblationRow row{r.variant, {}, {}};
    auto fill = [&](MetricCell& cell, const std::vector<double>& xs, const std::vector<double>* prev,
                    const std::vector<double>* ref_xs) {
      cell.mean = mean(xs);
      cell.std = sample_std(xs);
      if (prev) cell.incr = cell.mean - mean(*prev);
      if (ref_xs && xs.size() >= 2 && ref_xs->size() >= 2) cell.p = welch_t(*ref_xs, xs).p;
    };
    const auto auc = r.overall_auc(), l = r.overall_lca();
    std::vector<double> prev_auc, prev_lca, ref_auc, ref_lca;
    if (i > 0) {
      prev_auc = runs[i - 1].overall_auc();
      prev_lca = runs[i - 1].overall_lca();
    }
    const bool vs_ref = ref && ref != &r;
    if (vs_ref) {
      ref_auc = ref->overall_auc();
      ref_lca = ref->overall_lca();
    }
    fill(row.auc, auc, i > 0 ? &prev_auc : nullptr, vs_ref ? &ref_auc : nullptr);
    fill(row.lca, l, i > 0 ? &prev_lca : nullptr, vs_ref ? &ref_lca : nullptr);
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const json& config,
                                const std::vector<std::pair<std::uint64_t, std::string>>& hashes) {
  std::ostringstream os;
  os << csv_preamble(config, hashes);
  os << "variant,auc_mean,auc_std,auc_incr,auc_p,auc_mark,lca_mean,lca_std,lca_incr,lca_p,lca_mark\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  auto mark = [](const std::optional<double>& p) { return p ? std::string(significance_mark(*p)) : std::string(); };
  for (const auto& r : rows) {
    os << to_string(r.variant) << ',' << format_double(r.auc.mean) << ',' << format_double(r.auc.std) << ','
       << opt(r.auc.incr) << ',' << opt(r.auc.p) << ',' << mark(r.auc.p) << ',' << format_double(r.lca.mean) << ','
       << format_double(r.lca.std) << ',' << opt(r.lca.incr) << ',' << opt(r.lca.p) << ',' << mark(r.lca.p) << '\n';
  }
  return os.str();
}

inline json ablation_json(const std::vector<AblationRow>& rows, const json& config,
                          const std::vector<std::pair<std::uint64_t, std::string>>& hashes) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  auto cell = [&](const MetricCell& c) {
    return json{{"mean", c.mean},
                {"std", c.std},
                {"incr", opt(c.incr)},
                {"p_vs_fedkei", opt(c.p)},
                {"mark", c.p ? json(significance_mark(*c.p)) : json(nullptr)}};
  };
  json out = {{"config", config}, {"dataset_hash", json::object()}, {"rows", json::array()}};
  for (const auto& [seed, h] : hashes) out["dataset_hash"][std::to_string(seed)] = h;
  for (const auto& r : rows) out["rows"].push_back({{"variant", to_string(r.variant)}, {"auc", cell(r.auc)}, {"lca", cell(r.lca)}});
  return out;
}

/// Fixed-width text rendering with "mean ± std" cells and significance marks.
inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  auto pct = [](double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << v * 100.0;
    return os.str();
  };
  auto signed_pct = [&](const std::optional<double>& v) { return v ? (*v >= 0 ? "+" : "") + pct(*v) : std::string("-"); };
  auto cell = [&](const MetricCell& c) { return pct(c.mean) + " ± " + pct(c.std) + (c.p ? significance_mark(*c.p) : ""); };
  std::ostringstream os;
  auto pad = [](std::string s, std::size_t w) {
    // Width in code points so the ± and marks line up.
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    if (n < w) s.append(w - n, ' ');
    return s;
  };
  os << pad("Variant", 12) << pad("AUC", 18) << pad("Incr.", 9) << pad("LCA", 18) << "Incr.\n";
  for (const auto& r : rows) {
    os << pad(std::string(to_string(r.variant)), 12) << pad(cell(r.auc), 18) << pad(signed_pct(r.auc.incr), 9)
       << pad(cell(r.lca), 18) << signed_pct(r.lca.incr) << '\n';
  }
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& body) {
  std::error_code ec;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << body;
  if (!out) throw ConfigError("failed writing '" + p.string() + "'");
}

/// report.json, traces.csv and ledger.csv for one run.
inline void write_run_outputs(const RunReport& r, const std::filesystem::path& dir) {
  write_file(dir / "report.json", to_json(r).dump(2) + "\n");
  write_file(dir / "traces.csv", traces_csv(r));
  write_file(dir / "ledger.csv", ledger_csv(r));
}

}  // namespace fedkei
