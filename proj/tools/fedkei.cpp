// Command-line front end: generate, run, ablate, report.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime divergence, 1 other failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedkei/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedkei;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct Common {
  std::string config;
  std::string out;
  std::string seeds;
  std::string variant;
  std::string k;
  std::size_t workers = 0;
  bool concurrent = false;
};

RunConfig load(const Common& o) {
  RunConfig c = load_run_config(o.config);
  if (!o.seeds.empty()) c.seeds = detail::parse_seed_list(o.seeds);
  if (!o.variant.empty()) c.federation.variant = variant_from_string(o.variant);
  if (!o.k.empty()) c.k_sweep = detail::parse_k_list(o.k);
  if (!o.out.empty()) c.out = o.out;
  if (o.workers) c.workers = o.workers;
  if (o.concurrent) c.federation.concurrent_clients = true;
  c.federation.clustering.k = c.k_sweep.front();
  c.validate();
  return c;
}

fs::path dir_for_k(const RunConfig& c, std::size_t k) {
  return c.k_sweep.size() == 1 ? fs::path(c.out) : fs::path(c.out) / ("k" + std::to_string(k));
}

int cmd_generate(const Common& o) {
  const RunConfig c = load(o);
  for (auto seed : c.seeds) {
    const TaskStream st = stream_for_seed(c, seed);
    const fs::path dir = fs::path(c.out) / ("seed_" + std::to_string(seed));
    json cfg = resolved_config(c);
    cfg["seeds"] = {seed};
    const json manifest = export_stream(st, dir, cfg);
    std::cout << dir.string() << ": " << manifest["tasks"].size() << " tasks, dataset_hash "
              << manifest["dataset_hash"].get<std::string>() << '\n';
  }
  return 0;
}

int cmd_run(const Common& o) {
  const RunConfig c = load(o);
  for (auto k : c.k_sweep) {
    const RunReport r = run_variant(c, c.federation.variant, k);
    const fs::path dir = dir_for_k(c, k);
    write_run_outputs(r, dir);
    const auto lcas = r.overall_lca(), aucs = r.overall_auc();
    std::cout << to_string(r.variant) << " K=" << k << " seeds=" << r.seeds.size() << " AUC " << mean(aucs) << " LCA "
              << mean(lcas) << " -> " << dir.string() << '\n';
  }
  return 0;
}

int cmd_ablate(const Common& o) {
  const RunConfig c = load(o);
  for (auto k : c.k_sweep) {
    const fs::path dir = dir_for_k(c, k);
    std::vector<RunReport> runs;
    for (auto v : kAllVariants) {
      runs.push_back(run_variant(c, v, k));
      write_run_outputs(runs.back(), dir / std::string(to_string(v)));
    }
    const auto rows = compare(runs);
    json cfg = resolved_config(c, k);
    cfg.erase("variant");
    const auto hashes = seed_hashes(runs.front());
    const std::string table = ablation_table(rows);
    write_file(dir / "ablation.csv", ablation_csv(rows, cfg, hashes));
    write_file(dir / "ablation.json", ablation_json(rows, cfg, hashes).dump(2) + "\n");
    write_file(dir / "ablation.txt", csv_preamble(cfg, hashes) + table);
    std::cout << "K=" << k << " (" << c.seeds.size() << " seeds)\n" << table;
  }
  return 0;
}

int cmd_report(const std::string& input, const std::string& out) {
  std::ifstream in(input, std::ios::binary);
  if (!in) throw ConfigError("cannot read report '" + input + "'");
  json report;
  try {
    report = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("report '" + input + "': " + e.what());
  }
  const fs::path dir = out.empty() ? fs::path(input).parent_path() : fs::path(out);
  write_file(dir / "tasks.csv", tasks_csv(report));
  write_file(dir / "clients.csv", clients_csv(report));
  std::cout << "wrote " << (dir / "tasks.csv").string() << " and " << (dir / "clients.csv").string() << '\n';
  return 0;
}

void add_common(CLI::App* cmd, Common& o, bool with_variant) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out, "Output directory (overrides config)");
  cmd->add_option("--seeds", o.seeds, "Seed list, e.g. 1,2,3 or 1-10 (overrides config)");
  cmd->add_option("--k", o.k, "Cluster counts, e.g. 3 or 3,5,7,9; several give one subdirectory each");
  if (with_variant) cmd->add_option("--variant", o.variant, "Rand, FedAvgInit, A, B, C or FedKEI");
  cmd->add_option("--workers", o.workers, "Seeds run in parallel");
  cmd->add_flag("--concurrent-clients", o.concurrent, "Run clients on separate threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated continual learning simulator with knowledge-enhanced initialization"};
  app.require_subcommand(1);
  Common gen_opts, run_opts, abl_opts;
  std::string report_in, report_out;

  auto* gen = app.add_subcommand("generate", "Write the synthetic task streams and their manifest");
  add_common(gen, gen_opts, false);
  auto* run = app.add_subcommand("run", "Run one variant over all seeds");
  add_common(run, run_opts, true);
  auto* abl = app.add_subcommand("ablate", "Run every variant on shared seeds and compare");
  add_common(abl, abl_opts, false);
  auto* rep = app.add_subcommand("report", "Render a report JSON to CSV");
  rep->add_option("--input", report_in, "report.json written by run or ablate")->required()->check(CLI::ExistingFile);
  rep->add_option("--out", report_out, "Output directory (default: next to the input)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_opts);
    if (*run) return cmd_run(run_opts);
    if (*abl) return cmd_ablate(abl_opts);
    if (*rep) return cmd_report(report_in, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SeedRunError& e) {
    std::cerr << (e.divergence() ? "divergence: " : "error: ") << e.what() << '\n';
    return e.divergence() ? kExitDivergence : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
