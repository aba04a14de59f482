#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "fedkei_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path write_config(const std::string& name, const json& j) {
  fs::create_directories(kRoot);
  const auto p = kRoot / name;
  std::ofstream(p, std::ios::binary) << j.dump(2);
  return p;
}

json small_config() {
  return json::parse(R"({
    "stream": {"clients": 3, "tasks": 2, "train_per_task": 40, "eval_per_task": 40},
    "model": {"feature_dim": 8},
    "bilevel": {"actual_max_epochs": 3},
    "clustering": {"k": 3},
    "finetune": {"epochs": 2, "lr": 0.05, "batch_size": 16},
    "seeds": [1]
  })");
}

int cli(const std::string& args) {
  const std::string cmd = std::string(FEDKEI_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, InvalidConfigExitsWithConfigCode) {
  auto j = small_config();
  j["stream"]["dirichlet_alpha"] = 0.0;
  const auto cfg = write_config("bad_alpha.json", j);
  EXPECT_EQ(cli("run --config " + cfg.string() + " --out " + (kRoot / "bad").string()), 2);
  j = small_config();
  j["unexpected"] = true;
  EXPECT_EQ(cli("run --config " + write_config("bad_key.json", j).string()), 2);
  EXPECT_EQ(cli("run --config " + (kRoot / "missing.json").string()), 2);
  EXPECT_EQ(cli("run --config " + cfg.string() + " --variant Bogus"), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
}

TEST(Cli, DivergenceExitsWithDivergenceCode) {
  auto j = small_config();
  j["finetune"]["lr"] = 1e300;
  const auto cfg = write_config("diverge.json", j);
  EXPECT_EQ(cli("run --config " + cfg.string() + " --out " + (kRoot / "diverge").string()), 3);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  const auto cfg = write_config("repeat.json", small_config());
  const auto a = kRoot / "repeat_a", b = kRoot / "repeat_b";
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + a.string()), 0);
  ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + b.string() + " --concurrent-clients"), 0);
  for (const char* f : {"report.json", "traces.csv", "ledger.csv"}) {
    EXPECT_FALSE(slurp(a / f).empty()) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  ASSERT_EQ(cli("report --input " + (a / "report.json").string()), 0);
  EXPECT_NE(slurp(a / "tasks.csv").find("variant,seed,task_time,auc,lca"), std::string::npos);
  EXPECT_NE(slurp(a / "clients.csv").find("init_source"), std::string::npos);
}

TEST(Cli, GenerateIsReproducible) {
  const auto cfg = write_config("gen.json", small_config());
  const auto a = kRoot / "gen_a", b = kRoot / "gen_b";
  ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + a.string()), 0);
  ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + b.string()), 0);
  const auto ma = json::parse(slurp(a / "seed_1" / "manifest.json"));
  EXPECT_EQ(ma["tasks"].size(), 6u);
  EXPECT_EQ(slurp(a / "seed_1" / "manifest.json"), slurp(b / "seed_1" / "manifest.json"));
}

TEST(Cli, SingleTaskRandReport) {
  auto j = small_config();
  j["stream"]["tasks"] = 1;
  const auto cfg = write_config("single.json", j);
  const auto out = kRoot / "single";
  ASSERT_EQ(cli("run --config " + cfg.string() + " --variant Rand --out " + out.string()), 0);
  const auto r = json::parse(slurp(out / "report.json"));
  ASSERT_EQ(r["seeds"][0]["tasks"].size(), 1u);
  EXPECT_EQ(r["variant"], "Rand");
}

TEST(Cli, FedKEILedgerCountsTenTransfersPerClientAtK3) {
  const auto cfg = write_config("ledger.json", small_config());
  const auto out = kRoot / "ledger";
  ASSERT_EQ(cli("run --config " + cfg.string() + " --variant FedKEI --out " + out.string()), 0);
  const auto r = json::parse(slurp(out / "report.json"));
  const auto& t2 = r["seeds"][0]["tasks"][1];
  ASSERT_EQ(t2["task_time"], 2);
  for (const auto& c : t2["clients"]) EXPECT_DOUBLE_EQ(c["module_transfers"].get<double>(), 10.0);
  for (const auto& c : r["seeds"][0]["tasks"][0]["clients"]) EXPECT_DOUBLE_EQ(c["module_transfers"].get<double>(), 1.0);
}

TEST(Cli, AblateWritesEveryVariant) {
  const auto cfg = write_config("ablate.json", small_config());
  const auto out = kRoot / "ablate";
  ASSERT_EQ(cli("ablate --config " + cfg.string() + " --seeds 1,2 --out " + out.string()), 0);
  for (const char* v : {"Rand", "FedAvgInit", "A", "B", "C", "FedKEI"}) EXPECT_TRUE(fs::exists(out / v / "report.json")) << v;
  const auto a = json::parse(slurp(out / "ablation.json"));
  EXPECT_EQ(a["rows"].size(), 6u);
  EXPECT_TRUE(fs::exists(out / "ablation.txt"));
}
