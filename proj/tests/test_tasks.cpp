#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedkei/errors.hpp"
#include "fedkei/metrics.hpp"
#include "fedkei/tasks.hpp"

using namespace fedkei;

namespace {

StreamConfig base_config() {
  StreamConfig c;
  c.clients = 4;
  c.tasks = 4;
  c.train_per_task = 80;
  c.eval_per_task = 80;
  c.seed = 3;
  return c;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean(a), mb = mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double mean_pairwise_correlation(const std::vector<std::vector<double>>& protos) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < protos.size(); ++i) {
    for (std::size_t j = i + 1; j < protos.size(); ++j, ++n) s += pearson(protos[i], protos[j]);
  }
  return s / n;
}

// Plain logistic regression on raw features, full-batch gradient descent.
std::vector<double> fit_logistic(const std::vector<const TaskBatch*>& data, std::size_t dim) {
  std::vector<double> w(dim + 1, 0.0);
  std::size_t n = 0;
  for (auto* b : data) n += b->size();
  for (int it = 0; it < 300; ++it) {
    std::vector<double> g(dim + 1, 0.0);
    for (auto* b : data) {
      for (std::size_t i = 0; i < b->size(); ++i) {
        auto x = b->row(i);
        double l = w[dim];
        for (std::size_t d = 0; d < dim; ++d) l += w[d] * x[d];
        const double err = 1.0 / (1.0 + std::exp(-l)) - b->label(i);
        for (std::size_t d = 0; d < dim; ++d) g[d] += err * x[d] / static_cast<double>(n);
        g[dim] += err / static_cast<double>(n);
      }
    }
    for (std::size_t d = 0; d <= dim; ++d) w[d] -= 1.0 * g[d];
  }
  return w;
}

double probe_auc(const std::vector<double>& w, const TaskBatch& b) {
  std::vector<double> s;
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto x = b.row(i);
    double l = w.back();
    for (std::size_t d = 0; d < b.dim(); ++d) l += w[d] * x[d];
    s.push_back(l);
  }
  return auc(s, b.labels());
}

}  // namespace

TEST(Stream, ShapeAndLabels) {
  const auto st = generate_stream(base_config());
  ASSERT_EQ(st.tasks.size(), 4u);
  for (const auto& client : st.tasks) {
    ASSERT_EQ(client.size(), 4u);
    std::set<std::size_t> seen;
    for (const auto& task : client) {
      EXPECT_EQ(task.train.size(), 80u);
      EXPECT_EQ(task.eval.size(), 80u);
      EXPECT_EQ(task.positive_class, task.task_time);
      EXPECT_FALSE(seen.count(task.positive_class));
      if (task.task_time == 1) seen.insert(0);
      for (auto k : task.negative_classes) EXPECT_TRUE(seen.count(k) || task.task_time == 1);
      seen.insert(task.positive_class);
      for (const TaskBatch* b : {&task.train, &task.eval}) {
        const auto pos = std::count(b->labels().begin(), b->labels().end(), 1);
        EXPECT_GE(pos, 4);
        EXPECT_GE(static_cast<long>(b->size()) - pos, 4);
      }
    }
  }
}

TEST(Stream, EvalDisjointFromTrain) {
  const auto st = generate_stream(base_config());
  for (const auto& client : st.tasks) {
    for (const auto& task : client) {
      std::set<std::vector<double>> train;
      for (std::size_t i = 0; i < task.train.size(); ++i) train.emplace(task.train.row(i).begin(), task.train.row(i).end());
      for (std::size_t i = 0; i < task.eval.size(); ++i) {
        EXPECT_FALSE(train.count(std::vector<double>(task.eval.row(i).begin(), task.eval.row(i).end())));
      }
    }
  }
}

TEST(Stream, DeterministicInSeed) {
  const auto a = generate_stream(base_config()), b = generate_stream(base_config());
  EXPECT_EQ(dataset_hash(a), dataset_hash(b));
  EXPECT_EQ(task_csv(a.tasks[2][3]), task_csv(b.tasks[2][3]));
  auto c = base_config();
  c.seed = 4;
  EXPECT_NE(dataset_hash(generate_stream(c)), dataset_hash(a));
}

TEST(Stream, InvalidConfigsRejected) {
  auto c = base_config();
  c.dirichlet_alpha = 0.0;
  EXPECT_THROW(generate_stream(c), ConfigError);
  c = base_config();
  c.train_per_task = 10;
  EXPECT_THROW(generate_stream(c), ConfigError);
  c = base_config();
  c.transfer_strength = 1.5;
  EXPECT_THROW(generate_stream(c), ConfigError);
  c = base_config();
  c.clients = 1;
  EXPECT_THROW(generate_stream(c), ConfigError);
}

TEST(Prototypes, ZeroStrengthUncorrelated) {
  double total = 0;
  for (int draw = 0; draw < 100; ++draw) {
    Rng rng(100 + draw);
    total += mean_pairwise_correlation(generate_prototypes(6, 16, 0.0, rng));
  }
  EXPECT_LT(std::abs(total / 100), 0.1);
}

TEST(Prototypes, StrengthRaisesCorrelation) {
  double weak = 0, strong = 0;
  for (int draw = 0; draw < 50; ++draw) {
    Rng a(200 + draw), b(200 + draw);
    weak += mean_pairwise_correlation(generate_prototypes(6, 16, 0.2, a));
    strong += mean_pairwise_correlation(generate_prototypes(6, 16, 0.8, b));
  }
  EXPECT_GT(strong, weak);
  EXPECT_GT(strong / 50, 0.3);
}

TEST(Dirichlet, LargeConcentrationGivesEqualShares) {
  Rng rng(7);
  const auto shares = dirichlet_shares(6, 5, 1e6, rng);
  for (const auto& row : shares) {
    double sum = 0;
    for (double s : row) {
      EXPECT_LT(std::abs(s - 0.2), 0.02);
      sum += s;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Orders, SynchronousIdentityReversedInvolutionShuffledReproducible) {
  const auto st = generate_stream(base_config());
  auto positives = [](const TaskStream& s) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& c : s.tasks) {
      out.emplace_back();
      for (const auto& t : c) out.back().push_back(t.positive_class);
    }
    return out;
  };
  EXPECT_EQ(positives(shuffle_orders(st, OrderMode::synchronous, 1)), positives(st));
  const auto rev = shuffle_orders(st, OrderMode::reversed, 1);
  EXPECT_EQ(positives(rev)[0], (std::vector<std::size_t>{4, 3, 2, 1}));
  EXPECT_EQ(positives(shuffle_orders(rev, OrderMode::reversed, 1)), positives(st));
  EXPECT_EQ(rev.tasks[1][0].task_time, 1u);
  const auto s1 = shuffle_orders(st, OrderMode::shuffled, 9), s2 = shuffle_orders(st, OrderMode::shuffled, 9);
  EXPECT_EQ(positives(s1), positives(s2));
  EXPECT_EQ(dataset_hash(s1), dataset_hash(s2));
}

TEST(Transfer, PriorTasksPredictTheNextOne) {
  // A probe fitted on a client's earlier tasks ranks the next task's data
  // well above chance when prototypes share structure.
  auto c = base_config();
  c.transfer_strength = 0.8;
  c.clients = 5;
  c.tasks = 5;
  c.train_per_task = 200;
  c.eval_per_task = 200;
  double total = 0;
  int n = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    c.seed = seed;
    const auto st = generate_stream(c);
    for (const auto& client : st.tasks) {
      for (std::size_t t = 2; t <= c.tasks; ++t) {
        std::vector<const TaskBatch*> prior;
        for (std::size_t s = 1; s < t; ++s) prior.push_back(&client[s - 1].train);
        total += probe_auc(fit_logistic(prior, c.input_dim), client[t - 1].eval);
        ++n;
      }
    }
  }
  EXPECT_GT(total / n, 0.6);
}

TEST(Export, ManifestListsEveryTaskWithChecksums) {
  const auto st = generate_stream(base_config());
  const auto dir = std::filesystem::temp_directory_path() / "fedkei_export_test";
  std::filesystem::remove_all(dir);
  const auto manifest = export_stream(st, dir);
  EXPECT_EQ(manifest["tasks"].size(), 16u);
  EXPECT_EQ(manifest["dataset_hash"], dataset_hash(st));
  std::ifstream in(dir / "task_c1_t2.csv", std::ios::binary);
  std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(body, task_csv(st.tasks[1][1]));
  std::filesystem::remove_all(dir);
}

TEST(Digest, KnownValues) {
  EXPECT_EQ(hex32(crc32_of(std::string_view("123456789"))), "cbf43926");
  // git hash-object of an empty file.
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}
