#include <gtest/gtest.h>

#include <random>

#include "hwm/coffeeshop.hpp"
#include "hwm/eval.hpp"

using namespace hwm;

TEST(Eval, ConfusionMatchesBruteForce) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    int n = std::uniform_int_distribution<int>(1, 40)(rng);
    std::vector<bool> t(n), p(n);
    eval::Confusion c;
    for (int i = 0; i < n; ++i) {
      t[i] = rng() % 2;
      p[i] = rng() % 3 != 0;
      c.add(t[i], p[i]);
    }
    double tp = 0, fp = 0, fn = 0, right = 0;
    for (int i = 0; i < n; ++i) {
      tp += t[i] && p[i];
      fp += !t[i] && p[i];
      fn += t[i] && !p[i];
      right += t[i] == p[i];
    }
    double precision = tp + fp > 0 ? tp / (tp + fp) : 0, recall = tp + fn > 0 ? tp / (tp + fn) : 0;
    double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0;
    EXPECT_NEAR(c.f1(), f1, 1e-12);
    EXPECT_NEAR(c.accuracy(), right / n, 1e-12);
  }
}

TEST(Eval, ScaledRmseOfUniformMean) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> truth(200000);
  for (auto& x : truth) x = u(rng);
  double mean = 0;
  for (double x : truth) mean += x / double(truth.size());
  std::vector<std::optional<double>> pred(truth.size(), mean);
  EXPECT_NEAR(eval::scaled_rmse(truth, pred), 1 / std::sqrt(12.0), 2e-3);
}

TEST(Eval, ScaledRmseZeroRange) {
  std::vector<double> truth{2, 2, 2, 2};
  std::vector<std::optional<double>> pred{2.0, 2.0, 3.0, std::nullopt};
  EXPECT_NEAR(eval::scaled_rmse(truth, pred), std::sqrt(0.5), 1e-12);
}

TEST(Eval, PerfectProgramAndAllValidPredictor) {
  auto schema = coffee::schema();
  auto recs = flatten(coffee::generate(coffee::EpsilonPolicy{}, 20, 50, 4));
  auto rep = eval::transition_metrics(coffee::correct_program(), nullptr, recs, schema);
  EXPECT_DOUBLE_EQ(*rep.cat_acc_det, 1.0);
  EXPECT_DOUBLE_EQ(*rep.num_rmse_det, 0.0);
  EXPECT_DOUBLE_EQ(*rep.inv_det, 0.0);
  EXPECT_DOUBLE_EQ(rep.sigma_acc, 1.0);
  EXPECT_FALSE(rep.num_rmse_sto);

  // Preconditions removed: every action is predicted valid.
  std::vector<program::FunctionDef> fs;
  for (const auto& f : coffee::correct_functions())
    if (f.kind != script::FunctionKind::precondition) fs.push_back(f);
  program::TransitionProgram permissive(fs);
  std::vector<TransitionRecord> half;
  std::size_t pos = 0, neg = 0;
  for (const auto& r : recs) {
    if (r.valid && pos < 50) half.push_back(r), ++pos;
    if (!r.valid && neg < 50) half.push_back(r), ++neg;
  }
  ASSERT_EQ(half.size(), 100u);
  auto rep2 = eval::transition_metrics(permissive, nullptr, half, schema);
  EXPECT_DOUBLE_EQ(rep2.sigma_acc, 0.5);
  EXPECT_NEAR(rep2.sigma_f1, 2.0 / 3.0, 1e-12);
}

TEST(Eval, MetricsArePermutationInvariant) {
  auto schema = coffee::schema();
  auto recs = flatten(coffee::generate(coffee::EpsilonPolicy{}, 5, 40, 6));
  auto buggy = coffee::buggy_program();
  auto a = eval::transition_metrics(buggy, nullptr, recs, schema);
  std::mt19937_64 rng(3);
  std::shuffle(recs.begin(), recs.end(), rng);
  auto b = eval::transition_metrics(buggy, nullptr, recs, schema);
  EXPECT_EQ(a.faults, b.faults);
  EXPECT_DOUBLE_EQ(a.sigma_acc, b.sigma_acc);
  EXPECT_DOUBLE_EQ(a.sigma_f1, b.sigma_f1);
  ASSERT_EQ(a.variables.size(), b.variables.size());
  for (std::size_t i = 0; i < a.variables.size(); ++i) {
    EXPECT_NEAR(a.variables[i].score, b.variables[i].score, 1e-12) << a.variables[i].name;
    EXPECT_DOUBLE_EQ(a.variables[i].invalid_rate, b.variables[i].invalid_rate);
  }
}

TEST(Eval, PlanningSummary) {
  auto episode = [](std::vector<double> money) {
    plan::EpisodeLog e;
    for (std::size_t i = 0; i < money.size(); ++i) e.days.push_back({int(i) + 1, coffee::named("wait"), money[i], true});
    e.final_money = money.back();
    return e;
  };
  std::vector<double> broke(50, -5.0);
  std::vector<plan::EpisodeLog> all_broke{episode(broke), episode(broke)};
  auto r = eval::planning_metrics(all_broke);
  for (int d : eval::survival_days()) EXPECT_DOUBLE_EQ(r.survival.at(d), 0.0);

  std::vector<double> up(50, 100.0), late(50, 100.0);
  for (int i = 35; i < 50; ++i) late[i] = -1;
  std::vector<plan::EpisodeLog> mixed{episode(up), episode(late)};
  r = eval::planning_metrics(mixed);
  EXPECT_DOUBLE_EQ(r.survival.at(30), 1.0);
  EXPECT_DOUBLE_EQ(r.survival.at(40), 0.5);
  EXPECT_DOUBLE_EQ(r.mean, 49.5);
  double half = 1.959963984540054 * std::sqrt((50.5 * 50.5 * 2) / 1.0) / std::sqrt(2.0);
  EXPECT_NEAR(r.ci_high - r.mean, half, 1e-9);
  EXPECT_FALSE(r.ci_degenerate);

  std::vector<plan::EpisodeLog> one{episode(up)};
  r = eval::planning_metrics(one);
  EXPECT_TRUE(r.ci_degenerate);
  EXPECT_DOUBLE_EQ(r.ci_low, r.ci_high);
  auto table = eval::render_planning({{"solo", r}});
  EXPECT_NE(table.find("(n=1)"), std::string::npos);
  EXPECT_NE(table.find("surv@50"), std::string::npos);
}
