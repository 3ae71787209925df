#include <gtest/gtest.h>

#include <random>

#include "hwm/coffeeshop.hpp"
#include "hwm/oracle.hpp"
#include "hwm/refine.hpp"

using namespace hwm;
using coffee::State;

namespace {

State base_state() {
  State s;
  s.price = 2;
  s.upgrade_level = 0;
  s.satisfaction = 3;
  s.cleanliness = 50;
  s.money = 500;
  s.coffee_beans = 40;
  s.milk = 40;
  return s;
}

}  // namespace

TEST(CoffeeShop, ZeroNoiseReferencePoint) {
  auto r = coffee::step_with(base_state(), coffee::named("wait"), {});
  EXPECT_DOUBLE_EQ(r.next.satisfaction, 3.0);
  EXPECT_DOUBLE_EQ(r.demand, 10);
  EXPECT_DOUBLE_EQ(r.served, 10);
  EXPECT_DOUBLE_EQ(r.next.money, 500 + 10 * 2 - 20);
  EXPECT_DOUBLE_EQ(r.next.cleanliness, 50 - 3);
  EXPECT_EQ(r.next.day, 1);
}

TEST(CoffeeShop, StockoutServesNobody) {
  State s = base_state();
  s.coffee_beans = 0;
  auto r = coffee::step_with(s, coffee::named("wait"), {});
  EXPECT_DOUBLE_EQ(r.served, 0);
  EXPECT_DOUBLE_EQ(r.next.customers, 0);
  EXPECT_DOUBLE_EQ(r.next.milk, 40);
  s.coffee_beans = 4;
  EXPECT_DOUBLE_EQ(coffee::step_with(s, coffee::named("wait"), {}).served, 4);
}

TEST(CoffeeShop, CleaningRestoresAndCosts) {
  State s = base_state();
  s.coffee_beans = 0;
  auto r = coffee::step_with(s, coffee::named("clean"), {});
  EXPECT_DOUBLE_EQ(r.next.cleanliness, 100);  // 50 + 60, clamped
  EXPECT_DOUBLE_EQ(r.next.money, 500 - 10 - 20);
}

TEST(CoffeeShop, RefusedActionsChangeNothing) {
  State s = base_state();
  s.money = 100;
  for (auto a : {coffee::named("upgrade"), coffee::buy("beans", 5000), coffee::set_price(12), coffee::set_price(0.25)}) {
    auto r = coffee::step_with(s, a, {});
    EXPECT_FALSE(r.valid) << doc::dump(a);
    EXPECT_DOUBLE_EQ(r.spend, 0);
    EXPECT_EQ(r.next.upgrade_level, 0);
    EXPECT_DOUBLE_EQ(r.next.price, 2);
  }
  s.money = 500;
  auto up = coffee::step_with(s, coffee::named("upgrade"), {});
  EXPECT_TRUE(up.valid);
  EXPECT_EQ(up.next.upgrade_level, 1);
  EXPECT_DOUBLE_EQ(up.spend, 500);
}

TEST(CoffeeShop, ClosedWhenInDebt) {
  State s = base_state();
  s.money = -1;
  auto r = coffee::step_with(s, coffee::named("wait"), {});
  EXPECT_FALSE(r.next.open);
  EXPECT_DOUBLE_EQ(r.served, 0);
  EXPECT_DOUBLE_EQ(r.next.money, -21);
}

TEST(CoffeeShop, ConservationAndBounds) {
  auto schema = coffee::schema();
  coffee::EpsilonPolicy policy;
  std::mt19937_64 rng(3);
  for (int e = 0; e < 20; ++e) {
    State s = coffee::initial_state(rng);
    for (int d = 0; d < 50; ++d) {
      auto a = policy(s, rng);
      auto r = coffee::step(s, a, rng);
      const State& n = r.next;
      double bought_beans = r.valid && a.at("name").as_text() == "buy_beans" ? a.at("quantity").as_number() : 0;
      double bought_milk = r.valid && a.at("name").as_text() == "buy_milk" ? a.at("quantity").as_number() : 0;
      EXPECT_NEAR(n.money, s.money - r.spend + r.served * n.price - 20, 1e-9);
      EXPECT_NEAR(n.coffee_beans, s.coffee_beans + bought_beans - r.served, 1e-9);
      EXPECT_NEAR(n.milk, s.milk + bought_milk - r.served, 1e-9);
      EXPECT_DOUBLE_EQ(n.customers, r.served);
      EXPECT_TRUE(validate(n.det(), schema, Stream::deterministic).empty());
      EXPECT_TRUE(validate(n.sto(), schema, Stream::stochastic).empty());
      s = n;
    }
  }
}

TEST(CoffeeShop, DatasetShapeAndDeterminism) {
  auto a = coffee::generate(coffee::HeuristicPolicy{}, 100, 50, 11);
  auto b = coffee::generate(coffee::HeuristicPolicy{}, 100, 50, 11);
  auto c = coffee::generate(coffee::HeuristicPolicy{}, 100, 50, 12);
  EXPECT_EQ(flatten(a).size(), 5000u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto split = coffee::split_episodes(a);
  EXPECT_EQ(split.train.size(), 90u);
  EXPECT_EQ(split.test.size(), 10u);
  EXPECT_EQ(split.train.front(), a.front());
  EXPECT_EQ(split.test.back(), a.back());
}

TEST(CoffeeShop, HeuristicRestocksAndCleans) {
  coffee::HeuristicPolicy h{0.0};
  std::mt19937_64 rng(0);
  State s = base_state();
  s.coffee_beans = 5;
  EXPECT_EQ(doc::dump(h(s, rng)), doc::dump(coffee::buy("beans", 40)));
  s.coffee_beans = 40;
  s.cleanliness = 30;
  EXPECT_EQ(h(s, rng).at("name").as_text(), "clean");
  s.cleanliness = 70;
  EXPECT_EQ(h(s, rng).at("name").as_text(), "wait");
}

TEST(CoffeeShop, ReferenceProgramIsExact) {
  auto prog = coffee::correct_program();
  auto recs = flatten(coffee::generate(coffee::EpsilonPolicy{}, 40, 50, 5));
  std::size_t invalid = 0;
  for (const auto& r : recs) {
    invalid += !r.valid;
    auto out = program::try_evaluate(prog, r);
    ASSERT_FALSE(program::classify_error(out, r)) << doc::dump(to_value(r));
  }
  EXPECT_GT(invalid, 100u);
}

TEST(CoffeeShop, PlantedBugsAreAllRepaired) {
  auto buggy = coffee::buggy_program();
  EXPECT_EQ(coffee::planted_bugs().size(), 10u);
  auto recs = flatten(coffee::generate(coffee::EpsilonPolicy{}, 100, 50, 7));
  refine::RefineConfig cfg;
  cfg.seed = 7;
  auto split = refine::make_split(recs, cfg);
  oracle::ScriptedTransport transport(coffee::refinement_script());
  oracle::KnowledgeOracle knowledge(transport, {});
  auto result = refine::refine(buggy, split.train, split.val, knowledge, cfg, coffee::manual());
  EXPECT_EQ(result.log.accepted(), 10u);
  for (const auto& r : split.train) EXPECT_FALSE(program::classify_error(program::try_evaluate(result.program, r), r));

  std::map<std::string, std::string> got, want;
  for (const auto& f : result.program.functions()) got[f.id] = f.body;
  for (const auto& f : coffee::correct_functions()) want[f.id] = f.body;
  EXPECT_EQ(got, want);
}
