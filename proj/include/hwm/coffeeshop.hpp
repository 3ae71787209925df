#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "hwm/doc/value.hpp"
#include "hwm/program.hpp"
#include "hwm/schema.hpp"
#include "hwm/util.hpp"

// Reference coffee-shop environment: a small business simulator whose
// deterministic side (calendar, open/closed flag, price, upgrade level) is
// an exact function of the previous observation and the action, and whose
// stochastic side (money, inventory, customers, satisfaction, cleanliness)
// carries Gaussian noise in satisfaction and demand.
namespace hwm::coffee {

using doc::Value;

struct Params {
  double bean_cost = 0.1;
  double milk_cost = 0.1;
  double clean_cost = 10;
  double fixed_cost = 20;
  double upgrade_base = 500;  // upgrade to level l+1 costs upgrade_base * (l + 1)
  int max_level = 3;
  double price_lo = 0.5, price_hi = 10;
  double satisfaction_noise = 0.5;
  double demand_noise = 2.0;
  double walk_in = 10.0;  // same-day satisfaction change -> extra customers
  double clean_boost = 60;
  double litter = 0.3;  // cleanliness lost per customer served
};

// ---------------------------------------------------------------------------
// Schema and manual

inline std::string manual() {
  return R"(You manage a neighbourhood coffee shop, one day per step.

Satisfaction is the shop's reputation on a 1 to 5 scale. It drifts toward a
target set by how good the shop is (each upgrade helps), how clean it is, and
how the price compares with what people expect for a cup. Reputation moves
slowly: most of today's satisfaction carries over from yesterday.

Customers come from the neighbourhood. A better-equipped shop draws more
people, a good reputation from yesterday brings friends along, and a shop
that feels better today than yesterday pulls in extra passers-by on the spot.
Each customer needs one unit of coffee beans and one unit of milk; once
either runs out nobody else can be served that day.

Money rises by price times customers served and falls by a fixed daily
running cost and by whatever you spend. Beans and milk cost a small amount
per unit. Cleaning costs a flat fee and restores most of the shop's
cleanliness; every customer served leaves it a bit dirtier. An upgrade costs
more at every level and there are three levels above the basic shop.

A purchase you cannot afford, an upgrade you cannot afford or beyond the top
level, and a price outside the allowed band are refused and change nothing.
When the day starts with negative money the shop is closed and serves nobody.
The calendar advances by one every day.
)";
}

inline std::vector<ActionSpec> actions(const Params& p = {}) {
  return {
      {"set_price", "Set the price of a cup.", {{"price", p.price_lo, p.price_hi}}},
      {"buy_beans", "Buy units of coffee beans.", {{"quantity", 1.0, std::nullopt}}},
      {"buy_milk", "Buy units of milk.", {{"quantity", 1.0, std::nullopt}}},
      {"clean", "Pay for a thorough cleaning.", {}},
      {"upgrade", "Upgrade the shop by one level.", {}},
      {"wait", "Do nothing special today.", {}},
  };
}

inline ObservationSchema schema(const Params& p = {}) {
  auto det_num = [](std::string n, std::optional<double> lo, std::optional<double> hi, std::string d, bool s = true) {
    return VariableSpec{std::move(n), Numerical{lo, hi}, Stream::deterministic, std::move(d), s};
  };
  auto sto_num = [](std::string n, std::optional<double> lo, std::optional<double> hi, std::string d) {
    return VariableSpec{std::move(n), Numerical{lo, hi}, Stream::stochastic, std::move(d), true};
  };
  std::vector<VariableSpec> vars{
      det_num("day", 0.0, std::nullopt, "Day counter.", false),
      {"status", Categorical{{"open", "closed"}}, Stream::deterministic, "Whether the shop opened today.", false},
      det_num("price", p.price_lo, p.price_hi, "Price of one cup."),
      det_num("upgrade_level", 0.0, double(p.max_level), "Number of upgrades bought."),
      sto_num("money", std::nullopt, std::nullopt, "Cash on hand at the end of the day."),
      sto_num("coffee_beans", 0.0, std::nullopt, "Units of coffee beans in stock."),
      sto_num("milk", 0.0, std::nullopt, "Units of milk in stock."),
      sto_num("customers", 0.0, std::nullopt, "Customers served today."),
      sto_num("satisfaction", 1.0, 5.0, "Customer satisfaction score."),
      sto_num("cleanliness", 0.0, 100.0, "Cleanliness score."),
  };
  return ObservationSchema("coffee_shop", std::move(vars), manual(), actions(p));
}

// ---------------------------------------------------------------------------
// State and dynamics

struct State {
  int day = 0;
  bool open = true;
  double price = 2;
  int upgrade_level = 0;
  double money = 500;
  double coffee_beans = 40;
  double milk = 40;
  double customers = 0;
  double satisfaction = 3;
  double cleanliness = 70;

  Value det() const {
    return Value::object(
        {{"day", day}, {"status", open ? "open" : "closed"}, {"price", price}, {"upgrade_level", upgrade_level}});
  }
  Value sto() const {
    return Value::object({{"money", money},
                          {"coffee_beans", coffee_beans},
                          {"milk", milk},
                          {"customers", customers},
                          {"satisfaction", satisfaction},
                          {"cleanliness", cleanliness}});
  }
  static State from(const Value& det, const Value& sto) {
    State s;
    s.day = static_cast<int>(det.at("day").as_number());
    s.open = det.at("status").as_text() == "open";
    s.price = det.at("price").as_number();
    s.upgrade_level = static_cast<int>(det.at("upgrade_level").as_number());
    s.money = sto.at("money").as_number();
    s.coffee_beans = sto.at("coffee_beans").as_number();
    s.milk = sto.at("milk").as_number();
    s.customers = sto.at("customers").as_number();
    s.satisfaction = sto.at("satisfaction").as_number();
    s.cleanliness = sto.at("cleanliness").as_number();
    return s;
  }
  friend bool operator==(const State&, const State&) = default;
};

inline double field(const Value& action, std::string_view key, double fallback = 0) {
  const Value* v = action.find(key);
  return v && v->is_number() ? v->as_number() : fallback;
}

// Whether `action` can run in state `s`, and what it costs.
inline bool valid(const State& s, const Value& action, const Params& p = {}) {
  const std::string& name = action.at("name").as_text();
  if (name == "set_price") {
    double x = field(action, "price", -1);
    return x >= p.price_lo && x <= p.price_hi;
  }
  if (name == "buy_beans" || name == "buy_milk") {
    double q = field(action, "quantity", 0);
    return q > 0 && s.money >= q * (name == "buy_beans" ? p.bean_cost : p.milk_cost);
  }
  if (name == "upgrade") return s.upgrade_level < p.max_level && s.money >= p.upgrade_base * (s.upgrade_level + 1);
  return name == "clean" || name == "wait";
}

struct StepResult {
  State next;
  bool valid = true;
  double served = 0;
  double spend = 0;
  double demand = 0;
};

// Noise draws are explicit so tests can zero them.
struct Noise {
  double satisfaction = 0;
  double demand = 0;
};

inline StepResult step_with(const State& s, const Value& action, const Noise& eps, const Params& p = {}) {
  StepResult r;
  State n = s;
  r.valid = valid(s, action, p);
  const std::string& name = action.at("name").as_text();
  bool cleaned = false;
  if (r.valid) {
    if (name == "set_price") {
      n.price = field(action, "price");
    } else if (name == "buy_beans") {
      n.coffee_beans += field(action, "quantity");
      r.spend = field(action, "quantity") * p.bean_cost;
    } else if (name == "buy_milk") {
      n.milk += field(action, "quantity");
      r.spend = field(action, "quantity") * p.milk_cost;
    } else if (name == "clean") {
      cleaned = true;
      r.spend = p.clean_cost;
    } else if (name == "upgrade") {
      r.spend = p.upgrade_base * (s.upgrade_level + 1);
      n.upgrade_level += 1;
    }
  }
  n.day = s.day + 1;
  n.open = s.money >= 0;

  double target = 3 + 0.5 * n.upgrade_level - 0.6 * (n.price - 2) + 0.02 * (s.cleanliness - 50);
  n.satisfaction = std::clamp(0.7 * s.satisfaction + 0.3 * target + eps.satisfaction, 1.0, 5.0);

  double potential = 10 + 8 * n.upgrade_level + 4 * (s.satisfaction - 3) + p.walk_in * (n.satisfaction - s.satisfaction) +
                     eps.demand;
  r.demand = std::max(0.0, std::round(potential));
  r.served = n.open ? std::min({r.demand, n.coffee_beans, n.milk}) : 0.0;
  n.customers = r.served;
  n.coffee_beans -= r.served;
  n.milk -= r.served;
  n.money = s.money + r.served * n.price - p.fixed_cost - r.spend;
  n.cleanliness = std::clamp(s.cleanliness - p.litter * r.served + (cleaned ? p.clean_boost : 0.0), 0.0, 100.0);
  r.next = n;
  return r;
}

template <typename Rng>
StepResult step(const State& s, const Value& action, Rng& rng, const Params& p = {}) {
  std::normal_distribution<double> sat(0, p.satisfaction_noise), dem(0, p.demand_noise);
  Noise eps;
  eps.satisfaction = p.satisfaction_noise > 0 ? sat(rng) : 0.0;
  eps.demand = p.demand_noise > 0 ? dem(rng) : 0.0;
  return step_with(s, action, eps, p);
}

template <typename Rng>
State initial_state(Rng& rng) {
  State s;
  s.money = std::round(std::uniform_real_distribution<double>(450, 650)(rng));
  s.coffee_beans = std::round(std::uniform_real_distribution<double>(30, 50)(rng));
  s.milk = std::round(std::uniform_real_distribution<double>(30, 50)(rng));
  s.cleanliness = std::round(std::uniform_real_distribution<double>(60, 80)(rng));
  return s;
}

// ---------------------------------------------------------------------------
// Policies

inline Value set_price(double x) { return Value::object({{"name", "set_price"}, {"price", x}}); }
inline Value buy(std::string_view what, double q) {
  return Value::object({{"name", std::string("buy_") + std::string(what)}, {"quantity", q}});
}
inline Value named(std::string_view n) { return Value::object({{"name", std::string(n)}}); }

// Restocks below 10 units, cleans below 40, otherwise mostly waits with an
// occasional price change so that price effects show up in the data.
struct HeuristicPolicy {
  double price_change = 0.1;

  template <typename Rng>
  Value operator()(const State& s, Rng& rng) const {
    if (s.coffee_beans < 10) return buy("beans", 40);
    if (s.milk < 10) return buy("milk", 40);
    if (s.cleanliness < 40) return named("clean");
    if (std::uniform_real_distribution<double>(0, 1)(rng) < price_change)
      return set_price(1.5 + 0.25 * std::uniform_int_distribution<int>(0, 12)(rng));
    return named("wait");
  }
};

// With probability epsilon a uniformly random action with random arguments
// (often unaffordable or out of range), otherwise the heuristic.
struct EpsilonPolicy {
  double epsilon = 0.5;
  HeuristicPolicy base{};

  template <typename Rng>
  Value operator()(const State& s, Rng& rng) const {
    if (std::uniform_real_distribution<double>(0, 1)(rng) >= epsilon) return base(s, rng);
    static const double menu[] = {10, 20, 50, 100, 500, 2000, 10000};
    auto q = [&] { return menu[std::uniform_int_distribution<int>(0, 6)(rng)]; };
    switch (std::uniform_int_distribution<int>(0, 5)(rng)) {
      case 0: return set_price(0.25 * std::uniform_int_distribution<int>(0, 48)(rng));
      case 1: return buy("beans", q());
      case 2: return buy("milk", q());
      case 3: return named("clean");
      case 4: return named("upgrade");
      default: return named("wait");
    }
  }
};

template <typename Policy>
std::vector<Trajectory> generate(const Policy& policy, int episodes, int horizon, std::uint64_t seed,
                                 const Params& p = {}) {
  std::vector<Trajectory> out;
  for (int e = 0; e < episodes; ++e) {
    std::mt19937_64 rng(mix_seed(seed, std::uint64_t(e)));
    State s = initial_state(rng);
    Trajectory t;
    for (int d = 0; d < horizon; ++d) {
      Value a = policy(s, rng);
      auto r = step(s, a, rng, p);
      t.push_back(TransitionRecord{s.det(), s.sto(), a, r.valid, r.next.det(), r.next.sto()});
      s = r.next;
    }
    out.push_back(std::move(t));
  }
  return out;
}

struct EpisodeSplit {
  std::vector<Trajectory> train;
  std::vector<Trajectory> test;
};

// First round(fraction * n) episodes train, the rest test.
inline EpisodeSplit split_episodes(std::vector<Trajectory> episodes, double train_fraction = 0.9) {
  auto cut = static_cast<std::ptrdiff_t>(std::llround(train_fraction * double(episodes.size())));
  EpisodeSplit s;
  s.train.assign(std::make_move_iterator(episodes.begin()), std::make_move_iterator(episodes.begin() + cut));
  s.test.assign(std::make_move_iterator(episodes.begin() + cut), std::make_move_iterator(episodes.end()));
  return s;
}

// ---------------------------------------------------------------------------
// Reference transition program

namespace detail {
using program::FunctionDef;
using script::FunctionKind;

inline FunctionDef fn(std::string id, FunctionKind kind, std::string action, std::string body, std::string purpose) {
  return FunctionDef::make(std::move(id), kind, std::move(action), std::move(body),
                           {"", std::move(purpose), ""});
}
}  // namespace detail

inline std::vector<program::FunctionDef> correct_functions() {
  using detail::fn;
  using script::FunctionKind;
  return {
      fn("pre_set_price", FunctionKind::precondition, "set_price",
         R"(return (aget "/price" >= 0.5 and aget "/price" <= 10, "price outside the allowed band"))",
         "Price must lie in the allowed band."),
      fn("pre_buy_beans", FunctionKind::precondition, "buy_beans",
         R"(return (aget "/quantity" > 0 and get "/money" >= aget "/quantity" * 0.1, "cannot afford the beans"))",
         "Beans must be affordable."),
      fn("pre_buy_milk", FunctionKind::precondition, "buy_milk",
         R"(return (aget "/quantity" > 0 and get "/money" >= aget "/quantity" * 0.1, "cannot afford the milk"))",
         "Milk must be affordable."),
      fn("pre_upgrade", FunctionKind::precondition, "upgrade",
         R"(return (get "/upgrade_level" < 3 and get "/money" >= 500 * (get "/upgrade_level" + 1), "cannot upgrade"))",
         "Upgrade must be affordable and below the top level."),
      fn("act_set_price", FunctionKind::action, "set_price", R"(emit replace "/price" aget "/price")",
         "Apply the new price."),
      fn("act_buy_beans", FunctionKind::action, "buy_beans", "", "Stock changes are stochastic."),
      fn("act_buy_milk", FunctionKind::action, "buy_milk", "", "Stock changes are stochastic."),
      fn("act_clean", FunctionKind::action, "clean", "", "Cleanliness is stochastic."),
      fn("act_upgrade", FunctionKind::action, "upgrade", R"(emit replace "/upgrade_level" get "/upgrade_level" + 1)",
         "Raise the upgrade level."),
      fn("act_wait", FunctionKind::action, "wait", "", "Nothing happens."),
      fn("dyn", FunctionKind::dynamic, "",
         R"(emit replace "/day" get "/day" + 1
emit replace "/status" (if get "/money" < 0 then "closed" else "open"))",
         "Advance the calendar and open only when solvent."),
  };
}

inline program::TransitionProgram correct_program() { return program::TransitionProgram(correct_functions()); }

// Ten planted faults over the reference program. Each is repaired by one
// single-function edit whose validation score is strictly positive once the
// run-time fault in act_clean is gone.
struct PlantedBug {
  std::string id;
  program::RefinementOp fix;
  std::string error_kind;  // how the fault surfaces
  std::string action;      // an action whose transitions expose it
  std::string path;        // for observation errors, the mispredicted entry
  std::optional<std::string> buggy_body;  // nullopt: the function is missing
  std::string decoy_body;                 // a plausible edit that makes things worse
};

inline std::vector<PlantedBug> planted_bugs() {
  using program::RefinementOp;
  return {
      {"dyn", RefinementOp::replace, "E_od", "wait", "/day",
       "emit replace \"/day\" get \"/day\" + 3\nemit replace \"/status\" (if get \"/money\" < 0 then \"closed\" else \"open\")",
       "emit replace \"/day\" get \"/day\" + 5\nemit replace \"/status\" \"open\""},
      {"act_set_price", RefinementOp::replace, "E_od", "set_price", "/price", R"(emit replace "/price" aget "/price" * 10)",
       R"(emit replace "/price" aget "/price" * 20)"},
      {"act_upgrade", RefinementOp::replace, "E_od", "upgrade", "/upgrade_level",
       R"(emit replace "/upgrade_level" get "/upgrade_level" + 3)",
       R"(emit replace "/upgrade_level" get "/upgrade_level" + 4)"},
      {"act_clean", RefinementOp::replace, "E_exec", "clean", "",
       "let effort = aget \"/intensity\"\nemit replace \"/day\" get \"/day\" + effort * 0", R"(emit replace "/day" 0)"},
      {"pre_buy_beans", RefinementOp::replace, "E_pf", "buy_beans", "",
       R"(return (aget "/quantity" > 0 and get "/money" >= aget "/quantity" * 1, "cannot afford the beans"))",
       R"(return (aget "/quantity" > 0 and get "/money" >= aget "/quantity" * 2, "cannot afford the beans"))"},
      {"pre_buy_milk", RefinementOp::add, "E_ps", "buy_milk", "", std::nullopt, R"(return (false, "milk is sold out"))"},
      {"pre_upgrade", RefinementOp::replace, "E_ps", "upgrade", "",
       R"(return (get "/upgrade_level" < 3 and get "/money" >= 50 * (get "/upgrade_level" + 1), "cannot upgrade"))",
       R"(return (get "/upgrade_level" < 3, "already at the top level"))"},
      {"pre_set_price", RefinementOp::replace, "E_pf", "set_price", "",
       R"(return (aget "/price" >= 0.5 and aget "/price" <= 5, "price outside the allowed band"))",
       R"(return (aget "/price" >= 0.5 and aget "/price" <= 4, "price outside the allowed band"))"},
      {"pre_clean", RefinementOp::remove, "E_pf", "clean", "", R"(return (get "/cleanliness" < 90, "already clean"))",
       R"(return (get "/cleanliness" < 80, "already clean"))"},
      {"pre_wait", RefinementOp::remove, "E_pf", "wait", "", R"(return (get "/money" >= 0, "no money to open"))",
       R"(return (get "/money" >= 100, "no money to open"))"},
  };
}

inline std::vector<program::FunctionDef> buggy_functions() {
  using script::FunctionKind;
  auto bugs = planted_bugs();
  std::vector<program::FunctionDef> out;
  for (const auto& f : correct_functions()) {
    auto b = std::find_if(bugs.begin(), bugs.end(), [&](const PlantedBug& x) { return x.id == f.id; });
    if (b == bugs.end()) out.push_back(f);
    else if (b->buggy_body)
      out.push_back(program::FunctionDef::make(f.id, f.kind, f.action_name, *b->buggy_body, f.description));
  }
  for (const auto& b : bugs)
    if (b.fix == program::RefinementOp::remove)
      out.push_back(program::FunctionDef::make(b.id, FunctionKind::precondition, b.action, *b.buggy_body,
                                               {"", "Extra guard.", ""}));
  return out;
}

inline program::TransitionProgram buggy_program() { return program::TransitionProgram(buggy_functions()); }

// Proposal script for the buggy program. Each rule answers with the real
// repair plus a decoy edit, a resubmission of the current function, and a
// body that does not parse, in a rule-specific order.
inline Value refinement_script() {
  using program::Refinement;
  using program::RefinementOp;
  auto correct = correct_functions();
  auto buggy = buggy_functions();
  auto lookup = [](const std::vector<program::FunctionDef>& fs, const std::string& id) -> const program::FunctionDef* {
    for (const auto& f : fs)
      if (f.id == id) return &f;
    return nullptr;
  };
  doc::Array rules;
  std::size_t n = 0;
  for (const auto& b : planted_bugs()) {
    const program::FunctionDef* current = lookup(buggy, b.id);
    const program::FunctionDef* fixed = lookup(correct, b.id);
    const program::FunctionDef& shape = current ? *current : *fixed;
    auto with_body = [&](const std::string& body) {
      return program::FunctionDef{shape.id, shape.kind, shape.action_name, shape.description, body, nullptr};
    };
    Value repair = b.fix == RefinementOp::remove ? program::to_value(Refinement{RefinementOp::remove, b.id, std::nullopt})
                   : b.fix == RefinementOp::add  ? program::to_value(Refinement{RefinementOp::add, std::nullopt, *fixed})
                                                 : program::to_value(Refinement{RefinementOp::replace, b.id, *fixed});
    auto edit = [&](const std::string& body) {
      auto f = with_body(body);
      return current ? program::to_value(Refinement{RefinementOp::replace, b.id, f})
                     : program::to_value(Refinement{RefinementOp::add, std::nullopt, f});
    };
    std::vector<Value> cands{edit(b.decoy_body), repair};
    if (current) cands.push_back(edit(current->body));
    cands.push_back(edit("emit replace \"/day\" ("));
    std::rotate(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(n++ % cands.size()), cands.end());
    cands.resize(3);
    if (std::find(cands.begin(), cands.end(), repair) == cands.end()) cands.back() = repair;

    Value match = b.path.empty() ? Value::object({{"error_kind", b.error_kind}, {"action", b.action}})
                                 : Value::object({{"error_kind", b.error_kind}, {"path", b.path}});
    rules.push_back(Value::object({{"match", match}, {"candidates", Value(doc::Array(cands.begin(), cands.end()))}}));
  }
  return Value::object({{"refinements", Value(std::move(rules))}});
}

// Seed-graph and plausibility answers that follow the manual. The initial
// order and parent lists deliberately leave out the same-day satisfaction to
// customers link; the plausibility table rates it as consistent with the
// manual and rates its reverse, and links the manual never suggests, lower.
inline Value structure_script() {
  Value lp = Value::object();
  const char* plausible[][2] = {
      {"price", "satisfaction"},    {"upgrade_level", "satisfaction"}, {"cleanliness", "satisfaction"},
      {"satisfaction", "customers"}, {"upgrade_level", "customers"},   {"customers", "money"},           {"price", "money"},
      {"customers", "coffee_beans"}, {"customers", "milk"},            {"customers", "cleanliness"},
      {"coffee_beans", "milk"},      {"milk", "coffee_beans"}};
  for (auto& e : plausible) lp[std::string(e[0]) + ">" + e[1]] = 0.0;
  lp["customers>satisfaction"] = -3.0;
  lp["coffee_beans>customers"] = -0.5;  // stock caps service but is drawn down by it
  lp["milk>customers"] = -0.5;
  return Value::object({{"topo_order", Value::array({"price", "upgrade_level", "satisfaction", "customers",
                                                     "coffee_beans", "milk", "money", "cleanliness"})},
                        {"topo_shuffle", 0.1},
                        {"parents", Value::object({{"satisfaction", Value::array({"price", "upgrade_level"})},
                                                   {"customers", Value::array({"upgrade_level"})},
                                                   {"coffee_beans", Value::array({"customers"})},
                                                   {"milk", Value::array({"customers"})},
                                                   {"money", Value::array({"customers", "price"})},
                                                   {"cleanliness", Value::array({"customers"})}})},
                        {"parent_keep", 0.9},
                        {"edge_log_prob", lp},
                        {"default_edge_log_prob", -1.0}});
}

// Everything the scripted oracle needs for the coffee shop: the buggy program
// as the initial answer, the repair rules, and the structure answers.
inline Value oracle_script() {
  Value s = structure_script();
  s["refinements"] = refinement_script().at("refinements");
  s["init_program"] = program::to_value(buggy_program());
  return s;
}

}  // namespace hwm::coffee
