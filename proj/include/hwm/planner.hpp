#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <thread>
#include <vector>

#include "hwm/coffeeshop.hpp"
#include "hwm/cpd.hpp"
#include "hwm/program.hpp"
#include "hwm/util.hpp"

// Model-predictive control with UCT over short action sequences. A search
// node stands for an action prefix; states along it are re-sampled from the
// world model on every rollout.
namespace hwm::plan {

using doc::Value;

struct Observation {
  Value det;
  Value sto;
};

struct ModelStep {
  Observation next;
  bool valid = true;
};

class WorldModel {
 public:
  virtual ~WorldModel() = default;
  // Whether the model believes `action` can run (used to filter proposals).
  virtual bool allowed(const Observation& obs, const Value& action) const = 0;
  virtual ModelStep step(const Observation& obs, const Value& action, std::mt19937_64& rng) const = 0;
};

// Transition program for the deterministic side and σ, ancestral CPD sampling
// for the stochastic side.
class HybridModel final : public WorldModel {
 public:
  HybridModel(program::TransitionProgram program, cpd::CpdModel cpds, std::size_t budget = script::default_step_budget)
      : program_(std::move(program)), cpds_(std::move(cpds)), budget_(budget) {}

  bool allowed(const Observation& obs, const Value& action) const override {
    auto out = program::try_evaluate(program_, obs.det, obs.sto, action, budget_);
    return out.prediction && out.prediction->valid;
  }

  ModelStep step(const Observation& obs, const Value& action, std::mt19937_64& rng) const override {
    auto p = program::evaluate(program_, obs.det, obs.sto, action, budget_);
    Value sto = cpd::sample_joint(cpds_, obs.sto, action, p.valid, p.det, obs.det, rng);
    return {{std::move(p.det), std::move(sto)}, p.valid};
  }

  const program::TransitionProgram& program() const { return program_; }
  const cpd::CpdModel& cpds() const { return cpds_; }

 private:
  program::TransitionProgram program_;
  cpd::CpdModel cpds_;
  std::size_t budget_;
};

// The coffee-shop simulator itself, as a reference world model.
class SimulatorModel final : public WorldModel {
 public:
  explicit SimulatorModel(coffee::Params params = {}) : params_(params) {}
  bool allowed(const Observation& obs, const Value& action) const override {
    return coffee::valid(coffee::State::from(obs.det, obs.sto), action, params_);
  }
  ModelStep step(const Observation& obs, const Value& action, std::mt19937_64& rng) const override {
    auto r = coffee::step(coffee::State::from(obs.det, obs.sto), action, rng, params_);
    return {{r.next.det(), r.next.sto()}, r.valid};
  }

 private:
  coffee::Params params_;
};

// ---------------------------------------------------------------------------
// Configuration and proposals

class PlanError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PlanConfig {
  int horizon = 3;
  int iterations = 90;
  int rollouts_per_node = 4;
  int actions_per_node = 100;
  double exploration_c = std::sqrt(2.0);
  double fault_penalty = -1e6;
  std::string objective = "money";  // stochastic variable maximized at the horizon
  std::uint64_t seed = 0;
  int threads = 1;

  void check() const {
    if (horizon < 1 || iterations < 1 || rollouts_per_node < 1 || actions_per_node < 1 || threads < 1)
      throw PlanError("planner sizes must be positive");
    if (!(exploration_c >= 0)) throw PlanError("exploration_c must be non-negative");
  }
};

// Per-environment proposal hooks: a random action generator and a filter that
// sees the proposals accepted so far.
struct ActionHooks {
  std::function<Value(const Observation&, std::mt19937_64&)> sample;
  std::function<bool(const std::vector<Value>& accepted, const Value& candidate)> admit;
};

inline ActionHooks coffee_hooks() {
  ActionHooks h;
  h.sample = [](const Observation&, std::mt19937_64& rng) -> Value {
    static const double menu[] = {20, 40, 80, 160};
    auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };
    switch (pick(5)) {
      case 0: return coffee::set_price(1.0 + 0.25 * pick(21));
      case 1: return coffee::buy("beans", menu[pick(4)]);
      case 2: return coffee::buy("milk", menu[pick(4)]);
      case 3: return coffee::named("clean");
      default: return coffee::named("upgrade");
    }
  };
  h.admit = [](const std::vector<Value>& accepted, const Value& c) {
    if (c.at("name").as_text() != "set_price") return true;
    return std::none_of(accepted.begin(), accepted.end(),
                        [](const Value& a) { return a.at("name").as_text() == "set_price"; });
  };
  return h;
}

// `wait` first, then up to n-1 sampled actions that the model allows, with
// duplicates and hook rejections dropped.
inline std::vector<Value> propose_actions(const WorldModel& model, const Observation& obs, int n,
                                          std::mt19937_64& rng, const ActionHooks& hooks) {
  if (n < 1) throw PlanError("propose_actions needs n >= 1");
  std::vector<Value> out{coffee::named("wait")};
  for (int i = 1; i < n; ++i) {
    Value a = hooks.sample(obs, rng);
    if (a.at("name").as_text() == "wait") continue;
    if (std::find(out.begin(), out.end(), a) != out.end()) continue;
    if (hooks.admit && !hooks.admit(out, a)) continue;
    if (!model.allowed(obs, a)) continue;
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rollouts

inline double objective_of(const Observation& obs, const PlanConfig& cfg) {
  return obs.sto.at(cfg.objective).as_number();
}

// Plays `actions` from `obs`, then waits out the remaining horizon, and
// returns the objective at the end. Any model failure scores the penalty.
inline double rollout(const WorldModel& model, const Observation& obs, std::span<const Value> actions, int horizon,
                      std::mt19937_64& rng, const PlanConfig& cfg) {
  if (static_cast<int>(actions.size()) > horizon) throw PlanError("action sequence longer than the horizon");
  static const Value wait = coffee::named("wait");
  try {
    Observation cur = obs;
    for (int t = 0; t < horizon; ++t) {
      const Value& a = t < static_cast<int>(actions.size()) ? actions[static_cast<std::size_t>(t)] : wait;
      cur = model.step(cur, a, rng).next;
    }
    double v = objective_of(cur, cfg);
    return std::isfinite(v) ? v : cfg.fault_penalty;
  } catch (const std::exception&) {
    return cfg.fault_penalty;
  }
}

// ---------------------------------------------------------------------------
// Search tree

struct SearchNode {
  std::vector<Value> prefix;
  int visits = 0;
  double value_sum = 0;
  bool expanded = false;
  std::vector<std::unique_ptr<SearchNode>> children;

  double mean() const { return visits ? value_sum / visits : 0.0; }
  int depth() const { return static_cast<int>(prefix.size()); }
};

// UCT over normalized child means: unvisited children first (in order),
// otherwise argmax of (mean - lo)/(hi - lo) + c * sqrt(ln N / n), earliest
// on ties.
inline std::size_t uct_select(const SearchNode& node, double c, double lo, double hi) {
  if (node.children.empty()) throw PlanError("uct_select on a leaf");
  for (std::size_t i = 0; i < node.children.size(); ++i)
    if (node.children[i]->visits == 0) return i;
  double span = hi > lo ? hi - lo : 1.0;
  double log_n = std::log(static_cast<double>(std::max(node.visits, 1)));
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    const auto& ch = *node.children[i];
    double v = (ch.mean() - lo) / span + c * std::sqrt(log_n / ch.visits);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  return best;
}

struct ChildStat {
  Value action;
  int visits = 0;
  double mean = 0;
};

struct PlanResult {
  Value action;
  std::vector<ChildStat> root;
  int max_depth = 0;
};

namespace detail {

inline std::vector<double> run_rollouts(const WorldModel& model, const Observation& obs,
                                        std::span<const Value> prefix, int count, std::uint64_t seed,
                                        const PlanConfig& cfg) {
  std::vector<double> out(static_cast<std::size_t>(count));
  auto one = [&](int j) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(j)));
    out[static_cast<std::size_t>(j)] = rollout(model, obs, prefix, cfg.horizon, rng, cfg);
  };
  int workers = std::min(cfg.threads, count);
  if (workers <= 1) {
    for (int j = 0; j < count; ++j) one(j);
    return out;
  }
  std::vector<std::jthread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int j = w; j < count; j += workers) one(j);
    });
  return out;
}

// One sampled state at the end of `prefix`, for proposing children.
inline std::optional<Observation> sample_state(const WorldModel& model, const Observation& obs,
                                               std::span<const Value> prefix, std::mt19937_64& rng) {
  try {
    Observation cur = obs;
    for (const auto& a : prefix) cur = model.step(cur, a, rng).next;
    return cur;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace detail

inline PlanResult plan_step(const WorldModel& model, const Observation& obs, const PlanConfig& cfg,
                            const ActionHooks& hooks, std::uint64_t seed) {
  cfg.check();
  SearchNode root;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  int max_depth = 0;

  for (int it = 0; it < cfg.iterations; ++it) {
    std::uint64_t iter_seed = mix_seed(seed, static_cast<std::uint64_t>(it));
    std::mt19937_64 rng(iter_seed);
    std::vector<SearchNode*> path{&root};
    SearchNode* node = &root;
    while (node->depth() < cfg.horizon) {
      if (!node->expanded) {
        node->expanded = true;
        auto state = detail::sample_state(model, obs, node->prefix, rng);
        if (state)
          for (auto& a : propose_actions(model, *state, cfg.actions_per_node, rng, hooks)) {
            auto child = std::make_unique<SearchNode>();
            child->prefix = node->prefix;
            child->prefix.push_back(std::move(a));
            node->children.push_back(std::move(child));
          }
      }
      if (node->children.empty()) break;
      node = node->children[uct_select(*node, cfg.exploration_c, lo, hi)].get();
      path.push_back(node);
      if (node->visits == 0) break;
    }
    max_depth = std::max(max_depth, node->depth());
    auto values = detail::run_rollouts(model, obs, node->prefix, cfg.rollouts_per_node, mix_seed(iter_seed, 1), cfg);
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
    for (auto* n : path) {
      n->visits += 1;
      n->value_sum += mean;
    }
  }

  PlanResult res;
  res.max_depth = max_depth;
  const SearchNode* best = nullptr;
  for (const auto& ch : root.children) {
    res.root.push_back({ch->prefix.front(), ch->visits, ch->mean()});
    if (ch->visits == 0) continue;
    if (!best || ch->mean() > best->mean() || (ch->mean() == best->mean() && ch->visits > best->visits))
      best = ch.get();
  }
  res.action = best ? best->prefix.front() : coffee::named("wait");
  return res;
}

// ---------------------------------------------------------------------------
// Episodes against the coffee-shop simulator

struct DayLog {
  int day = 0;
  Value action;
  double money = 0;
  bool valid = true;
};

struct EpisodeLog {
  std::vector<DayLog> days;
  double final_money = 0;

  // Money never dropped below zero through the end of `day` (1-based).
  bool survived(int day) const {
    for (const auto& d : days) {
      if (d.day > day) break;
      if (d.money < 0) return false;
    }
    return true;
  }
};

inline Value to_value(const DayLog& d) {
  return Value::object({{"day", d.day}, {"action", d.action}, {"money", d.money}, {"valid", d.valid}});
}

inline EpisodeLog run_episode(const WorldModel& model, const PlanConfig& cfg, int days, std::uint64_t seed,
                              const ActionHooks& hooks = coffee_hooks(), const coffee::Params& params = {}) {
  std::mt19937_64 env_rng(mix_seed(seed, 0xe1e1));
  coffee::State s = coffee::initial_state(env_rng);
  EpisodeLog log;
  for (int d = 0; d < days; ++d) {
    Observation obs{s.det(), s.sto()};
    auto plan = plan_step(model, obs, cfg, hooks, mix_seed(seed, static_cast<std::uint64_t>(d) + 1));
    auto r = coffee::step(s, plan.action, env_rng, params);
    s = r.next;
    log.days.push_back({d + 1, plan.action, s.money, r.valid});
  }
  log.final_money = s.money;
  return log;
}

// Baseline that never acts.
inline EpisodeLog run_wait_episode(int days, std::uint64_t seed, const coffee::Params& params = {}) {
  std::mt19937_64 env_rng(mix_seed(seed, 0xe1e1));
  coffee::State s = coffee::initial_state(env_rng);
  EpisodeLog log;
  for (int d = 0; d < days; ++d) {
    auto r = coffee::step(s, coffee::named("wait"), env_rng, params);
    s = r.next;
    log.days.push_back({d + 1, coffee::named("wait"), s.money, r.valid});
  }
  log.final_money = s.money;
  return log;
}

}  // namespace hwm::plan
