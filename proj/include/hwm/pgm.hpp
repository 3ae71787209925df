#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "hwm/cpd.hpp"
#include "hwm/dag.hpp"
#include "hwm/doc/value.hpp"
#include "hwm/schema.hpp"
#include "hwm/util.hpp"

namespace hwm::pgm {

using doc::Value;

class SearchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ScoringError : public std::runtime_error {
 public:
  ScoringError(std::string node, const std::string& what)
      : std::runtime_error("fit failed for '" + node + "': " + what), node_(std::move(node)) {}
  const std::string& node() const { return node_; }

 private:
  std::string node_;
};

struct SearchConfig {
  double lambda1 = 10;
  double lambda2 = 100;
  double alpha = 0.99;
  int steps_per_chain = 50;
  int chains = 5;
  std::uint64_t seed = 0;
  int probe_moves = 20;
  double probe_accept = 0.8;
  double t0_floor = 1e-3;
  std::optional<double> t0;  // overrides calibration
  int cycle_retries = 10;
  unsigned threads = 1;

  void check() const {
    if (!(alpha > 0 && alpha < 1)) throw SearchError("alpha must lie in (0, 1)");
    if (lambda1 < 0 || lambda2 < 0) throw SearchError("lambdas must be non-negative");
    if (chains < 1) throw SearchError("need at least one chain");
    if (steps_per_chain < 0) throw SearchError("steps_per_chain must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Oracle seams. The knowledge oracle implements both; tests script them.

// Log-probability that a structure fits the environment description.
class PriorOracle {
 public:
  virtual ~PriorOracle() = default;
  virtual double log_prior(const ObservationSchema& schema, const Dag& dag) = 0;
};

class FlatPrior final : public PriorOracle {
 public:
  double log_prior(const ObservationSchema&, const Dag&) override { return 0.0; }
};

// Sum of per-node answers "does `target` depend on exactly these parents?".
class NodePrior : public PriorOracle {
 public:
  virtual double node_log_prob(const ObservationSchema& schema, const std::string& target,
                               const std::vector<std::string>& parents) = 0;

  double log_prior(const ObservationSchema& schema, const Dag& dag) override {
    double total = 0;
    for (const auto& v : dag.modeled_nodes()) total += node_log_prob(schema, v, dag.parents(v));
    return total;
  }
};

// Answers may be outside the offered sets; callers filter and fall back.
class StructureOracle {
 public:
  virtual ~StructureOracle() = default;
  virtual std::string topo_next(const ObservationSchema& schema, const std::vector<std::string>& ordered,
                                const std::vector<std::string>& remaining, std::uint64_t seed) = 0;
  virtual std::vector<std::string> elicit_parents(const ObservationSchema& schema, const std::string& node,
                                                  const std::vector<std::string>& predecessors,
                                                  std::uint64_t seed) = 0;
};

// ---------------------------------------------------------------------------
// Seed graphs

struct SeedLog {
  std::vector<std::string> order;
  std::vector<std::string> fallbacks;  // one line per repaired oracle answer
};

// Orders the modeled nodes with the oracle (conditioning nodes first), then
// asks each node for parents among its predecessors. Acyclic by construction.
inline Dag sample_seed_dag(const ObservationSchema& schema, StructureOracle& oracle, std::uint64_t seed,
                           SeedLog* log = nullptr) {
  Dag base = Dag::over(schema);
  std::vector<std::string> ordered, remaining;
  for (const auto& n : base.nodes()) (n.stream == Stream::stochastic ? remaining : ordered).push_back(n.id);
  SeedLog local;
  SeedLog& lg = log ? *log : local;

  int round = 0;
  while (!remaining.empty()) {
    std::string pick;
    if (remaining.size() == 1) {
      pick = remaining.front();
    } else {
      for (int attempt = 0; attempt < 2 && pick.empty(); ++attempt) {
        std::string ans = oracle.topo_next(schema, ordered, remaining, mix_seed(seed, std::uint64_t(round * 2 + attempt)));
        if (std::find(remaining.begin(), remaining.end(), ans) != remaining.end()) pick = ans;
        else lg.fallbacks.push_back("topo_next answered '" + ans + "' outside the remaining set");
      }
      if (pick.empty()) {
        pick = remaining.front();
        lg.fallbacks.push_back("topo_next fell back to '" + pick + "'");
      }
    }
    remaining.erase(std::find(remaining.begin(), remaining.end(), pick));
    ordered.push_back(pick);
    ++round;
  }
  lg.order = ordered;

  std::set<Edge> edges;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (!base.modeled(ordered[i])) continue;
    std::vector<std::string> preds(ordered.begin(), ordered.begin() + static_cast<std::ptrdiff_t>(i));
    if (preds.empty()) continue;
    auto ans = oracle.elicit_parents(schema, ordered[i], preds, mix_seed(seed, 1000 + i));
    for (const auto& p : ans) {
      if (std::find(preds.begin(), preds.end(), p) != preds.end()) edges.insert({p, ordered[i]});
      else lg.fallbacks.push_back("dropped parent '" + p + "' of '" + ordered[i] + "'");
    }
  }
  return Dag(base.nodes(), std::move(edges));
}

// ---------------------------------------------------------------------------
// Objective

struct ScoreBreakdown {
  double data_term = 0;
  double sparsity_term = 0;
  double prior_term = 0;
  double total = 0;
  std::map<std::string, double> node_terms;
};

inline Value to_value(const ScoreBreakdown& s) {
  Value nodes = Value::object();
  for (const auto& [k, v] : s.node_terms) nodes[k] = v;
  return Value::object({{"data_term", s.data_term},
                        {"sparsity_term", s.sparsity_term},
                        {"prior_term", s.prior_term},
                        {"total", s.total},
                        {"node_terms", nodes}});
}

// J = mean joint surrogate - lambda1 |E| / |V|^2 + lambda2 log p(E).
// Node fits come from the shared cache; the prior is memoized per edge set.
class Scorer {
 public:
  Scorer(cpd::FitCache& fits, PriorOracle& prior, SearchConfig cfg) : fits_(fits), prior_(prior), cfg_(cfg) {}

  ScoreBreakdown score(const Dag& dag) {
    ScoreBreakdown s;
    for (const auto& v : dag.modeled_nodes()) {
      std::shared_ptr<const cpd::NodeModel> m;
      try {
        m = fits_.get(v, dag.parents(v));
      } catch (const std::exception& e) {
        throw ScoringError(v, e.what());
      }
      s.node_terms[v] = m->train_surrogate;
      s.data_term += m->train_surrogate;
    }
    const double nv = static_cast<double>(dag.size());
    s.sparsity_term = nv > 0 ? -cfg_.lambda1 * static_cast<double>(dag.edges().size()) / (nv * nv) : 0.0;
    s.prior_term = cfg_.lambda2 * log_prior(dag);
    s.total = s.data_term + s.sparsity_term + s.prior_term;
    return s;
  }

  double log_prior(const Dag& dag) {
    std::string key = dag.edge_key();
    {
      std::lock_guard lock(mu_);
      if (auto it = prior_memo_.find(key); it != prior_memo_.end()) return it->second;
    }
    double lp = prior_.log_prior(fits_.schema(), dag);
    std::lock_guard lock(mu_);
    return prior_memo_.emplace(key, lp).first->second;
  }

  const SearchConfig& config() const { return cfg_; }
  cpd::FitCache& fits() { return fits_; }

 private:
  cpd::FitCache& fits_;
  PriorOracle& prior_;
  SearchConfig cfg_;
  std::mutex mu_;
  std::map<std::string, double> prior_memo_;
};

// ---------------------------------------------------------------------------
// Moves

enum class MoveKind { add, remove, flip, none };

inline std::string_view move_name(MoveKind k) {
  switch (k) {
    case MoveKind::add: return "add";
    case MoveKind::remove: return "remove";
    case MoveKind::flip: return "flip";
    case MoveKind::none: return "none";
  }
  return "?";
}

struct Move {
  MoveKind kind = MoveKind::none;
  Edge edge;  // the edge added, removed, or flipped (before flipping)
};

struct Proposal {
  Dag dag;
  Move move;
};

namespace detail {

inline std::vector<Edge> addable(const Dag& g) {
  std::vector<Edge> out;
  for (const auto& p : g.nodes())
    for (const auto& c : g.nodes())
      if (p.id != c.id && c.stream == Stream::stochastic && !g.has_edge(p.id, c.id) && !g.has_edge(c.id, p.id))
        out.push_back({p.id, c.id});
  return out;
}

inline std::vector<Edge> flippable(const Dag& g) {
  std::vector<Edge> out;
  for (const auto& e : g.edges())
    if (g.modeled(e.first)) out.push_back(e);
  return out;
}

}  // namespace detail

// Uniform over the move types that have a candidate, then uniform over that
// type's candidates. A draw that closes a cycle is redrawn; after the retry
// bound the graph comes back unchanged.
template <typename Rng>
Proposal propose_move(const Dag& g, Rng& rng, int retries = 10) {
  auto add = detail::addable(g);
  auto flip = detail::flippable(g);
  std::vector<Edge> rem(g.edges().begin(), g.edges().end());
  std::vector<MoveKind> kinds;
  if (!add.empty()) kinds.push_back(MoveKind::add);
  if (!rem.empty()) kinds.push_back(MoveKind::remove);
  if (!flip.empty()) kinds.push_back(MoveKind::flip);
  if (kinds.empty()) return {g, {}};
  auto pick = [&](const std::vector<Edge>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  for (int attempt = 0; attempt <= retries; ++attempt) {
    MoveKind k = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
    std::set<Edge> edges = g.edges();
    Edge e;
    if (k == MoveKind::add) {
      e = pick(add);
      edges.insert(e);
    } else if (k == MoveKind::remove) {
      e = pick(rem);
      edges.erase(e);
    } else {
      e = pick(flip);
      edges.erase(e);
      edges.insert({e.second, e.first});
    }
    Dag next = g.with_edges(std::move(edges));
    if (next.acyclic()) return {std::move(next), {k, e}};
  }
  return {g, {}};
}

// ---------------------------------------------------------------------------
// Annealing

struct TraceEntry {
  int step = 0;
  double temperature = 0;
  Move move;
  double proposed = 0;
  double current = 0;  // after the accept decision
  double best = 0;
  bool accepted = false;
};

inline Value to_value(const TraceEntry& t) {
  return Value::object({{"step", t.step},
                        {"temperature", t.temperature},
                        {"move", std::string(move_name(t.move.kind))},
                        {"edge", Value::array({t.move.edge.first, t.move.edge.second})},
                        {"proposed", t.proposed},
                        {"current", t.current},
                        {"best", t.best},
                        {"accepted", t.accepted}});
}

struct AnnealResult {
  Dag best;
  ScoreBreakdown best_score;
  Dag seed;
  ScoreBreakdown seed_score;
  double t0 = 0;
  std::vector<TraceEntry> trace;
  std::optional<std::string> error;  // set when a scoring failure cut the chain short
};

// Probe moves from the seed; the median |dJ| is accepted with probability
// `probe_accept` at the starting temperature. The prior term is left out of
// dJ here: its near-forbidden edges move J by hundreds and would otherwise
// set a temperature at which every move is accepted.
template <typename Rng>
double calibrate_temperature(const Dag& seed, const ScoreBreakdown& seed_score, Scorer& scorer, Rng& rng) {
  const auto& cfg = scorer.config();
  if (cfg.t0) return *cfg.t0;
  std::vector<double> deltas;
  for (int i = 0; i < cfg.probe_moves; ++i) {
    auto p = propose_move(seed, rng, cfg.cycle_retries);
    if (p.move.kind == MoveKind::none) continue;
    auto s = scorer.score(p.dag);
    deltas.push_back(std::fabs((s.total - s.prior_term) - (seed_score.total - seed_score.prior_term)));
  }
  if (deltas.empty()) return cfg.t0_floor;
  auto mid = deltas.begin() + static_cast<std::ptrdiff_t>(deltas.size() / 2);
  std::nth_element(deltas.begin(), mid, deltas.end());
  double median = *mid;
  if (deltas.size() % 2 == 0) median = 0.5 * (median + *std::max_element(deltas.begin(), mid));
  return std::max(cfg.t0_floor, median / std::log(1.0 / cfg.probe_accept));
}

template <typename Rng>
AnnealResult anneal(const Dag& seed, Scorer& scorer, int steps, Rng& rng) {
  const auto& cfg = scorer.config();
  AnnealResult r{seed, scorer.score(seed), seed, {}, 0, {}, {}};
  r.seed_score = r.best_score;
  if (steps <= 0) return r;
  Dag cur = seed;
  double cur_j = r.best_score.total;
  std::uniform_real_distribution<double> u(0, 1);
  try {
    double t = r.t0 = calibrate_temperature(seed, r.seed_score, scorer, rng);
    for (int step = 0; step < steps; ++step) {
      auto p = propose_move(cur, rng, cfg.cycle_retries);
      ScoreBreakdown s = scorer.score(p.dag);
      double delta = s.total - cur_j;
      bool accept = delta >= 0 || u(rng) < std::exp(delta / t);
      if (accept) {
        cur = std::move(p.dag);
        cur_j = s.total;
        if (cur_j > r.best_score.total) {
          r.best = cur;
          r.best_score = s;
        }
      }
      r.trace.push_back({step, t, p.move, s.total, cur_j, r.best_score.total, accept});
      t *= cfg.alpha;
    }
  } catch (const ScoringError& e) {
    r.error = e.what();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Multi-chain search

struct SearchResult {
  Dag best;
  ScoreBreakdown score;
  int best_chain = -1;
  std::vector<AnnealResult> chains;
  std::vector<SeedLog> seed_logs;
};

inline std::uint64_t chain_seed(std::uint64_t seed, int chain) { return mix_seed(seed, 0x5eed0000ULL + std::uint64_t(chain)); }

// Seeds come from the oracle in chain order; chains then anneal on up to
// `threads` workers. Fits and prior answers are shared, so the outcome does
// not depend on scheduling.
inline SearchResult search(const ObservationSchema& schema, StructureOracle& oracle, Scorer& scorer) {
  const auto& cfg = scorer.config();
  cfg.check();
  SearchResult out;
  std::vector<Dag> seeds;
  for (int c = 0; c < cfg.chains; ++c) {
    SeedLog lg;
    seeds.push_back(sample_seed_dag(schema, oracle, chain_seed(cfg.seed, c), &lg));
    out.seed_logs.push_back(std::move(lg));
  }
  out.chains.resize(seeds.size());
  std::vector<std::string> errors(seeds.size());
  auto run = [&](std::size_t c) {
    std::mt19937_64 rng(chain_seed(cfg.seed, static_cast<int>(c)) ^ 0xa5a5a5a5ULL);
    try {
      out.chains[c] = anneal(seeds[c], scorer, cfg.steps_per_chain, rng);
    } catch (const std::exception& e) {
      errors[c] = e.what();
    }
  };
  unsigned workers = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(seeds.size())));
  if (workers == 1) {
    for (std::size_t c = 0; c < seeds.size(); ++c) run(c);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t c;
          {
            std::lock_guard lock(mu);
            if (next >= seeds.size()) return;
            c = next++;
          }
          run(c);
        }
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t c = 0; c < seeds.size(); ++c) {
    if (!errors[c].empty()) continue;
    if (out.best_chain < 0 || out.chains[c].best_score.total > out.score.total) {
      out.best_chain = static_cast<int>(c);
      out.best = out.chains[c].best;
      out.score = out.chains[c].best_score;
    }
  }
  if (out.best_chain < 0) {
    std::string msg = "every chain failed";
    for (const auto& e : errors) msg += "; " + e;
    throw SearchError(msg);
  }
  return out;
}

inline void write_trace(std::ostream& os, const SearchResult& r) {
  for (std::size_t c = 0; c < r.chains.size(); ++c)
    for (const auto& t : r.chains[c].trace) {
      Value v = to_value(t);
      v["chain"] = static_cast<double>(c);
      os << doc::dump(v) << '\n';
    }
}

}  // namespace hwm::pgm
