#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hwm/coffeeshop.hpp"
#include "hwm/cpd.hpp"
#include "hwm/dag.hpp"
#include "hwm/eval.hpp"
#include "hwm/oracle.hpp"
#include "hwm/pgm.hpp"
#include "hwm/planner.hpp"
#include "hwm/program.hpp"
#include "hwm/refine.hpp"
#include "hwm/schema.hpp"
#include "hwm/util.hpp"

#ifdef HWM_WITH_HTTP
#include "hwm/http_transport.hpp"
#endif

// Config, artifacts and the stage functions behind the command line:
// gen-data, init-model, refine, learn-structure, fit, plan, eval.
namespace hwm::pipeline {

namespace fs = std::filesystem;
using doc::Value;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg, std::vector<std::string> problems = {})
      : std::runtime_error(msg), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

// Missing, malformed or mismatched input artifacts.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

// A JSON tree plus the directory its relative paths resolve against.
struct Config {
  Value root = Value::object();
  fs::path base_dir = ".";

  static Config parse(std::string_view text, fs::path base_dir = ".") {
    Config c;
    try {
      c.root = doc::parse(text);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!c.root.is_object()) throw ConfigError("config must be a map");
    c.base_dir = std::move(base_dir);
    return c;
  }

  static Config load(const fs::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    return parse(text, path.has_parent_path() ? path.parent_path() : fs::path("."));
  }

  // Sets a dotted key, creating intermediate maps.
  void set(std::string_view dotted, Value v) {
    Value* node = &root;
    std::size_t start = 0;
    for (;;) {
      auto dot = dotted.find('.', start);
      std::string key(dotted.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
      if (key.empty()) throw ConfigError("empty segment in key '" + std::string(dotted) + "'");
      if (!node->is_object()) throw ConfigError("'" + std::string(dotted) + "' passes through a non-map value");
      if (dot == std::string_view::npos) {
        (*node)[key] = std::move(v);
        return;
      }
      Value& next = (*node)[key];
      if (next.is_null()) next = Value::object();
      node = &next;
      start = dot + 1;
    }
  }

  // `key=value`, the value parsed as JSON when it is valid JSON, else text.
  void apply_override(std::string_view assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) throw ConfigError("override must look like key=value");
    std::string_view raw = assignment.substr(eq + 1);
    Value v;
    try {
      v = doc::parse(raw);
    } catch (const std::exception&) {
      v = Value(std::string(raw));
    }
    set(assignment.substr(0, eq), std::move(v));
  }

  // Identifies the experiment; the output location is not part of it.
  std::string hash() const {
    Value v = root;
    v.as_object().erase("out");
    return hex64(fnv1a(doc::dump(v)));
  }

  fs::path resolve(const std::string& p) const {
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

// Typed access that collects every problem before failing.
class ConfigReader {
 public:
  explicit ConfigReader(const Config& cfg) : cfg_(cfg) {}

  double number(const std::string& key) {
    const Value* v = need(key);
    if (v && !v->is_number()) return bad(key, "a number"), 0.0;
    return v ? v->as_number() : 0.0;
  }
  int integer(const std::string& key, int min = std::numeric_limits<int>::min()) {
    const Value* v = need(key);
    if (!v) return 0;
    double x = v->is_number() ? v->as_number() : 0.5;
    if (x != std::floor(x) || x < double(min) || x > double(std::numeric_limits<int>::max()))
      return bad(key, min > 0 ? "a positive integer" : "an integer"), 0;
    return static_cast<int>(x);
  }
  std::string text(const std::string& key) {
    const Value* v = need(key);
    if (v && !v->is_text()) return bad(key, "text"), std::string();
    return v ? v->as_text() : std::string();
  }
  std::vector<std::string> texts(const std::string& key) {
    const Value* v = need(key);
    std::vector<std::string> out;
    if (!v) return out;
    if (!v->is_array()) return bad(key, "a list of text"), out;
    for (const auto& e : v->as_array()) {
      if (!e.is_text()) return bad(key, "a list of text"), std::vector<std::string>{};
      out.push_back(e.as_text());
    }
    return out;
  }
  // An explicit seed when present, else one derived from the root seed.
  std::uint64_t seed(const std::string& section, std::uint64_t root_seed) {
    const Value* v = lookup(section + ".seed");
    if (!v) return mix_seed(root_seed, fnv1a(section));
    if (!v->is_number() || v->as_number() < 0 || v->as_number() != std::floor(v->as_number()))
      return bad(section + ".seed", "a non-negative integer"), 0;
    return static_cast<std::uint64_t>(v->as_number());
  }
  std::optional<std::string> optional_text(const std::string& key) {
    const Value* v = lookup(key);
    if (!v) return std::nullopt;
    if (!v->is_text()) return bad(key, "text"), std::nullopt;
    return v->as_text();
  }
  int optional_integer(const std::string& key, int fallback) { return lookup(key) ? integer(key, 1) : fallback; }

  bool present(const std::string& key) const { return lookup(key) != nullptr; }
  void require(bool ok, const std::string& problem) {
    if (!ok) problems_.push_back(problem);
  }
  // Range check that stays quiet when the key is missing (already reported).
  void check(const std::string& key, bool ok, const std::string& problem) {
    if (present(key) && !ok) problems_.push_back(problem);
  }
  void finish() const {
    if (problems_.empty()) return;
    std::string msg = "config has " + std::to_string(problems_.size()) + " problem(s)";
    for (const auto& p : problems_) msg += "; " + p;
    throw ConfigError(msg, problems_);
  }

 private:
  const Value* lookup(const std::string& key) const {
    const Value* node = &cfg_.root;
    std::size_t start = 0;
    for (;;) {
      auto dot = key.find('.', start);
      if (!node->is_object()) return nullptr;
      node = node->find(key.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
      if (!node || dot == std::string::npos) return node;
      start = dot + 1;
    }
  }
  const Value* need(const std::string& key) {
    const Value* v = lookup(key);
    if (!v) problems_.push_back("missing key '" + key + "'");
    return v;
  }
  void bad(const std::string& key, const std::string& want) { problems_.push_back("'" + key + "' must be " + want); }

  const Config& cfg_;
  std::vector<std::string> problems_;
};

// ---------------------------------------------------------------------------
// Settings

struct DataSettings {
  int episodes = 100, horizon = 50;
  double train_fraction = 0.9;
  double price_change = 0.1;
  int refine_episodes = 100;
  double refine_epsilon = 0.5;
  std::uint64_t seed = 0;
};

struct OracleSettings {
  std::string mode;  // scripted | replay | http
  fs::path script, fixture, prompts;
  oracle::OracleConfig config;
};

struct StructureSettings {
  pgm::SearchConfig search;
  cpd::FitHyper fit;
};

struct PlanSettings {
  plan::PlanConfig planner;
  int episodes = 36, days = 50;
  std::vector<std::string> agents;
  double random_dag_edge_p = 0.3;
  std::uint64_t seed = 0;
};

struct EvalSettings {
  eval::TransitionEvalConfig transition;
};

inline const std::vector<std::string>& known_agents() {
  static const std::vector<std::string> a{"full", "independent", "random", "linear", "oracle", "wait"};
  return a;
}
inline bool uses_cpds(const std::string& agent) { return agent != "oracle" && agent != "wait"; }

struct Settings {
  std::uint64_t seed = 0;
  fs::path out;
  DataSettings data;
  OracleSettings oracle;
  refine::RefineConfig refine;
  StructureSettings structure;
  cpd::FitHyper fit;
  PlanSettings plan;
  EvalSettings eval;
  std::string config_hash;
};

// Reads every section; all problems are reported together.
inline Settings read_settings(const Config& cfg) {
  ConfigReader r(cfg);
  Settings s;
  s.config_hash = cfg.hash();
  int root_seed = r.integer("seed", 0);
  s.seed = static_cast<std::uint64_t>(root_seed);
  s.out = cfg.resolve(r.text("out"));

  s.data.episodes = r.integer("data.episodes", 1);
  s.data.horizon = r.integer("data.horizon", 1);
  s.data.train_fraction = r.number("data.train_fraction");
  s.data.price_change = r.number("data.price_change");
  s.data.refine_episodes = r.integer("data.refine_episodes", 1);
  s.data.refine_epsilon = r.number("data.refine_epsilon");
  s.data.seed = r.seed("data", s.seed);
  r.check("data.train_fraction", s.data.train_fraction > 0 && s.data.train_fraction < 1, "'data.train_fraction' must lie in (0, 1)");
  r.check("data.price_change", s.data.price_change >= 0 && s.data.price_change <= 1, "'data.price_change' must lie in [0, 1]");
  r.check("data.refine_epsilon", s.data.refine_epsilon >= 0 && s.data.refine_epsilon <= 1, "'data.refine_epsilon' must lie in [0, 1]");

  s.oracle.mode = r.text("oracle.mode");
  if (s.oracle.mode == "scripted") s.oracle.script = cfg.resolve(r.text("oracle.script"));
  else if (s.oracle.mode == "replay") s.oracle.fixture = cfg.resolve(r.text("oracle.fixture"));
  else if (s.oracle.mode == "http") s.oracle.prompts = cfg.resolve(r.text("oracle.prompts"));
  else if (r.present("oracle.mode")) r.require(false, "'oracle.mode' must be scripted, replay or http, not '" + s.oracle.mode + "'");
  if (auto p = r.optional_text("oracle.prompts"); p && s.oracle.mode != "http") s.oracle.prompts = cfg.resolve(*p);
  if (auto f = r.optional_text("oracle.fixture"); f && s.oracle.mode != "replay") s.oracle.fixture = cfg.resolve(*f);
  s.oracle.config.retries = r.integer("oracle.retries", 0);
  s.oracle.config.backoff = std::chrono::milliseconds(r.integer("oracle.backoff_ms", 0));
  std::string prior_mode = r.text("oracle.prior_mode");
  if (prior_mode == "whole_graph") s.oracle.config.prior_mode = oracle::PriorMode::whole_graph;
  else r.require(prior_mode == "per_node" || !r.present("oracle.prior_mode"), "'oracle.prior_mode' must be per_node or whole_graph");

  s.refine.k_candidates = r.integer("refine.k", 1);
  s.refine.train_set_size = static_cast<std::size_t>(r.integer("refine.train_size", 1));
  s.refine.validation_set_size = static_cast<std::size_t>(r.integer("refine.validation_size", 1));
  s.refine.train_valid_fraction = r.number("refine.valid_fraction");
  s.refine.seed = r.seed("refine", s.seed);
  r.check("refine.valid_fraction", s.refine.train_valid_fraction >= 0 && s.refine.train_valid_fraction <= 1, "'refine.valid_fraction' must lie in [0, 1]");

  auto& sc = s.structure.search;
  sc.chains = r.integer("structure.chains", 1);
  sc.steps_per_chain = r.integer("structure.steps", 0);
  sc.lambda1 = r.number("structure.lambda1");
  sc.lambda2 = r.number("structure.lambda2");
  sc.alpha = r.number("structure.alpha");
  sc.seed = r.seed("structure", s.seed);
  sc.threads = static_cast<unsigned>(r.optional_integer("structure.threads", 1));
  s.structure.fit.epochs = r.integer("structure.fit_epochs", 1);
  s.structure.fit.seed = sc.seed;
  r.check("structure.alpha", sc.alpha > 0 && sc.alpha < 1, "'structure.alpha' must lie in (0, 1)");

  s.fit.hidden = r.integer("fit.hidden", 1);
  s.fit.epochs = r.integer("fit.epochs", 1);
  s.fit.batch = r.integer("fit.batch", 1);
  s.fit.lr = r.number("fit.lr");
  s.fit.seed = r.seed("fit", s.seed);
  s.structure.fit.hidden = s.fit.hidden;
  s.structure.fit.batch = s.fit.batch;
  s.structure.fit.lr = s.fit.lr;
  r.check("fit.lr", s.fit.lr > 0, "'fit.lr' must be positive");

  auto& pc = s.plan.planner;
  s.plan.episodes = r.integer("plan.episodes", 1);
  s.plan.days = r.integer("plan.days", 1);
  pc.horizon = r.integer("plan.horizon", 1);
  pc.iterations = r.integer("plan.iterations", 1);
  pc.rollouts_per_node = r.integer("plan.rollouts_per_node", 1);
  pc.actions_per_node = r.integer("plan.actions_per_node", 1);
  pc.exploration_c = r.number("plan.exploration_c");
  pc.threads = r.optional_integer("plan.threads", 1);
  s.plan.agents = r.texts("plan.agents");
  s.plan.random_dag_edge_p = r.number("plan.random_dag_edge_p");
  s.plan.seed = r.seed("plan", s.seed);
  for (const auto& a : s.plan.agents)
    r.require(std::find(known_agents().begin(), known_agents().end(), a) != known_agents().end(),
              "unknown agent '" + a + "' in plan.agents");
  r.check("plan.agents", r.present("plan.agents") && !s.plan.agents.empty(), "'plan.agents' must name at least one agent");
  r.check("plan.exploration_c", pc.exploration_c >= 0, "'plan.exploration_c' must be non-negative");

  s.eval.transition.mean_samples = r.integer("eval.mean_samples", 1);
  s.eval.transition.seed = r.seed("eval", s.seed);

  r.finish();
  return s;
}

// ---------------------------------------------------------------------------
// Workspace: artifact files stamped with the config hash and seed

struct Workspace {
  fs::path dir;
  std::string config_hash;
  std::uint64_t seed = 0;

  Workspace(fs::path d, std::string hash, std::uint64_t s) : dir(std::move(d)), config_hash(std::move(hash)), seed(s) {}
  explicit Workspace(const Settings& s) : Workspace(s.out, s.config_hash, s.seed) {}

  fs::path path(const std::string& name) const { return dir / name; }

  Value stamp(const std::string& kind) const {
    return Value::object({{"artifact", kind}, {"config_hash", config_hash}, {"seed", static_cast<double>(seed)}});
  }

  void write_json(const std::string& name, const std::string& kind, Value body) const {
    if (!body.is_object()) throw std::logic_error("artifact body must be a map");
    Value st = stamp(kind);
    for (const auto& [k, v] : st.as_object()) body[k] = v;
    atomic_write(path(name), doc::dump(body, 1) + "\n");
  }

  Value read_json(const std::string& name, const std::string& kind) const {
    auto p = path(name);
    if (!fs::exists(p)) throw DataError("missing artifact " + p.string() + " (run the stage that writes it first)");
    Value v;
    try {
      v = doc::parse(read_file(p));
    } catch (const std::exception& e) {
      throw DataError(p.string() + ": " + e.what());
    }
    const Value* k = v.is_object() ? v.find("artifact") : nullptr;
    if (!k || !k->is_text() || k->as_text() != kind) throw DataError(p.string() + " is not a " + kind + " artifact");
    return v;
  }

  // JSON-lines with a leading meta header.
  void write_lines(const std::string& name, const std::string& kind, const std::vector<Value>& lines) const {
    std::ostringstream os;
    os << doc::dump(Value::object({{"meta", stamp(kind)}})) << '\n';
    for (const auto& l : lines) os << doc::dump(l) << '\n';
    atomic_write(path(name), os.str());
  }

  void write_trajectories(const std::string& name, const std::vector<Trajectory>& ts) const {
    std::ostringstream os;
    hwm::write_trajectories(os, ts, stamp("trajectories"));
    atomic_write(path(name), os.str());
  }

  std::vector<Trajectory> read_trajectories(const std::string& name, const ObservationSchema& schema) const {
    auto p = path(name);
    if (!fs::exists(p)) throw DataError("missing artifact " + p.string() + " (run gen-data first)");
    std::ifstream in(p);
    TrajectorySet set;
    try {
      set = load_trajectories(in, &schema);
    } catch (const IngestError& e) {
      throw DataError(p.string() + ": " + e.what());
    }
    if (!set.violations.empty()) {
      const auto& v = set.violations.front();
      throw DataError(p.string() + ": line " + std::to_string(v.line) + " " + v.field + " " + v.violation.variable +
                      ": " + v.violation.detail);
    }
    if (set.record_count() == 0) throw DataError(p.string() + " holds no transitions");
    return std::move(set.trajectories);
  }

  // Wall-clock seconds per stage, kept apart from reproducible artifacts.
  void record_timing(const std::string& stage, double seconds) const {
    auto p = path("timing.json");
    Value t;
    if (fs::exists(p)) try {
        t = doc::parse(read_file(p));
      } catch (const std::exception&) {
      }
    Value secs = t.is_object() && t.find("seconds") && t.at("seconds").is_object() ? t.at("seconds") : Value::object();
    secs[stage] = seconds;
    write_json("timing.json", "timing", Value::object({{"seconds", secs}}));
  }
};

class StageTimer {
 public:
  StageTimer(const Workspace& ws, std::string stage)
      : ws_(ws), stage_(std::move(stage)), t0_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    try {
      ws_.record_timing(stage_, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count());
    } catch (...) {
    }
  }

 private:
  const Workspace& ws_;
  std::string stage_;
  std::chrono::steady_clock::time_point t0_;
};

// ---------------------------------------------------------------------------
// Oracle session

struct OracleSession {
  std::unique_ptr<oracle::Transport> source;
  std::unique_ptr<oracle::RecordingTransport> recorder;
  std::unique_ptr<oracle::KnowledgeOracle> oracle;

  oracle::KnowledgeOracle& get() { return *oracle; }
  // Saves what was recorded; no-op unless recording.
  void save(const fs::path& fixture) const {
    if (recorder) recorder->save(fixture);
  }
};

inline std::unique_ptr<oracle::Transport> make_transport(const OracleSettings& s) {
  if (s.mode == "scripted") {
    Value script;
    try {
      script = doc::parse(read_file(s.script));
    } catch (const std::exception& e) {
      throw DataError("oracle script " + s.script.string() + ": " + e.what());
    }
    return std::make_unique<oracle::ScriptedTransport>(std::move(script));
  }
  if (s.mode == "replay") {
    if (!fs::exists(s.fixture)) throw DataError("missing oracle fixture " + s.fixture.string());
    return std::make_unique<oracle::ReplayTransport>(oracle::ReplayTransport::load(s.fixture));
  }
  if (s.mode == "http") {
#ifdef HWM_WITH_HTTP
    return std::make_unique<oracle::HttpTransport>(oracle::HttpConfig::from_env());
#else
    throw oracle::OracleError("this build has no HTTP oracle (configure with HWM_WITH_HTTP=ON)");
#endif
  }
  throw ConfigError("unknown oracle mode '" + s.mode + "'");
}

inline OracleSession open_oracle(const OracleSettings& s, bool record = false) {
  OracleSession o;
  o.source = make_transport(s);
  oracle::Transport* t = o.source.get();
  if (record) {
    o.recorder = std::make_unique<oracle::RecordingTransport>(*o.source);
    t = o.recorder.get();
  }
  std::optional<oracle::PromptSet> prompts;
  if (!s.prompts.empty()) prompts = oracle::PromptSet::load(s.prompts);
  o.oracle = std::make_unique<oracle::KnowledgeOracle>(*t, s.config, std::move(prompts));
  return o;
}

// ---------------------------------------------------------------------------
// Artifact readers

inline ObservationSchema load_schema(const Workspace& ws) {
  try {
    return schema_from_value(ws.read_json("schema.json", "schema").at("schema"));
  } catch (const SchemaError& e) {
    throw DataError(std::string("schema.json: ") + e.what());
  }
}

inline program::TransitionProgram load_program(const Workspace& ws, const std::string& name) {
  Value v = ws.read_json(name, "program");
  try {
    return program::program_from_value(v.at("program"));
  } catch (const std::exception& e) {
    throw DataError(name + ": " + e.what());
  }
}

inline Dag load_dag(const Workspace& ws) {
  try {
    return dag_from_value(ws.read_json("dag.json", "dag").at("dag"));
  } catch (const DagError& e) {
    throw DataError(std::string("dag.json: ") + e.what());
  }
}

inline std::string model_file(const std::string& agent) { return "model_" + agent + ".json"; }

inline cpd::CpdModel load_model(const Workspace& ws, const std::string& agent) {
  Value v = ws.read_json(model_file(agent), "cpd_model");
  try {
    return cpd::cpd_from_value(v.at("model"));
  } catch (const std::exception& e) {
    throw DataError(model_file(agent) + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Ablation graphs

// Random order with the deterministic nodes first; each forward edge into a
// stochastic node is kept with probability p.
inline Dag random_dag(const ObservationSchema& schema, std::uint64_t seed, double p) {
  Dag base = Dag::over(schema);
  std::vector<std::string> det, sto;
  for (const auto& n : base.nodes()) (n.stream == Stream::stochastic ? sto : det).push_back(n.id);
  std::mt19937_64 rng(seed);
  std::shuffle(det.begin(), det.end(), rng);
  std::shuffle(sto.begin(), sto.end(), rng);
  std::vector<std::string> order = det;
  order.insert(order.end(), sto.begin(), sto.end());
  std::uniform_real_distribution<double> u(0, 1);
  std::set<Edge> edges;
  for (std::size_t j = det.size(); j < order.size(); ++j)
    for (std::size_t i = 0; i < j; ++i)
      if (u(rng) < p) edges.insert({order[i], order[j]});
  return base.with_edges(edges);
}

// A chain through the stochastic nodes in schema order.
inline Dag linear_dag(const ObservationSchema& schema) {
  Dag base = Dag::over(schema);
  auto sto = base.modeled_nodes();
  std::set<Edge> edges;
  for (std::size_t i = 1; i < sto.size(); ++i) edges.insert({sto[i - 1], sto[i]});
  return base.with_edges(edges);
}

// ---------------------------------------------------------------------------
// Stages

struct DataSummary {
  std::size_t train = 0, test = 0, refine_train = 0, refine_test = 0;
};

inline DataSummary gen_data(const Settings& s, const Workspace& ws) {
  StageTimer timer(ws, "gen-data");
  auto schema = coffee::schema();
  ws.write_json("schema.json", "schema", Value::object({{"schema", hwm::to_value(schema)}}));

  auto main = coffee::split_episodes(
      coffee::generate(coffee::HeuristicPolicy{s.data.price_change}, s.data.episodes, s.data.horizon, s.data.seed),
      s.data.train_fraction);
  auto mixed = coffee::split_episodes(
      coffee::generate(coffee::EpsilonPolicy{s.data.refine_epsilon, coffee::HeuristicPolicy{s.data.price_change}},
                       s.data.refine_episodes, s.data.horizon, mix_seed(s.data.seed, 1)),
      s.data.train_fraction);
  if (main.train.empty() || main.test.empty() || mixed.train.empty() || mixed.test.empty())
    throw ConfigError("data sizes leave an empty train or test split");
  ws.write_trajectories("train.jsonl", main.train);
  ws.write_trajectories("test.jsonl", main.test);
  ws.write_trajectories("refine_train.jsonl", mixed.train);
  ws.write_trajectories("refine_test.jsonl", mixed.test);
  return {flatten(main.train).size(), flatten(main.test).size(), flatten(mixed.train).size(),
          flatten(mixed.test).size()};
}

inline program::TransitionProgram init_model(const Settings&, const Workspace& ws, oracle::KnowledgeOracle& orc) {
  StageTimer timer(ws, "init-model");
  auto schema = load_schema(ws);
  auto prog = orc.init_program(schema);
  ws.write_json("program_init.json", "program", Value::object({{"program", program::to_value(prog)}}));
  return prog;
}

struct RefineSummary {
  refine::RefineResult result;
  std::size_t train_size = 0, val_size = 0;
  std::size_t train_errors_before = 0, train_errors_after = 0;
};

inline RefineSummary refine_model(const Settings& s, const Workspace& ws, oracle::KnowledgeOracle& orc) {
  StageTimer timer(ws, "refine");
  auto schema = load_schema(ws);
  auto prog = load_program(ws, "program_init.json");
  auto records = flatten(ws.read_trajectories("refine_train.jsonl", schema));
  auto split = refine::make_split(records, s.refine);
  RefineSummary out;
  out.train_size = split.train.size();
  out.val_size = split.val.size();
  out.train_errors_before = refine::error_count(prog, split.train, s.refine.step_budget);
  out.result = refine::refine(prog, split.train, split.val, orc, s.refine, schema.environment_doc());
  out.train_errors_after = refine::error_count(out.result.program, split.train, s.refine.step_budget);

  ws.write_json("program.json", "program",
                Value::object({{"program", program::to_value(out.result.program)},
                               {"refinement", Value::object({{"train_transitions", out.train_size},
                                                             {"validation_transitions", out.val_size},
                                                             {"accepted", out.result.log.accepted()},
                                                             {"train_errors_before", out.train_errors_before},
                                                             {"train_errors_after", out.train_errors_after},
                                                             {"val_errors_before", out.result.log.initial_val_errors}})}}));
  std::vector<Value> lines;
  for (const auto& st : out.result.log.steps) lines.push_back(refine::to_value(st));
  ws.write_lines("refine_log.jsonl", "refinement_log", lines);
  return out;
}

inline pgm::SearchResult learn_structure(const Settings& s, const Workspace& ws, oracle::KnowledgeOracle& orc) {
  StageTimer timer(ws, "learn-structure");
  auto schema = load_schema(ws);
  auto records = flatten(ws.read_trajectories("train.jsonl", schema));
  cpd::FitCache cache(schema, std::move(records), s.structure.fit);
  pgm::Scorer scorer(cache, orc, s.structure.search);
  auto res = pgm::search(schema, orc, scorer);

  doc::Array chains;
  for (const auto& c : res.chains)
    chains.push_back(Value::object({{"seed", to_value(c.seed)},
                                    {"seed_score", pgm::to_value(c.seed_score)},
                                    {"best", to_value(c.best)},
                                    {"best_score", pgm::to_value(c.best_score)},
                                    {"t0", c.t0}}));
  ws.write_json("dag.json", "dag",
                Value::object({{"dag", to_value(res.best)},
                               {"score", pgm::to_value(res.score)},
                               {"best_chain", res.best_chain},
                               {"chains", Value(std::move(chains))}}));
  std::ostringstream trace;
  pgm::write_trace(trace, res);
  std::vector<Value> lines;
  std::string line;
  std::istringstream in(trace.str());
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(doc::parse(line));
  ws.write_lines("search_trace.jsonl", "search_trace", lines);
  return res;
}

// Graph used by each CPD-based agent.
inline Dag agent_dag(const std::string& agent, const ObservationSchema& schema, const Workspace& ws,
                     const Settings& s) {
  if (agent == "full") return load_dag(ws);
  if (agent == "independent") return Dag::over(schema);
  if (agent == "random") return random_dag(schema, mix_seed(s.plan.seed, fnv1a("random_dag")), s.plan.random_dag_edge_p);
  if (agent == "linear") return linear_dag(schema);
  throw ConfigError("agent '" + agent + "' has no graph");
}

inline std::map<std::string, cpd::CpdModel> fit_models(const Settings& s, const Workspace& ws) {
  StageTimer timer(ws, "fit");
  auto schema = load_schema(ws);
  auto records = flatten(ws.read_trajectories("train.jsonl", schema));
  cpd::FitCache cache(schema, std::move(records), s.fit);
  std::vector<std::string> agents{"full"};
  for (const auto& a : s.plan.agents)
    if (uses_cpds(a) && std::find(agents.begin(), agents.end(), a) == agents.end()) agents.push_back(a);
  std::map<std::string, cpd::CpdModel> out;
  for (const auto& a : agents) {
    auto m = cpd::fit_all(cache, agent_dag(a, schema, ws, s));
    ws.write_json(model_file(a), "cpd_model", Value::object({{"agent", a}, {"model", cpd::to_value(m)}}));
    out.emplace(a, std::move(m));
  }
  return out;
}

struct AgentRun {
  std::string agent;
  std::vector<plan::EpisodeLog> episodes;
  eval::PlanningReport report;
};

inline std::uint64_t episode_seed(const Settings& s, int e) { return mix_seed(s.plan.seed, static_cast<std::uint64_t>(e)); }

inline AgentRun run_agent(const Settings& s, const Workspace& ws, const std::string& agent,
                          const std::function<void(int)>& progress = {}) {
  AgentRun run{agent, {}, {}};
  std::unique_ptr<plan::WorldModel> model;
  if (agent == "oracle") {
    model = std::make_unique<plan::SimulatorModel>();
  } else if (agent != "wait") {
    model = std::make_unique<plan::HybridModel>(load_program(ws, "program.json"), load_model(ws, agent));
  }
  for (int e = 0; e < s.plan.episodes; ++e) {
    run.episodes.push_back(model ? plan::run_episode(*model, s.plan.planner, s.plan.days, episode_seed(s, e))
                                 : plan::run_wait_episode(s.plan.days, episode_seed(s, e)));
    if (progress) progress(e);
  }
  run.report = eval::planning_metrics(run.episodes);
  return run;
}

inline void write_episodes(const Workspace& ws, const AgentRun& run) {
  std::vector<Value> lines;
  for (std::size_t e = 0; e < run.episodes.size(); ++e)
    for (const auto& d : run.episodes[e].days) {
      Value v = plan::to_value(d);
      v["episode"] = e;
      lines.push_back(std::move(v));
    }
  ws.write_lines("episodes_" + run.agent + ".jsonl", "episode_log", lines);
}

inline std::vector<AgentRun> plan_agents(const Settings& s, const Workspace& ws,
                                         const std::function<void(const std::string&, int)>& progress = {}) {
  StageTimer timer(ws, "plan");
  std::vector<AgentRun> runs;
  Value summary = Value::object();
  for (const auto& a : s.plan.agents) {
    runs.push_back(run_agent(s, ws, a, [&](int e) {
      if (progress) progress(a, e);
    }));
    write_episodes(ws, runs.back());
    summary[a] = eval::to_value(runs.back().report);
  }
  ws.write_json("planning.json", "planning", Value::object({{"agents", summary}}));
  return runs;
}

inline std::vector<std::pair<std::string, eval::PlanningReport>> planning_rows(const Settings& s, const Workspace& ws) {
  std::vector<std::pair<std::string, eval::PlanningReport>> rows;
  for (const auto& a : s.plan.agents) {
    auto p = ws.path("episodes_" + a + ".jsonl");
    if (!fs::exists(p)) throw DataError("missing " + p.string() + " (run plan first)");
    std::ifstream in(p);
    std::map<int, plan::EpisodeLog> eps;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      Value v = doc::parse(line);
      if (v.find("meta")) continue;
      auto& ep = eps[static_cast<int>(v.at("episode").as_number())];
      ep.days.push_back({static_cast<int>(v.at("day").as_number()), v.at("action"), v.at("money").as_number(),
                         v.at("valid").as_bool()});
      ep.final_money = v.at("money").as_number();
    }
    if (eps.empty()) throw DataError(p.string() + " holds no episodes");
    std::vector<plan::EpisodeLog> logs;
    for (auto& [k, e] : eps) logs.push_back(std::move(e));
    rows.push_back({a, eval::planning_metrics(logs)});
  }
  return rows;
}

struct EvalSummary {
  eval::TransitionReport heuristic;  // held-out heuristic-policy transitions
  eval::TransitionReport mixed;      // held-out mixed-validity transitions
  std::vector<std::pair<std::string, eval::PlanningReport>> planning;
};

inline EvalSummary evaluate(const Settings& s, const Workspace& ws, bool with_planning = true) {
  StageTimer timer(ws, "eval");
  auto schema = load_schema(ws);
  auto prog = load_program(ws, "program.json");
  auto cpds = load_model(ws, "full");
  EvalSummary out;
  out.heuristic = eval::transition_metrics(prog, &cpds, flatten(ws.read_trajectories("test.jsonl", schema)), schema,
                                           s.eval.transition);
  out.mixed = eval::transition_metrics(prog, &cpds, flatten(ws.read_trajectories("refine_test.jsonl", schema)),
                                       schema, s.eval.transition);
  Value body = Value::object({{"transition", eval::to_value(out.heuristic, false)},
                              {"transition_mixed", eval::to_value(out.mixed, false)}});
  if (with_planning) {
    out.planning = planning_rows(s, ws);
    Value pl = Value::object();
    for (const auto& [a, r] : out.planning) pl[a] = eval::to_value(r);
    body["planning"] = pl;
  }
  ws.write_json("eval.json", "eval", body);
  return out;
}

// Every stage in order, with the oracle from the settings.
inline EvalSummary run_all(const Settings& s, const Workspace& ws) {
  gen_data(s, ws);
  auto o = open_oracle(s.oracle);
  init_model(s, ws, o.get());
  refine_model(s, ws, o.get());
  learn_structure(s, ws, o.get());
  fit_models(s, ws);
  plan_agents(s, ws);
  return evaluate(s, ws);
}

}  // namespace hwm::pipeline
