// Acceptance checks, one line per criterion. Exit status is nonzero when any
// selected criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "hwm/coffeeshop.hpp"
#include "hwm/cpd.hpp"
#include "hwm/doc/diff.hpp"
#include "hwm/doc/patch.hpp"
#include "hwm/doc/pointer.hpp"
#include "hwm/eval.hpp"
#include "hwm/oracle.hpp"
#include "hwm/pgm.hpp"
#include "hwm/pipeline.hpp"
#include "hwm/refine.hpp"
#include "support/dag_enum.hpp"
#include "support/doc_gen.hpp"
#include "support/linear_gaussian.hpp"
#include "support/scoring_cases.hpp"
#include "support/structure_oracles.hpp"

namespace {

using namespace hwm;
namespace fs = std::filesystem;
using doc::Value;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path source = HWM_SOURCE_DIR;
  fs::path work;
};

std::string fmt(double x, int digits = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << x;
  return os.str();
}

std::string sci(double x) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << x;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double rel_err(double a, double b) { return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)}); }

// Loads a shipped config with its output redirected under the work dir.
pipeline::Settings settings_for(const Context& ctx, const std::string& config, const fs::path& out,
                                std::vector<std::pair<std::string, Value>> overrides = {}) {
  auto cfg = pipeline::Config::load(ctx.source / "configs" / config);
  cfg.set("out", Value(fs::absolute(out).string()));
  for (auto& [k, v] : overrides) cfg.set(k, std::move(v));
  return pipeline::read_settings(cfg);
}

// 1. PERS and ODRS against hand-traced cases; < 1 s.
Outcome scoring_oracles(const Context&) {
  auto t0 = std::chrono::steady_clock::now();
  int cases = 0, wrong = 0;
  for (const auto& c : fixtures::kPers) {
    ++cases;
    wrong += refine::pers(c.truth, c.old_pred, c.new_pred) != c.want;
  }
  std::set<doc::DiffKind> kinds;
  bool empty_diff = false;
  for (const auto& c : fixtures::kOdrs) {
    ++cases;
    Value prev = doc::parse(c.prev), truth = doc::parse(c.truth);
    wrong += refine::odrs(prev, truth, doc::parse(c.pred)) != c.want;
    auto d = doc::deep_diff(prev, truth);
    empty_diff |= d.empty();
    for (const auto& e : d) kinds.insert(e.kind);
  }
  double secs = seconds_since(t0);
  bool ok = wrong == 0 && cases >= 20 && kinds.size() == 4 && empty_diff && secs < 1.0;
  return {ok, std::to_string(cases - wrong) + "/" + std::to_string(cases) + " exact, diff kinds " +
                  std::to_string(kinds.size()) + "/4, empty diff " + (empty_diff ? "yes" : "no") + ", " +
                  fmt(secs, 4) + " s (need >= 20 exact, all kinds, < 1 s)"};
}

// 2. Reference pointer and patch examples bit-exact; 1000 diff/patch round trips.
Outcome patch_conformance(const Context&) {
  using namespace doc;
  auto op = [](PatchKind k, std::string_view p, std::optional<Value> v) { return PatchOp{k, Pointer::parse(p), std::move(v)}; };
  int examples = 0, wrong = 0;
  auto expect = [&](bool ok) {
    ++examples;
    wrong += !ok;
  };
  auto at = [](const Value& d, std::string_view p) {
    auto r = resolve(d, p);
    return r ? dump(*r.value) : std::string("<miss>");
  };
  expect(at(parse(R"({"foo":[7]})"), "/foo/0") == "7");
  expect(at(parse(R"({"a/b":1})"), "/a~1b") == "1");
  expect(at(parse(R"({"m~n":2})"), "/m~0n") == "2");
  std::vector<PatchOp> add{op(PatchKind::add, "/cars/0", parse(R"({"id":"car-1"})"))};
  expect(dump(apply_patch(parse(R"({"cars":[]})"), add)) == R"({"cars":[{"id":"car-1"}]})");
  std::vector<PatchOp> replace{op(PatchKind::replace, "/cars/0/make", Value("Ford"))};
  expect(dump(apply_patch(parse(R"({"cars":[{"make":"Toyota"}]})"), replace)) == R"({"cars":[{"make":"Ford"}]})");

  fixtures::DocGen gen(20240611);
  int trips = 0, failed = 0;
  for (int i = 0; i < 1000; ++i) {
    Value a = i % 10 == 0 ? gen.doc(3) : gen.object_doc(4);
    Value b = i % 10 == 1 ? gen.doc(3) : gen.mutate(a, 3);
    ++trips;
    try {
      failed += apply_patch(a, diff_to_patch(deep_diff(a, b))) != b;
    } catch (const std::exception&) {
      ++failed;
    }
  }
  return {wrong == 0 && failed == 0, std::to_string(examples - wrong) + "/" + std::to_string(examples) +
                                         " reference examples, " + std::to_string(trips - failed) + "/" +
                                         std::to_string(trips) + " round trips (need all)"};
}

// 3. Planted bugs with a scripted proposal oracle holding fixes and decoys.
Outcome refinement_gate(const Context&) {
  auto t0 = std::chrono::steady_clock::now();
  auto recs = flatten(coffee::generate(coffee::EpsilonPolicy{}, 100, 50, 7));
  refine::RefineConfig cfg;
  cfg.seed = 7;
  auto split = refine::make_split(recs, cfg);
  oracle::ScriptedTransport transport(coffee::refinement_script());
  oracle::KnowledgeOracle knowledge(transport, {});
  auto result = refine::refine(coffee::buggy_program(), split.train, split.val, knowledge, cfg, coffee::manual());

  std::size_t accepted = 0, bad_gate = 0, gated_out = 0, non_monotone = 0;
  std::size_t prev = result.log.initial_val_errors;
  for (const auto& step : result.log.steps) {
    for (const auto& c : step.candidates) {
      if (c.accepted) {
        ++accepted;
        bad_gate += !(c.vs && *c.vs > 0);
      } else if (c.vs && *c.vs <= 0) {
        ++gated_out;
      }
    }
    if (!step.applied_id) continue;
    if (!step.val_errors || *step.val_errors > prev) ++non_monotone;
    if (step.val_errors) prev = *step.val_errors;
  }
  std::size_t train_errors = refine::error_count(result.program, split.train, cfg.step_budget);
  double secs = seconds_since(t0);
  bool ok = accepted == coffee::planted_bugs().size() && bad_gate == 0 && train_errors == 0 && non_monotone == 0 &&
            secs < 30;
  return {ok, "(a) " + std::to_string(accepted) + " accepted, " + std::to_string(bad_gate) + " with VS <= 0, " +
                  std::to_string(gated_out) + " decoys gated out; (b) train errors " + std::to_string(train_errors) +
                  "/" + std::to_string(split.train.size()) + "; (c) validation errors " +
                  std::to_string(result.log.initial_val_errors) + " -> " + std::to_string(prev) + ", " +
                  std::to_string(non_monotone) + " increases; " + fmt(secs, 1) + " s (need 10 bugs, < 30 s)"};
}

// 4. Linear-Gaussian structure recovery against brute-force enumeration.
Outcome structure_recovery(const Context&) {
  auto t0 = std::chrono::steady_clock::now();
  fixtures::LinearGaussian lg;
  lg.n = 5;
  lg.weights = {{0, 2, 4.0}, {1, 2, 4.0}, {3, 4, 4.0}};
  lg.noise = 2.0;
  auto schema = lg.schema();
  auto data = lg.sample(1000, 42);
  cpd::FitHyper h;
  h.seed = 1;
  h.epochs = 200;
  cpd::FitCache fits(schema, data, h);
  pgm::FlatPrior flat;
  pgm::SearchConfig cfg;
  cfg.lambda1 = 10;
  cfg.chains = 5;
  cfg.steps_per_chain = 200;

  std::vector<std::string> names;
  for (int i = 0; i < lg.n; ++i) names.push_back(lg.name(i));
  pgm::Scorer brute(fits, flat, cfg);
  const Dag base = Dag::over(schema);
  double best = -INFINITY, runner_up = -INFINITY;
  Dag argmax = base;
  std::size_t count = fixtures::for_each_dag(lg.n, [&](const fixtures::ParentMasks& m) {
    Dag g = base.with_edges(fixtures::edges_of(m, names));
    double j = brute.score(g).total;
    if (j > best) {
      if (g.skeleton() != argmax.skeleton()) runner_up = best;
      best = j;
      argmax = g;
    } else if (j > runner_up && g.skeleton() != argmax.skeleton()) {
      runner_up = j;
    }
  });
  bool argmax_is_generator = argmax.skeleton() == lg.skeleton();

  fixtures::RandomStructure seeds;
  seeds.keep = 0.3;
  const int runs = 20;
  int recovered = 0;
  for (int seed = 0; seed < runs; ++seed) {
    pgm::SearchConfig c = cfg;
    c.seed = static_cast<std::uint64_t>(seed);
    pgm::Scorer scorer(fits, flat, c);
    auto r = pgm::search(schema, seeds, scorer);
    recovered += r.best.skeleton() == lg.skeleton();
  }
  double secs = seconds_since(t0);
  bool ok = count == 29281 && argmax_is_generator && recovered == runs && secs < 600;
  return {ok, std::to_string(count) + " DAGs enumerated, argmax " + (argmax_is_generator ? "is" : "is not") +
                  " the generator skeleton (J gap " + fmt(best - runner_up) + "); annealing 5x200 recovered it in " +
                  std::to_string(recovered) + "/" + std::to_string(runs) + " seeds; " + fmt(secs, 1) +
                  " s (need all seeds, < 600 s)"};
}

// 5. A -9 prior with lambda2 = 100 keeps forbidden edges out of 100 searches.
Outcome prior_dominance(const Context&) {
  fixtures::LinearGaussian lg;
  lg.n = 4;
  lg.weights = {{0, 1, 4.0}, {1, 2, 4.0}, {2, 3, 1.0}};
  auto schema = lg.schema();
  auto data = lg.sample(600, 5);
  cpd::FitHyper h;
  h.seed = 2;
  h.epochs = 60;
  cpd::FitCache fits(schema, data, h);
  fixtures::EdgeBanPrior prior;
  prior.banned_log_prob = -9.0;
  prior.banned = {{"x0", "x1"}, {"x1", "x0"}, {"x1", "x2"}, {"x2", "x1"}};
  fixtures::RandomStructure seeds;
  seeds.keep = 0.6;
  auto forbidden = [&](const Dag& g) {
    int n = 0;
    for (const auto& e : g.edges()) n += prior.banned.contains(e);
    return n;
  };
  int violating = 0, seeded_with_forbidden = 0;
  for (int s = 0; s < 100; ++s) {
    pgm::SearchConfig cfg;
    cfg.lambda1 = 10;
    cfg.lambda2 = 100;
    cfg.chains = 5;
    cfg.steps_per_chain = 50;
    cfg.seed = static_cast<std::uint64_t>(s);
    pgm::Scorer scorer(fits, prior, cfg);
    auto r = pgm::search(schema, seeds, scorer);
    for (const auto& c : r.chains) seeded_with_forbidden += forbidden(c.seed) > 0;
    violating += forbidden(r.best) > 0;
  }
  return {violating == 0, std::to_string(violating) + "/100 searches returned a forbidden edge (" +
                              std::to_string(seeded_with_forbidden) +
                              "/500 chains started from one; need 0)"};
}

// 6. Quantile calibration, analytic gradients, ancestral sampling.
Outcome cpd_calibration(const Context&) {
  using namespace cpd;
  ObservationSchema uschema("u", {{"y", Numerical{0.0, 1.0}, Stream::stochastic, "", true}}, "");
  auto iid = [](Value sto) {
    return TransitionRecord{Value::object(), Value::object(), Value::object({{"name", "wait"}}), true, Value::object(),
                            std::move(sto)};
  };
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<TransitionRecord> train;
  for (int i = 0; i < 4000; ++i) train.push_back(iid(Value::object({{"y", u(rng)}})));
  FitHyper h;
  h.epochs = 60;
  h.seed = 3;
  NodeModel m = fit_node(uschema, "y", {}, train, h);
  Value empty = Value::object();
  Conditioning c{&empty, &empty, &empty, &empty, &train[0].action, true};
  auto q = m.quantiles(c);
  int inside = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double y = u(rng);
    inside += y >= q.front() && y <= q.back();
  }
  double coverage = double(inside) / n;

  // Network parameters, pinball and softmax heads against central differences.
  double worst = 0;
  std::mt19937_64 grng(7);
  std::normal_distribution<double> g;
  Mlp net(4, 6, 3);
  net.init(grng);
  MatrixXd X(4, 5), C(3, 5);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = g(grng);
  for (Eigen::Index i = 0; i < C.size(); ++i) C.data()[i] = g(grng);
  VectorXd grad;
  net.backward(X, C, grad);
  for (Eigen::Index i = 0; i < net.params().size(); ++i) {
    const double eps = 1e-4, keep = net.params()[i];
    net.params()[i] = keep + eps;
    double up = net.forward(X).cwiseProduct(C).sum();
    net.params()[i] = keep - eps;
    double down = net.forward(X).cwiseProduct(C).sum();
    net.params()[i] = keep;
    worst = std::max(worst, rel_err((up - down) / (2 * eps), grad[i]));
  }
  MatrixXd Y(static_cast<Eigen::Index>(n_quantiles), 3);
  for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = 0.013 * double(i) - 0.2;
  Eigen::RowVectorXd y(3);
  y << 0.1, -0.05, 0.33;
  MatrixXd dY;
  quantile_loss(Y, y, &dY);
  for (Eigen::Index i = 0; i < Y.size(); ++i) {
    const double eps = 1e-6;
    MatrixXd a = Y, b = Y;
    a.data()[i] += eps;
    b.data()[i] -= eps;
    worst = std::max(worst, rel_err((quantile_loss(a, y) - quantile_loss(b, y)) / (2 * eps), dY.data()[i]));
  }
  MatrixXd L(3, 2);
  L << 0.2, -1.0, 1.5, 0.3, -0.7, 0.9;
  std::vector<int> labels{2, 0};
  cross_entropy(L, labels, &dY);
  for (Eigen::Index i = 0; i < L.size(); ++i) {
    const double eps = 1e-5;
    MatrixXd a = L, b = L;
    a.data()[i] += eps;
    b.data()[i] -= eps;
    worst = std::max(worst, rel_err((cross_entropy(a, labels) - cross_entropy(b, labels)) / (2 * eps), dY.data()[i]));
  }

  // a -> b over binary variables; the joint is enumerable.
  ObservationSchema bschema("bin",
                            {{"a", Categorical{{"0", "1"}}, Stream::stochastic, "", true},
                             {"b", Categorical{{"0", "1"}}, Stream::stochastic, "", true}},
                            "");
  const double pa = 0.3, pb[2] = {0.2, 0.7};
  std::mt19937_64 brng(21);
  std::vector<TransitionRecord> btrain;
  for (int i = 0; i < 20000; ++i) {
    int a = u(brng) < pa, b = u(brng) < pb[a];
    btrain.push_back(iid(Value::object({{"a", std::to_string(a)}, {"b", std::to_string(b)}})));
  }
  FitHyper bh;
  bh.epochs = 60;
  bh.seed = 2;
  CpdModel model = fit_all(bschema, Dag::over(bschema).with_edges({{"a", "b"}}), btrain, bh);
  double counts[2][2] = {};
  const int samples = 100000;
  for (int i = 0; i < samples; ++i) {
    Value s = sample_joint(model, empty, btrain[0].action, true, empty, empty, brng);
    counts[s.at("a").as_text() == "1"][s.at("b").as_text() == "1"] += 1;
  }
  double tv = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) tv += std::fabs(counts[a][b] / samples - (a ? pa : 1 - pa) * (b ? pb[a] : 1 - pb[a]));
  tv /= 2;

  bool ok = coverage >= 0.85 && coverage <= 0.95 && worst <= 1e-5 && tv < 0.01;
  return {ok, "coverage " + fmt(coverage, 4) + " (need [0.85, 0.95]); worst gradient rel. error " + sci(worst) +
                  " (need <= 1e-5); TV " + fmt(tv, 4) + " at 100k samples (need < 0.01)"};
}

// 7. satisfaction -> customers in >= 8 of 10 seeded learn-structure runs.
Outcome coffee_edge(const Context&) {
  auto schema = coffee::schema();
  int hits = 0;
  std::string misses;
  for (int run = 0; run < 10; ++run) {
    auto split = coffee::split_episodes(coffee::generate(coffee::HeuristicPolicy{}, 100, 50, 1000 + run));
    auto recs = flatten(split.train);
    cpd::FitHyper h;
    h.epochs = 60;
    h.seed = static_cast<std::uint64_t>(run);
    cpd::FitCache cache(schema, recs, h);
    oracle::ScriptedTransport transport(coffee::structure_script());
    oracle::KnowledgeOracle knowledge(transport, {});
    pgm::SearchConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(run);
    cfg.chains = 5;
    cfg.steps_per_chain = 50;
    pgm::Scorer scorer(cache, knowledge, cfg);
    auto r = pgm::search(schema, knowledge, scorer);
    if (r.best.has_edge("satisfaction", "customers")) {
      ++hits;
    } else {
      misses += " " + std::to_string(run);
    }
  }
  return {hits >= 8, std::to_string(hits) + "/10 runs found satisfaction -> customers" +
                         (misses.empty() ? "" : " (missed:" + misses + ")") + " (need >= 8)"};
}

// 8. Full model against the independent and random-DAG ablations.
Outcome planning_ablation(const Context& ctx) {
  auto t0 = std::chrono::steady_clock::now();
  auto s = settings_for(ctx, "coffee_full.json", ctx.work / "c8",
                        {{"plan.agents", oracle::string_list({"full", "independent", "random"})}});
  pipeline::Workspace ws(s);
  pipeline::gen_data(s, ws);
  auto o = pipeline::open_oracle(s.oracle);
  pipeline::init_model(s, ws, o.get());
  pipeline::refine_model(s, ws, o.get());
  pipeline::learn_structure(s, ws, o.get());
  pipeline::fit_models(s, ws);
  auto runs = pipeline::plan_agents(s, ws);
  std::map<std::string, eval::PlanningReport> by;
  for (const auto& r : runs) by[r.agent] = r.report;
  auto row = [](const std::string& a, const eval::PlanningReport& r) {
    return a + " " + fmt(r.mean, 1) + " [" + fmt(r.ci_low, 1) + ", " + fmt(r.ci_high, 1) + "]";
  };
  const auto& full = by.at("full");
  bool beats_ind = full.ci_low > by.at("independent").ci_high;
  bool beats_rand = full.ci_low > by.at("random").ci_high;
  double secs = seconds_since(t0);
  return {beats_ind && beats_rand && secs < 4 * 3600,
          std::to_string(s.plan.episodes) + " episodes x " + std::to_string(s.plan.days) + " days: " +
              row("full", full) + ", " + row("independent", by.at("independent")) + ", " +
              row("random", by.at("random")) + "; full CI above independent: " + (beats_ind ? "yes" : "no") +
              ", above random: " + (beats_rand ? "yes" : "no") + "; " + fmt(secs, 0) + " s"};
}

// 9. Validity and deterministic-stream accuracy after refinement.
Outcome sigma_prediction(const Context& ctx) {
  auto s = settings_for(ctx, "coffee_full.json", ctx.work / "c9");
  pipeline::Workspace ws(s);
  pipeline::gen_data(s, ws);
  auto o = pipeline::open_oracle(s.oracle);
  pipeline::init_model(s, ws, o.get());
  auto refined = pipeline::refine_model(s, ws, o.get());
  auto schema = pipeline::load_schema(ws);
  auto test = flatten(ws.read_trajectories("refine_test.jsonl", schema));
  auto rep = eval::transition_metrics(refined.result.program, nullptr, test, schema);
  std::size_t valid = 0;
  for (const auto& r : test) valid += r.valid;
  double cat = rep.cat_acc_det.value_or(-1), inv = rep.inv_det.value_or(1);
  bool ok = refined.train_size == 300 && rep.sigma_acc >= 0.95 && cat == 1.0 && inv <= 0.02;
  return {ok, "refined on " + std::to_string(refined.train_size) + " transitions; held-out " +
                  std::to_string(test.size()) + " (" + std::to_string(valid) + " valid): sigma_acc " +
                  fmt(rep.sigma_acc, 4) + " (need >= 0.95), Cat_acc^D " + fmt(cat, 4) + " (need 1), Inv^D " +
                  fmt(inv, 4) + " (need <= 0.02)"};
}

// 10. Two full runs under the scripted oracle are byte-identical.
Outcome determinism(const Context& ctx) {
  std::vector<fs::path> dirs{ctx.work / "c10_a", ctx.work / "c10_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    auto s = settings_for(ctx, "quickstart.json", d);
    pipeline::Workspace ws(s);
    pipeline::run_all(s, ws);
  }
  std::size_t compared = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::directory_iterator(dirs[0])) {
    auto name = e.path().filename().string();
    if (name == "timing.json") continue;
    ++compared;
    auto other = dirs[1] / name;
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) differ.push_back(name);
  }
  std::size_t other_count = 0;
  for (const auto& e : fs::directory_iterator(dirs[1])) other_count += e.path().filename() != "timing.json";
  bool ok = differ.empty() && compared == other_count && compared > 0;
  std::string detail = std::to_string(compared) + " artifacts compared (timing.json excluded), " +
                       std::to_string(differ.size()) + " differ";
  for (const auto& d : differ) detail += " " + d;
  return {ok, detail};
}

const std::vector<std::pair<std::string, std::function<Outcome(const Context&)>>> kCriteria = {
    {"scoring oracles", scoring_oracles},
    {"patch/pointer conformance", patch_conformance},
    {"refinement gate", refinement_gate},
    {"structure recovery", structure_recovery},
    {"prior dominance", prior_dominance},
    {"cpd calibration", cpd_calibration},
    {"coffee-shop edge discovery", coffee_edge},
    {"planning ablation", planning_ablation},
    {"sigma prediction", sigma_prediction},
    {"determinism", determinism},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string work = "acceptance_runs";
  app.add_option("-n,--criterion", selected, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("-w,--work", work, "Scratch directory for pipeline runs");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.push_back(i);

  Context ctx;
  ctx.work = fs::absolute(work);
  fs::create_directories(ctx.work);
  int failed = 0;
  for (int n : selected) {
    const auto& [name, check] = kCriteria[static_cast<std::size_t>(n - 1)];
    auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = check(ctx);
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    failed += !r.pass;
    std::cout << "criterion " << n << " " << (r.pass ? "PASS" : "FAIL") << " [" << name << "] " << r.detail << " ("
              << fmt(seconds_since(t0), 1) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
