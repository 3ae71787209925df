#include <gtest/gtest.h>

#include "hwm/oracle.hpp"

using namespace hwm;
using namespace hwm::oracle;
using doc::Value;

namespace {

VariableSpec sto(std::string n) { return {std::move(n), Numerical{}, Stream::stochastic, "", true}; }

ObservationSchema shop() {
  return ObservationSchema("shop", {sto("customers"), sto("revenue")}, "A small shop.",
                           {{"wait", "do nothing", {}}});
}

// Counts calls and fails the first `failures` of them.
struct CountingTransport : Transport {
  Transport& inner;
  int calls = 0;
  int failures = 0;
  explicit CountingTransport(Transport& t, int f = 0) : inner(t), failures(f) {}
  OracleResponse send(const OracleRequest& r, const Prompt* p) override {
    ++calls;
    if (calls <= failures) throw TransportError("connection reset");
    return inner.send(r, p);
  }
};

OracleConfig fast() {
  OracleConfig c;
  c.backoff = std::chrono::milliseconds(0);
  return c;
}

}  // namespace

TEST(Oracle, ScriptedPlausibilityFixtures) {
  ScriptedTransport script(doc::parse(R"({"edge_log_prob": {"customers>revenue": -0.01, "revenue>customers": -12.0}})"));
  CountingTransport t(script);
  KnowledgeOracle o(t, fast());
  auto s = shop();
  EXPECT_DOUBLE_EQ(o.node_log_prob(s, "revenue", {"customers"}), -0.01);
  EXPECT_DOUBLE_EQ(o.node_log_prob(s, "customers", {"revenue"}), -12.0);
  EXPECT_DOUBLE_EQ(o.node_log_prob(s, "customers", {}), 0.0);
  int calls = t.calls;
  EXPECT_DOUBLE_EQ(o.node_log_prob(s, "revenue", {"customers"}), -0.01);
  EXPECT_EQ(t.calls, calls);
  EXPECT_GE(o.stats().memo_hits, 1u);
}

TEST(Oracle, WholeGraphModeAsksOnce) {
  ScriptedTransport script(doc::parse(R"({"edge_log_prob": {"customers>revenue": -0.5}})"));
  CountingTransport t(script);
  OracleConfig cfg = fast();
  cfg.prior_mode = PriorMode::whole_graph;
  KnowledgeOracle o(t, cfg);
  Dag g = Dag::over(shop()).with_edges({{"customers", "revenue"}});
  EXPECT_DOUBLE_EQ(o.log_prior(shop(), g), -0.5);
  EXPECT_EQ(t.calls, 1);
}

TEST(Oracle, AnswersWithoutLogProbsUseTheFloor) {
  struct Words : Transport {
    OracleResponse send(const OracleRequest& r, const Prompt*) override {
      return {r.payload.at("edges").as_array().empty() ? "Yes." : "no", std::nullopt};
    }
  } words;
  KnowledgeOracle o(words, fast());
  EXPECT_DOUBLE_EQ(o.node_log_prob(shop(), "revenue", {}), 0.0);
  EXPECT_DOUBLE_EQ(o.node_log_prob(shop(), "revenue", {"customers"}), -30.0);
}

TEST(Oracle, RetriesThenGivesUp) {
  ScriptedTransport script(Value::object());
  CountingTransport flaky(script, 2);
  KnowledgeOracle o(flaky, fast());
  EXPECT_DOUBLE_EQ(o.node_log_prob(shop(), "revenue", {}), 0.0);
  EXPECT_EQ(flaky.calls, 3);

  CountingTransport dead(script, 100);
  KnowledgeOracle o2(dead, fast());
  EXPECT_THROW(o2.node_log_prob(shop(), "revenue", {}), OracleUnavailable);
  EXPECT_EQ(dead.calls, 4);
  EXPECT_THROW(o2.node_log_prob(shop(), "revenue", {}), OracleUnavailable);  // failures are not memoized
  EXPECT_EQ(dead.calls, 8);
}

TEST(Oracle, TopoAndParentsFollowTheScript) {
  ScriptedTransport script(doc::parse(R"({"topo_order": ["customers", "revenue"],
                                          "parents": {"revenue": ["customers", "ghost"]}})"));
  KnowledgeOracle o(script, fast());
  auto s = shop();
  EXPECT_EQ(o.topo_next(s, {}, {"revenue", "customers"}, 1), "customers");
  EXPECT_EQ(o.topo_next(s, {}, {"revenue"}, 1), "revenue");
  EXPECT_EQ(o.elicit_parents(s, "revenue", {"customers"}, 1), (std::vector<std::string>{"customers"}));
  EXPECT_TRUE(o.elicit_parents(s, "revenue", {}, 1).empty());
  Dag d = pgm::sample_seed_dag(s, o, 3);
  EXPECT_EQ(d.edges(), (std::set<Edge>{{"customers", "revenue"}}));
}

TEST(Oracle, RefinementsDropUnparseableCandidates) {
  Value script = doc::parse(R"({"refinements": [
    {"match": {"error_kind": "E_od"}, "candidates": [
      {"op": "replace", "target_id": "dyn", "function": {"id": "dyn", "kind": "dynamic", "body": "emit replace \"/day\" (get \"/day\") + 1"}},
      {"op": "replace", "target_id": "dyn", "function": {"id": "dyn", "kind": "dynamic", "body": "emit emit emit"}},
      {"op": "frobnicate"}
    ]},
    {"match": {"error_kind": "E_pf"}, "candidates": [{"op": "remove", "target_id": "pre"}]}
  ]})");
  ScriptedTransport t(script);
  KnowledgeOracle o(t, fast());
  refine::RefineContext ctx;
  ctx.error_kind = program::ErrorKind::observation;
  auto out = o.propose_refinements(ctx, 3);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].op, program::RefinementOp::replace);
  EXPECT_EQ(o.stats().dropped_candidates, 2u);
  ctx.error_kind = program::ErrorKind::exec;
  EXPECT_TRUE(o.propose_refinements(ctx, 3).empty());
}

TEST(Oracle, InitProgramReportsGaps) {
  auto with_actions = ObservationSchema("shop", {sto("customers")}, "doc", {{"wait", "", {}}, {"clean", "", {}}});
  Value good = doc::parse(R"({"init_program": {"functions": [
    {"id": "dyn", "kind": "dynamic", "body": "emit replace \"/day\" (get \"/day\") + 1"},
    {"id": "act_wait", "kind": "action", "action_name": "wait", "body": ""},
    {"id": "act_clean", "kind": "action", "action_name": "clean", "body": ""}]}})");
  ScriptedTransport ok(good);
  KnowledgeOracle o(ok, fast());
  EXPECT_EQ(o.init_program(with_actions).functions().size(), 3u);

  Value broken = good;
  broken["init_program"]["functions"].as_array()[2]["body"] = "emit (";
  ScriptedTransport bad(broken);
  KnowledgeOracle o2(bad, fast());
  try {
    o2.init_program(with_actions);
    FAIL() << "expected InitError";
  } catch (const InitError& e) {
    bool named = false;
    for (const auto& g : e.gaps()) named = named || g.rfind("act_clean", 0) == 0;
    EXPECT_TRUE(named);
  }

  auto no_actions = ObservationSchema("bare", {sto("customers")}, "doc");
  Value dyn_only = doc::parse(R"({"init_program": {"functions": [{"id": "dyn", "kind": "dynamic", "body": ""}]}})");
  ScriptedTransport d(dyn_only);
  KnowledgeOracle o3(d, fast());
  EXPECT_EQ(o3.init_program(no_actions).functions().size(), 1u);
}

TEST(Oracle, RecordThenReplayGivesIdenticalAnswers) {
  ScriptedTransport script(doc::parse(R"({"edge_log_prob": {"customers>revenue": -0.2}, "topo_order": ["revenue"]})"));
  RecordingTransport rec(script);
  KnowledgeOracle live(rec, fast());
  auto s = shop();
  double a = live.node_log_prob(s, "revenue", {"customers"});
  std::string b = live.topo_next(s, {}, {"customers", "revenue"}, 9);
  Value fixture = doc::parse(doc::dump(rec.fixture()));
  ReplayTransport replay(fixture_from_value(fixture));
  KnowledgeOracle again(replay, fast());
  EXPECT_EQ(again.node_log_prob(s, "revenue", {"customers"}), a);
  EXPECT_EQ(again.topo_next(s, {}, {"customers", "revenue"}, 9), b);
  EXPECT_THROW(again.topo_next(s, {}, {"customers", "revenue"}, 10), OracleUnavailable);
}

TEST(Oracle, ExtractsJsonFromProse) {
  auto v = extract_json("Sure! ```json\n{\"next\": \"a}b\"}\n``` hope that helps");
  ASSERT_TRUE(v);
  EXPECT_EQ(v->at("next").as_text(), "a}b");
  EXPECT_FALSE(extract_json("no json here"));
}

TEST(Oracle, RequestValidationAndStableKeys) {
  OracleRequest bad{RequestKind::topo_next, Value::object()};
  EXPECT_THROW(validate(bad), OracleError);
  OracleRequest a{RequestKind::plausibility, doc::parse(R"({"b": 1, "a": 2})")};
  OracleRequest b{RequestKind::plausibility, doc::parse(R"({"a": 2, "b": 1})")};
  EXPECT_EQ(a.key(), b.key());
  OracleRequest c{RequestKind::topo_next, a.payload};
  EXPECT_NE(a.key(), c.key());
}

TEST(Oracle, PromptsRenderEveryPlaceholder) {
  auto prompts = PromptSet::load(HWM_SOURCE_DIR "/data/prompts");
  OracleRequest r{RequestKind::plausibility, Value::object({{"variables", variables_excerpt(shop())},
                                                            {"mode", "node"},
                                                            {"target", "revenue"},
                                                            {"edges", Value::array({Value::array({"customers", "revenue"})})},
                                                            {"environment_doc", "A small shop."}})};
  Prompt p = prompts.render(r);
  EXPECT_NE(p.user.find("A small shop."), std::string::npos);
  EXPECT_EQ(p.user.find("{{"), std::string::npos);
  EXPECT_THROW(PromptSet::substitute("{{missing}}", {}), OracleError);
}
