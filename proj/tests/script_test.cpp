#include <gtest/gtest.h>

#include "hwm/script/interpreter.hpp"
#include "hwm/script/parser.hpp"
#include "hwm/util.hpp"

namespace {

using namespace hwm;
using doc::Value;
using script::FunctionKind;
using script::ScriptError;

Value J(std::string_view t) { return doc::parse(t); }

script::RunResult run(std::string_view src, FunctionKind kind, const Value& state, const Value* action = nullptr,
                      std::size_t budget = script::default_step_budget) {
  return script::run(*script::compile(src, kind), state, action, budget);
}

ScriptError::Kind compile_error(std::string_view src, FunctionKind kind) {
  try {
    script::compile(src, kind);
  } catch (const ScriptError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "compiled: " << src;
  return ScriptError::Kind::syntax;
}

TEST(Parse, AcceptsActionBody) {
  auto r = run(R"(emit replace "/money" (get "/money" - 100))", FunctionKind::action, J(R"({"money":250})"));
  ASSERT_EQ(r.ops.size(), 1u);
  EXPECT_EQ(r.ops[0].op, doc::PatchKind::replace);
  EXPECT_EQ(r.ops[0].path.to_string(), "/money");
  EXPECT_EQ(*r.ops[0].value, Value(150));
}

TEST(Parse, AcceptsPreconditionBody) {
  auto r = run(R"(return (get "/money" >= 100, "insufficient funds"))", FunctionKind::precondition,
               J(R"({"money":50})"));
  ASSERT_TRUE(r.verdict);
  EXPECT_FALSE(r.verdict->ok);
  EXPECT_EQ(r.verdict->feedback, "insufficient funds");
}

TEST(Parse, SyntaxErrorsCarryPosition) {
  try {
    script::compile("emit replace", FunctionKind::action);
    FAIL();
  } catch (const ScriptError& e) {
    EXPECT_EQ(e.kind(), ScriptError::Kind::syntax);
    EXPECT_EQ(e.pos().line, 1);
  }
  try {
    script::compile("let a = 1\nlet b = (a +\n", FunctionKind::action);
    FAIL();
  } catch (const ScriptError& e) {
    EXPECT_EQ(e.pos().line, 3);
    EXPECT_NE(std::string(e.what()).find("3:"), std::string::npos);
  }
}

TEST(Parse, StaticChecks) {
  EXPECT_EQ(compile_error("emit add \"/x\" y", FunctionKind::action), ScriptError::Kind::unbound);
  EXPECT_EQ(compile_error("emit add \"/x\" min(1)", FunctionKind::action), ScriptError::Kind::arity);
  EXPECT_EQ(compile_error("emit add \"/x\" clamp(1, 2)", FunctionKind::action), ScriptError::Kind::arity);
  EXPECT_EQ(compile_error("emit add \"/x\" 1", FunctionKind::precondition), ScriptError::Kind::dialect);
  EXPECT_EQ(compile_error("return (true, \"\")", FunctionKind::action), ScriptError::Kind::dialect);
  EXPECT_EQ(compile_error("let a = 1", FunctionKind::precondition), ScriptError::Kind::dialect);
  EXPECT_EQ(compile_error("emit add \"/x\" aget \"/q\"", FunctionKind::dynamic), ScriptError::Kind::dialect);
  EXPECT_EQ(compile_error("emit add \"\" 1", FunctionKind::action), ScriptError::Kind::syntax);
  EXPECT_EQ(compile_error("emit add \"x\" 1", FunctionKind::action), ScriptError::Kind::syntax);
  EXPECT_EQ(compile_error("emit move \"/x\" 1", FunctionKind::action), ScriptError::Kind::syntax);
  EXPECT_EQ(compile_error("if true { let a = 1 } emit add \"/x\" a", FunctionKind::action),
            ScriptError::Kind::unbound);
  EXPECT_EQ(compile_error("emit add \"/x\" sum(i in [1] : j)", FunctionKind::action), ScriptError::Kind::unbound);
}

TEST(Eval, ArithmeticAndPrecedence) {
  auto r = run(R"(
    # comment line
    let a = 2 + 3 * 4 - 8 / 2
    let b = -a + abs(-3) + floor(2.7) + round(2.5) + min(1, 2) + max(1, 2) + clamp(15, 0, 10)
    emit add "/a" a
    emit add "/b" b
    emit add "/c" (if a > 5 and not (b < 0) then "big" else "small")
  )",
               FunctionKind::action, J("{}"));
  ASSERT_EQ(r.ops.size(), 3u);
  EXPECT_EQ(*r.ops[0].value, Value(10));
  EXPECT_EQ(*r.ops[1].value, Value(-10 + 3 + 2 + 3 + 1 + 2 + 10));
  EXPECT_EQ(*r.ops[2].value, Value("big"));
}

TEST(Eval, IfElseChainsAndScopes) {
  const char* src = R"(
    let m = get "/money"
    if m < 0 {
      emit replace "/status" "closed"
    } else if m < 100 {
      let note = "low"
      emit replace "/status" note
    } else {
      emit replace "/status" "open"
    }
  )";
  for (auto [money, want] : {std::pair{-1, "closed"}, {50, "low"}, {500, "open"}}) {
    auto r = run(src, FunctionKind::action, Value::object({{"money", money}, {"status", "open"}}));
    ASSERT_EQ(r.ops.size(), 1u);
    EXPECT_EQ(*r.ops[0].value, Value(want));
  }
}

TEST(Eval, AggregatesOverSequences) {
  Value state = J(R"({"orders":[{"qty":2,"ok":true},{"qty":5,"ok":false},{"qty":1,"ok":true}]})");
  auto r = run(R"(
    emit add "/total" sum(o in get "/orders" : o.qty)
    emit add "/n_ok" count(o in get "/orders" : o.ok)
    emit add "/kept" filter(o in get "/orders" : o.qty > 1)
    emit add "/first" (get "/orders")[0].qty
    emit add "/len" len(get "/orders")
  )",
               FunctionKind::action, state);
  ASSERT_EQ(r.ops.size(), 5u);
  EXPECT_EQ(*r.ops[0].value, Value(8));
  EXPECT_EQ(*r.ops[1].value, Value(2));
  EXPECT_EQ(*r.ops[2].value, J(R"([{"qty":2,"ok":true},{"qty":5,"ok":false}])"));
  EXPECT_EQ(*r.ops[3].value, Value(2));
  EXPECT_EQ(*r.ops[4].value, Value(3));
}

TEST(Eval, ActionFieldsAndDefaults) {
  Value action = J(R"({"name":"buy_beans","quantity":20})");
  auto r = run(R"(
    let q = aget "/quantity"
    let p = aget "/price" default 0
    emit replace "/cost" (q * 0.5 + p)
    emit add "/seen" get "/missing" default "none"
  )",
               FunctionKind::action, J(R"({"cost":0})"), &action);
  ASSERT_EQ(r.ops.size(), 2u);
  EXPECT_EQ(*r.ops[0].value, Value(10));
  EXPECT_EQ(*r.ops[1].value, Value("none"));
}

TEST(Eval, ComputedPointersAndSequenceValues) {
  auto r = run(R"(
    let k = "slot"
    emit add ("/" + k) [1, 2]
    emit add "/m" {"a": 1, "b": [true]}
  )",
               FunctionKind::action, J("{}"));
  ASSERT_EQ(r.ops.size(), 2u);
  EXPECT_EQ(r.ops[0].path.to_string(), "/slot");
  EXPECT_EQ(*r.ops[0].value, J("[1,2]"));
  EXPECT_EQ(*r.ops[1].value, J(R"({"a":1,"b":[true]})"));
}

TEST(Eval, PreconditionFirstReturnWins) {
  auto r = run(R"(
    if get "/money" < 10 { return (false, "broke") }
    return (true, "")
  )",
               FunctionKind::precondition, J(R"({"money":5})"));
  EXPECT_FALSE(r.verdict->ok);
  EXPECT_EQ(r.verdict->feedback, "broke");
}

TEST(Faults, DivisionByZero) {
  EXPECT_THROW(run("emit add \"/x\" 1 / (2 - 2)", FunctionKind::action, J("{}")), script::RuntimeFault);
}

TEST(Faults, MissingGetWithoutDefault) {
  EXPECT_THROW(run("emit add \"/x\" get \"/nope\"", FunctionKind::action, J("{}")), script::RuntimeFault);
}

TEST(Faults, TypeErrors) {
  EXPECT_THROW(run("emit add \"/x\" 1 + \"a\"", FunctionKind::action, J("{}")), script::RuntimeFault);
  EXPECT_THROW(run("if 1 { emit add \"/x\" 1 }", FunctionKind::action, J("{}")), script::RuntimeFault);
  EXPECT_THROW(run("return (1, \"\")", FunctionKind::precondition, J("{}")), script::RuntimeFault);
}

TEST(Faults, PreconditionWithoutVerdict) {
  EXPECT_THROW(run("if false { return (true, \"\") }", FunctionKind::precondition, J("{}")), script::RuntimeFault);
}

TEST(Faults, StepBudgetTerminates) {
  // 200 elements, each evaluating a nested 200-element sum: 40k+ steps.
  std::string big = "[";
  for (int i = 0; i < 200; ++i) big += (i ? ",1" : "1");
  big += "]";
  std::string src = "let s = " + big + "\nemit add \"/x\" sum(i in s : sum(j in s : i * j))";
  EXPECT_THROW(run(src, FunctionKind::action, J("{}")), script::RuntimeFault);
  EXPECT_NO_THROW(run(src, FunctionKind::action, J("{}"), nullptr, 1'000'000));
}

TEST(Eval, Deterministic) {
  const char* src = "emit add \"/x\" get \"/a\" * 3 + 1";
  auto a = run(src, FunctionKind::action, J(R"({"a":0.1})"));
  auto b = run(src, FunctionKind::action, J(R"({"a":0.1})"));
  EXPECT_EQ(*a.ops[0].value, *b.ops[0].value);
  EXPECT_EQ(a.steps, b.steps);
}

}  // namespace

TEST(Docs, GrammarExamplesCompile) {
  std::string text = read_file(std::filesystem::path(HWM_SOURCE_DIR) / "docs" / "patchscript.md");
  const std::string open = "```patchscript\n";
  int blocks = 0;
  for (auto at = text.find(open); at != std::string::npos; at = text.find(open, at)) {
    at += open.size();
    auto end = text.find("```", at);
    ASSERT_NE(end, std::string::npos);
    std::string body = text.substr(at, end - at);
    ASSERT_EQ(body.rfind("# ", 0), 0u) << body;
    auto kind = script::function_kind_from(body.substr(2, body.find('\n') - 2));
    ASSERT_TRUE(kind) << body;
    EXPECT_NO_THROW(script::compile(body, *kind)) << body;
    ++blocks;
    at = end + 3;
  }
  EXPECT_GE(blocks, 4);
}
