#include <gtest/gtest.h>

#include <random>

#include "hwm/doc/diff.hpp"
#include "hwm/doc/patch.hpp"
#include "hwm/doc/pointer.hpp"
#include "hwm/doc/value.hpp"
#include "support/doc_gen.hpp"

namespace {

using namespace hwm::doc;

Value J(std::string_view text) { return parse(text); }

PatchOp op(PatchKind k, std::string_view path, std::optional<Value> v = std::nullopt) {
  return {k, Pointer::parse(path), std::move(v)};
}

TEST(Value, ParseDumpRoundTrip) {
  Value v = J(R"({"a":[1,2.5,"x",null,true],"b":{"c":-3}})");
  EXPECT_EQ(dump(v), R"({"a":[1,2.5,"x",null,true],"b":{"c":-3}})");
  EXPECT_EQ(parse(dump(v)), v);
}

TEST(Value, IntegerValuedNumbersSerializeWithoutFraction) {
  EXPECT_EQ(dump(Value(3.0)), "3");
  EXPECT_EQ(dump(Value(-0.5)), "-0.5");
  EXPECT_EQ(dump(Value(1e300)), dump(Value(1e300)));
}

TEST(Value, EqualityIsDeepAndExact) {
  EXPECT_EQ(J(R"({"a":[1,{"b":2}]})"), J(R"({"a":[1,{"b":2}]})"));
  EXPECT_NE(J(R"({"a":1})"), J(R"({"a":1.0000001})"));
  EXPECT_NE(J("[1,2]"), J("[2,1]"));
  EXPECT_NE(J("1"), J(R"("1")"));
}

TEST(Value, MalformedTextThrows) { EXPECT_THROW(parse("{\"a\":"), ParseError); }

TEST(Pointer, ReferenceExamplesResolve) {
  const Value foo = J(R"({"foo":[7]})");
  auto r = resolve(foo, "/foo/0");
  ASSERT_TRUE(r);
  EXPECT_EQ(*r.value, Value(7));

  const Value slash = J(R"({"a/b":1})");
  auto esc = resolve(slash, "/a~1b");
  ASSERT_TRUE(esc);
  EXPECT_EQ(*esc.value, Value(1));

  const Value tilde_doc = J(R"({"m~n":2})");
  auto tilde = resolve(tilde_doc, "/m~0n");
  ASSERT_TRUE(tilde);
  EXPECT_EQ(*tilde.value, Value(2));
}

TEST(Pointer, MissesAreTyped) {
  auto absent = resolve(J("{}"), "/x");
  ASSERT_FALSE(absent);
  EXPECT_EQ(absent.miss->kind, MissKind::absent_key);

  auto oob = resolve(J(R"({"a":[1]})"), "/a/3");
  ASSERT_FALSE(oob);
  EXPECT_EQ(oob.miss->kind, MissKind::index_out_of_range);
  EXPECT_EQ(oob.miss->depth, 1u);

  auto scalar = resolve(J(R"({"a":1})"), "/a/b");
  ASSERT_FALSE(scalar);
  EXPECT_EQ(scalar.miss->kind, MissKind::not_a_container);

  auto bad = resolve(J(R"({"a":[1]})"), "/a/01");
  ASSERT_FALSE(bad);
  EXPECT_EQ(bad.miss->kind, MissKind::bad_index);
}

TEST(Pointer, MalformedTextIsParseErrorNotMiss) {
  EXPECT_THROW(Pointer::parse("foo"), PointerSyntaxError);
  EXPECT_THROW(Pointer::parse("/a~2"), PointerSyntaxError);
  EXPECT_THROW(Pointer::parse("/a~"), PointerSyntaxError);
}

TEST(Pointer, SerializeParseIsIdentity) {
  for (std::string_view s : {"", "/", "/a", "/a~1b", "/m~0n/0", "/~0~1/x//y", "/0/1/2"})
    EXPECT_EQ(Pointer::parse(s).to_string(), s);
}

TEST(Patch, ReplaceMakeField) {
  Value doc = J(R"({"cars":[{"make":"Toyota"}]})");
  std::vector<PatchOp> ops{op(PatchKind::replace, "/cars/0/make", Value("Ford"))};
  EXPECT_EQ(dump(apply_patch(doc, ops)), R"({"cars":[{"make":"Ford"}]})");
}

TEST(Patch, EmptyPatchIsIdentity) {
  Value doc = J(R"({"a":[1,2]})");
  EXPECT_EQ(apply_patch(doc, {}), doc);
}

TEST(Patch, AddIntoEmptyArrayAtIndexZero) {
  Value doc = J(R"({"cars":[]})");
  std::vector<PatchOp> ops{op(PatchKind::add, "/cars/0", J(R"({"id":"car-1"})"))};
  EXPECT_EQ(dump(apply_patch(doc, ops)), R"({"cars":[{"id":"car-1"}]})");
}

TEST(Patch, AddAtExistingPathReplaces) {
  std::vector<PatchOp> m{op(PatchKind::add, "/a", Value(5))};
  EXPECT_EQ(apply_patch(J(R"({"a":1})"), m), J(R"({"a":5})"));
  std::vector<PatchOp> s{op(PatchKind::add, "/a/0", Value(9))};
  EXPECT_EQ(apply_patch(J(R"({"a":[1,2]})"), s), J(R"({"a":[9,2]})"));
}

TEST(Patch, Errors) {
  Value doc = J(R"({"a":[1],"b":{}})");
  std::vector<PatchOp> remove_missing{op(PatchKind::remove, "/zz")};
  std::vector<PatchOp> replace_missing{op(PatchKind::replace, "/b/q", Value(1))};
  std::vector<PatchOp> add_beyond{op(PatchKind::add, "/a/5", Value(1))};
  std::vector<PatchOp> add_dash{op(PatchKind::add, "/a/-", Value(1))};
  EXPECT_THROW(apply_patch(doc, remove_missing), PatchError);
  EXPECT_THROW(apply_patch(doc, replace_missing), PatchError);
  EXPECT_THROW(apply_patch(doc, add_beyond), PatchError);
  EXPECT_THROW(apply_patch(doc, add_dash), PatchError);
}

TEST(Patch, InputUntouched) {
  const Value doc = J(R"({"a":{"b":[1,2,3]}})");
  const Value copy = doc;
  std::vector<PatchOp> ops{op(PatchKind::remove, "/a/b/1"), op(PatchKind::add, "/c", Value(1))};
  Value out = apply_patch(doc, ops);
  EXPECT_EQ(doc, copy);
  EXPECT_EQ(out, J(R"({"a":{"b":[1,3]},"c":1})"));
}

TEST(Patch, ParseRejectsUnsupportedOps) {
  EXPECT_THROW(parse_patch(J(R"([{"op":"move","from":"/a","path":"/b"}])")), PatchError);
  EXPECT_THROW(parse_patch(J(R"([{"op":"test","path":"/a","value":1}])")), PatchError);
  EXPECT_THROW(parse_patch(J(R"([{"op":"add","path":"/a"}])")), PatchError);
  auto ops = parse_patch(J(R"([{"op":"remove","path":"/a"},{"op":"add","path":"/b","value":2}])"));
  ASSERT_EQ(ops.size(), 2u);
  EXPECT_EQ(dump(to_value(std::span<const PatchOp>(ops))),
            R"([{"op":"remove","path":"/a"},{"op":"add","path":"/b","value":2}])");
}

TEST(Diff, HandTraces) {
  EXPECT_TRUE(deep_diff(J(R"({"a":1})"), J(R"({"a":1})")).empty());

  auto changed = deep_diff(J(R"({"a":10})"), J(R"({"a":14})"));
  ASSERT_EQ(changed.size(), 1u);
  EXPECT_EQ(changed[0].path.to_string(), "/a");
  EXPECT_EQ(changed[0].kind, DiffKind::values_changed);
  EXPECT_EQ(*changed[0].old_value, Value(10));
  EXPECT_EQ(*changed[0].new_value, Value(14));

  auto added = deep_diff(J(R"({"a":1})"), J(R"({"a":1,"b":2})"));
  ASSERT_EQ(added.size(), 1u);
  EXPECT_EQ(added[0].path.to_string(), "/b");
  EXPECT_EQ(added[0].kind, DiffKind::item_added);
}

TEST(Diff, ContainersAreLeaves) {
  auto d = deep_diff(J(R"({"inv":[1,2,3]})"), J(R"({"inv":[1,2,4]})"));
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].path.to_string(), "/inv");
  EXPECT_EQ(d[0].kind, DiffKind::values_changed);

  auto sub = deep_diff(J(R"({})"), J(R"({"x":{"y":{"z":1}}})"));
  ASSERT_EQ(sub.size(), 1u);
  EXPECT_EQ(sub[0].kind, DiffKind::item_added);
  EXPECT_EQ(*sub[0].new_value, J(R"({"y":{"z":1}})"));

  auto t = deep_diff(J(R"({"a":1})"), J(R"({"a":"1"})"));
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].kind, DiffKind::type_changed);
}

TEST(Diff, SortedBySerializedPath) {
  auto d = deep_diff(J(R"({"b":1,"a":{"z":1,"c":2},"a0":1})"), J(R"({"b":2,"a":{"z":3,"c":4},"a0":5})"));
  ASSERT_EQ(d.size(), 4u);
  std::vector<std::string> paths;
  for (const auto& e : d) paths.push_back(e.path.to_string());
  EXPECT_EQ(paths, (std::vector<std::string>{"/a/c", "/a/z", "/a0", "/b"}));
}

TEST(Diff, PatchRoundTripOnRandomPairs) {
  hwm::fixtures::DocGen gen(20240611);
  int nonempty = 0;
  for (int i = 0; i < 1000; ++i) {
    Value a = i % 10 == 0 ? gen.doc(3) : gen.object_doc(4);
    Value b = i % 10 == 1 ? gen.doc(3) : gen.mutate(a, 3);
    auto diff = deep_diff(a, b);
    if (!diff.empty()) ++nonempty;
    Value patched = apply_patch(a, diff_to_patch(diff));
    ASSERT_EQ(patched, b) << "pair " << i << "\nA=" << dump(a) << "\nB=" << dump(b);
  }
  EXPECT_GT(nonempty, 500);
}

}  // namespace
