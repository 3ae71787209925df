#pragma once

#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hwm/doc/patch.hpp"
#include "hwm/doc/pointer.hpp"
#include "hwm/doc/value.hpp"

namespace hwm::script {

enum class FunctionKind { action, precondition, dynamic };

inline std::string_view function_kind_name(FunctionKind k) {
  switch (k) {
    case FunctionKind::action: return "action";
    case FunctionKind::precondition: return "precondition";
    case FunctionKind::dynamic: return "dynamic";
  }
  return "?";
}

inline std::optional<FunctionKind> function_kind_from(std::string_view s) {
  if (s == "action") return FunctionKind::action;
  if (s == "precondition") return FunctionKind::precondition;
  if (s == "dynamic") return FunctionKind::dynamic;
  return std::nullopt;
}

struct SourcePos {
  int line = 1;
  int column = 1;
};

struct Expr;
using ExprPtr = std::unique_ptr<Expr>;

enum class BinaryOp { add, sub, mul, div, eq, ne, lt, le, gt, ge, logical_and, logical_or };
enum class UnaryOp { negate, logical_not };
enum class Builtin { min, max, abs, floor, round, clamp, len };
enum class AggregateKind { sum, count, filter };

struct Literal {
  doc::Value value;
};
struct VarRef {
  std::string name;
};
struct Unary {
  UnaryOp op;
  ExprPtr operand;
};
struct Binary {
  BinaryOp op;
  ExprPtr lhs;
  ExprPtr rhs;
};
struct Conditional {
  ExprPtr cond;
  ExprPtr then_branch;
  ExprPtr else_branch;
};
// `get <ptr>` reads the state, `aget <ptr>` reads the action.
struct Get {
  bool from_action = false;
  ExprPtr pointer;
  ExprPtr fallback;
  std::optional<doc::Pointer> literal;  // pre-parsed when the pointer is a text literal
};
struct Call {
  Builtin fn;
  std::vector<ExprPtr> args;
};
struct Aggregate {
  AggregateKind kind;
  std::string var;
  ExprPtr source;
  ExprPtr body;
};
struct Member {
  ExprPtr object;
  std::string field;
};
struct Index {
  ExprPtr object;
  ExprPtr index;
};
struct SequenceLiteral {
  std::vector<ExprPtr> items;
};
struct MapLiteral {
  std::vector<std::pair<std::string, ExprPtr>> items;
};

struct Expr {
  std::variant<Literal, VarRef, Unary, Binary, Conditional, Get, Call, Aggregate, Member, Index,
               SequenceLiteral, MapLiteral>
      node;
  SourcePos pos;
};

struct Stmt;
using Block = std::vector<Stmt>;

struct Let {
  std::string name;
  ExprPtr value;
};
struct Emit {
  doc::PatchKind op;
  ExprPtr pointer;
  ExprPtr value;  // null for remove
  std::optional<doc::Pointer> literal;
};
struct Return {
  ExprPtr ok;
  ExprPtr feedback;
};
struct If {
  ExprPtr cond;
  Block then_block;
  Block else_block;
};

struct Stmt {
  std::variant<Let, Emit, Return, If> node;
  SourcePos pos;
};

struct Body {
  FunctionKind kind = FunctionKind::action;
  Block statements;
};

}  // namespace hwm::script
