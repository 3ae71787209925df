#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hwm/doc/patch.hpp"
#include "hwm/doc/pointer.hpp"
#include "hwm/script/ast.hpp"

namespace hwm::script {

inline constexpr std::size_t default_step_budget = 10'000;

class RuntimeFault : public std::runtime_error {
 public:
  RuntimeFault(SourcePos pos, const std::string& msg)
      : std::runtime_error(std::to_string(pos.line) + ":" + std::to_string(pos.column) + ": " + msg), pos_(pos) {}
  SourcePos pos() const { return pos_; }

 private:
  SourcePos pos_;
};

struct Verdict {
  bool ok = true;
  std::string feedback;
};

struct RunResult {
  std::vector<doc::PatchOp> ops;   // action / dynamic bodies
  std::optional<Verdict> verdict;  // precondition bodies
  std::size_t steps = 0;
};

namespace detail {

using doc::Value;

class Interpreter {
 public:
  Interpreter(const Value& state, const Value* action, std::size_t budget)
      : state_(state), action_(action), budget_(budget) {}

  RunResult run(const Body& body) {
    exec_block(body.statements);
    if (body.kind == FunctionKind::precondition && !result_.verdict)
      throw RuntimeFault({1, 1}, "precondition finished without returning a verdict");
    result_.steps = steps_;
    return std::move(result_);
  }

 private:
  struct Returned {};

  void tick(SourcePos pos) {
    if (++steps_ > budget_) throw RuntimeFault(pos, "step budget exceeded");
  }

  void exec_block(const Block& block) {
    std::size_t mark = env_.size();
    try {
      for (const auto& s : block) {
        exec(s);
        if (result_.verdict) break;
      }
    } catch (...) {
      env_.resize(mark);
      throw;
    }
    env_.resize(mark);
  }

  void exec(const Stmt& s) {
    tick(s.pos);
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, Let>) {
            Value v = eval(*n.value);
            env_.emplace_back(&n.name, std::move(v));
          } else if constexpr (std::is_same_v<T, Emit>) {
            doc::Pointer ptr = n.literal ? *n.literal : pointer_of(*n.pointer);
            if (ptr.is_root()) throw RuntimeFault(s.pos, "patches may not address the root");
            std::optional<Value> value;
            if (n.value) value = eval(*n.value);
            result_.ops.push_back({n.op, std::move(ptr), std::move(value)});
          } else if constexpr (std::is_same_v<T, Return>) {
            Value ok = eval(*n.ok);
            Value fb = eval(*n.feedback);
            if (!ok.is_bool()) throw RuntimeFault(n.ok->pos, "verdict must be a boolean");
            if (!fb.is_text()) throw RuntimeFault(n.feedback->pos, "feedback must be text");
            result_.verdict = Verdict{ok.as_bool(), fb.as_text()};
          } else {
            Value c = eval(*n.cond);
            if (!c.is_bool()) throw RuntimeFault(n.cond->pos, "condition must be a boolean");
            exec_block(c.as_bool() ? n.then_block : n.else_block);
          }
        },
        s.node);
  }

  doc::Pointer pointer_of(const Expr& e) {
    Value v = eval(e);
    if (!v.is_text()) throw RuntimeFault(e.pos, "pointer must be text");
    try {
      return doc::Pointer::parse(v.as_text());
    } catch (const doc::PointerSyntaxError& err) {
      throw RuntimeFault(e.pos, err.what());
    }
  }

  const Value& lookup(const std::string& name, SourcePos pos) const {
    for (auto it = env_.rbegin(); it != env_.rend(); ++it)
      if (*it->first == name) return it->second;
    throw RuntimeFault(pos, "unbound identifier '" + name + "'");
  }

  static double num(const Value& v, SourcePos pos, std::string_view what) {
    if (!v.is_number()) throw RuntimeFault(pos, std::string(what) + " expects a number, got " +
                                                    std::string(doc::type_name(v.type())));
    return v.as_number();
  }

  static Value checked(double d, SourcePos pos) {
    if (!std::isfinite(d)) throw RuntimeFault(pos, "arithmetic produced a non-finite number");
    return Value(d);
  }

  const Value& sequence(const Value& v, SourcePos pos) {
    if (!v.is_array()) throw RuntimeFault(pos, "aggregation source must be a sequence");
    return v;
  }

  Value eval(const Expr& e) {
    tick(e.pos);
    return std::visit([&](const auto& n) -> Value { return eval_node(n, e.pos); }, e.node);
  }

  Value eval_node(const Literal& n, SourcePos) { return n.value; }
  Value eval_node(const VarRef& n, SourcePos pos) { return lookup(n.name, pos); }

  Value eval_node(const Unary& n, SourcePos pos) {
    Value v = eval(*n.operand);
    if (n.op == UnaryOp::negate) return Value(-num(v, pos, "'-'"));
    if (!v.is_bool()) throw RuntimeFault(pos, "'not' expects a boolean");
    return Value(!v.as_bool());
  }

  Value eval_node(const Binary& n, SourcePos pos) {
    if (n.op == BinaryOp::logical_and || n.op == BinaryOp::logical_or) {
      Value l = eval(*n.lhs);
      if (!l.is_bool()) throw RuntimeFault(pos, "logical operator expects booleans");
      if (n.op == BinaryOp::logical_and && !l.as_bool()) return Value(false);
      if (n.op == BinaryOp::logical_or && l.as_bool()) return Value(true);
      Value r = eval(*n.rhs);
      if (!r.is_bool()) throw RuntimeFault(pos, "logical operator expects booleans");
      return r;
    }
    Value l = eval(*n.lhs);
    Value r = eval(*n.rhs);
    switch (n.op) {
      case BinaryOp::eq: return Value(l == r);
      case BinaryOp::ne: return Value(!(l == r));
      case BinaryOp::add:
        if (l.is_text() && r.is_text()) return Value(l.as_text() + r.as_text());
        return checked(num(l, pos, "'+'") + num(r, pos, "'+'"), pos);
      case BinaryOp::sub: return checked(num(l, pos, "'-'") - num(r, pos, "'-'"), pos);
      case BinaryOp::mul: return checked(num(l, pos, "'*'") * num(r, pos, "'*'"), pos);
      case BinaryOp::div: {
        double d = num(r, pos, "'/'");
        if (d == 0.0) throw RuntimeFault(pos, "division by zero");
        return checked(num(l, pos, "'/'") / d, pos);
      }
      default: break;
    }
    if (l.is_text() && r.is_text()) {
      int c = l.as_text().compare(r.as_text());
      switch (n.op) {
        case BinaryOp::lt: return Value(c < 0);
        case BinaryOp::le: return Value(c <= 0);
        case BinaryOp::gt: return Value(c > 0);
        default: return Value(c >= 0);
      }
    }
    double a = num(l, pos, "comparison"), b = num(r, pos, "comparison");
    switch (n.op) {
      case BinaryOp::lt: return Value(a < b);
      case BinaryOp::le: return Value(a <= b);
      case BinaryOp::gt: return Value(a > b);
      default: return Value(a >= b);
    }
  }

  Value eval_node(const Conditional& n, SourcePos pos) {
    Value c = eval(*n.cond);
    if (!c.is_bool()) throw RuntimeFault(pos, "condition must be a boolean");
    return eval(c.as_bool() ? *n.then_branch : *n.else_branch);
  }

  Value eval_node(const Get& n, SourcePos pos) {
    const Value* root = &state_;
    if (n.from_action) {
      if (!action_) throw RuntimeFault(pos, "no action available");
      root = action_;
    }
    doc::Pointer ptr = n.literal ? *n.literal : pointer_of(*n.pointer);
    auto r = doc::resolve(*root, ptr);
    if (r) return *r.value;
    if (n.fallback) return eval(*n.fallback);
    throw RuntimeFault(pos, std::string(n.from_action ? "action" : "state") + " has no value at '" +
                                ptr.to_string() + "' (" + std::string(doc::miss_kind_name(r.miss->kind)) + ")");
  }

  Value eval_node(const Call& n, SourcePos pos) {
    std::vector<Value> a;
    a.reserve(n.args.size());
    for (const auto& arg : n.args) a.push_back(eval(*arg));
    switch (n.fn) {
      case Builtin::min: return Value(std::min(num(a[0], pos, "min"), num(a[1], pos, "min")));
      case Builtin::max: return Value(std::max(num(a[0], pos, "max"), num(a[1], pos, "max")));
      case Builtin::abs: return Value(std::fabs(num(a[0], pos, "abs")));
      case Builtin::floor: return Value(std::floor(num(a[0], pos, "floor")));
      case Builtin::round: return Value(std::round(num(a[0], pos, "round")));
      case Builtin::clamp: {
        double lo = num(a[1], pos, "clamp"), hi = num(a[2], pos, "clamp");
        if (lo > hi) throw RuntimeFault(pos, "clamp bounds are inverted");
        return Value(std::clamp(num(a[0], pos, "clamp"), lo, hi));
      }
      case Builtin::len:
        if (a[0].is_array()) return Value(a[0].as_array().size());
        if (a[0].is_object()) return Value(a[0].as_object().size());
        if (a[0].is_text()) return Value(a[0].as_text().size());
        throw RuntimeFault(pos, "len expects a sequence, map or text");
    }
    return Value();
  }

  Value eval_node(const Aggregate& n, SourcePos pos) {
    Value src = eval(*n.source);
    const auto& items = sequence(src, pos).as_array();
    double acc = 0;
    doc::Array kept;
    for (const auto& item : items) {
      env_.emplace_back(&n.var, item);
      Value v;
      try {
        v = eval(*n.body);
      } catch (...) {
        env_.pop_back();
        throw;
      }
      env_.pop_back();
      if (n.kind == AggregateKind::sum) {
        acc += num(v, n.body->pos, "sum");
      } else {
        if (!v.is_bool()) throw RuntimeFault(n.body->pos, "predicate must be a boolean");
        if (v.as_bool()) {
          acc += 1;
          if (n.kind == AggregateKind::filter) kept.push_back(item);
        }
      }
    }
    if (n.kind == AggregateKind::filter) return Value(std::move(kept));
    return checked(acc, pos);
  }

  Value eval_node(const Member& n, SourcePos pos) {
    Value obj = eval(*n.object);
    const Value* f = obj.find(n.field);
    if (!f) throw RuntimeFault(pos, "no field '" + n.field + "'");
    return *f;
  }

  Value eval_node(const Index& n, SourcePos pos) {
    Value obj = eval(*n.object);
    Value idx = eval(*n.index);
    if (obj.is_array()) {
      double d = num(idx, pos, "index");
      const auto& arr = obj.as_array();
      if (d < 0 || std::floor(d) != d || d >= static_cast<double>(arr.size()))
        throw RuntimeFault(pos, "index out of range");
      return arr[static_cast<std::size_t>(d)];
    }
    if (obj.is_object() && idx.is_text()) {
      const Value* f = obj.find(idx.as_text());
      if (!f) throw RuntimeFault(pos, "no key '" + idx.as_text() + "'");
      return *f;
    }
    throw RuntimeFault(pos, "cannot index into " + std::string(doc::type_name(obj.type())));
  }

  Value eval_node(const SequenceLiteral& n, SourcePos) {
    doc::Array a;
    for (const auto& item : n.items) a.push_back(eval(*item));
    return Value(std::move(a));
  }

  Value eval_node(const MapLiteral& n, SourcePos) {
    doc::Object o;
    for (const auto& [k, item] : n.items) o.insert_or_assign(k, eval(*item));
    return Value(std::move(o));
  }

  const Value& state_;
  const Value* action_;
  std::size_t budget_;
  std::size_t steps_ = 0;
  std::vector<std::pair<const std::string*, Value>> env_;
  RunResult result_;
};

}  // namespace detail

// Runs a compiled body against a state (and action, absent for dynamics).
inline RunResult run(const Body& body, const doc::Value& state, const doc::Value* action,
                     std::size_t budget = default_step_budget) {
  detail::Interpreter interp(state, action, budget);
  return interp.run(body);
}

}  // namespace hwm::script
