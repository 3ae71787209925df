#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hwm/doc/diff.hpp"
#include "hwm/doc/patch.hpp"
#include "hwm/doc/value.hpp"
#include "hwm/schema.hpp"
#include "hwm/script/interpreter.hpp"
#include "hwm/script/parser.hpp"

namespace hwm::program {

using doc::Value;
using script::FunctionKind;

class ProgramError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FunctionDescription {
  std::string name;
  std::string purpose;
  std::string implementation_details;

  friend bool operator==(const FunctionDescription&, const FunctionDescription&) = default;
};

struct FunctionDef {
  std::string id;
  FunctionKind kind = FunctionKind::action;
  std::string action_name;  // empty for the dynamic function
  FunctionDescription description;
  std::string body;
  std::shared_ptr<const script::Body> compiled;

  // Compiles `body`; throws script::ScriptError on syntax or static-check failure.
  static FunctionDef make(std::string id, FunctionKind kind, std::string action_name, std::string body,
                          FunctionDescription description = {}) {
    FunctionDef f{std::move(id), kind, std::move(action_name), std::move(description), std::move(body), nullptr};
    f.compiled = script::compile(f.body, f.kind);
    return f;
  }

  friend bool operator==(const FunctionDef& a, const FunctionDef& b) {
    return a.id == b.id && a.kind == b.kind && a.action_name == b.action_name &&
           a.description == b.description && a.body == b.body;
  }
};

// Parses a function body of the given kind into an anonymous definition.
inline FunctionDef parse_program(std::string_view source, FunctionKind kind = FunctionKind::action) {
  return FunctionDef::make("anonymous", kind, kind == FunctionKind::dynamic ? "" : "anonymous",
                           std::string(source));
}

class TransitionProgram {
 public:
  TransitionProgram() = default;
  explicit TransitionProgram(std::vector<FunctionDef> functions) : functions_(std::move(functions)) { check(); }

  const std::vector<FunctionDef>& functions() const { return functions_; }

  const FunctionDef* find(std::string_view id) const {
    for (const auto& f : functions_)
      if (f.id == id) return &f;
    return nullptr;
  }
  const FunctionDef* dynamic() const {
    for (const auto& f : functions_)
      if (f.kind == FunctionKind::dynamic) return &f;
    return nullptr;
  }
  const FunctionDef* action_function(std::string_view action) const {
    for (const auto& f : functions_)
      if (f.kind == FunctionKind::action && f.action_name == action) return &f;
    return nullptr;
  }
  std::vector<const FunctionDef*> preconditions(std::string_view action) const {
    std::vector<const FunctionDef*> out;
    for (const auto& f : functions_)
      if (f.kind == FunctionKind::precondition && f.action_name == action) out.push_back(&f);
    return out;
  }
  // Every function registered for `action`, plus the dynamic function.
  std::vector<const FunctionDef*> relevant(std::string_view action) const {
    std::vector<const FunctionDef*> out;
    for (const auto& f : functions_)
      if (f.kind == FunctionKind::dynamic || f.action_name == action) out.push_back(&f);
    return out;
  }

  // Every precondition/action function must name one of `actions`.
  void check_actions(const std::vector<std::string>& actions) const {
    for (const auto& f : functions_)
      if (f.kind != FunctionKind::dynamic &&
          std::find(actions.begin(), actions.end(), f.action_name) == actions.end())
        throw ProgramError("function '" + f.id + "' names unknown action '" + f.action_name + "'");
  }

  friend bool operator==(const TransitionProgram&, const TransitionProgram&) = default;

 private:
  void check() const {
    std::set<std::string> ids;
    std::set<std::string> acted;
    int dynamics = 0;
    for (const auto& f : functions_) {
      if (f.id.empty()) throw ProgramError("function with empty id");
      if (!ids.insert(f.id).second) throw ProgramError("duplicate function id '" + f.id + "'");
      if (!f.compiled) throw ProgramError("function '" + f.id + "' is not compiled");
      if (f.compiled->kind != f.kind) throw ProgramError("function '" + f.id + "' compiled for another kind");
      switch (f.kind) {
        case FunctionKind::dynamic: ++dynamics; break;
        case FunctionKind::action:
          if (!acted.insert(f.action_name).second)
            throw ProgramError("action '" + f.action_name + "' has more than one action function");
          [[fallthrough]];
        case FunctionKind::precondition:
          if (f.action_name.empty()) throw ProgramError("function '" + f.id + "' names no action");
          break;
      }
    }
    if (dynamics != 1) throw ProgramError("program needs exactly one dynamic function, has " + std::to_string(dynamics));
  }

  std::vector<FunctionDef> functions_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct Prediction {
  Value det;
  bool valid = true;
  std::string feedback;
};

class ExecutionFault : public std::runtime_error {
 public:
  ExecutionFault(std::string function_id, const std::string& msg)
      : std::runtime_error(function_id + ": " + msg), function_id_(std::move(function_id)) {}
  const std::string& function_id() const { return function_id_; }

 private:
  std::string function_id_;
};

namespace detail {

inline void apply_guarded(Value& state, const std::vector<doc::PatchOp>& ops, const std::set<std::string>& stochastic,
                          const std::string& fn) {
  for (const auto& op : ops) {
    if (op.path.is_root()) throw ExecutionFault(fn, "patch addresses the document root");
    if (stochastic.contains(op.path.tokens().front()))
      throw ExecutionFault(fn, "patch writes stochastic variable '" + op.path.tokens().front() + "'");
  }
  try {
    state = doc::apply_patch(std::move(state), ops);
  } catch (const doc::PatchError& e) {
    throw ExecutionFault(fn, e.what());
  }
}

inline script::RunResult run_function(const FunctionDef& f, const Value& state, const Value* action,
                                      std::size_t budget) {
  try {
    return script::run(*f.compiled, state, action, budget);
  } catch (const script::RuntimeFault& e) {
    throw ExecutionFault(f.id, e.what());
  }
}

}  // namespace detail

// Preconditions run in declaration order and the first failure supplies the
// feedback; the action patch applies only when all pass; the dynamic patch
// always applies. Throws ExecutionFault naming the faulting function.
inline Prediction evaluate(const TransitionProgram& program, const Value& prev_det, const Value& prev_sto,
                           const Value& action, std::size_t budget = script::default_step_budget) {
  Value state = prev_det.is_null() ? Value::object() : prev_det;
  std::set<std::string> stochastic;
  if (prev_sto.is_object()) {
    for (const auto& [k, v] : prev_sto.as_object()) {
      stochastic.insert(k);
      state[k] = v;
    }
  }
  const Value* name = action.find("name");
  if (!name || !name->is_text()) throw ExecutionFault("<input>", "action has no text 'name'");

  Prediction p;
  for (const FunctionDef* pc : program.preconditions(name->as_text())) {
    auto r = detail::run_function(*pc, state, &action, budget);
    if (!r.verdict->ok) {
      p.valid = false;
      p.feedback = r.verdict->feedback;
      break;
    }
  }
  if (p.valid) {
    if (const FunctionDef* act = program.action_function(name->as_text())) {
      auto r = detail::run_function(*act, state, &action, budget);
      detail::apply_guarded(state, r.ops, stochastic, act->id);
    }
  }
  if (const FunctionDef* dyn = program.dynamic()) {
    auto r = detail::run_function(*dyn, state, nullptr, budget);
    detail::apply_guarded(state, r.ops, stochastic, dyn->id);
  }
  doc::Object det;
  for (auto& [k, v] : state.as_object())
    if (!stochastic.contains(k)) det.emplace(k, std::move(v));
  p.det = Value(std::move(det));
  return p;
}

struct Outcome {
  std::optional<Prediction> prediction;
  std::optional<ExecutionFault> fault;
};

inline Outcome try_evaluate(const TransitionProgram& program, const Value& prev_det, const Value& prev_sto,
                            const Value& action, std::size_t budget = script::default_step_budget) {
  try {
    return {evaluate(program, prev_det, prev_sto, action, budget), std::nullopt};
  } catch (const ExecutionFault& f) {
    return {std::nullopt, f};
  }
}

inline Outcome try_evaluate(const TransitionProgram& program, const TransitionRecord& r,
                            std::size_t budget = script::default_step_budget) {
  return try_evaluate(program, r.prev_det, r.prev_sto, r.action, budget);
}

// ---------------------------------------------------------------------------
// Error taxonomy

enum class ErrorKind { exec, precondition_fail, precondition_slip, observation };

inline std::string_view error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::exec: return "E_exec";
    case ErrorKind::precondition_fail: return "E_pf";
    case ErrorKind::precondition_slip: return "E_ps";
    case ErrorKind::observation: return "E_od";
  }
  return "?";
}

inline std::optional<ErrorKind> error_kind_from(std::string_view s) {
  for (auto k : {ErrorKind::exec, ErrorKind::precondition_fail, ErrorKind::precondition_slip, ErrorKind::observation})
    if (error_kind_name(k) == s) return k;
  return std::nullopt;
}

struct PredictionError {
  ErrorKind kind;
  std::string detail;
  std::vector<doc::DiffEntry> diff;  // prediction -> truth, for E_od
};

// Precedence: E_exec, then E_pf / E_ps, then E_od.
inline std::optional<PredictionError> classify_error(const Value& pred_det, bool pred_valid, const Value& true_det,
                                                     bool true_valid,
                                                     const std::optional<ExecutionFault>& fault = std::nullopt) {
  if (fault) return PredictionError{ErrorKind::exec, fault->what(), {}};
  if (!pred_valid && true_valid)
    return PredictionError{ErrorKind::precondition_fail, "predicted invalid, observed valid", {}};
  if (pred_valid && !true_valid)
    return PredictionError{ErrorKind::precondition_slip, "predicted valid, observed invalid", {}};
  if (!(pred_det == true_det)) {
    auto d = doc::deep_diff(pred_det, true_det);
    return PredictionError{ErrorKind::observation, std::to_string(d.size()) + " differing entries", std::move(d)};
  }
  return std::nullopt;
}

inline std::optional<PredictionError> classify_error(const Outcome& o, const TransitionRecord& r) {
  if (o.fault) return classify_error(Value{}, false, r.next_det, r.valid, o.fault);
  return classify_error(o.prediction->det, o.prediction->valid, r.next_det, r.valid);
}

// ---------------------------------------------------------------------------
// Single-function refinements

enum class RefinementOp { add, remove, replace };

inline std::string_view refinement_op_name(RefinementOp op) {
  switch (op) {
    case RefinementOp::add: return "add";
    case RefinementOp::remove: return "remove";
    case RefinementOp::replace: return "replace";
  }
  return "?";
}

struct Refinement {
  RefinementOp op = RefinementOp::replace;
  std::optional<std::string> target_id;     // remove / replace
  std::optional<FunctionDef> new_function;  // add / replace
};

// Kind of the function a refinement touches.
inline FunctionKind refinement_kind(const Refinement& r, const TransitionProgram& program) {
  if (r.new_function) return r.new_function->kind;
  if (r.target_id)
    if (const auto* f = program.find(*r.target_id)) return f->kind;
  throw ProgramError("refinement touches no known function");
}

inline TransitionProgram apply_refinement(const TransitionProgram& program, const Refinement& r) {
  auto fns = program.functions();
  auto locate = [&](const std::optional<std::string>& id) {
    if (!id) throw ProgramError(std::string(refinement_op_name(r.op)) + " needs a target id");
    auto it = std::find_if(fns.begin(), fns.end(), [&](const FunctionDef& f) { return f.id == *id; });
    if (it == fns.end()) throw ProgramError("no function with id '" + *id + "'");
    return it;
  };
  switch (r.op) {
    case RefinementOp::add:
      if (!r.new_function) throw ProgramError("add needs a function");
      fns.push_back(*r.new_function);
      break;
    case RefinementOp::remove: fns.erase(locate(r.target_id)); break;
    case RefinementOp::replace: {
      if (!r.new_function) throw ProgramError("replace needs a function");
      *locate(r.target_id) = *r.new_function;
      break;
    }
  }
  return TransitionProgram(std::move(fns));
}

// ---------------------------------------------------------------------------
// Bundles

inline Value to_value(const FunctionDef& f) {
  Value v = Value::object({{"id", f.id},
                           {"kind", std::string(script::function_kind_name(f.kind))},
                           {"description", Value::object({{"name", f.description.name},
                                                          {"purpose", f.description.purpose},
                                                          {"implementation_details",
                                                           f.description.implementation_details}})},
                           {"body", f.body}});
  if (f.kind != FunctionKind::dynamic) v["action_name"] = f.action_name;
  return v;
}

inline FunctionDef function_from_value(const Value& v) {
  auto text = [&](const Value& m, std::string_view key) -> std::string {
    const Value* f = m.find(key);
    if (!f || f->is_null()) return {};
    if (!f->is_text()) throw ProgramError("function field '" + std::string(key) + "' must be text");
    return f->as_text();
  };
  if (!v.is_object()) throw ProgramError("function record must be a map");
  auto kind = script::function_kind_from(text(v, "kind"));
  if (!kind) throw ProgramError("function '" + text(v, "id") + "' has bad kind '" + text(v, "kind") + "'");
  FunctionDescription desc;
  if (const Value* d = v.find("description"); d && d->is_object())
    desc = {text(*d, "name"), text(*d, "purpose"), text(*d, "implementation_details")};
  return FunctionDef::make(text(v, "id"), *kind, text(v, "action_name"), text(v, "body"), std::move(desc));
}

inline Value to_value(const TransitionProgram& p) {
  doc::Array fns;
  for (const auto& f : p.functions()) fns.push_back(to_value(f));
  return Value::object({{"functions", Value(std::move(fns))}});
}

inline TransitionProgram program_from_value(const Value& v) {
  const Value* fns = v.find("functions");
  if (!fns || !fns->is_array()) throw ProgramError("program bundle needs a 'functions' sequence");
  std::vector<FunctionDef> out;
  for (const auto& f : fns->as_array()) out.push_back(function_from_value(f));
  return TransitionProgram(std::move(out));
}

inline Value to_value(const Refinement& r) {
  Value v = Value::object({{"op", std::string(refinement_op_name(r.op))}});
  if (r.target_id) v["target_id"] = *r.target_id;
  if (r.new_function) v["function"] = to_value(*r.new_function);
  return v;
}

// Throws ProgramError on structure problems and script::ScriptError when the
// function body does not compile.
inline Refinement refinement_from_value(const Value& v) {
  if (!v.is_object()) throw ProgramError("refinement must be a map");
  const Value* op = v.find("op");
  if (!op || !op->is_text()) throw ProgramError("refinement needs an 'op'");
  Refinement r;
  if (op->as_text() == "add") r.op = RefinementOp::add;
  else if (op->as_text() == "remove") r.op = RefinementOp::remove;
  else if (op->as_text() == "replace") r.op = RefinementOp::replace;
  else throw ProgramError("unknown refinement op '" + op->as_text() + "'");
  if (const Value* t = v.find("target_id"); t && t->is_text()) r.target_id = t->as_text();
  if (const Value* f = v.find("function"); f && !f->is_null()) r.new_function = function_from_value(*f);
  if (r.op != RefinementOp::add && !r.target_id) throw ProgramError("refinement needs 'target_id'");
  if (r.op != RefinementOp::remove && !r.new_function) throw ProgramError("refinement needs 'function'");
  return r;
}

}  // namespace hwm::program
