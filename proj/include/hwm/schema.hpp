#pragma once

#include <algorithm>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hwm/doc/value.hpp"

namespace hwm {

using doc::Value;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stream { deterministic, stochastic };

inline std::string_view stream_name(Stream s) {
  return s == Stream::deterministic ? "deterministic" : "stochastic";
}

struct Categorical {
  std::vector<std::string> levels;
};

struct Numerical {
  std::optional<double> lower;
  std::optional<double> upper;
};

struct VariableSpec {
  std::string name;
  std::variant<Categorical, Numerical> kind;
  Stream stream = Stream::stochastic;
  std::string description;
  // Structural variables become nodes of the dependency graph. Bookkeeping
  // variables (a day counter, an open/closed flag) still condition every
  // stochastic model but are not nodes.
  bool structural = true;

  bool categorical() const { return std::holds_alternative<Categorical>(kind); }
  const Categorical& as_categorical() const { return std::get<Categorical>(kind); }
  const Numerical& as_numerical() const { return std::get<Numerical>(kind); }
};

struct ActionField {
  std::string name;
  std::optional<double> lower;
  std::optional<double> upper;
};

struct ActionSpec {
  std::string name;
  std::string description;
  std::vector<ActionField> fields;
};

class ObservationSchema {
 public:
  ObservationSchema() = default;
  ObservationSchema(std::string name, std::vector<VariableSpec> variables, std::string environment_doc,
                    std::vector<ActionSpec> actions = {})
      : name_(std::move(name)),
        variables_(std::move(variables)),
        environment_doc_(std::move(environment_doc)),
        actions_(std::move(actions)) {
    check();
  }

  const std::string& name() const { return name_; }
  const std::vector<VariableSpec>& variables() const { return variables_; }
  const std::string& environment_doc() const { return environment_doc_; }
  const std::vector<ActionSpec>& actions() const { return actions_; }

  const VariableSpec* find(std::string_view var) const {
    for (const auto& v : variables_)
      if (v.name == var) return &v;
    return nullptr;
  }
  const VariableSpec& at(std::string_view var) const {
    const auto* v = find(var);
    if (!v) throw SchemaError("unknown variable '" + std::string(var) + "'");
    return *v;
  }
  const ActionSpec* find_action(std::string_view action) const {
    for (const auto& a : actions_)
      if (a.name == action) return &a;
    return nullptr;
  }

  std::vector<std::string> names(Stream s) const {
    std::vector<std::string> out;
    for (const auto& v : variables_)
      if (v.stream == s) out.push_back(v.name);
    return out;
  }
  std::vector<std::string> structural_names(Stream s) const {
    std::vector<std::string> out;
    for (const auto& v : variables_)
      if (v.stream == s && v.structural) out.push_back(v.name);
    return out;
  }

 private:
  void check() const {
    std::set<std::string> seen;
    for (const auto& v : variables_) {
      if (v.name.empty()) throw SchemaError("variable with empty name");
      if (!seen.insert(v.name).second) throw SchemaError("duplicate variable '" + v.name + "'");
      if (v.categorical()) {
        const auto& lv = v.as_categorical().levels;
        if (lv.empty()) throw SchemaError("categorical '" + v.name + "' has no levels");
        std::set<std::string> ls(lv.begin(), lv.end());
        if (ls.size() != lv.size()) throw SchemaError("categorical '" + v.name + "' has duplicate levels");
      } else {
        const auto& n = v.as_numerical();
        if (n.lower && n.upper && *n.lower > *n.upper)
          throw SchemaError("numerical '" + v.name + "' has lower > upper");
      }
      if (v.stream == Stream::stochastic && !v.structural)
        throw SchemaError("stochastic variable '" + v.name + "' must be structural");
    }
    std::set<std::string> acts;
    for (const auto& a : actions_)
      if (!acts.insert(a.name).second) throw SchemaError("duplicate action '" + a.name + "'");
  }

  std::string name_;
  std::vector<VariableSpec> variables_;
  std::string environment_doc_;
  std::vector<ActionSpec> actions_;
};

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind { missing, wrong_type, out_of_bounds, unknown_level };

inline std::string_view violation_kind_name(ViolationKind k) {
  switch (k) {
    case ViolationKind::missing: return "missing";
    case ViolationKind::wrong_type: return "wrong_type";
    case ViolationKind::out_of_bounds: return "out_of_bounds";
    case ViolationKind::unknown_level: return "unknown_level";
  }
  return "?";
}

struct Violation {
  std::string variable;
  ViolationKind kind;
  std::string detail;
};

inline std::optional<Violation> validate_value(const Value* value, const VariableSpec& spec) {
  if (!value || value->is_null()) return Violation{spec.name, ViolationKind::missing, "value absent"};
  if (spec.categorical()) {
    if (!value->is_text()) return Violation{spec.name, ViolationKind::wrong_type, "expected text level"};
    const auto& lv = spec.as_categorical().levels;
    if (std::find(lv.begin(), lv.end(), value->as_text()) == lv.end())
      return Violation{spec.name, ViolationKind::unknown_level, value->as_text()};
    return std::nullopt;
  }
  if (!value->is_number()) return Violation{spec.name, ViolationKind::wrong_type, "expected number"};
  double x = value->as_number();
  const auto& n = spec.as_numerical();
  if ((n.lower && x < *n.lower) || (n.upper && x > *n.upper))
    return Violation{spec.name, ViolationKind::out_of_bounds, std::to_string(x)};
  return std::nullopt;
}

// One violation per offending variable. With `only`, variables of the other
// stream are ignored.
inline std::vector<Violation> validate(const Value& obs, const ObservationSchema& schema,
                                       std::optional<Stream> only = std::nullopt) {
  std::vector<Violation> out;
  for (const auto& spec : schema.variables()) {
    if (only && spec.stream != *only) continue;
    if (auto v = validate_value(obs.find(spec.name), spec)) out.push_back(std::move(*v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schema (de)serialization

namespace detail {
inline std::optional<double> opt_number(const Value& v, std::string_view key) {
  const Value* f = v.find(key);
  if (!f || f->is_null()) return std::nullopt;
  if (!f->is_number()) throw SchemaError("'" + std::string(key) + "' must be a number");
  return f->as_number();
}
inline std::string opt_text(const Value& v, std::string_view key) {
  const Value* f = v.find(key);
  if (!f || f->is_null()) return {};
  if (!f->is_text()) throw SchemaError("'" + std::string(key) + "' must be text");
  return f->as_text();
}
}  // namespace detail

inline Value to_value(const ObservationSchema& schema) {
  doc::Array vars;
  for (const auto& v : schema.variables()) {
    Value e = Value::object({{"name", v.name},
                             {"stream", std::string(stream_name(v.stream))},
                             {"description", v.description}});
    if (!v.structural) e["structural"] = false;
    if (v.categorical()) {
      e["type"] = "categorical";
      doc::Array lv;
      for (const auto& l : v.as_categorical().levels) lv.emplace_back(l);
      e["levels"] = Value(std::move(lv));
    } else {
      e["type"] = "numerical";
      if (v.as_numerical().lower) e["lower"] = *v.as_numerical().lower;
      if (v.as_numerical().upper) e["upper"] = *v.as_numerical().upper;
    }
    vars.push_back(std::move(e));
  }
  doc::Array acts;
  for (const auto& a : schema.actions()) {
    doc::Array fields;
    for (const auto& f : a.fields) {
      Value fv = Value::object({{"name", f.name}});
      if (f.lower) fv["lower"] = *f.lower;
      if (f.upper) fv["upper"] = *f.upper;
      fields.push_back(std::move(fv));
    }
    acts.push_back(Value::object(
        {{"name", a.name}, {"description", a.description}, {"fields", Value(std::move(fields))}}));
  }
  return Value::object({{"name", schema.name()},
                        {"environment_doc", schema.environment_doc()},
                        {"variables", Value(std::move(vars))},
                        {"actions", Value(std::move(acts))}});
}

inline ObservationSchema schema_from_value(const Value& v) {
  if (!v.is_object()) throw SchemaError("schema must be a map");
  const Value* vars = v.find("variables");
  if (!vars || !vars->is_array()) throw SchemaError("schema needs a 'variables' sequence");
  std::vector<VariableSpec> specs;
  for (const auto& e : vars->as_array()) {
    VariableSpec s;
    s.name = detail::opt_text(e, "name");
    s.description = detail::opt_text(e, "description");
    auto stream = detail::opt_text(e, "stream");
    if (stream == "deterministic") s.stream = Stream::deterministic;
    else if (stream == "stochastic") s.stream = Stream::stochastic;
    else throw SchemaError("variable '" + s.name + "' has bad stream '" + stream + "'");
    if (const Value* st = e.find("structural"); st && st->is_bool()) s.structural = st->as_bool();
    auto type = detail::opt_text(e, "type");
    if (type == "categorical") {
      Categorical c;
      const Value* lv = e.find("levels");
      if (!lv || !lv->is_array()) throw SchemaError("categorical '" + s.name + "' needs levels");
      for (const auto& l : lv->as_array()) c.levels.push_back(l.as_text());
      s.kind = std::move(c);
    } else if (type == "numerical") {
      s.kind = Numerical{detail::opt_number(e, "lower"), detail::opt_number(e, "upper")};
    } else {
      throw SchemaError("variable '" + s.name + "' has bad type '" + type + "'");
    }
    specs.push_back(std::move(s));
  }
  std::vector<ActionSpec> actions;
  if (const Value* acts = v.find("actions"); acts && acts->is_array()) {
    for (const auto& a : acts->as_array()) {
      ActionSpec spec{detail::opt_text(a, "name"), detail::opt_text(a, "description"), {}};
      if (const Value* fs = a.find("fields"); fs && fs->is_array())
        for (const auto& f : fs->as_array())
          spec.fields.push_back({detail::opt_text(f, "name"), detail::opt_number(f, "lower"),
                                 detail::opt_number(f, "upper")});
      actions.push_back(std::move(spec));
    }
  }
  return ObservationSchema(detail::opt_text(v, "name"), std::move(specs),
                           detail::opt_text(v, "environment_doc"), std::move(actions));
}

// ---------------------------------------------------------------------------
// Transitions

struct TransitionRecord {
  Value prev_det;
  Value prev_sto;
  Value action;
  bool valid = true;
  Value next_det;
  Value next_sto;

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

using Trajectory = std::vector<TransitionRecord>;

inline const std::string& action_name(const Value& action) { return action.at("name").as_text(); }

inline Value to_value(const TransitionRecord& r) {
  return Value::object({{"prev_det", r.prev_det},
                        {"prev_sto", r.prev_sto},
                        {"action", r.action},
                        {"valid", r.valid},
                        {"next_det", r.next_det},
                        {"next_sto", r.next_sto}});
}

class IngestError : public std::runtime_error {
 public:
  IngestError(std::size_t line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline TransitionRecord record_from_value(const Value& v, std::size_t line = 0) {
  auto field = [&](std::string_view k) -> const Value& {
    const Value* f = v.find(k);
    if (!f) throw IngestError(line, "missing field '" + std::string(k) + "'");
    return *f;
  };
  TransitionRecord r;
  r.prev_det = field("prev_det");
  r.prev_sto = field("prev_sto");
  r.action = field("action");
  const Value& valid = field("valid");
  if (!valid.is_bool()) throw IngestError(line, "'valid' must be a boolean");
  r.valid = valid.as_bool();
  r.next_det = field("next_det");
  r.next_sto = field("next_sto");
  for (const Value* m : {&r.prev_det, &r.prev_sto, &r.next_det, &r.next_sto, &r.action})
    if (!m->is_object()) throw IngestError(line, "observation and action fields must be maps");
  if (!r.action.find("name") || !r.action.at("name").is_text())
    throw IngestError(line, "action needs a text 'name'");
  return r;
}

struct LineViolation {
  std::size_t line;
  std::string field;  // prev_det, next_sto, ...
  Violation violation;
};

struct TrajectorySet {
  std::vector<Trajectory> trajectories;
  std::vector<LineViolation> violations;
  Value meta;  // header line, when present

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.size();
    return n;
  }
};

// JSON-lines; one transition per line, grouped by `trajectory_id` in order of
// first appearance. A line holding only a `meta` key is a header.
inline TrajectorySet load_trajectories(std::istream& in, const ObservationSchema* schema = nullptr) {
  TrajectorySet out;
  std::vector<Value> ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Value v;
    try {
      v = doc::parse(text);
    } catch (const doc::ParseError& e) {
      throw IngestError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!v.is_object()) throw IngestError(line, "expected a map");
    if (v.as_object().size() == 1 && v.find("meta")) {
      out.meta = v.at("meta");
      continue;
    }
    TransitionRecord r = record_from_value(v, line);
    const Value* id = v.find("trajectory_id");
    if (!id) throw IngestError(line, "missing field 'trajectory_id'");
    auto it = std::find(ids.begin(), ids.end(), *id);
    std::size_t slot = static_cast<std::size_t>(it - ids.begin());
    if (it == ids.end()) {
      ids.push_back(*id);
      out.trajectories.emplace_back();
    }
    if (schema) {
      const std::pair<const char*, std::pair<const Value*, Stream>> parts[] = {
          {"prev_det", {&r.prev_det, Stream::deterministic}},
          {"prev_sto", {&r.prev_sto, Stream::stochastic}},
          {"next_det", {&r.next_det, Stream::deterministic}},
          {"next_sto", {&r.next_sto, Stream::stochastic}}};
      for (const auto& [name, part] : parts)
        for (auto& viol : validate(*part.first, *schema, part.second))
          out.violations.push_back({line, name, std::move(viol)});
    }
    out.trajectories[slot].push_back(std::move(r));
  }
  return out;
}

inline void write_trajectories(std::ostream& out, const std::vector<Trajectory>& trajectories,
                               const Value& meta = Value{}, std::size_t first_id = 0) {
  if (!meta.is_null()) out << doc::dump(Value::object({{"meta", meta}})) << '\n';
  for (std::size_t t = 0; t < trajectories.size(); ++t) {
    for (std::size_t s = 0; s < trajectories[t].size(); ++s) {
      Value v = to_value(trajectories[t][s]);
      v["trajectory_id"] = first_id + t;
      v["step"] = s;
      out << doc::dump(v) << '\n';
    }
  }
}

inline std::vector<TransitionRecord> flatten(const std::vector<Trajectory>& trajectories) {
  std::vector<TransitionRecord> out;
  for (const auto& t : trajectories) out.insert(out.end(), t.begin(), t.end());
  return out;
}

}  // namespace hwm
