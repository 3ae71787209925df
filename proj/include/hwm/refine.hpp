#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hwm/doc/diff.hpp"
#include "hwm/program.hpp"
#include "hwm/schema.hpp"

namespace hwm::refine {

using doc::Value;
using program::ErrorKind;
using program::FunctionDef;
using program::Refinement;
using program::TransitionProgram;

class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RefineConfig {
  int k_candidates = 3;
  std::size_t train_set_size = 300;
  std::size_t validation_set_size = 300;
  double train_valid_fraction = 0.5;  // 1:1 valid:invalid
  double vs_threshold = 0.0;          // strict >
  std::size_t step_budget = script::default_step_budget;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Heuristic scores

// 1 if the new prediction of σ is right, minus 1 if the old one was.
inline int pers(bool true_valid, bool old_pred_valid, bool new_pred_valid) {
  return int(new_pred_valid == true_valid) - int(old_pred_valid == true_valid);
}

// Walks the entries of deep_diff(prev, truth) and asks, per entry, whether
// `pred` moved toward the truth. Entries that are not plain value changes
// always count against. An empty diff scores 0.
inline double odrs(const Value& prev, const Value& truth, const Value& pred) {
  auto diff = doc::deep_diff(prev, truth);
  if (diff.empty()) return 0.0;
  int score = 0;
  for (const auto& d : diff) {
    if (d.kind != doc::DiffKind::values_changed) {
      score -= 1;
      continue;
    }
    const Value& val = *d.new_value;
    auto at = doc::resolve(pred, d.path);
    if (!at) {
      score -= 1;
      continue;
    }
    const Value& guess = *at.value;
    if (val.is_number() && d.old_value->is_number()) {
      if (!guess.is_number()) {
        score -= 1;
        continue;
      }
      double v = val.as_number();
      score += std::fabs(v - guess.as_number()) <= std::fabs(v - d.old_value->as_number()) ? 1 : -1;
    } else {
      score += guess == val ? 1 : -1;
    }
  }
  return static_cast<double>(score) / static_cast<double>(diff.size());
}

// Predictions of one program over a record set; a fault is kept as nullopt.
struct Baseline {
  std::vector<std::optional<program::Prediction>> predictions;
};

inline Baseline baseline(const TransitionProgram& prog, std::span<const TransitionRecord> records,
                         std::size_t budget = script::default_step_budget) {
  Baseline b;
  b.predictions.reserve(records.size());
  for (const auto& r : records) b.predictions.push_back(program::try_evaluate(prog, r, budget).prediction);
  return b;
}

namespace detail {

inline FunctionDef compiled_function(const FunctionDef& f) {
  if (f.compiled) return f;
  try {
    return FunctionDef::make(f.id, f.kind, f.action_name, f.body, f.description);
  } catch (const script::ScriptError& e) {
    throw ScoringError("candidate '" + f.id + "' does not compile: " + e.what());
  }
}

inline TransitionProgram candidate_program(const Refinement& candidate, const TransitionProgram& prog) {
  Refinement r = candidate;
  if (r.new_function) r.new_function = compiled_function(*r.new_function);
  try {
    return program::apply_refinement(prog, r);
  } catch (const program::ProgramError& e) {
    throw ScoringError(std::string("candidate does not apply: ") + e.what());
  }
}

}  // namespace detail

// Mean per-transition score of `candidate` against `prog`. Precondition edits
// score by PERS, action and dynamic edits by the ODRS difference. A faulting
// candidate scores -1 on that transition; a faulting old program counts as
// wrong (PERS) or as ODRS -1.
inline double refinement_score(const Refinement& candidate, const TransitionProgram& prog,
                               std::span<const TransitionRecord> records, const Baseline& old,
                               std::size_t budget = script::default_step_budget) {
  if (records.empty()) return 0.0;
  if (old.predictions.size() != records.size()) throw ScoringError("baseline does not match the record set");
  TransitionProgram next = detail::candidate_program(candidate, prog);
  program::FunctionKind kind;
  try {
    kind = program::refinement_kind(candidate, prog);
  } catch (const program::ProgramError& e) {
    throw ScoringError(e.what());
  }
  double total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto fresh = program::try_evaluate(next, r, budget);
    if (fresh.fault) {
      total -= 1;
      continue;
    }
    const auto& before = old.predictions[i];
    if (kind == program::FunctionKind::precondition) {
      bool old_right = before && before->valid == r.valid;
      total += int(fresh.prediction->valid == r.valid) - int(old_right);
    } else {
      double was = before ? odrs(r.prev_det, r.next_det, before->det) : -1.0;
      total += odrs(r.prev_det, r.next_det, fresh.prediction->det) - was;
    }
  }
  return total / static_cast<double>(records.size());
}

inline double refinement_score(const Refinement& candidate, const TransitionProgram& prog,
                               std::span<const TransitionRecord> records,
                               std::size_t budget = script::default_step_budget) {
  return refinement_score(candidate, prog, records, baseline(prog, records, budget), budget);
}

// Records the program mispredicts (any error kind, faults included).
inline std::size_t error_count(const TransitionProgram& prog, std::span<const TransitionRecord> records,
                               std::size_t budget = script::default_step_budget) {
  std::size_t n = 0;
  for (const auto& r : records)
    if (program::classify_error(program::try_evaluate(prog, r, budget), r)) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Proposal seam

struct RefineContext {
  std::size_t transition_index = 0;
  ErrorKind error_kind = ErrorKind::observation;
  std::string detail;
  Value action;
  Value prev_det;
  Value prev_sto;
  Value true_det;
  bool true_valid = true;
  Value pred_det;  // null when the program faulted
  bool pred_valid = true;
  std::string feedback;
  std::vector<doc::DiffEntry> diff;  // prediction -> truth
  std::vector<FunctionDef> functions;
  std::string environment_doc;
};

inline Value to_value(const RefineContext& c) {
  doc::Array diff, fns;
  for (const auto& d : c.diff) diff.push_back(doc::to_value(d));
  for (const auto& f : c.functions) fns.push_back(program::to_value(f));
  return Value::object({{"transition_index", c.transition_index},
                        {"error_kind", std::string(program::error_kind_name(c.error_kind))},
                        {"detail", c.detail},
                        {"action", c.action},
                        {"prev_det", c.prev_det},
                        {"prev_sto", c.prev_sto},
                        {"true_det", c.true_det},
                        {"true_valid", c.true_valid},
                        {"pred_det", c.pred_det},
                        {"pred_valid", c.pred_valid},
                        {"feedback", c.feedback},
                        {"diff", Value(std::move(diff))},
                        {"functions", Value(std::move(fns))},
                        {"environment_doc", c.environment_doc}});
}

class ProposalProvider {
 public:
  virtual ~ProposalProvider() = default;
  // Up to k candidate single-function edits. Throwing marks the transition as
  // skipped; the loop carries on.
  virtual std::vector<Refinement> propose_refinements(const RefineContext& context, int k) = 0;
};

// ---------------------------------------------------------------------------
// The loop

struct CandidateLog {
  std::string op;
  std::string function_id;
  std::optional<double> score;  // on the current transition
  std::optional<double> vs;     // on the validation set
  bool accepted = false;
  std::string error;
};

struct StepLog {
  std::size_t transition_index = 0;
  ErrorKind error_kind = ErrorKind::observation;
  std::vector<CandidateLog> candidates;
  std::optional<std::string> applied_id;
  std::optional<std::size_t> val_errors;  // validation errors after the accepted edit
  std::string skipped;                    // oracle failure text
};

struct RefinementLog {
  std::size_t initial_val_errors = 0;
  std::vector<StepLog> steps;
  std::size_t accepted() const {
    return static_cast<std::size_t>(
        std::count_if(steps.begin(), steps.end(), [](const StepLog& s) { return s.applied_id.has_value(); }));
  }
};

inline Value to_value(const StepLog& s) {
  doc::Array cands;
  for (const auto& c : s.candidates) {
    Value v = Value::object({{"op", c.op}, {"function_id", c.function_id}, {"accepted", c.accepted}});
    v["score"] = c.score ? Value(*c.score) : Value();
    v["vs"] = c.vs ? Value(*c.vs) : Value();
    if (!c.error.empty()) v["error"] = c.error;
    cands.push_back(std::move(v));
  }
  Value v = Value::object({{"transition_index", s.transition_index},
                           {"error_kind", std::string(program::error_kind_name(s.error_kind))},
                           {"candidates", Value(std::move(cands))}});
  v["applied_id"] = s.applied_id ? Value(*s.applied_id) : Value();
  if (s.val_errors) v["val_errors"] = *s.val_errors;
  if (!s.skipped.empty()) v["skipped"] = s.skipped;
  return v;
}

inline void write_log(std::ostream& out, const RefinementLog& log) {
  for (const auto& s : log.steps) out << doc::dump(to_value(s)) << '\n';
}

inline std::string touched_id(const Refinement& r) {
  if (r.new_function) return r.new_function->id;
  return r.target_id.value_or("");
}

inline RefineContext make_context(const TransitionProgram& prog, const TransitionRecord& r, std::size_t index,
                                  const program::Outcome& out, const program::PredictionError& err,
                                  const std::string& environment_doc) {
  RefineContext c;
  c.transition_index = index;
  c.error_kind = err.kind;
  c.detail = err.detail;
  c.action = r.action;
  c.prev_det = r.prev_det;
  c.prev_sto = r.prev_sto;
  c.true_det = r.next_det;
  c.true_valid = r.valid;
  if (out.prediction) {
    c.pred_det = out.prediction->det;
    c.pred_valid = out.prediction->valid;
    c.feedback = out.prediction->feedback;
  }
  c.diff = err.diff;
  for (const FunctionDef* f : prog.relevant(action_name(r.action))) c.functions.push_back(*f);
  c.environment_doc = environment_doc;
  return c;
}

struct RefineResult {
  TransitionProgram program;
  RefinementLog log;
};

// One pass over `train`. For each transition the current program gets wrong,
// ask for k candidates; keep those whose validation score clears the gate and
// apply the one scoring best on the transition itself (earliest on ties).
inline RefineResult refine(TransitionProgram prog, std::span<const TransitionRecord> train,
                           std::span<const TransitionRecord> val, ProposalProvider& provider,
                           const RefineConfig& cfg, const std::string& environment_doc = {}) {
  if (cfg.k_candidates < 1) throw std::invalid_argument("k_candidates must be at least 1");
  RefinementLog log;
  log.initial_val_errors = error_count(prog, val, cfg.step_budget);
  Baseline val_base = baseline(prog, val, cfg.step_budget);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& rec = train[i];
    auto out = program::try_evaluate(prog, rec, cfg.step_budget);
    auto err = program::classify_error(out, rec);
    if (!err) continue;

    StepLog step;
    step.transition_index = i;
    step.error_kind = err->kind;
    std::vector<Refinement> cands;
    try {
      cands = provider.propose_refinements(make_context(prog, rec, i, out, *err, environment_doc), cfg.k_candidates);
    } catch (const std::exception& e) {
      step.skipped = e.what();
      log.steps.push_back(std::move(step));
      continue;
    }
    if (cands.size() > static_cast<std::size_t>(cfg.k_candidates)) cands.resize(cfg.k_candidates);

    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < cands.size(); ++j) {
      CandidateLog c;
      c.op = std::string(program::refinement_op_name(cands[j].op));
      c.function_id = touched_id(cands[j]);
      try {
        c.score = refinement_score(cands[j], prog, std::span(&rec, 1), cfg.step_budget);
        c.vs = refinement_score(cands[j], prog, val, val_base, cfg.step_budget);
      } catch (const ScoringError& e) {
        c.error = e.what();
      }
      if (c.vs && *c.vs > cfg.vs_threshold && (!best || *c.score > *step.candidates[*best].score)) best = j;
      step.candidates.push_back(std::move(c));
    }
    if (best) {
      prog = detail::candidate_program(cands[*best], prog);
      step.candidates[*best].accepted = true;
      step.applied_id = step.candidates[*best].function_id;
      step.val_errors = error_count(prog, val, cfg.step_budget);
      val_base = baseline(prog, val, cfg.step_budget);
    }
    log.steps.push_back(std::move(step));
  }
  return {std::move(prog), std::move(log)};
}

// ---------------------------------------------------------------------------
// Data selection

// Draws n records with the requested share of σ=true, without replacement.
// When one class runs short the other fills the gap. Output keeps the input
// order.
inline std::vector<std::size_t> stratified_indices(std::span<const TransitionRecord> records, std::size_t n,
                                                   double valid_fraction, std::uint64_t seed,
                                                   const std::vector<bool>* exclude = nullptr) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (exclude && (*exclude)[i]) continue;
    (records[i].valid ? pos : neg).push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  n = std::min(n, pos.size() + neg.size());
  std::size_t want_pos = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n)));
  std::size_t take_pos = std::min(want_pos, pos.size());
  std::size_t take_neg = std::min(n - take_pos, neg.size());
  take_pos = std::min(n - take_neg, pos.size());
  std::vector<std::size_t> out(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(take_pos));
  out.insert(out.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(take_neg));
  std::sort(out.begin(), out.end());
  return out;
}

struct RefineSplit {
  std::vector<TransitionRecord> train;
  std::vector<TransitionRecord> val;
};

// Stratified train set, then a uniformly drawn validation set from the
// records not already in train.
inline RefineSplit make_split(std::span<const TransitionRecord> records, const RefineConfig& cfg) {
  auto train_idx = stratified_indices(records, cfg.train_set_size, cfg.train_valid_fraction, cfg.seed);
  std::vector<bool> used(records.size(), false);
  for (auto i : train_idx) used[i] = true;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!used[i]) rest.push_back(i);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(std::min(rest.size(), cfg.validation_set_size));
  std::sort(rest.begin(), rest.end());
  RefineSplit s;
  for (auto i : train_idx) s.train.push_back(records[i]);
  for (auto i : rest) s.val.push_back(records[i]);
  return s;
}

}  // namespace hwm::refine
