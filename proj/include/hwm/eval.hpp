#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hwm/cpd.hpp"
#include "hwm/planner.hpp"
#include "hwm/program.hpp"
#include "hwm/schema.hpp"

// Transition-prediction and planning metrics, with JSON and text renderings.
namespace hwm::eval {

using doc::Value;

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Primitive metrics

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  void add(bool truth, bool pred) {
    if (truth && pred) ++tp;
    else if (!truth && pred) ++fp;
    else if (!truth && !pred) ++tn;
    else ++fn;
  }
  std::size_t total() const { return tp + fp + tn + fn; }
  double accuracy() const { return total() ? double(tp + tn) / double(total()) : 0.0; }
  // F1 of the positive class; 0 when there are no true or predicted positives.
  double f1() const { return tp ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0; }
};

// RMSE after min-max scaling by the range of `truth`. With a zero range each
// record scores 0 if exact and 1 otherwise. Missing predictions score 1.
inline double scaled_rmse(std::span<const double> truth, std::span<const std::optional<double>> pred) {
  if (truth.size() != pred.size()) throw EvalError("scaled_rmse: size mismatch");
  if (truth.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(truth.begin(), truth.end());
  double span = *hi - *lo;
  double sum = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    double e;
    if (!pred[i]) e = 1;
    else if (span > 0) e = (*pred[i] - truth[i]) / span;
    else e = *pred[i] == truth[i] ? 0.0 : 1.0;
    sum += e * e;
  }
  return std::sqrt(sum / double(truth.size()));
}

// ---------------------------------------------------------------------------
// Transition metrics

struct TransitionEvalConfig {
  std::uint64_t seed = 0;
  int mean_samples = 10;  // for the sample-mean variant of stochastic scores
  std::size_t step_budget = script::default_step_budget;
};

struct VariableMetric {
  std::string name;
  Stream stream = Stream::deterministic;
  bool categorical = false;
  double score = 0;                     // accuracy (categorical) or scaled RMSE
  std::optional<double> score_mean;     // stochastic numeric: RMSE of the sample mean
  double invalid_rate = 0;
};

struct TransitionReport {
  std::size_t records = 0;
  std::size_t faults = 0;
  std::vector<VariableMetric> variables;
  std::optional<double> cat_acc_det, num_rmse_det, inv_det;
  std::optional<double> cat_acc_sto, num_rmse_sto, num_rmse_sto_mean, inv_sto;
  double sigma_acc = 0;
  double sigma_f1 = 0;
  double mean_predict_ms = 0;  // wall time, excluded from reproducibility checks
};

namespace detail {

inline std::optional<double> mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  double s = 0;
  for (double x : xs) s += x;
  return s / double(xs.size());
}

inline bool violates(const Value* v, const VariableSpec& spec) { return validate_value(v, spec).has_value(); }

}  // namespace detail

// Scores `program` (deterministic side and σ) and, when given, `cpds`
// (stochastic side) on `test`. Stochastic variables use one seeded sample per
// record; a second score uses the mean of `mean_samples` samples.
inline TransitionReport transition_metrics(const program::TransitionProgram& program, const cpd::CpdModel* cpds,
                                           std::span<const TransitionRecord> test, const ObservationSchema& schema,
                                           const TransitionEvalConfig& cfg = {}) {
  if (test.empty()) throw EvalError("empty test set");
  TransitionReport rep;
  rep.records = test.size();
  const std::size_t n = test.size();

  std::vector<std::optional<Value>> det(n), sto(n);
  std::vector<std::optional<Value>> sto_mean(n);
  Confusion sigma;
  double elapsed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = test[i];
    auto t0 = std::chrono::steady_clock::now();
    auto out = program::try_evaluate(program, r, cfg.step_budget);
    if (out.prediction) {
      det[i] = out.prediction->det;
      if (cpds) {
        std::mt19937_64 rng(mix_seed(cfg.seed, i));
        try {
          sto[i] = cpd::sample_joint(*cpds, r.prev_sto, r.action, out.prediction->valid, out.prediction->det,
                                     r.prev_det, rng);
          Value acc = Value::object();
          for (int k = 0; k < cfg.mean_samples; ++k) {
            Value s = k == 0 ? *sto[i]
                             : cpd::sample_joint(*cpds, r.prev_sto, r.action, out.prediction->valid,
                                                 out.prediction->det, r.prev_det, rng);
            for (const auto& [key, v] : s.as_object())
              if (v.is_number()) acc[key] = acc.number_or(key, 0.0) + v.as_number() / cfg.mean_samples;
          }
          sto_mean[i] = std::move(acc);
        } catch (const std::exception&) {
          sto[i].reset();
        }
      }
    } else {
      ++rep.faults;
    }
    elapsed += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    sigma.add(r.valid, out.prediction ? out.prediction->valid : !r.valid);
  }
  rep.mean_predict_ms = elapsed / double(n);
  rep.sigma_acc = sigma.accuracy();
  rep.sigma_f1 = sigma.f1();

  std::vector<double> cat_d, num_d, inv_d, cat_s, num_s, num_s_mean, inv_s;
  for (const auto& spec : schema.variables()) {
    bool is_det = spec.stream == Stream::deterministic;
    if (!is_det && !cpds) continue;
    const auto& preds = is_det ? det : sto;
    VariableMetric m{spec.name, spec.stream, spec.categorical(), 0, std::nullopt, 0};
    std::size_t invalid = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Value* v = preds[i] ? preds[i]->find(spec.name) : nullptr;
      invalid += !v || detail::violates(v, spec);
    }
    m.invalid_rate = double(invalid) / double(n);
    if (spec.categorical()) {
      std::size_t right = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const Value& truth = (is_det ? test[i].next_det : test[i].next_sto).at(spec.name);
        const Value* v = preds[i] ? preds[i]->find(spec.name) : nullptr;
        right += v && *v == truth;
      }
      m.score = double(right) / double(n);
      (is_det ? cat_d : cat_s).push_back(m.score);
    } else {
      std::vector<double> truth(n);
      std::vector<std::optional<double>> p(n), pm(n);
      for (std::size_t i = 0; i < n; ++i) {
        truth[i] = (is_det ? test[i].next_det : test[i].next_sto).at(spec.name).as_number();
        const Value* v = preds[i] ? preds[i]->find(spec.name) : nullptr;
        if (v && v->is_number()) p[i] = v->as_number();
        if (!is_det && sto_mean[i])
          if (const Value* w = sto_mean[i]->find(spec.name); w && w->is_number()) pm[i] = w->as_number();
      }
      m.score = scaled_rmse(truth, p);
      (is_det ? num_d : num_s).push_back(m.score);
      if (!is_det) {
        m.score_mean = scaled_rmse(truth, pm);
        num_s_mean.push_back(*m.score_mean);
      }
    }
    (is_det ? inv_d : inv_s).push_back(m.invalid_rate);
    rep.variables.push_back(std::move(m));
  }
  rep.cat_acc_det = detail::mean_of(cat_d);
  rep.num_rmse_det = detail::mean_of(num_d);
  rep.inv_det = detail::mean_of(inv_d);
  rep.cat_acc_sto = detail::mean_of(cat_s);
  rep.num_rmse_sto = detail::mean_of(num_s);
  rep.num_rmse_sto_mean = detail::mean_of(num_s_mean);
  rep.inv_sto = detail::mean_of(inv_s);
  return rep;
}

inline Value to_value(const TransitionReport& r, bool with_timing = true) {
  auto opt = [](const std::optional<double>& x) { return x ? Value(*x) : Value(); };
  doc::Array vars;
  for (const auto& v : r.variables) {
    Value e = Value::object({{"name", v.name},
                             {"stream", std::string(stream_name(v.stream))},
                             {"metric", v.categorical ? "accuracy" : "scaled_rmse"},
                             {"score", v.score},
                             {"invalid_rate", v.invalid_rate}});
    if (v.score_mean) e["score_sample_mean"] = *v.score_mean;
    vars.push_back(std::move(e));
  }
  Value out = Value::object({{"records", r.records},
                             {"faults", r.faults},
                             {"variables", Value(std::move(vars))},
                             {"cat_acc_det", opt(r.cat_acc_det)},
                             {"num_rmse_det", opt(r.num_rmse_det)},
                             {"inv_det", opt(r.inv_det)},
                             {"cat_acc_sto", opt(r.cat_acc_sto)},
                             {"num_rmse_sto", opt(r.num_rmse_sto)},
                             {"num_rmse_sto_sample_mean", opt(r.num_rmse_sto_mean)},
                             {"inv_sto", opt(r.inv_sto)},
                             {"sigma_acc", r.sigma_acc},
                             {"sigma_f1", r.sigma_f1}});
  if (with_timing) out["mean_predict_ms"] = r.mean_predict_ms;
  return out;
}

// ---------------------------------------------------------------------------
// Planning metrics

inline const std::vector<int>& survival_days() {
  static const std::vector<int> d{10, 20, 30, 40, 50};
  return d;
}

struct PlanningReport {
  std::size_t episodes = 0;
  double mean = 0;
  double ci_low = 0, ci_high = 0;  // 95% normal approximation
  bool ci_degenerate = false;      // fewer than two episodes
  std::map<int, double> survival;  // day -> fraction with money >= 0 throughout
};

inline PlanningReport planning_metrics(std::span<const plan::EpisodeLog> episodes) {
  if (episodes.empty()) throw EvalError("no episodes");
  PlanningReport r;
  r.episodes = episodes.size();
  double n = double(episodes.size());
  for (const auto& e : episodes) r.mean += e.final_money / n;
  if (episodes.size() < 2) {
    r.ci_degenerate = true;
    r.ci_low = r.ci_high = r.mean;
  } else {
    double ss = 0;
    for (const auto& e : episodes) ss += (e.final_money - r.mean) * (e.final_money - r.mean);
    double half = 1.959963984540054 * std::sqrt(ss / (n - 1)) / std::sqrt(n);
    r.ci_low = r.mean - half;
    r.ci_high = r.mean + half;
  }
  for (int d : survival_days()) {
    std::size_t alive = 0;
    for (const auto& e : episodes) alive += e.survived(d);
    r.survival[d] = double(alive) / n;
  }
  return r;
}

// Non-overlapping 95% intervals with `a` above `b`.
inline bool clearly_above(const PlanningReport& a, const PlanningReport& b) { return a.ci_low > b.ci_high; }

inline Value to_value(const PlanningReport& r) {
  Value surv = Value::object();
  for (const auto& [d, s] : r.survival) surv[std::to_string(d)] = s;
  return Value::object({{"episodes", r.episodes},
                        {"mean_final_budget", r.mean},
                        {"ci95", Value::array({r.ci_low, r.ci_high})},
                        {"ci_degenerate", r.ci_degenerate},
                        {"survival", surv}});
}

// ---------------------------------------------------------------------------
// Text tables

namespace detail {
inline std::string fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}
inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}
}  // namespace detail

// Budget after the episode and survival per checkpoint, one row per agent.
inline std::string render_planning(const std::vector<std::pair<std::string, PlanningReport>>& rows) {
  std::ostringstream os;
  std::size_t w = 6;
  for (const auto& [name, _] : rows) w = std::max(w, name.size());
  os << detail::pad("agent", w) << "  budget (mean +/- 95% CI)";
  for (int d : survival_days()) os << "  surv@" << d;
  os << "\n";
  for (const auto& [name, r] : rows) {
    std::string budget = detail::fixed(r.mean, 1) + " +/- " + detail::fixed((r.ci_high - r.ci_low) / 2, 1);
    if (r.ci_degenerate) budget += " (n=1)";
    os << detail::pad(name, w) << "  " << detail::pad(budget, 24);
    for (int d : survival_days()) os << "  " << detail::pad(detail::fixed(100 * r.survival.at(d), 0) + "%", 7);
    os << "\n";
  }
  return os.str();
}

inline std::string render_transition(const TransitionReport& r) {
  auto cell = [](const std::optional<double>& x) { return x ? detail::fixed(*x, 3) : std::string("-"); };
  std::ostringstream os;
  os << "stream         cat_acc  num_rmse  inv\n";
  os << "deterministic  " << detail::pad(cell(r.cat_acc_det), 7) << "  " << detail::pad(cell(r.num_rmse_det), 8) << "  "
     << cell(r.inv_det) << "\n";
  os << "stochastic     " << detail::pad(cell(r.cat_acc_sto), 7) << "  " << detail::pad(cell(r.num_rmse_sto), 8) << "  "
     << cell(r.inv_sto) << "\n";
  if (r.num_rmse_sto_mean) os << "stochastic num_rmse of the sample mean: " << cell(r.num_rmse_sto_mean) << "\n";
  os << "sigma accuracy " << detail::fixed(r.sigma_acc, 3) << ", F1 " << detail::fixed(r.sigma_f1, 3) << "\n";
  os << "variable         metric       score   invalid\n";
  for (const auto& v : r.variables)
    os << detail::pad(v.name, 16) << " " << detail::pad(v.categorical ? "accuracy" : "scaled_rmse", 12) << " "
       << detail::pad(detail::fixed(v.score, 3), 7) << " " << detail::fixed(v.invalid_rate, 3) << "\n";
  return os.str();
}

}  // namespace hwm::eval
