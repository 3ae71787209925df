#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hwm/dag.hpp"
#include "hwm/doc/value.hpp"
#include "hwm/schema.hpp"
#include "hwm/util.hpp"

namespace hwm::cpd {

using doc::Value;
using Eigen::MatrixXd;
using Eigen::VectorXd;

class CpdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t n_quantiles = 10;
inline constexpr std::array<double, n_quantiles> tau_grid = {0.05, 0.15, 0.25, 0.35, 0.45,
                                                             0.55, 0.65, 0.75, 0.85, 0.95};
inline constexpr double log_prob_floor = -30.0;

inline double pinball_loss(double tau, double y, double yhat) {
  double e = y - yhat;
  return std::max(tau * e, (tau - 1) * e);
}

// ---------------------------------------------------------------------------
// Network: in -> hidden -> hidden -> out, rectifier activations, all
// parameters in one flat vector so optimizers and gradient checks see a
// single buffer.

class Mlp {
 public:
  Mlp() = default;
  Mlp(int in, int hidden, int out) : in_(in), hidden_(hidden), out_(out), theta_(VectorXd::Zero(count(in, hidden, out))) {}

  static Eigen::Index count(int in, int hidden, int out) {
    return Eigen::Index(hidden) * in + hidden + Eigen::Index(hidden) * hidden + hidden + Eigen::Index(out) * hidden +
           out;
  }

  // He-uniform weights, zero biases.
  void init(std::mt19937_64& rng) {
    theta_.setZero();
    auto fill = [&](Eigen::Index off, int rows, int cols) {
      double a = std::sqrt(6.0 / cols);
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index i = 0; i < Eigen::Index(rows) * cols; ++i) theta_[off + i] = u(rng);
    };
    fill(o_w1(), hidden_, in_);
    fill(o_w2(), hidden_, hidden_);
    fill(o_w3(), out_, hidden_);
  }

  int inputs() const { return in_; }
  int hidden() const { return hidden_; }
  int outputs() const { return out_; }
  VectorXd& params() { return theta_; }
  const VectorXd& params() const { return theta_; }

  // X is inputs x batch; result is outputs x batch.
  MatrixXd forward(const MatrixXd& X) const {
    MatrixXd h1 = ((w1() * X).colwise() + b1()).cwiseMax(0.0);
    MatrixXd h2 = ((w2() * h1).colwise() + b2()).cwiseMax(0.0);
    return (w3() * h2).colwise() + b3();
  }

  // Gradient of sum(dY .* forward(X)) with respect to the parameters.
  void backward(const MatrixXd& X, const MatrixXd& dY, VectorXd& grad) const {
    MatrixXd z1 = (w1() * X).colwise() + b1();
    MatrixXd h1 = z1.cwiseMax(0.0);
    MatrixXd z2 = (w2() * h1).colwise() + b2();
    MatrixXd h2 = z2.cwiseMax(0.0);
    grad.resize(theta_.size());
    map(grad, o_w3(), out_, hidden_) = dY * h2.transpose();
    grad.segment(o_b3(), out_) = dY.rowwise().sum();
    MatrixXd d2 = (w3().transpose() * dY).cwiseProduct((z2.array() > 0).cast<double>().matrix());
    map(grad, o_w2(), hidden_, hidden_) = d2 * h1.transpose();
    grad.segment(o_b2(), hidden_) = d2.rowwise().sum();
    MatrixXd d1 = (w2().transpose() * d2).cwiseProduct((z1.array() > 0).cast<double>().matrix());
    map(grad, o_w1(), hidden_, in_) = d1 * X.transpose();
    grad.segment(o_b1(), hidden_) = d1.rowwise().sum();
  }

 private:
  Eigen::Index o_w1() const { return 0; }
  Eigen::Index o_b1() const { return o_w1() + Eigen::Index(hidden_) * in_; }
  Eigen::Index o_w2() const { return o_b1() + hidden_; }
  Eigen::Index o_b2() const { return o_w2() + Eigen::Index(hidden_) * hidden_; }
  Eigen::Index o_w3() const { return o_b2() + hidden_; }
  Eigen::Index o_b3() const { return o_w3() + Eigen::Index(out_) * hidden_; }

  static Eigen::Map<MatrixXd> map(VectorXd& v, Eigen::Index off, int r, int c) { return {v.data() + off, r, c}; }
  Eigen::Map<const MatrixXd> cmap(Eigen::Index off, int r, int c) const { return {theta_.data() + off, r, c}; }
  Eigen::Map<const MatrixXd> w1() const { return cmap(o_w1(), hidden_, in_); }
  Eigen::Map<const MatrixXd> w2() const { return cmap(o_w2(), hidden_, hidden_); }
  Eigen::Map<const MatrixXd> w3() const { return cmap(o_w3(), out_, hidden_); }
  Eigen::Map<const VectorXd> b1() const { return {theta_.data() + o_b1(), hidden_}; }
  Eigen::Map<const VectorXd> b2() const { return {theta_.data() + o_b2(), hidden_}; }
  Eigen::Map<const VectorXd> b3() const { return {theta_.data() + o_b3(), out_}; }

  int in_ = 0, hidden_ = 0, out_ = 0;
  VectorXd theta_;
};

// Mean over the batch of the pinball loss summed over the grid. Y is
// n_quantiles x batch, y has one target per column.
inline double quantile_loss(const MatrixXd& Y, const Eigen::RowVectorXd& y, MatrixXd* dY = nullptr) {
  const double n = static_cast<double>(Y.cols());
  double loss = 0;
  if (dY) dY->resize(Y.rows(), Y.cols());
  for (Eigen::Index b = 0; b < Y.cols(); ++b) {
    for (Eigen::Index k = 0; k < Y.rows(); ++k) {
      double tau = tau_grid[static_cast<std::size_t>(k)];
      double e = y[b] - Y(k, b);
      loss += pinball_loss(tau, y[b], Y(k, b));
      if (dY) (*dY)(k, b) = (e > 0 ? -tau : (e < 0 ? 1 - tau : 0.0)) / n;
    }
  }
  return loss / n;
}

// Mean cross-entropy of softmax(logits) against integer labels.
inline double cross_entropy(const MatrixXd& logits, std::span<const int> labels, MatrixXd* dY = nullptr) {
  const double n = static_cast<double>(logits.cols());
  double loss = 0;
  if (dY) dY->resize(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    double m = logits.col(b).maxCoeff();
    VectorXd e = (logits.col(b).array() - m).exp();
    double z = e.sum();
    loss -= logits(labels[b], b) - m - std::log(z);
    if (dY) {
      dY->col(b) = e / z / n;
      (*dY)(labels[b], b) -= 1.0 / n;
    }
  }
  return loss / n;
}

inline VectorXd softmax(const VectorXd& logits) {
  VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

// ---------------------------------------------------------------------------
// Conditioning and feature encoding

// Everything a node's distribution may depend on: already-sampled same-step
// stochastic values, the previous stochastic values, the action and its
// validity, and the deterministic state on both sides of the step.
struct Conditioning {
  const Value* now_sto = nullptr;
  const Value* prev_sto = nullptr;
  const Value* prev_det = nullptr;
  const Value* next_det = nullptr;
  const Value* action = nullptr;
  bool valid = true;

  static Conditioning of(const TransitionRecord& r) {
    return {&r.next_sto, &r.prev_sto, &r.prev_det, &r.next_det, &r.action, r.valid};
  }
};

enum class Source { parent, prev_sto, prev_det, next_det, action_name, action_field, valid };

inline std::string_view source_name(Source s) {
  switch (s) {
    case Source::parent: return "parent";
    case Source::prev_sto: return "prev_sto";
    case Source::prev_det: return "prev_det";
    case Source::next_det: return "next_det";
    case Source::action_name: return "action_name";
    case Source::action_field: return "action_field";
    case Source::valid: return "valid";
  }
  return "?";
}

inline Source source_from(std::string_view s) {
  for (auto x : {Source::parent, Source::prev_sto, Source::prev_det, Source::next_det, Source::action_name,
                 Source::action_field, Source::valid})
    if (source_name(x) == s) return x;
  throw CpdError("unknown feature source '" + std::string(s) + "'");
}

// One input column. Categorical variables expand to one column per level;
// numerical columns are min-max scaled with training bounds and clamped.
struct Column {
  Source source = Source::valid;
  std::string var;    // variable, action name (action_name / action_field)
  std::string field;  // action field, or categorical level
  bool one_hot = false;
  double lo = 0, hi = 1;
};

class FeatureEncoding {
 public:
  FeatureEncoding() = default;
  explicit FeatureEncoding(std::vector<Column> cols) : cols_(std::move(cols)) {}

  // Columns for a node with the given parents; bounds come from `records`.
  static FeatureEncoding build(const ObservationSchema& schema, const std::vector<std::string>& parents,
                               std::span<const TransitionRecord> records) {
    std::vector<Column> cols;
    auto add_var = [&](Source src, const VariableSpec& spec) {
      if (spec.categorical()) {
        for (const auto& level : spec.as_categorical().levels) cols.push_back({src, spec.name, level, true});
      } else {
        cols.push_back({src, spec.name, "", false});
      }
    };
    for (const auto& p : parents) add_var(Source::parent, schema.at(p));
    for (const auto& v : schema.variables())
      if (v.stream == Stream::stochastic) add_var(Source::prev_sto, v);
    for (const auto& v : schema.variables())
      if (v.stream == Stream::deterministic) {
        add_var(Source::prev_det, v);
        add_var(Source::next_det, v);
      }
    std::vector<std::string> names;
    for (const auto& a : schema.actions()) names.push_back(a.name);
    if (names.empty()) {
      std::set<std::string> seen;
      for (const auto& r : records) seen.insert(action_name(r.action));
      names.assign(seen.begin(), seen.end());
    }
    if (names.size() > 1)
      for (const auto& n : names) cols.push_back({Source::action_name, n, "", true});
    for (const auto& a : schema.actions())
      for (const auto& f : a.fields) cols.push_back({Source::action_field, a.name, f.name, false});
    cols.push_back({Source::valid, "", "", false});

    FeatureEncoding enc(std::move(cols));
    enc.fit_bounds(records);
    return enc;
  }

  const std::vector<Column>& columns() const { return cols_; }
  int width() const { return static_cast<int>(cols_.size()); }
  std::size_t unseen_levels() const { return unseen_; }

  void encode_into(const Conditioning& c, double* out) const {
    for (std::size_t i = 0; i < cols_.size(); ++i) {
      const Column& col = cols_[i];
      std::optional<double> raw;
      if (col.source == Source::valid) {
        out[i] = c.valid ? 1.0 : 0.0;
        continue;
      }
      if (col.source == Source::action_name) {
        out[i] = (c.action && c.action->find("name") && c.action->at("name").as_text() == col.var) ? 1.0 : 0.0;
        continue;
      }
      const Value* v = lookup(col, c);
      if (col.one_hot) {
        if (v && v->is_text()) {
          out[i] = v->as_text() == col.field ? 1.0 : 0.0;
          if (out[i] == 0.0 && !known_level(col, v->as_text())) ++unseen_;
        } else {
          out[i] = 0.0;
        }
        continue;
      }
      if (v && v->is_number()) raw = v->as_number();
      else if (v && v->is_bool()) raw = v->as_bool() ? 1.0 : 0.0;
      out[i] = raw ? scale(col, *raw) : 0.0;
    }
  }

  VectorXd encode(const Conditioning& c) const {
    VectorXd x(width());
    encode_into(c, x.data());
    return x;
  }

  MatrixXd encode(std::span<const TransitionRecord> records) const {
    MatrixXd X(width(), static_cast<Eigen::Index>(records.size()));
    for (std::size_t j = 0; j < records.size(); ++j)
      encode_into(Conditioning::of(records[j]), X.col(static_cast<Eigen::Index>(j)).data());
    return X;
  }

 private:
  static double scale(const Column& col, double raw) {
    if (col.hi <= col.lo) return 0.0;
    return std::clamp((raw - col.lo) / (col.hi - col.lo), 0.0, 1.0);
  }

  static const Value* lookup(const Column& col, const Conditioning& c) {
    switch (col.source) {
      case Source::parent: {
        const Value* v = c.now_sto ? c.now_sto->find(col.var) : nullptr;
        if (!v && c.next_det) v = c.next_det->find(col.var);
        return v;
      }
      case Source::prev_sto: return c.prev_sto ? c.prev_sto->find(col.var) : nullptr;
      case Source::prev_det: return c.prev_det ? c.prev_det->find(col.var) : nullptr;
      case Source::next_det: return c.next_det ? c.next_det->find(col.var) : nullptr;
      case Source::action_field:
        if (!c.action || !c.action->find("name") || c.action->at("name").as_text() != col.var) return nullptr;
        return c.action->find(col.field);
      default: return nullptr;
    }
  }

  bool known_level(const Column& col, const std::string& level) const {
    for (const auto& o : cols_)
      if (o.one_hot && o.source == col.source && o.var == col.var && o.field == level) return true;
    return false;
  }

  void fit_bounds(std::span<const TransitionRecord> records) {
    for (auto& col : cols_) {
      if (col.one_hot || col.source == Source::valid || col.source == Source::action_name) continue;
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& r : records) {
        const Value* v = lookup(col, Conditioning::of(r));
        if (v && v->is_number()) {
          lo = std::min(lo, v->as_number());
          hi = std::max(hi, v->as_number());
        }
      }
      if (lo > hi) lo = hi = 0;
      col.lo = lo;
      col.hi = hi;
    }
  }

  std::vector<Column> cols_;
  mutable std::size_t unseen_ = 0;
};

// ---------------------------------------------------------------------------
// Node models

enum class TargetMode { automatic, level, delta };

struct FitHyper {
  int hidden = 32;
  int epochs = 200;
  int batch = 64;
  double lr = 1e-3;
  double lr_final = 1e-5;  // cosine decay target
  TargetMode target = TargetMode::automatic;
  std::uint64_t seed = 0;
};

class NodeModel {
 public:
  std::string node;
  std::vector<std::string> parents;
  bool categorical = false;
  std::vector<std::string> levels;
  bool delta = false;  // target is the change from the previous step
  double t_lo = 0, t_hi = 1;
  std::optional<double> lower, upper;
  bool constant = false;
  double constant_value = 0;
  FeatureEncoding encoding;
  Mlp net;
  std::vector<double> loss_curve;
  double train_surrogate = 0;  // mean surrogate on the fitting data

  // Sorted quantiles of the target (level or change) in raw units.
  std::array<double, n_quantiles> quantiles_from(const VectorXd& out) const {
    std::array<double, n_quantiles> q{};
    for (std::size_t k = 0; k < n_quantiles; ++k)
      q[k] = constant ? constant_value : t_lo + out[static_cast<Eigen::Index>(k)] * (t_hi - t_lo);
    std::sort(q.begin(), q.end());
    return q;
  }

  std::array<double, n_quantiles> quantiles(const Conditioning& c) const {
    if (constant) return quantiles_from(VectorXd::Zero(n_quantiles));
    return quantiles_from(net.forward(encoding.encode(c)).col(0));
  }

  std::vector<double> probabilities(const Conditioning& c) const {
    std::vector<double> p(levels.size(), 0.0);
    if (constant) {
      p[static_cast<std::size_t>(constant_value)] = 1.0;
      return p;
    }
    VectorXd s = softmax(net.forward(encoding.encode(c)).col(0));
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = s[static_cast<Eigen::Index>(i)];
    return p;
  }

  std::optional<double> target_of(const Conditioning& c) const {
    const Value* now = c.now_sto ? c.now_sto->find(node) : nullptr;
    if (!now || !now->is_number()) return std::nullopt;
    if (!delta) return now->as_number();
    const Value* prev = c.prev_sto ? c.prev_sto->find(node) : nullptr;
    if (!prev || !prev->is_number()) return std::nullopt;
    return now->as_number() - prev->as_number();
  }

  // Continuous: negative mean pinball loss over the grid. Categorical: log
  // probability of the observed level, floored.
  double surrogate(const Conditioning& c) const {
    if (categorical) {
      const Value* now = c.now_sto ? c.now_sto->find(node) : nullptr;
      if (!now || !now->is_text()) return log_prob_floor;
      auto p = probabilities(c);
      for (std::size_t i = 0; i < levels.size(); ++i)
        if (levels[i] == now->as_text()) return std::max(log_prob_floor, std::log(p[i]));
      return log_prob_floor;
    }
    auto y = target_of(c);
    if (!y) throw CpdError("record lacks a numeric value for '" + node + "'");
    auto q = quantiles(c);
    double loss = 0;
    for (std::size_t k = 0; k < n_quantiles; ++k) loss += pinball_loss(tau_grid[k], *y, q[k]);
    return -loss / n_quantiles;
  }

  // Inverse of the piecewise-linear CDF through the (tau, quantile) knots,
  // flat beyond the outer knots.
  static double invert(const std::array<double, n_quantiles>& q, double u) {
    if (u <= tau_grid.front()) return q.front();
    if (u >= tau_grid.back()) return q.back();
    std::size_t k = 0;
    while (k + 1 < n_quantiles && tau_grid[k + 1] < u) ++k;
    double t = (u - tau_grid[k]) / (tau_grid[k + 1] - tau_grid[k]);
    return q[k] + t * (q[k + 1] - q[k]);
  }

  Value sample_at(const Conditioning& c, double u) const {
    if (categorical) {
      auto p = probabilities(c);
      double acc = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return Value(levels[i]);
      }
      return Value(levels.back());
    }
    double v = invert(quantiles(c), u);
    if (delta) {
      const Value* prev = c.prev_sto ? c.prev_sto->find(node) : nullptr;
      v += prev && prev->is_number() ? prev->as_number() : 0.0;
    }
    if (lower) v = std::max(v, *lower);
    if (upper) v = std::min(v, *upper);
    return Value(v);
  }

  template <typename Rng>
  Value sample(const Conditioning& c, Rng& rng) const {
    return sample_at(c, std::uniform_real_distribution<double>(0.0, 1.0)(rng));
  }
};

namespace detail {

// Adam over a flat parameter vector.
struct Adam {
  explicit Adam(Eigen::Index n, double lr) : lr(lr), m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}
  void step(VectorXd& theta, const VectorXd& g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;
  VectorXd m, v;
};

template <typename LossFn>
std::vector<double> train(Mlp& net, const MatrixXd& X, int n, const FitHyper& h, std::mt19937_64& rng, LossFn loss) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Adam opt(net.params().size(), h.lr);
  VectorXd grad;
  MatrixXd dY;
  std::vector<double> curve;
  curve.reserve(static_cast<std::size_t>(h.epochs));
  const double pi = std::acos(-1.0);
  for (int epoch = 0; epoch < h.epochs; ++epoch) {
    double frac = h.epochs > 1 ? double(epoch) / (h.epochs - 1) : 1.0;
    opt.lr = h.lr_final + 0.5 * (h.lr - h.lr_final) * (1 + std::cos(pi * frac));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (int start = 0; start < n; start += h.batch) {
      int len = std::min(h.batch, n - start);
      std::span<const int> idx(order.data() + start, static_cast<std::size_t>(len));
      MatrixXd xb(X.rows(), len);
      for (int j = 0; j < len; ++j) xb.col(j) = X.col(idx[static_cast<std::size_t>(j)]);
      MatrixXd yhat = net.forward(xb);
      total += loss(yhat, idx, &dY) * len;
      net.backward(xb, dY, grad);
      opt.step(net.params(), grad);
    }
    curve.push_back(total / n);
  }
  return curve;
}

}  // namespace detail

// Fits p(node | parents, temporal context). Numerical nodes get a quantile
// network, categorical nodes a softmax classifier. A constant target yields
// a constant model with no network.
inline NodeModel fit_node(const ObservationSchema& schema, const std::string& node,
                          std::vector<std::string> parents, std::span<const TransitionRecord> records,
                          const FitHyper& hyper) {
  if (records.empty()) throw CpdError("no data to fit '" + node + "'");
  const VariableSpec& spec = schema.at(node);
  if (spec.stream != Stream::stochastic) throw CpdError("'" + node + "' is not a stochastic variable");
  std::sort(parents.begin(), parents.end());
  for (const auto& p : parents)
    if (p == node) throw CpdError("'" + node + "' cannot be its own parent");

  NodeModel m;
  m.node = node;
  m.parents = parents;
  m.categorical = spec.categorical();
  m.encoding = FeatureEncoding::build(schema, parents, records);
  std::mt19937_64 rng(hyper.seed);
  const int n = static_cast<int>(records.size());
  MatrixXd X = m.encoding.encode(records);

  if (m.categorical) {
    m.levels = spec.as_categorical().levels;
    std::vector<int> labels(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      const Value* v = records[i].next_sto.find(node);
      auto it = v && v->is_text() ? std::find(m.levels.begin(), m.levels.end(), v->as_text()) : m.levels.end();
      if (it == m.levels.end()) throw CpdError("record " + std::to_string(i) + " has no known level for '" + node + "'");
      labels[i] = static_cast<int>(it - m.levels.begin());
    }
    if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels[0]; })) {
      m.constant = true;
      m.constant_value = labels[0];
    } else {
      m.net = Mlp(X.rows() > 0 ? static_cast<int>(X.rows()) : 0, hyper.hidden, static_cast<int>(m.levels.size()));
      m.net.init(rng);
      m.loss_curve = detail::train(m.net, X, n, hyper, rng, [&](const MatrixXd& Y, std::span<const int> idx, MatrixXd* dY) {
        std::vector<int> lb(idx.size());
        for (std::size_t j = 0; j < idx.size(); ++j) lb[j] = labels[static_cast<std::size_t>(idx[j])];
        return cross_entropy(Y, lb, dY);
      });
    }
  } else {
    const auto& num = spec.as_numerical();
    m.lower = num.lower;
    m.upper = num.upper;
    bool has_prev = std::all_of(records.begin(), records.end(), [&](const TransitionRecord& r) {
      const Value* v = r.prev_sto.find(node);
      return v && v->is_number();
    });
    m.delta = hyper.target == TargetMode::delta || (hyper.target == TargetMode::automatic && has_prev);
    if (m.delta && !has_prev) throw CpdError("change targets need previous values of '" + node + "'");
    Eigen::RowVectorXd y(n);
    for (int i = 0; i < n; ++i) {
      auto t = m.target_of(Conditioning::of(records[static_cast<std::size_t>(i)]));
      if (!t) throw CpdError("record " + std::to_string(i) + " has no numeric value for '" + node + "'");
      y[i] = *t;
    }
    m.t_lo = y.minCoeff();
    m.t_hi = y.maxCoeff();
    if (m.t_hi - m.t_lo <= 1e-12 * std::max(1.0, std::fabs(m.t_hi))) {
      m.constant = true;
      m.constant_value = m.t_lo;
    } else {
      Eigen::RowVectorXd ys = (y.array() - m.t_lo) / (m.t_hi - m.t_lo);
      m.net = Mlp(static_cast<int>(X.rows()), hyper.hidden, static_cast<int>(n_quantiles));
      m.net.init(rng);
      m.loss_curve = detail::train(m.net, X, n, hyper, rng, [&](const MatrixXd& Y, std::span<const int> idx, MatrixXd* dY) {
        Eigen::RowVectorXd yb(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) yb[static_cast<Eigen::Index>(j)] = ys[idx[j]];
        return quantile_loss(Y, yb, dY);
      });
    }
  }

  // Fit quality on the fitting data, batched.
  double total = 0;
  if (m.constant) {
    for (const auto& r : records) total += m.surrogate(Conditioning::of(r));
  } else {
    MatrixXd out = m.net.forward(X);
    for (int i = 0; i < n; ++i) {
      const auto& r = records[static_cast<std::size_t>(i)];
      if (m.categorical) {
        VectorXd p = softmax(out.col(i));
        const auto& lv = r.next_sto.at(node).as_text();
        auto k = std::find(m.levels.begin(), m.levels.end(), lv) - m.levels.begin();
        total += std::max(log_prob_floor, std::log(p[k]));
      } else {
        auto q = m.quantiles_from(out.col(i));
        double yv = *m.target_of(Conditioning::of(r));
        double loss = 0;
        for (std::size_t k = 0; k < n_quantiles; ++k) loss += pinball_loss(tau_grid[k], yv, q[k]);
        total -= loss / n_quantiles;
      }
    }
  }
  m.train_surrogate = total / n;
  return m;
}

// ---------------------------------------------------------------------------
// Shared fits keyed by (node, sorted parents); each key is fitted at most once.

inline std::string fit_key(const std::string& node, const std::vector<std::string>& parents) {
  std::string k = node + "|";
  for (std::size_t i = 0; i < parents.size(); ++i) k += (i ? "," : "") + parents[i];
  return k;
}

class FitCache {
 public:
  FitCache(const ObservationSchema& schema, std::vector<TransitionRecord> data, FitHyper hyper)
      : schema_(schema), data_(std::move(data)), hyper_(hyper) {
    if (data_.empty()) throw CpdError("fit cache needs data");
  }

  std::shared_ptr<const NodeModel> get(const std::string& node, std::vector<std::string> parents) {
    std::sort(parents.begin(), parents.end());
    std::string key = fit_key(node, parents);
    std::shared_future<std::shared_ptr<const NodeModel>> fut;
    std::promise<std::shared_ptr<const NodeModel>> mine;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = slots_.find(key);
      if (it == slots_.end()) {
        fut = mine.get_future().share();
        slots_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        FitHyper h = hyper_;
        h.seed = mix_seed(hyper_.seed, fnv1a(key));
        mine.set_value(std::make_shared<const NodeModel>(fit_node(schema_, node, parents, data_, h)));
        ++fits_;
      } catch (...) {
        mine.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

  std::size_t fits() const { return fits_; }
  const std::vector<TransitionRecord>& data() const { return data_; }
  const ObservationSchema& schema() const { return schema_; }
  const FitHyper& hyper() const { return hyper_; }

 private:
  const ObservationSchema& schema_;
  std::vector<TransitionRecord> data_;
  FitHyper hyper_;
  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const NodeModel>>> slots_;
  std::atomic<std::size_t> fits_{0};
};

// ---------------------------------------------------------------------------
// Joint model over the stochastic stream

struct CpdModel {
  Dag dag;
  std::map<std::string, std::shared_ptr<const NodeModel>> nodes;
};

inline CpdModel fit_all(const ObservationSchema& schema, const Dag& dag, std::span<const TransitionRecord> records,
                        const FitHyper& hyper) {
  CpdModel m{dag, {}};
  for (const auto& v : dag.modeled_nodes()) {
    FitHyper h = hyper;
    h.seed = mix_seed(hyper.seed, fnv1a(fit_key(v, dag.parents(v))));
    m.nodes[v] = std::make_shared<const NodeModel>(fit_node(schema, v, dag.parents(v), records, h));
  }
  return m;
}

inline CpdModel fit_all(FitCache& cache, const Dag& dag) {
  CpdModel m{dag, {}};
  for (const auto& v : dag.modeled_nodes()) m.nodes[v] = cache.get(v, dag.parents(v));
  return m;
}

// Ancestral sampling of the stochastic stream in topological order.
template <typename Rng>
Value sample_joint(const CpdModel& model, const Value& prev_sto, const Value& action, bool valid,
                   const Value& next_det, const Value& prev_det, Rng& rng) {
  auto order = model.dag.topological_order();
  if (!order) throw CpdError("model graph has a cycle");
  Value now = Value::object();
  Conditioning c{&now, &prev_sto, &prev_det, &next_det, &action, valid};
  for (const auto& id : *order) {
    if (!model.dag.modeled(id)) continue;
    auto it = model.nodes.find(id);
    if (it == model.nodes.end() || !it->second) throw CpdError("no fitted model for '" + id + "'");
    Value v = it->second->sample(c, rng);
    now[id] = std::move(v);
  }
  return now;
}

// ---------------------------------------------------------------------------
// Bundles

inline constexpr int bundle_version = 1;

inline Value to_value(const NodeModel& m) {
  doc::Array parents, levels, cols, theta;
  for (const auto& p : m.parents) parents.push_back(p);
  for (const auto& l : m.levels) levels.push_back(l);
  for (const auto& c : m.encoding.columns())
    cols.push_back(Value::object({{"source", std::string(source_name(c.source))},
                                  {"var", c.var},
                                  {"field", c.field},
                                  {"one_hot", c.one_hot},
                                  {"lo", c.lo},
                                  {"hi", c.hi}}));
  for (Eigen::Index i = 0; i < m.net.params().size(); ++i) theta.push_back(m.net.params()[i]);
  Value v = Value::object({{"node", m.node},
                           {"parents", Value(std::move(parents))},
                           {"categorical", m.categorical},
                           {"levels", Value(std::move(levels))},
                           {"delta", m.delta},
                           {"t_lo", m.t_lo},
                           {"t_hi", m.t_hi},
                           {"constant", m.constant},
                           {"constant_value", m.constant_value},
                           {"train_surrogate", m.train_surrogate},
                           {"encoding", Value(std::move(cols))},
                           {"net", Value::object({{"inputs", m.net.inputs()},
                                                  {"hidden", m.net.hidden()},
                                                  {"outputs", m.net.outputs()},
                                                  {"theta", Value(std::move(theta))}})}});
  v["lower"] = m.lower ? Value(*m.lower) : Value();
  v["upper"] = m.upper ? Value(*m.upper) : Value();
  return v;
}

inline NodeModel node_from_value(const Value& v) {
  NodeModel m;
  m.node = v.at("node").as_text();
  for (const auto& p : v.at("parents").as_array()) m.parents.push_back(p.as_text());
  m.categorical = v.at("categorical").as_bool();
  for (const auto& l : v.at("levels").as_array()) m.levels.push_back(l.as_text());
  m.delta = v.at("delta").as_bool();
  m.t_lo = v.at("t_lo").as_number();
  m.t_hi = v.at("t_hi").as_number();
  m.constant = v.at("constant").as_bool();
  m.constant_value = v.at("constant_value").as_number();
  m.train_surrogate = v.number_or("train_surrogate", 0.0);
  if (v.at("lower").is_number()) m.lower = v.at("lower").as_number();
  if (v.at("upper").is_number()) m.upper = v.at("upper").as_number();
  std::vector<Column> cols;
  for (const auto& c : v.at("encoding").as_array())
    cols.push_back({source_from(c.at("source").as_text()), c.at("var").as_text(), c.at("field").as_text(),
                    c.at("one_hot").as_bool(), c.at("lo").as_number(), c.at("hi").as_number()});
  m.encoding = FeatureEncoding(std::move(cols));
  const Value& net = v.at("net");
  m.net = Mlp(static_cast<int>(net.at("inputs").as_number()), static_cast<int>(net.at("hidden").as_number()),
              static_cast<int>(net.at("outputs").as_number()));
  const auto& theta = net.at("theta").as_array();
  if (static_cast<Eigen::Index>(theta.size()) != m.net.params().size())
    throw CpdError("weight count mismatch for '" + m.node + "'");
  for (std::size_t i = 0; i < theta.size(); ++i) m.net.params()[static_cast<Eigen::Index>(i)] = theta[i].as_number();
  return m;
}

inline Value to_value(const CpdModel& m) {
  doc::Array nodes;
  for (const auto& [id, node] : m.nodes) nodes.push_back(to_value(*node));
  return Value::object({{"format", "hwm-cpd-bundle"},
                        {"version", bundle_version},
                        {"dag", hwm::to_value(m.dag)},
                        {"nodes", Value(std::move(nodes))}});
}

inline CpdModel cpd_from_value(const Value& v) {
  const Value* fmt = v.find("format");
  if (!fmt || !fmt->is_text() || fmt->as_text() != "hwm-cpd-bundle") throw CpdError("not a CPD bundle");
  if (v.number_or("version", -1) != bundle_version)
    throw CpdError("unsupported CPD bundle version " + doc::dump(v.find("version") ? *v.find("version") : Value()));
  CpdModel m{dag_from_value(v.at("dag")), {}};
  for (const auto& n : v.at("nodes").as_array()) {
    auto node = std::make_shared<const NodeModel>(node_from_value(n));
    m.nodes[node->node] = node;
  }
  for (const auto& id : m.dag.modeled_nodes())
    if (!m.nodes.contains(id)) throw CpdError("bundle lacks a model for '" + id + "'");
  return m;
}

}  // namespace hwm::cpd
