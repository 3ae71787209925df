#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "hwm/dag.hpp"
#include "hwm/doc/value.hpp"
#include "hwm/pgm.hpp"
#include "hwm/program.hpp"
#include "hwm/refine.hpp"
#include "hwm/schema.hpp"
#include "hwm/util.hpp"

namespace hwm::oracle {

using doc::Value;

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by transports for failures worth retrying.
class TransportError : public OracleError {
 public:
  using OracleError::OracleError;
};

class OracleUnavailable : public OracleError {
 public:
  using OracleError::OracleError;
};

class InitError : public OracleError {
 public:
  InitError(const std::string& what, std::vector<std::string> gaps) : OracleError(what), gaps_(std::move(gaps)) {}
  const std::vector<std::string>& gaps() const { return gaps_; }

 private:
  std::vector<std::string> gaps_;
};

enum class RequestKind { init_program, propose_refinements, topo_next, elicit_parents, plausibility };

inline std::string_view kind_name(RequestKind k) {
  switch (k) {
    case RequestKind::init_program: return "init_program";
    case RequestKind::propose_refinements: return "propose_refinements";
    case RequestKind::topo_next: return "topo_next";
    case RequestKind::elicit_parents: return "elicit_parents";
    case RequestKind::plausibility: return "plausibility";
  }
  return "?";
}

inline RequestKind kind_from(std::string_view s) {
  for (auto k : {RequestKind::init_program, RequestKind::propose_refinements, RequestKind::topo_next,
                 RequestKind::elicit_parents, RequestKind::plausibility})
    if (kind_name(k) == s) return k;
  throw OracleError("unknown request kind '" + std::string(s) + "'");
}

struct OracleRequest {
  RequestKind kind = RequestKind::plausibility;
  Value payload = Value::object();

  // Stable across processes: the kind plus the canonical payload text.
  std::string key() const {
    std::string text = std::string(kind_name(kind)) + "\n" + doc::dump(payload);
    return hex64(fnv1a(text));
  }
};

inline void validate(const OracleRequest& r) {
  auto need = [&](std::initializer_list<const char*> fields) {
    if (!r.payload.is_object()) throw OracleError(std::string(kind_name(r.kind)) + " payload must be a map");
    for (const char* f : fields)
      if (!r.payload.find(f)) throw OracleError(std::string(kind_name(r.kind)) + " payload lacks '" + f + "'");
  };
  switch (r.kind) {
    case RequestKind::init_program: need({"schema", "environment_doc"}); break;
    case RequestKind::propose_refinements: need({"context", "k"}); break;
    case RequestKind::topo_next: need({"variables", "ordered", "remaining", "environment_doc"}); break;
    case RequestKind::elicit_parents: need({"variables", "node", "predecessors", "environment_doc"}); break;
    case RequestKind::plausibility: need({"variables", "mode", "edges", "environment_doc"}); break;
  }
}

struct OracleResponse {
  std::string text;
  std::optional<double> log_prob_yes;

  friend bool operator==(const OracleResponse&, const OracleResponse&) = default;
};

inline Value to_value(const OracleResponse& r) {
  Value v = Value::object({{"text", r.text}});
  v["log_prob_yes"] = r.log_prob_yes ? Value(*r.log_prob_yes) : Value();
  return v;
}

inline OracleResponse response_from_value(const Value& v) {
  OracleResponse r;
  r.text = v.at("text").as_text();
  if (const Value* lp = v.find("log_prob_yes"); lp && lp->is_number()) r.log_prob_yes = lp->as_number();
  return r;
}

// ---------------------------------------------------------------------------
// Prompts

struct Prompt {
  std::string system;
  std::string user;
};

// Templates per request kind with {{name}} placeholders; loaded from
// `<kind>.system.txt` and `<kind>.user.txt`.
class PromptSet {
 public:
  static PromptSet load(const std::filesystem::path& dir) {
    PromptSet p;
    for (auto k : {RequestKind::init_program, RequestKind::propose_refinements, RequestKind::topo_next,
                   RequestKind::elicit_parents, RequestKind::plausibility}) {
      std::string base = std::string(kind_name(k));
      auto sys = dir / (base + ".system.txt");
      auto usr = dir / (base + ".user.txt");
      if (!std::filesystem::exists(sys) || !std::filesystem::exists(usr))
        throw OracleError("missing prompt template for " + base + " in " + dir.string());
      p.templates_[k] = {read_file(sys), read_file(usr)};
    }
    if (auto ref = dir / "patchscript_reference.txt"; std::filesystem::exists(ref)) p.reference_ = read_file(ref);
    return p;
  }

  Prompt render(const OracleRequest& r) const {
    auto it = templates_.find(r.kind);
    if (it == templates_.end()) throw OracleError("no template for " + std::string(kind_name(r.kind)));
    std::map<std::string, std::string> vars{{"patchscript_reference", reference_}};
    for (const auto& [k, v] : r.payload.as_object()) vars[k] = v.is_text() ? v.as_text() : doc::dump(v);
    return {substitute(it->second.system, vars), substitute(it->second.user, vars)};
  }

  static std::string substitute(const std::string& tpl, const std::map<std::string, std::string>& vars) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
      auto open = tpl.find("{{", i);
      if (open == std::string::npos) break;
      auto close = tpl.find("}}", open + 2);
      if (close == std::string::npos) break;
      out.append(tpl, i, open - i);
      std::string name = tpl.substr(open + 2, close - open - 2);
      auto v = vars.find(name);
      if (v == vars.end()) throw OracleError("prompt placeholder '" + name + "' has no value");
      out += v->second;
      i = close + 2;
    }
    out.append(tpl, i, std::string::npos);
    return out;
  }

 private:
  std::map<RequestKind, Prompt> templates_;
  std::string reference_;
};

// ---------------------------------------------------------------------------
// Transports

class Transport {
 public:
  virtual ~Transport() = default;
  // `prompt` is null when no templates are configured.
  virtual OracleResponse send(const OracleRequest& request, const Prompt* prompt) = 0;
};

// Answers from a rule script; a pure function of the request.
//
// Script keys, all optional:
//   topo_order: [ids]                   preferred order for topo_next
//   topo_shuffle: p                     chance (seeded by the request) of a random pick
//   parents: {node: [ids]}              answers for elicit_parents
//   parent_keep: p                      chance each scripted parent is kept
//   edge_log_prob: {"p>c": lp}          per-edge plausibility
//   default_edge_log_prob: lp           edges not listed (default 0)
//   refinements: [{match: {...}, candidates: [...]}]
//   init_program: program bundle
class ScriptedTransport final : public Transport {
 public:
  explicit ScriptedTransport(Value script) : script_(std::move(script)) {
    if (!script_.is_object()) throw OracleError("oracle script must be a map");
  }

  OracleResponse send(const OracleRequest& r, const Prompt*) override {
    const Value& p = r.payload;
    switch (r.kind) {
      case RequestKind::topo_next: return {doc::dump(Value::object({{"next", topo(p)}})), std::nullopt};
      case RequestKind::elicit_parents: return {doc::dump(Value::object({{"parents", parents(p)}})), std::nullopt};
      case RequestKind::plausibility: {
        double lp = 0;
        for (const auto& e : p.at("edges").as_array()) lp += edge_lp(e.as_array()[0].as_text(), e.as_array()[1].as_text());
        return {lp > -0.6931 ? "yes" : "no", lp};
      }
      case RequestKind::propose_refinements: return {doc::dump(refinements(p)), std::nullopt};
      case RequestKind::init_program: {
        const Value* prog = script_.find("init_program");
        if (!prog) throw OracleError("oracle script has no init_program");
        return {doc::dump(*prog), std::nullopt};
      }
    }
    throw OracleError("unhandled request kind");
  }

 private:
  static double draw(const Value& payload, std::string_view salt) {
    std::mt19937_64 rng(mix_seed(static_cast<std::uint64_t>(payload.number_or("sample", 0)), fnv1a(salt)));
    return std::uniform_real_distribution<double>(0, 1)(rng);
  }

  std::string topo(const Value& p) const {
    std::vector<std::string> remaining;
    for (const auto& v : p.at("remaining").as_array()) remaining.push_back(v.as_text());
    if (remaining.empty()) return "";
    double shuffle = script_.number_or("topo_shuffle", 0.0);
    if (shuffle > 0 && draw(p, "shuffle" + doc::dump(p.at("ordered"))) < shuffle) {
      double u = draw(p, "pick" + doc::dump(p.at("ordered")));
      return remaining[std::min(remaining.size() - 1, static_cast<std::size_t>(u * double(remaining.size())))];
    }
    if (const Value* order = script_.find("topo_order"))
      for (const auto& o : order->as_array())
        if (std::find(remaining.begin(), remaining.end(), o.as_text()) != remaining.end()) return o.as_text();
    return remaining.front();
  }

  Value parents(const Value& p) const {
    doc::Array out;
    const std::string& node = p.at("node").as_text();
    const Value* table = script_.find("parents");
    const Value* listed = table ? table->find(node) : nullptr;
    if (!listed) return Value(std::move(out));
    double keep = script_.number_or("parent_keep", 1.0);
    std::set<std::string> preds;
    for (const auto& v : p.at("predecessors").as_array()) preds.insert(v.as_text());
    for (const auto& c : listed->as_array()) {
      if (!preds.contains(c.as_text())) continue;
      if (keep < 1.0 && draw(p, node + "<" + c.as_text()) >= keep) continue;
      out.push_back(c);
    }
    return Value(std::move(out));
  }

  double edge_lp(const std::string& parent, const std::string& child) const {
    if (const Value* t = script_.find("edge_log_prob"))
      if (const Value* v = t->find(parent + ">" + child)) return v->as_number();
    return script_.number_or("default_edge_log_prob", 0.0);
  }

  // A rule matches when every key of `match` equals the context field of the
  // same name; `path` matches against the first diff entry's path.
  Value refinements(const Value& p) const {
    doc::Array out;
    const Value* rules = script_.find("refinements");
    if (!rules) return Value::object({{"refinements", Value(std::move(out))}});
    const Value& ctx = p.at("context");
    for (const auto& rule : rules->as_array()) {
      bool ok = true;
      if (const Value* m = rule.find("match"))
        for (const auto& [k, want] : m->as_object()) {
          const Value* got = nullptr;
          if (k == "path") {
            const Value* d = ctx.find("diff");
            if (d && d->is_array())
              for (const auto& e : d->as_array())
                if (e.find("path") && e.at("path") == want) got = &want;
          } else if (k == "action") {
            const Value* a = ctx.find("action");
            if (a && a->find("name")) got = &a->at("name");
          } else {
            got = ctx.find(k);
          }
          if (!got || !(*got == want)) ok = false;
        }
      if (!ok) continue;
      for (const auto& c : rule.at("candidates").as_array()) out.push_back(c);
    }
    return Value::object({{"refinements", Value(std::move(out))}});
  }

  Value script_;
};

struct FixtureEntry {
  RequestKind kind;
  OracleResponse response;
};

inline constexpr std::string_view fixture_format = "hwm-oracle-fixture";

inline Value fixture_to_value(const std::map<std::string, FixtureEntry>& entries) {
  Value es = Value::object();
  for (const auto& [k, e] : entries) {
    Value v = to_value(e.response);
    v["kind"] = std::string(kind_name(e.kind));
    es[k] = std::move(v);
  }
  return Value::object({{"format", std::string(fixture_format)}, {"version", 1}, {"entries", es}});
}

inline std::map<std::string, FixtureEntry> fixture_from_value(const Value& v) {
  const Value* f = v.find("format");
  if (!f || !f->is_text() || f->as_text() != fixture_format) throw OracleError("not an oracle fixture");
  std::map<std::string, FixtureEntry> out;
  for (const auto& [k, e] : v.at("entries").as_object())
    out.emplace(k, FixtureEntry{kind_from(e.at("kind").as_text()), response_from_value(e)});
  return out;
}

// Serves recorded answers by request key; a miss is an error.
class ReplayTransport final : public Transport {
 public:
  explicit ReplayTransport(std::map<std::string, FixtureEntry> entries) : entries_(std::move(entries)) {}
  static ReplayTransport load(const std::filesystem::path& path) {
    return ReplayTransport(fixture_from_value(doc::parse(read_file(path))));
  }

  OracleResponse send(const OracleRequest& r, const Prompt*) override {
    auto it = entries_.find(r.key());
    if (it == entries_.end())
      throw OracleUnavailable("no recorded answer for " + std::string(kind_name(r.kind)) + " request " + r.key());
    return it->second.response;
  }

 private:
  std::map<std::string, FixtureEntry> entries_;
};

// Forwards to another transport and keeps every answer for later replay.
class RecordingTransport final : public Transport {
 public:
  explicit RecordingTransport(Transport& inner) : inner_(inner) {}

  OracleResponse send(const OracleRequest& r, const Prompt* prompt) override {
    OracleResponse resp = inner_.send(r, prompt);
    std::lock_guard lock(mu_);
    entries_[r.key()] = {r.kind, resp};
    return resp;
  }

  Value fixture() const {
    std::lock_guard lock(mu_);
    return fixture_to_value(entries_);
  }
  void save(const std::filesystem::path& path) const { atomic_write(path, doc::dump(fixture(), 2) + "\n"); }

 private:
  Transport& inner_;
  mutable std::mutex mu_;
  std::map<std::string, FixtureEntry> entries_;
};

// ---------------------------------------------------------------------------
// The oracle

enum class PriorMode { per_node, whole_graph };

struct OracleConfig {
  int retries = 3;
  std::chrono::milliseconds backoff{200};
  double log_prob_floor = -30.0;
  PriorMode prior_mode = PriorMode::per_node;
  int max_in_flight = 4;
};

struct OracleStats {
  std::size_t requests = 0;        // calls into the oracle
  std::size_t transport_calls = 0;  // including retries
  std::size_t memo_hits = 0;
  std::size_t dropped_candidates = 0;
};

// Pulls the first JSON document out of free text (models like to wrap answers
// in prose or code fences).
inline std::optional<Value> extract_json(std::string_view text) {
  for (std::size_t start = 0; start < text.size(); ++start) {
    char c = text[start];
    if (c != '{' && c != '[') continue;
    char open = c, close = c == '{' ? '}' : ']';
    int depth = 0;
    bool in_str = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      char ch = text[i];
      if (in_str) {
        if (ch == '\\') ++i;
        else if (ch == '"') in_str = false;
        continue;
      }
      if (ch == '"') in_str = true;
      else if (ch == open) ++depth;
      else if (ch == close && --depth == 0) {
        try {
          return doc::parse(text.substr(start, i - start + 1));
        } catch (const std::exception&) {
          break;
        }
      }
    }
  }
  return std::nullopt;
}

inline Value variables_excerpt(const ObservationSchema& schema) {
  doc::Array vars;
  for (const auto& v : schema.variables())
    vars.push_back(Value::object({{"name", v.name},
                                  {"stream", std::string(stream_name(v.stream))},
                                  {"description", v.description}}));
  return Value(std::move(vars));
}

inline Value string_list(const std::vector<std::string>& xs) {
  doc::Array a;
  for (const auto& x : xs) a.push_back(x);
  return Value(std::move(a));
}

class KnowledgeOracle final : public refine::ProposalProvider, public pgm::StructureOracle, public pgm::NodePrior {
 public:
  KnowledgeOracle(Transport& transport, OracleConfig cfg = {}, std::optional<PromptSet> prompts = std::nullopt)
      : transport_(transport), cfg_(cfg), prompts_(std::move(prompts)), slots_(std::max(1, cfg.max_in_flight)) {}

  // Memoized, retried dispatch. Every request kind goes through here.
  OracleResponse ask(const OracleRequest& r) {
    validate(r);
    std::string key = r.key();
    std::shared_future<OracleResponse> fut;
    std::promise<OracleResponse> mine;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      ++stats_.requests;
      if (auto it = memo_.find(key); it != memo_.end()) {
        ++stats_.memo_hits;
        fut = it->second;
      } else {
        fut = mine.get_future().share();
        memo_.emplace(key, fut);
        owner = true;
      }
    }
    if (owner) {
      try {
        mine.set_value(dispatch(r));
      } catch (...) {
        {
          std::lock_guard lock(mu_);
          memo_.erase(key);  // failures are not cached
        }
        mine.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

  // ---- plausibility
  double node_log_prob(const ObservationSchema& schema, const std::string& target,
                       const std::vector<std::string>& parents) override {
    doc::Array edges;
    for (const auto& p : parents) edges.push_back(Value::array({p, target}));
    return plausibility(schema, "node", target, Value(std::move(edges)));
  }

  double log_prior(const ObservationSchema& schema, const Dag& dag) override {
    if (cfg_.prior_mode == PriorMode::per_node) return NodePrior::log_prior(schema, dag);
    doc::Array edges;
    for (const auto& [p, c] : dag.edges()) edges.push_back(Value::array({p, c}));
    return plausibility(schema, "graph", "", Value(std::move(edges)));
  }

  double plausibility(const ObservationSchema& schema, const std::string& mode, const std::string& target,
                      Value edges) {
    OracleRequest r{RequestKind::plausibility, Value::object({{"variables", variables_excerpt(schema)},
                                                              {"mode", mode},
                                                              {"target", target},
                                                              {"edges", std::move(edges)},
                                                              {"environment_doc", schema.environment_doc()}})};
    OracleResponse resp = ask(r);
    double lp;
    if (resp.log_prob_yes) lp = *resp.log_prob_yes;
    else lp = starts_yes(resp.text) ? 0.0 : cfg_.log_prob_floor;
    if (!std::isfinite(lp) || lp < cfg_.log_prob_floor) lp = cfg_.log_prob_floor;
    return std::min(0.0, lp);
  }

  // ---- seed graphs
  std::string topo_next(const ObservationSchema& schema, const std::vector<std::string>& ordered,
                        const std::vector<std::string>& remaining, std::uint64_t seed) override {
    if (remaining.size() == 1) return remaining.front();
    OracleRequest r{RequestKind::topo_next, Value::object({{"variables", variables_excerpt(schema)},
                                                           {"ordered", string_list(ordered)},
                                                           {"remaining", string_list(remaining)},
                                                           {"environment_doc", schema.environment_doc()},
                                                           {"sample", static_cast<double>(seed % (1ULL << 52))}})};
    OracleResponse resp = ask(r);
    if (auto v = extract_json(resp.text); v && v->is_object())
      if (const Value* n = v->find("next"); n && n->is_text()) return n->as_text();
    return trim(resp.text);
  }

  std::vector<std::string> elicit_parents(const ObservationSchema& schema, const std::string& node,
                                          const std::vector<std::string>& predecessors, std::uint64_t seed) override {
    if (predecessors.empty()) return {};
    OracleRequest r{RequestKind::elicit_parents, Value::object({{"variables", variables_excerpt(schema)},
                                                                {"node", node},
                                                                {"predecessors", string_list(predecessors)},
                                                                {"environment_doc", schema.environment_doc()},
                                                                {"sample", static_cast<double>(seed % (1ULL << 52))}})};
    OracleResponse resp = ask(r);
    std::vector<std::string> out;
    auto v = extract_json(resp.text);
    const Value* list = nullptr;
    if (v && v->is_object()) list = v->find("parents");
    else if (v && v->is_array()) list = &*v;
    if (list && list->is_array())
      for (const auto& p : list->as_array())
        if (p.is_text() && std::find(predecessors.begin(), predecessors.end(), p.as_text()) != predecessors.end())
          out.push_back(p.as_text());
    return out;
  }

  // ---- programs
  std::vector<program::Refinement> propose_refinements(const refine::RefineContext& context, int k) override {
    if (k < 1) throw OracleError("k must be at least 1");
    OracleRequest r{RequestKind::propose_refinements, Value::object({{"context", refine::to_value(context)}, {"k", k}})};
    OracleResponse resp = ask(r);
    auto v = extract_json(resp.text);
    const Value* list = nullptr;
    if (v && v->is_object()) list = v->find("refinements");
    else if (v && v->is_array()) list = &*v;
    std::vector<program::Refinement> out;
    if (!list || !list->is_array()) {
      note("refinement answer held no candidate list");
      return out;
    }
    for (const auto& c : list->as_array()) {
      if (static_cast<int>(out.size()) >= k) break;
      try {
        out.push_back(program::refinement_from_value(c));
      } catch (const std::exception& e) {
        note(std::string("dropped candidate: ") + e.what());
        std::lock_guard lock(mu_);
        ++stats_.dropped_candidates;
      }
    }
    return out;
  }

  program::TransitionProgram init_program(const ObservationSchema& schema) {
    OracleRequest r{RequestKind::init_program, Value::object({{"schema", hwm::to_value(schema)},
                                                              {"environment_doc", schema.environment_doc()}})};
    OracleResponse resp = ask(r);
    auto v = extract_json(resp.text);
    const Value* fns = v && v->is_object() ? v->find("functions") : nullptr;
    if (!fns || !fns->is_array()) throw InitError("initial program answer held no function list", {"functions"});
    std::vector<std::string> gaps;
    std::vector<program::FunctionDef> defs;
    for (const auto& f : fns->as_array()) {
      try {
        defs.push_back(program::function_from_value(f));
      } catch (const std::exception& e) {
        const Value* id = f.is_object() ? f.find("id") : nullptr;
        gaps.push_back((id && id->is_text() ? id->as_text() : std::string("?")) + ": " + e.what());
      }
    }
    int dynamics = 0;
    std::set<std::string> covered;
    for (const auto& d : defs) {
      if (d.kind == script::FunctionKind::dynamic) ++dynamics;
      if (d.kind == script::FunctionKind::action) covered.insert(d.action_name);
    }
    if (dynamics != 1) gaps.push_back("exactly one dynamic function is required, got " + std::to_string(dynamics));
    for (const auto& a : schema.actions())
      if (!covered.contains(a.name)) gaps.push_back("no action function for '" + a.name + "'");
    if (!gaps.empty()) {
      std::string msg = "initial program is incomplete";
      for (const auto& g : gaps) msg += "; " + g;
      throw InitError(msg, gaps);
    }
    try {
      return program::TransitionProgram(std::move(defs));
    } catch (const std::exception& e) {
      throw InitError(std::string("initial program is inconsistent: ") + e.what(), {e.what()});
    }
  }

  OracleStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }
  std::vector<std::string> log() const {
    std::lock_guard lock(mu_);
    return log_;
  }

 private:
  OracleResponse dispatch(const OracleRequest& r) {
    std::optional<Prompt> prompt;
    if (prompts_) prompt = prompts_->render(r);
    std::string last;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff * (1 << (attempt - 1)));
      {
        std::lock_guard lock(mu_);
        ++stats_.transport_calls;
      }
      slots_.acquire();
      try {
        OracleResponse resp = transport_.send(r, prompt ? &*prompt : nullptr);
        slots_.release();
        return resp;
      } catch (const TransportError& e) {
        slots_.release();
        last = e.what();
        note("transport failure (attempt " + std::to_string(attempt + 1) + "): " + last);
      } catch (...) {
        slots_.release();
        throw;
      }
    }
    throw OracleUnavailable("oracle unavailable after " + std::to_string(cfg_.retries + 1) + " attempts: " + last);
  }

  void note(std::string line) {
    std::lock_guard lock(mu_);
    log_.push_back(std::move(line));
  }

  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n\"'`");
    auto e = s.find_last_not_of(" \t\r\n\"'`.");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }

  static bool starts_yes(const std::string& s) {
    std::string t = trim(s);
    return t.size() >= 3 && (t[0] == 'y' || t[0] == 'Y') && (t[1] == 'e' || t[1] == 'E') && (t[2] == 's' || t[2] == 'S');
  }

  Transport& transport_;
  OracleConfig cfg_;
  std::optional<PromptSet> prompts_;
  std::counting_semaphore<1024> slots_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_future<OracleResponse>> memo_;
  OracleStats stats_;
  std::vector<std::string> log_;
};

}  // namespace hwm::oracle
