#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "hwm/pipeline.hpp"

namespace {

using namespace hwm;
using pipeline::Config;
using pipeline::Settings;
using pipeline::Workspace;

enum Exit { ok = 0, config_error = 2, data_error = 3, oracle_error = 4, internal_error = 5 };

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
  long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Config file (JSON)")->required();
  cmd->add_option("-o,--out", c.out, "Output directory (overrides 'out')");
  cmd->add_option("--seed", c.seed, "Root seed (overrides 'seed')");
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set plan.episodes=4");
}

Settings load(const Common& c) {
  Config cfg = Config::load(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed >= 0) cfg.set("seed", Value(static_cast<double>(c.seed)));
  if (!c.out.empty()) cfg.set("out", Value(std::filesystem::absolute(c.out).string()));
  return pipeline::read_settings(cfg);
}

int fail(Exit code, std::string_view kind, const std::string& message, const std::vector<std::string>& problems = {}) {
  Value err = Value::object({{"code", static_cast<int>(code)}, {"kind", std::string(kind)}, {"message", message}});
  if (!problems.empty()) err["problems"] = oracle::string_list(problems);
  std::cerr << doc::dump(Value::object({{"error", err}})) << std::endl;
  return code;
}

template <typename F>
int guarded(F&& body) {
  try {
    body();
    return ok;
  } catch (const pipeline::ConfigError& e) {
    return fail(config_error, "config", e.what(), e.problems());
  } catch (const CLI::ParseError& e) {
    return fail(config_error, "config", e.what());
  } catch (const oracle::InitError& e) {
    return fail(oracle_error, "oracle", e.what());
  } catch (const oracle::OracleError& e) {
    return fail(oracle_error, "oracle", e.what());
  } catch (const pipeline::DataError& e) {
    return fail(data_error, "data", e.what());
  } catch (const IngestError& e) {
    return fail(data_error, "data", e.what());
  } catch (const SchemaError& e) {
    return fail(data_error, "data", e.what());
  } catch (const DagError& e) {
    return fail(data_error, "data", e.what());
  } catch (const std::exception& e) {
    return fail(internal_error, "internal", e.what());
  }
}

void print_refine(const pipeline::RefineSummary& r) {
  std::cout << "refine: " << r.result.log.accepted() << " edits accepted over " << r.result.log.steps.size()
            << " erroneous transitions; train errors " << r.train_errors_before << " -> " << r.train_errors_after
            << " of " << r.train_size << "\n";
}

void print_search(const pgm::SearchResult& r) {
  std::cout << "learn-structure: J=" << r.score.total << " edges " << doc::dump(to_value(r.best).at("edges")) << "\n";
}

void print_eval(const pipeline::EvalSummary& e) {
  std::cout << "held-out transitions (heuristic policy)\n" << eval::render_transition(e.heuristic) << "\n";
  std::cout << "held-out transitions (mixed validity)\n" << eval::render_transition(e.mixed) << "\n";
  if (!e.planning.empty()) std::cout << "final budget\n" << eval::render_planning(e.planning);
}

// Runs the oracle-backed stages (init, refine, structure).
void oracle_stages(const Settings& s, const Workspace& ws, oracle::KnowledgeOracle& orc) {
  pipeline::init_model(s, ws, orc);
  print_refine(pipeline::refine_model(s, ws, orc));
  print_search(pipeline::learn_structure(s, ws, orc));
}

std::filesystem::path fixture_path(const Settings& s, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (s.oracle.fixture.empty()) throw pipeline::ConfigError("no fixture path: pass --fixture or set oracle.fixture");
  return s.oracle.fixture;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid world model pipeline: code for deterministic dynamics, a learned graph for the rest."};
  app.require_subcommand(1);
  Common c;
  std::string fixture;

  auto* gen = app.add_subcommand("gen-data", "Generate coffee-shop trajectories and the schema");
  auto* init = app.add_subcommand("init-model", "Ask the oracle for the initial transition program");
  auto* ref = app.add_subcommand("refine", "Refine the program against observed transitions");
  auto* learn = app.add_subcommand("learn-structure", "Search for the dependency graph");
  auto* fit = app.add_subcommand("fit", "Fit conditional models for the learned graph and ablations");
  auto* pl = app.add_subcommand("plan", "Run planning episodes against the simulator");
  auto* ev = app.add_subcommand("eval", "Transition and planning reports");
  auto* all = app.add_subcommand("run", "Every stage in order");
  auto* rep = app.add_subcommand("replay-oracle", "Record or check oracle fixtures");
  rep->require_subcommand(1);
  auto* cap = rep->add_subcommand("capture", "Run the oracle stages and record every answer");
  auto* ver = rep->add_subcommand("verify", "Replay the fixture and compare with the recorded run");
  auto* info = rep->add_subcommand("info", "Summarize a fixture");
  for (auto* cmd : {gen, init, ref, learn, fit, pl, ev, all, cap, ver, info}) add_common(cmd, c);
  for (auto* cmd : {cap, ver, info}) cmd->add_option("--fixture", fixture, "Fixture file (overrides oracle.fixture)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(config_error, "config", e.what());
  }

  return guarded([&] {
    Settings s = load(c);
    Workspace ws(s);
    if (gen->parsed()) {
      auto d = pipeline::gen_data(s, ws);
      std::cout << "gen-data: " << d.train << " train / " << d.test << " test transitions (heuristic), "
                << d.refine_train << " / " << d.refine_test << " (mixed validity) in " << ws.dir.string() << "\n";
    } else if (init->parsed()) {
      auto o = pipeline::open_oracle(s.oracle);
      auto prog = pipeline::init_model(s, ws, o.get());
      std::cout << "init-model: " << prog.functions().size() << " functions\n";
    } else if (ref->parsed()) {
      auto o = pipeline::open_oracle(s.oracle);
      print_refine(pipeline::refine_model(s, ws, o.get()));
    } else if (learn->parsed()) {
      auto o = pipeline::open_oracle(s.oracle);
      print_search(pipeline::learn_structure(s, ws, o.get()));
    } else if (fit->parsed()) {
      auto models = pipeline::fit_models(s, ws);
      std::cout << "fit: " << models.size() << " models\n";
    } else if (pl->parsed()) {
      auto runs = pipeline::plan_agents(s, ws, [](const std::string& a, int e) {
        std::cerr << "\rplan: " << a << " episode " << e + 1 << std::flush;
      });
      std::cerr << "\n";
      std::vector<std::pair<std::string, eval::PlanningReport>> rows;
      for (const auto& r : runs) rows.push_back({r.agent, r.report});
      std::cout << eval::render_planning(rows);
    } else if (ev->parsed()) {
      print_eval(pipeline::evaluate(s, ws));
    } else if (all->parsed()) {
      print_eval(pipeline::run_all(s, ws));
    } else if (cap->parsed()) {
      auto path = fixture_path(s, fixture);
      auto o = pipeline::open_oracle(s.oracle, true);
      oracle_stages(s, ws, o.get());
      o.save(path);
      std::cout << "capture: " << o.recorder->fixture().at("entries").as_object().size() << " answers -> "
                << path.string() << "\n";
    } else if (ver->parsed()) {
      auto path = fixture_path(s, fixture);
      Settings replay = s;
      replay.oracle.mode = "replay";
      replay.oracle.fixture = path;
      Workspace scratch(ws.dir / "replay_check", ws.config_hash, ws.seed);
      std::filesystem::create_directories(scratch.dir);
      for (const char* f : {"schema.json", "train.jsonl", "test.jsonl", "refine_train.jsonl", "refine_test.jsonl"}) {
        if (!std::filesystem::exists(ws.path(f))) throw pipeline::DataError(std::string("missing ") + f);
        std::filesystem::copy_file(ws.path(f), scratch.path(f), std::filesystem::copy_options::overwrite_existing);
      }
      auto o = pipeline::open_oracle(replay.oracle);
      oracle_stages(replay, scratch, o.get());
      std::vector<std::string> diffs;
      for (const char* f : {"program_init.json", "program.json", "refine_log.jsonl", "dag.json"}) {
        if (!std::filesystem::exists(ws.path(f))) throw pipeline::DataError(std::string("missing recorded ") + f);
        if (read_file(ws.path(f)) != read_file(scratch.path(f))) diffs.push_back(f);
      }
      if (!diffs.empty()) {
        std::string msg = "replay differs from the recorded run:";
        for (const auto& d : diffs) msg += " " + d;
        throw pipeline::DataError(msg);
      }
      std::cout << "verify: replay reproduces program_init.json, program.json, refine_log.jsonl and dag.json\n";
    } else if (info->parsed()) {
      auto path = fixture_path(s, fixture);
      std::map<std::string, int> counts;
      for (const auto& [k, e] : oracle::fixture_from_value(doc::parse(read_file(path))))
        ++counts[std::string(oracle::kind_name(e.kind))];
      std::cout << path.string() << "\n";
      for (const auto& [k, n] : counts) std::cout << "  " << k << ": " << n << "\n";
    }
  });
}
