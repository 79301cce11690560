#pragma once

#include "causerank/engine.hpp"
#include "causerank/http_api.hpp"
#include "causerank/ingest.hpp"
#include "causerank/ranking.hpp"
#include "causerank/synth.hpp"
#include "causerank/table_io.hpp"
#include "causerank/workspace.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace causerank::cli {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error(Errc::Io, "cannot write '" + p.string() + "'");
}

// ---------------------------------------------------------------------------
// eval

struct ScenarioCase {
  std::string name;
  FamilyTable table;
  std::string target;
  std::vector<std::string> condition;
  std::optional<nlohmann::json> pseudocause;  // {"kind", "param"} on the target
  ScenarioLabels labels;
};

/// Loads a scenario directory: scenario.json with either a "synth" spec, or a "table" file plus "labels.json".
inline ScenarioCase load_scenario(const fs::path& dir) {
  const auto meta = nlohmann::json::parse(read_file(dir / "scenario.json"));
  ScenarioCase c;
  c.name = meta.value("name", dir.filename().string());
  if (meta.contains("synth")) {
    auto sc = synth::generate(synth::spec_from_json(meta["synth"]));
    c.table = std::move(sc.table);
    c.target = sc.target;
    c.condition = sc.condition;
    c.labels = std::move(sc.labels);
  } else {
    c.table = load_family_table((dir / meta.value("table", std::string("table.cft"))).string());
    c.labels = synth::labels_from_json(nlohmann::json::parse(read_file(dir / meta.value("labels", std::string("labels.json")))));
    c.target = "target";
  }
  c.target = meta.value("target", c.target);
  if (meta.contains("condition")) c.condition = meta["condition"].get<std::vector<std::string>>();
  if (meta.contains("pseudocause")) c.pseudocause = meta["pseudocause"];
  return c;
}

inline std::vector<fs::path> scenario_dirs(const fs::path& root) {
  if (fs::exists(root / "scenario.json")) return {root};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "scenario.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error(Errc::NotFound, "no scenario.json under '" + root.string() + "'");
  return out;
}

inline Session scenario_session(const ScenarioCase& c, const ScoringConfig& config, unsigned workers) {
  Session s;
  s.id = c.name;
  s.target = c.target;
  s.condition = c.condition;
  s.config = config;
  s.workers = workers;
  if (c.pseudocause) {
    const auto kind = parse_pseudocause_kind(c.pseudocause->value("kind", std::string("seasonal")));
    const int param = c.pseudocause->value("param", 0);
    auto pc = make_pseudocause(c.table.at(c.target), kind, param);
    s.condition.push_back(pc.key);
    s.pseudocauses.push_back(std::move(pc));
  }
  return s;
}

struct EvalTable {
  std::vector<std::string> methods;
  std::vector<std::string> scenarios;
  std::vector<std::vector<double>> gains;  // [method][scenario]
};

inline EvalTable evaluate(const std::vector<ScenarioCase>& cases, const std::vector<std::string>& methods,
                          std::uint64_t seed, unsigned workers, std::optional<int> proj_dim) {
  EvalTable t;
  t.methods = methods;
  for (const auto& c : cases) t.scenarios.push_back(c.name);
  for (const auto& m : methods) {
    ScoringConfig cfg;
    std::tie(cfg.method, cfg.proj_dim) = parse_method(m, proj_dim);
    cfg.seed = seed;
    std::vector<double> row;
    for (const auto& c : cases) {
      Session s = scenario_session(c, cfg, workers);
      const auto& run = run_search(s, c.table);
      row.push_back(discounted_gain(run.report, c.labels));
    }
    t.gains.push_back(std::move(row));
  }
  return t;
}

inline std::string format_eval(const EvalTable& t) {
  std::string out;
  char buf[64];
  auto cell = [&](const std::string& s, int width) {
    std::snprintf(buf, sizeof buf, "%-*s", width, s.c_str());
    out += buf;
  };
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%12.3f", v);
    out += buf;
  };
  std::size_t w = 16;
  for (const auto& s : t.scenarios) w = std::max(w, s.size() + 2);
  const int width = static_cast<int>(w);
  cell("scenario", width);
  for (const auto& m : t.methods) {
    std::snprintf(buf, sizeof buf, "%12s", m.c_str());
    out += buf;
  }
  out += '\n';
  for (std::size_t i = 0; i < t.scenarios.size(); ++i) {
    cell(t.scenarios[i], width);
    for (std::size_t m = 0; m < t.methods.size(); ++m) num(t.gains[m][i]);
    out += '\n';
  }
  std::vector<Summary> sums;
  for (const auto& g : t.gains) sums.push_back(summarize(g));
  auto row = [&](const std::string& label, auto get) {
    cell(label, width);
    for (const auto& s : sums) num(get(s));
    out += '\n';
  };
  row("harmonic mean", [](const Summary& s) { return s.harmonic_mean; });
  row("average", [](const Summary& s) { return s.arithmetic_mean; });
  row("stdev", [](const Summary& s) { return s.stdev; });
  for (std::size_t c = 0; c < kSuccessCutoffs.size(); ++c)
    row("success@" + std::to_string(kSuccessCutoffs[c]), [c](const Summary& s) { return s.success_rate[c]; });
  return out;
}

// ---------------------------------------------------------------------------
// dispatch

inline std::optional<TimeRange> parse_range_flag(const std::string& flag, const std::string& value) {
  if (value.empty()) return std::nullopt;
  try {
    return range_from_json(nlohmann::json(value));
  } catch (const Error& e) {
    throw Error(Errc::InvalidArgument, flag + ": " + e.what());
  }
}

inline int exit_code(const Error& e) {
  switch (e.code()) {
    case Errc::NumericalFailure: return 2;
    default: return 1;
  }
}

/// Entry point; returns the process exit code (0 ok, 1 user error, 2 internal error).
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"causerank: rank candidate root causes of a metric by conditional predictive power"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "causerank 0.1.0");

  // ingest
  std::vector<std::string> ingest_files;
  std::string ingest_out, ingest_format = "jsonl";
  auto* ingest = app.add_subcommand("ingest", "parse raw metric files into a normalised dataset (jsonl)");
  ingest->add_option("files", ingest_files, "input files")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "dataset file to write")->required();
  ingest->add_option("--format", ingest_format, "jsonl or csv-wide");

  // query
  std::string q_dataset, q_file, q_out, q_rows;
  auto* query = app.add_subcommand("query", "evaluate DSL queries over a dataset into a family table");
  query->add_option("dataset", q_dataset, "dataset (jsonl)")->required()->check(CLI::ExistingFile);
  query->add_option("query-file", q_file, "DSL file")->required()->check(CLI::ExistingFile);
  query->add_option("--out", q_out, "family table to write (.cft)")->required();
  query->add_option("--rows", q_rows, "also write the normalised rows as jsonl");

  // rank
  std::string r_table, r_target, r_method = "l2", r_range, r_highlight, r_search = "*", r_out, r_pseudo;
  std::vector<std::string> r_condition;
  std::optional<int> r_proj;
  std::uint64_t r_seed = 0;
  std::size_t r_top = kDefaultTopK;
  unsigned r_workers = 0;
  bool r_timing = false;
  std::string r_format = "jsonl";
  auto* rank_cmd = app.add_subcommand("rank", "rank candidate cause families for a target");
  rank_cmd->add_option("family-table", r_table, "family table (.cft)")->required()->check(CLI::ExistingFile);
  rank_cmd->add_option("--target", r_target, "target family key")->required();
  rank_cmd->add_option("--condition", r_condition, "conditioning family key (repeatable)");
  rank_cmd->add_option("--method", r_method, "corrmean, corrmax, l2, l2-proj, l2-p50, l2-p500");
  rank_cmd->add_option("--proj-dim", r_proj, "projection dimension for l2-proj");
  rank_cmd->add_option("--seed", r_seed, "master seed");
  rank_cmd->add_option("--range", r_range, "scoring range a..b");
  rank_cmd->add_option("--highlight", r_highlight, "highlighted event range a..b");
  rank_cmd->add_option("--search", r_search, "family glob to search");
  rank_cmd->add_option("--pseudocause", r_pseudo, "condition on a pseudocause of the target, kind:param (e.g. seasonal:60)");
  rank_cmd->add_option("--top-k", r_top, "entries to keep");
  rank_cmd->add_option("--workers", r_workers, "scoring threads (0 = all cores)");
  rank_cmd->add_flag("--timing", r_timing, "include per-family wall-clock times");
  rank_cmd->add_option("--format", r_format, "jsonl (one object per ranked entry) or json (full report)")
      ->check(CLI::IsMember({"jsonl", "json"}));
  rank_cmd->add_option("--out", r_out, "write the report here instead of stdout");

  // eval
  std::string e_dir, e_methods = "corrmean,corrmax,l2,l2-p50,l2-p500";
  std::uint64_t e_seed = 0;
  unsigned e_workers = 0;
  auto* eval = app.add_subcommand("eval", "score labelled scenarios and print discounted-gain and success@k rows");
  eval->add_option("scenario-dir", e_dir, "scenario directory or suite of them")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--methods", e_methods, "comma-separated methods");
  eval->add_option("--seed", e_seed, "master seed");
  eval->add_option("--workers", e_workers, "scoring threads (0 = all cores)");

  // synth
  std::string s_kind, s_out;
  std::uint64_t s_seed = 0;
  std::optional<std::size_t> s_families, s_t, s_effects;
  std::optional<double> s_noise;
  bool s_table = false;
  auto* synth_cmd = app.add_subcommand("synth", "generate a labelled synthetic scenario");
  synth_cmd->add_option("scenario", s_kind, "null, univariate, joint, seasonal-spike, chain")->required();
  synth_cmd->add_option("--seed", s_seed, "generator seed");
  synth_cmd->add_option("--out", s_out, "output directory")->required();
  synth_cmd->add_option("--families", s_families, "number of noise families");
  synth_cmd->add_option("--t", s_t, "series length");
  synth_cmd->add_option("--effects", s_effects, "effect families (planted scenarios)");
  synth_cmd->add_option("--noise", s_noise, "noise level");
  synth_cmd->add_flag("--table", s_table, "also write table.cft");

  // serve
  std::string v_ws, v_listen;
  auto* serve = app.add_subcommand("serve", "run the HTTP API over a workspace");
  serve->add_option("--workspace", v_ws, "workspace directory (env CAUSERANK_WORKSPACE)");
  serve->add_option("--listen", v_listen, "host:port (env CAUSERANK_LISTEN, default 127.0.0.1:8080)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << "causerank 0.1.0\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*ingest) {
      const auto format = parse_record_format(ingest_format);
      std::vector<MetricRecord> all;
      for (const auto& f : ingest_files) {
        std::ifstream in(f, std::ios::binary);
        auto parsed = parse_records(in, format);
        if (parsed.warnings) err << f << ": warning: dropped " << parsed.warnings << " non-finite rows\n";
        all.insert(all.end(), parsed.records.begin(), parsed.records.end());
      }
      std::stable_sort(all.begin(), all.end(), [](const MetricRecord& a, const MetricRecord& b) { return a.ts < b.ts; });
      write_file(ingest_out, serialize_records(all));
      err << "ingested " << all.size() << " records\n";
    } else if (*query) {
      std::ifstream in(q_dataset, std::ios::binary);
      const auto parsed = parse_records(in, RecordFormat::Jsonl);
      auto [table, warnings] = run_queries(read_file(q_file), parsed.records);
      for (const auto& w : warnings) err << "warning: " << w << '\n';
      save_family_table(table, q_out);
      if (!q_rows.empty()) {
        const auto queries = parse_queries(read_file(q_file));
        std::vector<QueryResult> results;
        const auto index = infer_index(parsed.records);
        for (std::size_t i = 0; i < queries.size(); ++i)
          results.push_back(evaluate_query(queries[i], parsed.records, index, "q" + std::to_string(i)));
        write_file(q_rows, result_to_jsonl(union_results(results)));
      }
      err << "wrote " << table.size() << " families\n";
    } else if (*rank_cmd) {
      const auto table = load_family_table(r_table);
      Session s;
      s.id = "cli";
      s.target = r_target;
      s.condition = r_condition;
      s.search = r_search;
      std::tie(s.config.method, s.config.proj_dim) = parse_method(r_method, r_proj);
      if (r_proj && s.config.method != Method::L2Proj) throw Error(Errc::InvalidArgument, "--proj-dim only applies to l2-proj");
      if (r_proj && r_method != "l2-proj" && r_proj != s.config.proj_dim)
        throw Error(Errc::InvalidArgument, "--proj-dim conflicts with --method " + r_method);
      s.config.seed = r_seed;
      s.range = parse_range_flag("--range", r_range);
      s.highlight = parse_range_flag("--highlight", r_highlight);
      s.top_k = r_top;
      s.workers = r_workers;
      if (!r_pseudo.empty()) {
        const auto colon = r_pseudo.find(':');
        const auto kind = parse_pseudocause_kind(r_pseudo.substr(0, colon));
        const auto param = colon == std::string::npos ? std::optional<std::int64_t>(0) : detail::parse_int(r_pseudo.substr(colon + 1));
        if (!param) throw Error(Errc::InvalidArgument, "--pseudocause parameter must be an integer");
        const SessionFamilies fams(s, table);
        const auto own = fams.subtable(Hypothesis{s.target, s.target, {}});
        auto pc = make_pseudocause(own.at(s.target), kind, static_cast<int>(*param));
        s.condition.push_back(pc.key);
        s.pseudocauses.push_back(std::move(pc));
      }
      const auto& run = run_search(s, table);
      const auto json = report_to_json(s, run, session_index(s, table.index()), r_timing);
      const auto report = r_format == "json" ? json.dump(2) + "\n" : report_to_jsonl(json);
      if (r_out.empty()) out << report;
      else write_file(r_out, report);
      for (const auto& f : run.report.failures)
        err << "warning: family '" << f.hypothesis.x << "' failed: " << (f.diagnostics.empty() ? "" : f.diagnostics.front()) << '\n';
    } else if (*eval) {
      std::vector<std::string> methods;
      std::stringstream ss(e_methods);
      for (std::string m; std::getline(ss, m, ',');)
        if (!m.empty()) {
          parse_method(m);
          methods.push_back(m);
        }
      std::vector<ScenarioCase> cases;
      for (const auto& d : scenario_dirs(e_dir)) cases.push_back(load_scenario(d));
      out << format_eval(evaluate(cases, methods, e_seed, e_workers, std::nullopt));
    } else if (*synth_cmd) {
      synth::ScenarioSpec spec;
      spec.kind = synth::parse_kind(s_kind);
      spec.seed = s_seed;
      if (s_families) spec.n_families = *s_families;
      if (s_t) spec.t = *s_t;
      if (s_effects) spec.n_effects = *s_effects;
      if (s_noise) spec.noise = *s_noise;
      if (spec.kind == synth::Kind::Joint && !s_effects) spec.n_effects = 6;
      const auto sc = synth::generate(spec);
      const fs::path dir(s_out);
      fs::create_directories(dir);
      write_file(dir / "records.jsonl", serialize_records(synth::to_records(sc.table)));
      write_file(dir / "labels.json", synth::labels_to_json(sc.labels).dump(2) + "\n");
      nlohmann::json meta = {{"name", std::string(synth::kind_name(spec.kind))},
                             {"synth", synth::spec_to_json(spec)},
                             {"target", sc.target},
                             {"condition", sc.condition},
                             {"roles", sc.roles},
                             {"population", sc.population}};
      if (spec.kind == synth::Kind::SeasonalSpike) meta["pseudocause"] = {{"kind", "seasonal"}, {"param", spec.period}};
      write_file(dir / "scenario.json", meta.dump(2) + "\n");
      write_file(dir / "families.dsl", "FAMILY BY name SELECT avg(value)\n");
      if (s_table) save_family_table(sc.table, (dir / "table.cft").string());
      err << "wrote scenario '" << s_kind << "' to " << dir.string() << '\n';
    } else if (*serve) {
      if (v_ws.empty())
        if (const char* e = std::getenv("CAUSERANK_WORKSPACE")) v_ws = e;
      if (v_listen.empty()) {
        const char* e = std::getenv("CAUSERANK_LISTEN");
        v_listen = e ? e : "127.0.0.1:8080";
      }
      if (v_ws.empty()) throw Error(Errc::InvalidArgument, "--workspace (or CAUSERANK_WORKSPACE) is required");
      const auto [host, port] = http::parse_listen(v_listen);
      http::Service service(v_ws);
      const int bound = service.bind(host, port);
      err << "listening on " << host << ":" << bound << '\n';
      return service.listen() ? 0 : 2;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const nlohmann::json::exception& e) {
    err << "error: malformed JSON: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace causerank::cli
