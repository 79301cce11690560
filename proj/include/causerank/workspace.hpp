#pragma once

#include "causerank/engine.hpp"
#include "causerank/ingest.hpp"
#include "causerank/query.hpp"
#include "causerank/table_io.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>

namespace causerank {

/// Grid covering all record timestamps; the step is the gcd of the gaps between distinct timestamps.
inline TimeIndex infer_index(const std::vector<MetricRecord>& records) {
  if (records.empty()) throw Error(Errc::EmptyResult, "no records");
  std::vector<std::int64_t> ts;
  ts.reserve(records.size());
  for (const auto& r : records) ts.push_back(r.ts);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  if (ts.size() < 2) throw Error(Errc::InvalidArgument, "records span a single timestamp");
  std::int64_t step = 0;
  for (std::size_t i = 1; i < ts.size(); ++i) step = std::gcd(step, ts[i] - ts[i - 1]);
  return TimeIndex(ts.front(), ts.back(), std::max<std::int64_t>(1, step));
}

/// Evaluates every statement of a DSL text against the records and builds the family table.
inline std::pair<FamilyTable, std::vector<std::string>> run_queries(const std::string& text,
                                                                    const std::vector<MetricRecord>& records,
                                                                    const std::string& id_prefix = "q") {
  const auto queries = parse_queries(text);
  if (queries.empty()) throw Error(Errc::SyntaxError, "no query statements");
  const auto index = infer_index(records);
  std::vector<QueryResult> results;
  for (std::size_t i = 0; i < queries.size(); ++i)
    results.push_back(evaluate_query(queries[i], records, index, id_prefix + std::to_string(i)));
  auto merged = union_results(results);
  if (merged.features.empty()) throw Error(Errc::EmptyResult, "queries matched no records");
  return {to_family_table(merged, merged.index), merged.warnings};
}

/// Adds the families of `extra` to `into`; grids must agree and keys must be new.
inline void merge_tables(FamilyTable& into, const FamilyTable& extra) {
  if (!into.index().same_grid(extra.index()))
    throw Error(Errc::InvalidArgument, "family tables of one dataset must share a time grid");
  for (const auto& f : extra.families())
    if (into.contains(f.key)) throw Error(Errc::DuplicateFamilyKey, f.key);
  for (const auto& f : extra.families()) into.add(f);
}

/// On-disk layout:
///   datasets/<id>/records.jsonl, datasets/<id>/queries.dsl, datasets/<id>/table.cft
///   sessions/<id>.jsonl            append-only event log (create, pseudocause, run)
///   reports/<session>/<run>.json   ranked report with timings
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root) : root_(std::move(root)) {
    for (const char* d : {"datasets", "sessions", "reports"}) std::filesystem::create_directories(root_ / d);
  }

  const std::filesystem::path& root() const { return root_; }

  // -- datasets -------------------------------------------------------------

  std::string add_dataset(const std::vector<MetricRecord>& records) {
    if (records.empty()) throw Error(Errc::EmptyResult, "dataset has no records");
    std::lock_guard lock(mutex_);
    const auto id = next_id(root_ / "datasets", "ds");
    const auto dir = root_ / "datasets" / id;
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "records.jsonl", std::ios::binary);
    serialize_records(records, out);
    if (!out) throw Error(Errc::Io, "failed writing dataset records");
    return id;
  }

  bool has_dataset(const std::string& id) const {
    return valid_id(id) && std::filesystem::exists(root_ / "datasets" / id / "records.jsonl");
  }

  /// Runs DSL text over a dataset's records and merges the families into its table.
  nlohmann::json add_queries(const std::string& dataset, const std::string& text) {
    require_dataset(dataset);
    std::lock_guard lock(mutex_);
    const auto dir = root_ / "datasets" / dataset;
    std::ifstream in(dir / "records.jsonl", std::ios::binary);
    const auto parsed = parse_records(in, RecordFormat::Jsonl);
    const auto prior = std::filesystem::exists(dir / "queries.dsl") ? count_lines(dir / "queries.dsl") : 0;
    auto [fresh, warnings] = run_queries(text, parsed.records, "q" + std::to_string(prior) + "-");
    FamilyTable table = std::filesystem::exists(dir / "table.cft") ? load_family_table((dir / "table.cft").string()) : FamilyTable(fresh.index());
    merge_tables(table, fresh);
    save_family_table(table, (dir / "table.cft").string());
    {
      std::ofstream q(dir / "queries.dsl", std::ios::app);
      std::string flat = text;
      std::replace(flat.begin(), flat.end(), '\n', ' ');
      q << flat << '\n';
    }
    tables_.erase(dataset);
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : fresh.families())
      fams.push_back({{"key", f.key}, {"features", f.feature_names.size()}, {"provenance", f.provenance}});
    return {{"dataset", dataset}, {"families", fams}, {"warnings", warnings}, {"index", index_to_json(table.index())}};
  }

  std::shared_ptr<const FamilyTable> table(const std::string& dataset) {
    require_dataset(dataset);
    std::lock_guard lock(mutex_);
    auto it = tables_.find(dataset);
    if (it != tables_.end()) return it->second;
    const auto path = root_ / "datasets" / dataset / "table.cft";
    if (!std::filesystem::exists(path)) throw Error(Errc::NotFound, "dataset '" + dataset + "' has no families yet");
    auto t = std::make_shared<const FamilyTable>(load_family_table(path.string()));
    tables_[dataset] = t;
    return t;
  }

  // -- sessions -------------------------------------------------------------

  Session create_session(Session s) {
    auto base = table(s.dataset);
    validate_session(s, *base);
    std::lock_guard lock(mutex_);
    s.id = next_id(root_ / "sessions", "s");
    s.runs.clear();
    append_event(s.id, {{"event", "create"}, {"session", session_to_json(s)}});
    auto e = std::make_shared<Entry>();
    e->session = s;
    sessions_[s.id] = e;
    return s;
  }

  bool has_session(const std::string& id) {
    std::lock_guard lock(mutex_);
    return sessions_.count(id) || (valid_id(id) && std::filesystem::exists(session_path(id)));
  }

  /// Consistent copy of a session's state.
  Session session(const std::string& id) {
    auto e = entry(id);
    std::lock_guard lock(e->mutex);
    return e->session;
  }

  /// Runs the session; a repeated non-empty token returns the cached run.
  RunRecord run(const std::string& id, const std::string& token = {}) {
    auto e = entry(id);
    std::lock_guard lock(e->mutex);
    if (!token.empty())
      for (const auto& r : e->session.runs)
        if (r.token == token) return r;
    auto base = table(e->session.dataset);
    Session work = e->session;
    const auto& run = run_search(work, *base, token);
    const auto index = session_index(work, base->index());
    const auto report = report_to_json(work, run, index);
    write_report(id, run.number, report_to_json(work, run, index, true));
    append_event(id, {{"event", "run"}, {"run", run.number}, {"token", token}, {"report", report},
                      {"scored_families", run.scored}});
    e->session = std::move(work);
    return e->session.runs.back();
  }

  nlohmann::json report(const std::string& id, std::size_t n, bool with_timing = false) {
    auto e = entry(id);
    std::lock_guard lock(e->mutex);
    if (n < 1 || n > e->session.runs.size()) throw Error(Errc::NotScored, "session '" + id + "' has no run " + std::to_string(n));
    if (with_timing) {
      std::ifstream in(root_ / "reports" / id / (std::to_string(n) + ".json"));
      return nlohmann::json::parse(in);
    }
    auto base = table(e->session.dataset);
    return report_to_json(e->session, e->session.runs[n - 1], session_index(e->session, base->index()));
  }

  Session fork(const std::string& parent_id, const SessionOverrides& o) {
    const Session parent = session(parent_id);
    auto base = table(parent.dataset);
    Session child = fork_session(parent, o, "", *base);
    std::lock_guard lock(mutex_);
    child.id = next_id(root_ / "sessions", "s");
    append_event(child.id, {{"event", "create"}, {"session", session_to_json(child)}});
    auto e = std::make_shared<Entry>();
    e->session = child;
    sessions_[child.id] = e;
    return child;
  }

  /// Derives a pseudocause and registers it with the session (optionally as a conditioning family).
  Pseudocause add_pseudocause(const std::string& id, const std::string& source, PseudocauseKind kind, int param,
                              const std::vector<double>& custom, bool add_to_condition, const std::string& key = {}) {
    auto e = entry(id);
    std::lock_guard lock(e->mutex);
    auto base = table(e->session.dataset);
    const SessionFamilies fams(e->session, *base);
    const auto src = source.empty() ? e->session.target : source;
    if (!fams.contains(src)) throw Error(Errc::UnknownFamily, src);
    const FamilyTable own = fams.subtable(Hypothesis{src, src, {}});
    auto pc = make_pseudocause(own.at(src), kind, param, custom, key);
    if (fams.contains(pc.key)) throw Error(Errc::DuplicateFamilyKey, pc.key);
    Session next = e->session;
    next.pseudocauses.push_back(pc);
    if (add_to_condition) next.condition.push_back(pc.key);
    validate_session(next, *base);
    append_event(id, {{"event", "pseudocause"}, {"pseudocause", pseudocause_to_json(pc)}, {"condition", add_to_condition}});
    e->session = std::move(next);
    return pc;
  }

  PlotData plot(const std::string& id, const std::string& family) {
    const Session s = session(id);
    auto base = table(s.dataset);
    return plot_series(s, *base, family);
  }

 private:
  struct Entry {
    std::mutex mutex;
    Session session;
  };

  static bool valid_id(const std::string& id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_';
    });
  }

  void require_dataset(const std::string& id) const {
    if (!has_dataset(id)) throw Error(Errc::NotFound, "no dataset '" + id + "'");
  }

  static std::size_t count_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
  }

  // Next free "<prefix>-<n>" among the entries of a directory (caller holds mutex_).
  static std::string next_id(const std::filesystem::path& dir, const std::string& prefix) {
    std::size_t n = 1;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      const auto stem = e.path().stem().string();
      if (stem.rfind(prefix + "-", 0) != 0) continue;
      auto v = detail::parse_int(stem.substr(prefix.size() + 1));
      if (v && *v >= 0) n = std::max<std::size_t>(n, static_cast<std::size_t>(*v) + 1);
    }
    return prefix + "-" + std::to_string(n);
  }

  std::filesystem::path session_path(const std::string& id) const { return root_ / "sessions" / (id + ".jsonl"); }

  void append_event(const std::string& id, const nlohmann::json& event) {
    std::ofstream out(session_path(id), std::ios::app | std::ios::binary);
    out << event.dump() << '\n';
    if (!out) throw Error(Errc::Io, "failed appending to session log '" + id + "'");
  }

  void write_report(const std::string& id, std::size_t n, const nlohmann::json& report) {
    const auto dir = root_ / "reports" / id;
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / (std::to_string(n) + ".json"), std::ios::binary);
    out << report.dump(2) << '\n';
  }

  std::shared_ptr<Entry> entry(const std::string& id) {
    std::lock_guard lock(mutex_);
    if (auto it = sessions_.find(id); it != sessions_.end()) return it->second;
    if (!valid_id(id) || !std::filesystem::exists(session_path(id))) throw Error(Errc::NotFound, "no session '" + id + "'");
    auto e = std::make_shared<Entry>();
    e->session = replay(id);
    sessions_[id] = e;
    return e;
  }

  Session replay(const std::string& id) const {
    std::ifstream in(session_path(id));
    std::string line;
    Session s;
    bool created = false;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto ev = nlohmann::json::parse(line);
      const auto kind = ev.at("event").get<std::string>();
      if (kind == "create") {
        s = session_from_json(ev.at("session"));
        created = true;
      } else if (kind == "pseudocause") {
        auto pc = pseudocause_from_json(ev.at("pseudocause"));
        if (ev.value("condition", false)) s.condition.push_back(pc.key);
        s.pseudocauses.push_back(std::move(pc));
      } else if (kind == "run") {
        s.runs.push_back(run_from_json(ev, s));
      }
    }
    if (!created) throw Error(Errc::Io, "session log '" + id + "' has no create event");
    return s;
  }

  std::filesystem::path root_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const FamilyTable>> tables_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
};

}  // namespace causerank
