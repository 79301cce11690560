#pragma once

#include "causerank/core.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <charconv>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace causerank {

enum class RecordFormat { Jsonl, CsvWide };

inline RecordFormat parse_record_format(std::string_view name) {
  if (name == "jsonl") return RecordFormat::Jsonl;
  if (name == "csv-wide" || name == "csv") return RecordFormat::CsvWide;
  throw Error(Errc::UnknownFormat, std::string(name));
}

struct ParseResult {
  std::vector<MetricRecord> records;
  // Rows dropped because their value was not finite.
  std::size_t warnings = 0;
};

/// Sparse observations of one (metric, tags) series, sorted by ts with unique timestamps.
struct RawSeries {
  std::string metric;
  std::map<std::string, std::string> tags;
  std::string feature;  // feature name override; series id when empty
  std::vector<std::pair<std::int64_t, double>> points;

  std::string id() const { return series_id(metric, tags); }
  std::string feature_name() const { return feature.empty() ? id() : feature; }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    auto next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(s.substr(pos));
      break;
    }
    out.push_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
  return out;
}

inline bool is_nonfinite_word(std::string_view s) {
  std::string lower;
  for (char c : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return lower == "nan" || lower == "inf" || lower == "+inf" || lower == "-inf" || lower == "infinity" ||
         lower == "-infinity" || lower == "+infinity";
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (is_nonfinite_word(s)) return std::numeric_limits<double>::quiet_NaN();
  std::string tmp(s);
  char* end = nullptr;
  double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size()) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  s = trim(s);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses a csv-wide column header of the form "metric{k=v,k=v}" (braces optional).
inline std::pair<std::string, std::map<std::string, std::string>> parse_series_header(std::string_view text) {
  text = detail::trim(text);
  std::map<std::string, std::string> tags;
  auto brace = text.find('{');
  if (brace == std::string_view::npos) {
    if (text.empty()) throw Error(Errc::MalformedRow, "empty series header");
    return {std::string(text), tags};
  }
  if (text.back() != '}') throw Error(Errc::MalformedRow, "unterminated tag braces in '" + std::string(text) + "'");
  std::string metric(detail::trim(text.substr(0, brace)));
  if (metric.empty()) throw Error(Errc::MalformedRow, "empty metric name in '" + std::string(text) + "'");
  auto inner = text.substr(brace + 1, text.size() - brace - 2);
  if (!detail::trim(inner).empty()) {
    for (auto kv : detail::split(inner, ',')) {
      auto eq = kv.find('=');
      if (eq == std::string_view::npos) throw Error(Errc::MalformedRow, "tag without '=' in '" + std::string(text) + "'");
      std::string k(detail::trim(kv.substr(0, eq)));
      std::string v(detail::trim(kv.substr(eq + 1)));
      if (k.empty() || !tags.emplace(k, v).second)
        throw Error(Errc::MalformedRow, "bad or duplicate tag key in '" + std::string(text) + "'");
    }
  }
  return {metric, tags};
}

namespace detail {

inline ParseResult parse_jsonl(std::istream& in) {
  ParseResult out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": not valid JSON");
    }
    auto bad = [&](const std::string& why) {
      return Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": " + why);
    };
    if (!row.is_object() || row.size() != 4 || !row.contains("ts") || !row.contains("metric") ||
        !row.contains("tags") || !row.contains("value")) {
      throw bad("expected exactly the keys ts, metric, tags, value");
    }
    if (!row["ts"].is_number_integer()) throw bad("ts must be an integer (epoch minutes)");
    if (!row["metric"].is_string() || row["metric"].get<std::string>().empty()) throw bad("metric must be a non-empty string");
    if (!row["tags"].is_object()) throw bad("tags must be an object");

    MetricRecord rec;
    rec.ts = row["ts"].get<std::int64_t>();
    rec.metric = row["metric"].get<std::string>();
    for (const auto& [k, v] : row["tags"].items()) {
      if (!v.is_string()) throw bad("tag values must be strings");
      rec.tags.emplace(k, v.get<std::string>());
    }
    const auto& value = row["value"];
    if (value.is_number()) {
      rec.value = value.get<double>();
    } else if (value.is_string() && is_nonfinite_word(value.get<std::string>())) {
      rec.value = std::numeric_limits<double>::quiet_NaN();
    } else {
      throw bad("value must be a number");
    }
    if (!std::isfinite(rec.value)) {
      ++out.warnings;
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

inline ParseResult parse_csv_wide(std::istream& in) {
  ParseResult out;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::pair<std::string, std::map<std::string, std::string>>> columns;

  // Header cells are split on commas outside braces.
  auto split_header = [](std::string_view s) {
    std::vector<std::string_view> cells;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '{') ++depth;
      else if (s[i] == '}') --depth;
      else if (s[i] == ',' && depth == 0) {
        cells.push_back(s.substr(start, i - start));
        start = i + 1;
      }
    }
    cells.push_back(s.substr(start));
    return cells;
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    if (columns.empty()) {
      auto cells = split_header(trim(line));
      if (cells.empty() || trim(cells[0]) != "ts")
        throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": first header column must be 'ts'");
      for (std::size_t i = 1; i < cells.size(); ++i) {
        try {
          columns.push_back(parse_series_header(cells[i]));
        } catch (const Error& e) {
          throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": " + e.what());
        }
      }
      continue;
    }
    auto cells = split(trim(line), ',');
    if (cells.size() != columns.size() + 1)
      throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": wrong number of cells");
    auto ts = parse_int(cells[0]);
    if (!ts) throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": bad ts");
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (trim(cells[c + 1]).empty()) continue;
      auto v = parse_double(cells[c + 1]);
      if (!v) throw Error(Errc::MalformedRow, "line " + std::to_string(lineno) + ": bad value in column " + std::to_string(c + 2));
      if (!std::isfinite(*v)) {
        ++out.warnings;
        continue;
      }
      out.records.push_back(MetricRecord{*ts, columns[c].first, columns[c].second, *v});
    }
  }
  return out;
}

}  // namespace detail

inline ParseResult parse_records(std::istream& in, RecordFormat format) {
  switch (format) {
    case RecordFormat::Jsonl: return detail::parse_jsonl(in);
    case RecordFormat::CsvWide: return detail::parse_csv_wide(in);
  }
  throw Error(Errc::UnknownFormat, "unsupported record format");
}

inline ParseResult parse_records(const std::string& text, RecordFormat format) {
  std::istringstream in(text);
  return parse_records(in, format);
}

inline nlohmann::json record_to_json(const MetricRecord& r) {
  nlohmann::json tags = nlohmann::json::object();
  for (const auto& [k, v] : r.tags) tags[k] = v;
  return {{"ts", r.ts}, {"metric", r.metric}, {"tags", tags}, {"value", r.value}};
}

inline void serialize_records(const std::vector<MetricRecord>& records, std::ostream& out) {
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

inline std::string serialize_records(const std::vector<MetricRecord>& records) {
  std::ostringstream out;
  serialize_records(records, out);
  return out.str();
}

/// Groups records into series keyed by (metric, tags); duplicate timestamps are averaged.
inline std::vector<RawSeries> group_series(const std::vector<MetricRecord>& records) {
  std::map<std::string, RawSeries> by_id;
  std::map<std::string, std::map<std::int64_t, std::pair<double, std::size_t>>> acc;
  for (const auto& r : records) {
    auto id = series_id(r.metric, r.tags);
    auto [it, inserted] = by_id.try_emplace(id);
    if (inserted) {
      it->second.metric = r.metric;
      it->second.tags = r.tags;
    }
    auto& cell = acc[id][r.ts];
    cell.first += r.value;
    cell.second += 1;
  }
  std::vector<RawSeries> out;
  out.reserve(by_id.size());
  for (auto& [id, series] : by_id) {
    for (const auto& [ts, sum_count] : acc[id])
      series.points.emplace_back(ts, sum_count.first / static_cast<double>(sum_count.second));
    out.push_back(std::move(series));
  }
  return out;
}

/// Fills every grid slot with the nearest-in-time observation inside the index range.
/// Equidistant neighbours resolve to the earlier observation.
inline Vector interpolate_missing(const RawSeries& series, const TimeIndex& index) {
  std::vector<std::pair<std::int64_t, double>> pts;
  for (const auto& p : series.points)
    if (p.first >= index.start_ts && p.first <= index.end_ts) pts.push_back(p);
  if (pts.empty()) throw Error(Errc::AllMissing, series.feature_name());
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  const std::size_t n = index.size();
  Vector out(static_cast<Eigen::Index>(n));
  std::size_t j = 0;  // first point with ts >= grid time
  for (std::size_t slot = 0; slot < n; ++slot) {
    const auto t = index.at(slot);
    while (j < pts.size() && pts[j].first < t) ++j;
    double v = 0;
    if (j == pts.size()) {
      v = pts.back().second;
    } else if (pts[j].first == t || j == 0) {
      v = pts[j].second;
    } else {
      const auto before = t - pts[j - 1].first;
      const auto after = pts[j].first - t;
      v = (before <= after) ? pts[j - 1].second : pts[j].second;
    }
    out(static_cast<Eigen::Index>(slot)) = v;
  }
  return out;
}

/// Builds a dense T x F family with columns ordered by feature name.
inline FeatureFamily assemble_family(const std::vector<RawSeries>& rows, const std::string& key,
                                     const TimeIndex& index, const std::string& provenance = {}) {
  if (rows.empty()) throw Error(Errc::EmptyFamily, key);
  std::vector<const RawSeries*> sorted;
  for (const auto& r : rows) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const RawSeries* a, const RawSeries* b) { return a->feature_name() < b->feature_name(); });

  FeatureFamily fam;
  fam.key = key;
  fam.provenance = provenance;
  fam.matrix.resize(static_cast<Eigen::Index>(index.size()), static_cast<Eigen::Index>(sorted.size()));
  for (std::size_t c = 0; c < sorted.size(); ++c) {
    if (c > 0 && sorted[c]->feature_name() == sorted[c - 1]->feature_name())
      throw Error(Errc::InvalidArgument, "duplicate feature '" + sorted[c]->feature_name() + "' in family " + key);
    fam.feature_names.push_back(sorted[c]->feature_name());
    fam.feature_metrics.push_back(sorted[c]->id());
    fam.matrix.col(static_cast<Eigen::Index>(c)) = interpolate_missing(*sorted[c], index);
  }
  return fam;
}

}  // namespace causerank
