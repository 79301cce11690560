#pragma once

#include "causerank/core.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace causerank {

// Family-table file:
//   line 1   "CRFT1"
//   line 2   JSON header: {"index": {...}, "families": [{"key", "features", "metrics", "provenance", "rows", "cols"}]}
//   payload  each family's T x F float64 matrix, little-endian, row-major, in header order

inline constexpr std::string_view kTableMagic = "CRFT1";

inline nlohmann::json index_to_json(const TimeIndex& index) {
  nlohmann::json j = {{"start", index.start_ts}, {"end", index.end_ts}, {"step", index.step}};
  if (index.highlight) j["highlight"] = {index.highlight->first, index.highlight->second};
  return j;
}

inline TimeIndex index_from_json(const nlohmann::json& j) {
  std::optional<std::pair<std::int64_t, std::int64_t>> hl;
  if (j.contains("highlight") && !j["highlight"].is_null())
    hl = std::make_pair(j["highlight"][0].get<std::int64_t>(), j["highlight"][1].get<std::int64_t>());
  return TimeIndex(j.at("start").get<std::int64_t>(), j.at("end").get<std::int64_t>(), j.value("step", std::int64_t{1}), hl);
}

inline void write_family_table(const FamilyTable& table, std::ostream& out) {
  static_assert(std::endian::native == std::endian::little, "table payload is written in native little-endian order");
  nlohmann::json header;
  header["index"] = index_to_json(table.index());
  header["families"] = nlohmann::json::array();
  for (const auto& f : table.families()) {
    header["families"].push_back({{"key", f.key},
                                  {"features", f.feature_names},
                                  {"metrics", f.feature_metrics},
                                  {"provenance", f.provenance},
                                  {"rows", f.matrix.rows()},
                                  {"cols", f.matrix.cols()}});
  }
  out << kTableMagic << '\n' << header.dump() << '\n';
  for (const auto& f : table.families())
    out.write(reinterpret_cast<const char*>(f.matrix.data()),
              static_cast<std::streamsize>(f.matrix.size() * static_cast<Eigen::Index>(sizeof(double))));
  if (!out) throw Error(Errc::Io, "failed writing family table");
}

inline FamilyTable read_family_table(std::istream& in) {
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kTableMagic) throw Error(Errc::Io, "not a family-table file");
  if (!std::getline(in, header_line)) throw Error(Errc::Io, "family-table header missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::Io, std::string("bad family-table header: ") + e.what());
  }
  FamilyTable table(index_from_json(header.at("index")));
  for (const auto& fj : header.at("families")) {
    FeatureFamily f;
    f.key = fj.at("key").get<std::string>();
    f.feature_names = fj.at("features").get<std::vector<std::string>>();
    f.feature_metrics = fj.value("metrics", f.feature_names);
    f.provenance = fj.value("provenance", std::string());
    f.matrix.resize(fj.at("rows").get<Eigen::Index>(), fj.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(f.matrix.data()),
            static_cast<std::streamsize>(f.matrix.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw Error(Errc::Io, "family-table payload truncated at family '" + f.key + "'");
    table.add(std::move(f));
  }
  return table;
}

inline void save_family_table(const FamilyTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot open '" + path + "' for writing");
  write_family_table(table, out);
}

inline FamilyTable load_family_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + path + "'");
  return read_family_table(in);
}

}  // namespace causerank
