#pragma once

#include "causerank/core.hpp"
#include "causerank/ingest.hpp"

#include <numeric>
#include <regex>
#include <sstream>

namespace causerank {

/// Shell-style pattern: '*' any run, '?' one char, '[...]' a class.
class Glob {
 public:
  Glob() : Glob("*") {}
  explicit Glob(std::string pattern) : pattern_(std::move(pattern)) {
    std::string re;
    for (std::size_t i = 0; i < pattern_.size(); ++i) {
      const char c = pattern_[i];
      switch (c) {
        case '*': re += ".*"; break;
        case '?': re += '.'; break;
        case '[': {
          auto close = pattern_.find(']', i + 1);
          if (close == std::string::npos) throw Error(Errc::SyntaxError, "unterminated '[' in glob '" + pattern_ + "'");
          std::string cls = pattern_.substr(i + 1, close - i - 1);
          if (!cls.empty() && cls[0] == '!') cls[0] = '^';
          re += '[' + cls + ']';
          i = close;
          break;
        }
        default:
          if (std::string_view("\\^$.|+(){}").find(c) != std::string_view::npos) re += '\\';
          re += c;
      }
    }
    try {
      regex_ = std::regex(re, std::regex::ECMAScript);
    } catch (const std::regex_error&) {
      throw Error(Errc::SyntaxError, "glob '" + pattern_ + "' does not compile");
    }
  }

  bool matches(const std::string& s) const { return std::regex_match(s, regex_); }
  const std::string& pattern() const { return pattern_; }

 private:
  std::string pattern_;
  std::regex regex_;
};

// ---------------------------------------------------------------------------
// AST

/// String-valued expression over a record's name and tags.
struct KeyExpr {
  enum class Kind { Name, Tag, Concat, Split, Literal };
  Kind kind = Kind::Name;
  std::string text;  // tag key, literal value, or split separator
  std::vector<KeyExpr> args;
  int index = 0;     // split element

  bool operator==(const KeyExpr&) const = default;
};

struct Predicate {
  enum class Kind { Eq, Ne, In, Glob, And, Or, Not };
  Kind kind = Kind::Eq;
  KeyExpr lhs;
  std::vector<std::string> values;
  std::vector<Predicate> children;

  bool operator==(const Predicate&) const = default;
};

enum class Aggregate { Avg, Max, Min, Sum, Count, Percentile };

struct SelectItem {
  Aggregate agg = Aggregate::Avg;
  double quantile = 0;  // percentile only, in [0, 100]
  int lag = 0;
  std::optional<std::string> alias;

  bool operator==(const SelectItem&) const = default;
};

struct QueryAst {
  std::vector<KeyExpr> group_by;
  std::optional<Predicate> where;
  std::vector<SelectItem> select;
  std::optional<std::pair<std::int64_t, std::int64_t>> range;
  std::optional<std::int64_t> step;

  bool operator==(const QueryAst&) const = default;
};

// ---------------------------------------------------------------------------
// Lexer

namespace dsl {

struct Token {
  enum class Kind { Ident, String, Number, Punct, End };
  Kind kind = Kind::End;
  std::string text;
  int line = 1;
  int column = 1;
};

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::vector<Token> tokenize(std::string_view src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n && i < src.size(); ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  auto fail = [&](const std::string& why) {
    return Error(Errc::SyntaxError, "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " + why);
  };
  while (i < src.size()) {
    const char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    if (c == '-' && i + 1 < src.size() && src[i + 1] == '-') {
      while (i < src.size() && src[i] != '\n') advance(1);
      continue;
    }
    Token tok;
    tok.line = line;
    tok.column = col;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      tok.kind = Token::Kind::Ident;
      tok.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (c == '\'') {
      std::string s;
      advance(1);
      while (true) {
        if (i >= src.size()) throw fail("unterminated string literal");
        if (src[i] == '\'') {
          if (i + 1 < src.size() && src[i + 1] == '\'') {
            s += '\'';
            advance(2);
            continue;
          }
          advance(1);
          break;
        }
        s += src[i];
        advance(1);
      }
      tok.kind = Token::Kind::String;
      tok.text = std::move(s);
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '-' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      std::size_t j = i + 1;
      while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      if (j + 1 < src.size() && src[j] == '.' && std::isdigit(static_cast<unsigned char>(src[j + 1]))) {
        ++j;
        while (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) ++j;
      }
      tok.kind = Token::Kind::Number;
      tok.text = std::string(src.substr(i, j - i));
      advance(j - i);
    } else if (c == '.' && i + 1 < src.size() && src[i + 1] == '.') {
      tok.kind = Token::Kind::Punct;
      tok.text = "..";
      advance(2);
    } else if (c == '!' && i + 1 < src.size() && src[i + 1] == '=') {
      tok.kind = Token::Kind::Punct;
      tok.text = "!=";
      advance(2);
    } else if (std::string_view("(),[]=;").find(c) != std::string_view::npos) {
      tok.kind = Token::Kind::Punct;
      tok.text = std::string(1, c);
      advance(1);
    } else {
      throw fail(std::string("unexpected character '") + c + "'");
    }
    out.push_back(std::move(tok));
  }
  Token end;
  end.kind = Token::Kind::End;
  end.line = line;
  end.column = col;
  out.push_back(end);
  return out;
}

// ---------------------------------------------------------------------------
// Parser
//
//   query     := FAMILY BY key {',' key} [WHERE pred] SELECT item {',' item}
//                [RANGE int '..' int] [STEP int]
//   key       := name | metric | tag(str) | concat(key {',' key}) | split(key, str)[int] | str
//   pred      := and {OR and};  and := unary {AND unary}
//   unary     := NOT unary | '(' pred ')' | key ('=' | '!=') str | key IN '(' str {',' str} ')' | key GLOB str
//   item      := agg '(' arg [',' number] ')' [AS ident]
//   arg       := value | lag(value, int)

class Parser {
 public:
  explicit Parser(std::string_view text) : toks_(tokenize(text)) {}

  std::vector<QueryAst> parse_all() {
    std::vector<QueryAst> out;
    while (true) {
      while (is_punct(";")) ++pos_;
      if (peek().kind == Token::Kind::End) break;
      out.push_back(parse_query());
      if (!is_punct(";") && peek().kind != Token::Kind::End) throw error("expected ';' or end of input");
    }
    return out;
  }

 private:
  std::vector<Token> toks_;
  std::size_t pos_ = 0;

  const Token& peek() const { return toks_[pos_]; }
  Token take() { return toks_[pos_++]; }

  Error error(const std::string& why) const {
    const auto& t = peek();
    const std::string near = t.kind == Token::Kind::End ? "end of input" : "'" + t.text + "'";
    return Error(Errc::SyntaxError, "line " + std::to_string(t.line) + ", column " + std::to_string(t.column) + ": " +
                                        why + " near " + near);
  }

  bool is_punct(std::string_view p) const { return peek().kind == Token::Kind::Punct && peek().text == p; }
  bool is_keyword(std::string_view k) const { return peek().kind == Token::Kind::Ident && upper(peek().text) == k; }

  void expect_punct(std::string_view p) {
    if (!is_punct(p)) throw error("expected '" + std::string(p) + "'");
    ++pos_;
  }
  void expect_keyword(std::string_view k) {
    if (!is_keyword(k)) throw error("expected " + std::string(k));
    ++pos_;
  }
  std::string expect_string() {
    if (peek().kind != Token::Kind::String) throw error("expected a quoted string");
    return take().text;
  }
  std::int64_t expect_int() {
    if (peek().kind != Token::Kind::Number || peek().text.find('.') != std::string::npos) throw error("expected an integer");
    return std::stoll(take().text);
  }
  double expect_number() {
    if (peek().kind != Token::Kind::Number) throw error("expected a number");
    return std::stod(take().text);
  }

  QueryAst parse_query() {
    QueryAst q;
    expect_keyword("FAMILY");
    expect_keyword("BY");
    q.group_by.push_back(parse_key());
    while (is_punct(",")) {
      ++pos_;
      q.group_by.push_back(parse_key());
    }
    if (is_keyword("WHERE")) {
      ++pos_;
      q.where = parse_or();
    }
    expect_keyword("SELECT");
    q.select.push_back(parse_item());
    while (is_punct(",")) {
      ++pos_;
      q.select.push_back(parse_item());
    }
    if (is_keyword("RANGE")) {
      ++pos_;
      const auto a = expect_int();
      expect_punct("..");
      const auto b = expect_int();
      if (a >= b) throw error("RANGE requires start < end");
      q.range = std::make_pair(a, b);
    }
    if (is_keyword("STEP")) {
      ++pos_;
      const auto s = expect_int();
      if (s < 1) throw error("STEP must be >= 1");
      q.step = s;
    }
    return q;
  }

  KeyExpr parse_key() {
    if (peek().kind == Token::Kind::String) return KeyExpr{KeyExpr::Kind::Literal, take().text, {}, 0};
    if (peek().kind != Token::Kind::Ident) throw error("expected a key expression");
    const auto name = lower(peek().text);
    if (name == "name" || name == "metric") {
      ++pos_;
      return KeyExpr{KeyExpr::Kind::Name, {}, {}, 0};
    }
    if (!is_call()) throw error("expected a key expression");
    if (name == "tag") {
      pos_ += 2;
      auto key = expect_string();
      expect_punct(")");
      return KeyExpr{KeyExpr::Kind::Tag, std::move(key), {}, 0};
    }
    if (name == "concat") {
      pos_ += 2;
      KeyExpr e{KeyExpr::Kind::Concat, {}, {}, 0};
      e.args.push_back(parse_key());
      while (is_punct(",")) {
        ++pos_;
        e.args.push_back(parse_key());
      }
      expect_punct(")");
      return e;
    }
    if (name == "split") {
      pos_ += 2;
      KeyExpr e{KeyExpr::Kind::Split, {}, {}, 0};
      e.args.push_back(parse_key());
      expect_punct(",");
      e.text = expect_string();
      if (e.text.empty()) throw error("split separator must not be empty");
      expect_punct(")");
      expect_punct("[");
      const auto idx = expect_int();
      if (idx < 0) throw error("split index must be >= 0");
      e.index = static_cast<int>(idx);
      expect_punct("]");
      return e;
    }
    throw Error(Errc::UnknownFunction, "line " + std::to_string(peek().line) + ", column " +
                                           std::to_string(peek().column) + ": unknown function '" + peek().text + "'");
  }

  bool is_call() const {
    return peek().kind == Token::Kind::Ident && toks_[pos_ + 1].kind == Token::Kind::Punct && toks_[pos_ + 1].text == "(";
  }

  Predicate parse_or() {
    Predicate left = parse_and();
    while (is_keyword("OR")) {
      ++pos_;
      Predicate p;
      p.kind = Predicate::Kind::Or;
      p.children.push_back(std::move(left));
      p.children.push_back(parse_and());
      left = std::move(p);
    }
    return left;
  }

  Predicate parse_and() {
    Predicate left = parse_unary();
    while (is_keyword("AND")) {
      ++pos_;
      Predicate p;
      p.kind = Predicate::Kind::And;
      p.children.push_back(std::move(left));
      p.children.push_back(parse_unary());
      left = std::move(p);
    }
    return left;
  }

  Predicate parse_unary() {
    if (is_keyword("NOT")) {
      ++pos_;
      Predicate p;
      p.kind = Predicate::Kind::Not;
      p.children.push_back(parse_unary());
      return p;
    }
    if (is_punct("(")) {
      ++pos_;
      Predicate p = parse_or();
      expect_punct(")");
      return p;
    }
    Predicate p;
    p.lhs = parse_key();
    if (is_punct("=")) {
      ++pos_;
      p.kind = Predicate::Kind::Eq;
      p.values.push_back(expect_string());
    } else if (is_punct("!=")) {
      ++pos_;
      p.kind = Predicate::Kind::Ne;
      p.values.push_back(expect_string());
    } else if (is_keyword("IN")) {
      ++pos_;
      p.kind = Predicate::Kind::In;
      expect_punct("(");
      p.values.push_back(expect_string());
      while (is_punct(",")) {
        ++pos_;
        p.values.push_back(expect_string());
      }
      expect_punct(")");
    } else if (is_keyword("GLOB")) {
      ++pos_;
      p.kind = Predicate::Kind::Glob;
      p.values.push_back(expect_string());
      Glob check(p.values.back());
    } else {
      throw error("expected =, !=, IN or GLOB");
    }
    return p;
  }

  SelectItem parse_item() {
    if (peek().kind != Token::Kind::Ident || !is_call()) throw error("expected an aggregate such as avg(value)");
    const auto fn = lower(peek().text);
    SelectItem item;
    if (fn == "avg") item.agg = Aggregate::Avg;
    else if (fn == "max") item.agg = Aggregate::Max;
    else if (fn == "min") item.agg = Aggregate::Min;
    else if (fn == "sum") item.agg = Aggregate::Sum;
    else if (fn == "count") item.agg = Aggregate::Count;
    else if (fn == "percentile") item.agg = Aggregate::Percentile;
    else
      throw Error(Errc::UnknownFunction, "line " + std::to_string(peek().line) + ", column " +
                                             std::to_string(peek().column) + ": unknown aggregate '" + peek().text + "'");
    pos_ += 2;
    if (peek().kind == Token::Kind::Ident && lower(peek().text) == "lag" && is_call()) {
      pos_ += 2;
      if (!(peek().kind == Token::Kind::Ident && lower(peek().text) == "value")) throw error("lag expects 'value'");
      ++pos_;
      expect_punct(",");
      const auto k = expect_int();
      if (k < 0) throw error("LAG offset must be >= 0");
      item.lag = static_cast<int>(k);
      expect_punct(")");
    } else if (peek().kind == Token::Kind::Ident && lower(peek().text) == "value") {
      ++pos_;
    } else if (peek().kind == Token::Kind::Ident && is_call()) {
      throw Error(Errc::UnknownFunction, "line " + std::to_string(peek().line) + ", column " +
                                             std::to_string(peek().column) + ": unknown function '" + peek().text + "'");
    } else {
      throw error("expected 'value' or lag(value, k)");
    }
    if (item.agg == Aggregate::Percentile) {
      expect_punct(",");
      item.quantile = expect_number();
      if (item.quantile < 0 || item.quantile > 100) throw error("percentile must lie in [0, 100]");
    }
    expect_punct(")");
    if (is_keyword("AS")) {
      ++pos_;
      if (peek().kind != Token::Kind::Ident) throw error("expected an alias");
      item.alias = take().text;
    }
    return item;
  }
};

// ---------------------------------------------------------------------------
// Pretty printer

inline std::string quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += '\'';
    out += c;
  }
  return out + "'";
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string print_key(const KeyExpr& e) {
  switch (e.kind) {
    case KeyExpr::Kind::Name: return "name";
    case KeyExpr::Kind::Tag: return "tag(" + quote(e.text) + ")";
    case KeyExpr::Kind::Literal: return quote(e.text);
    case KeyExpr::Kind::Concat: {
      std::string s = "concat(";
      for (std::size_t i = 0; i < e.args.size(); ++i) s += (i ? ", " : "") + print_key(e.args[i]);
      return s + ")";
    }
    case KeyExpr::Kind::Split:
      return "split(" + print_key(e.args.at(0)) + ", " + quote(e.text) + ")[" + std::to_string(e.index) + "]";
  }
  return {};
}

inline std::string print_predicate(const Predicate& p) {
  switch (p.kind) {
    case Predicate::Kind::Eq: return print_key(p.lhs) + " = " + quote(p.values.at(0));
    case Predicate::Kind::Ne: return print_key(p.lhs) + " != " + quote(p.values.at(0));
    case Predicate::Kind::Glob: return print_key(p.lhs) + " GLOB " + quote(p.values.at(0));
    case Predicate::Kind::In: {
      std::string s = print_key(p.lhs) + " IN (";
      for (std::size_t i = 0; i < p.values.size(); ++i) s += (i ? ", " : "") + quote(p.values[i]);
      return s + ")";
    }
    case Predicate::Kind::And:
      return "(" + print_predicate(p.children.at(0)) + " AND " + print_predicate(p.children.at(1)) + ")";
    case Predicate::Kind::Or:
      return "(" + print_predicate(p.children.at(0)) + " OR " + print_predicate(p.children.at(1)) + ")";
    case Predicate::Kind::Not: return "NOT " + print_predicate(p.children.at(0));
  }
  return {};
}

inline std::string print_item(const SelectItem& item, bool with_alias = true) {
  static const char* names[] = {"avg", "max", "min", "sum", "count", "percentile"};
  std::string s = names[static_cast<int>(item.agg)];
  s += '(';
  s += item.lag > 0 ? "lag(value, " + std::to_string(item.lag) + ")" : std::string("value");
  if (item.agg == Aggregate::Percentile) s += ", " + format_number(item.quantile);
  s += ')';
  if (with_alias && item.alias) s += " AS " + *item.alias;
  return s;
}

}  // namespace dsl

inline std::vector<QueryAst> parse_queries(std::string_view text) { return dsl::Parser(text).parse_all(); }

inline QueryAst parse_query(std::string_view text) {
  auto all = parse_queries(text);
  if (all.size() != 1)
    throw Error(Errc::SyntaxError, "expected exactly one query, found " + std::to_string(all.size()));
  return std::move(all.front());
}

/// Canonical single-line form; parses back to an equal AST.
inline std::string pretty_print(const QueryAst& q) {
  std::string s = "FAMILY BY ";
  for (std::size_t i = 0; i < q.group_by.size(); ++i) s += (i ? ", " : "") + dsl::print_key(q.group_by[i]);
  if (q.where) s += " WHERE " + dsl::print_predicate(*q.where);
  s += " SELECT ";
  for (std::size_t i = 0; i < q.select.size(); ++i) s += (i ? ", " : "") + dsl::print_item(q.select[i]);
  if (q.range) s += " RANGE " + std::to_string(q.range->first) + ".." + std::to_string(q.range->second);
  if (q.step) s += " STEP " + std::to_string(*q.step);
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation

/// One row of the normalised schema: timestamp, family key, feature -> value.
struct QueryRow {
  std::int64_t ts = 0;
  std::string name;
  std::map<std::string, double> value;

  bool operator==(const QueryRow&) const = default;
};

struct FeatureSource {
  std::string metric;
  std::map<std::string, std::string> tags;

  bool operator==(const FeatureSource&) const = default;
};

struct QueryResult {
  TimeIndex index;
  std::vector<QueryRow> rows;  // ordered by (ts, name)
  // family -> feature -> underlying series
  std::map<std::string, std::map<std::string, FeatureSource>> features;
  std::map<std::string, std::string> provenance;  // family -> query id
  std::vector<std::string> warnings;
};

namespace dsl {

inline std::string eval_key(const KeyExpr& e, const MetricRecord& r) {
  switch (e.kind) {
    case KeyExpr::Kind::Name: return r.metric;
    case KeyExpr::Kind::Tag: {
      auto it = r.tags.find(e.text);
      return it == r.tags.end() ? std::string("NULL") : it->second;
    }
    case KeyExpr::Kind::Literal: return e.text;
    case KeyExpr::Kind::Concat: {
      std::string s;
      for (const auto& a : e.args) s += eval_key(a, r);
      return s;
    }
    case KeyExpr::Kind::Split: {
      const auto whole = eval_key(e.args.at(0), r);
      std::vector<std::string> parts;
      std::size_t pos = 0;
      while (true) {
        auto next = whole.find(e.text, pos);
        if (next == std::string::npos) {
          parts.push_back(whole.substr(pos));
          break;
        }
        parts.push_back(whole.substr(pos, next - pos));
        pos = next + e.text.size();
      }
      return static_cast<std::size_t>(e.index) < parts.size() ? parts[static_cast<std::size_t>(e.index)] : std::string();
    }
  }
  return {};
}

class CompiledPredicate {
 public:
  explicit CompiledPredicate(const Predicate& p) : p_(p) {
    if (p.kind == Predicate::Kind::Glob) glob_.emplace(p.values.at(0));
    for (const auto& c : p.children) children_.emplace_back(c);
  }

  bool operator()(const MetricRecord& r) const {
    switch (p_.kind) {
      case Predicate::Kind::Eq: return eval_key(p_.lhs, r) == p_.values[0];
      case Predicate::Kind::Ne: return eval_key(p_.lhs, r) != p_.values[0];
      case Predicate::Kind::In: {
        const auto v = eval_key(p_.lhs, r);
        return std::find(p_.values.begin(), p_.values.end(), v) != p_.values.end();
      }
      case Predicate::Kind::Glob: return glob_->matches(eval_key(p_.lhs, r));
      case Predicate::Kind::And: return children_[0](r) && children_[1](r);
      case Predicate::Kind::Or: return children_[0](r) || children_[1](r);
      case Predicate::Kind::Not: return !children_[0](r);
    }
    return false;
  }

 private:
  const Predicate& p_;
  std::optional<Glob> glob_;
  std::vector<CompiledPredicate> children_;
};

/// Family key from the group-by list: non-tag parts joined by '/', tag parts in braces.
/// Examples: "disk", "*{host=datanode-1}", "disk{host=datanode-1}".
inline std::string family_key(const std::vector<KeyExpr>& group_by, const MetricRecord& r) {
  std::string head, tags;
  for (const auto& e : group_by) {
    if (e.kind == KeyExpr::Kind::Tag) {
      if (!tags.empty()) tags += ',';
      tags += e.text + "=" + eval_key(e, r);
    } else {
      if (!head.empty()) head += '/';
      head += eval_key(e, r);
    }
  }
  if (head.empty()) head = "*";
  return tags.empty() ? head : head + "{" + tags + "}";
}

inline double aggregate(const SelectItem& item, std::vector<double>& values) {
  switch (item.agg) {
    case Aggregate::Avg: return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    case Aggregate::Max: return *std::max_element(values.begin(), values.end());
    case Aggregate::Min: return *std::min_element(values.begin(), values.end());
    case Aggregate::Sum: return std::accumulate(values.begin(), values.end(), 0.0);
    case Aggregate::Count: return static_cast<double>(values.size());
    case Aggregate::Percentile: {
      std::sort(values.begin(), values.end());
      const double pos = item.quantile / 100.0 * static_cast<double>(values.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, values.size() - 1);
      const double frac = pos - static_cast<double>(lo);
      return values[lo] + frac * (values[hi] - values[lo]);
    }
  }
  return 0;
}

}  // namespace dsl

/// Shifts a dense series back by k slots; the first k slots repeat the first value.
inline Vector apply_lag(const Vector& v, int k) {
  if (k <= 0 || v.size() == 0) return v;
  Vector out(v.size());
  for (Eigen::Index t = 0; t < v.size(); ++t) out(t) = t >= k ? v(t - k) : v(0);
  return out;
}

/// Evaluates a query over records on a time grid. A query RANGE/STEP overrides the grid.
/// Missing slots take the nearest observation; LAG is applied after filling.
inline QueryResult evaluate_query(const QueryAst& ast, const std::vector<MetricRecord>& records, const TimeIndex& index,
                                  const std::string& query_id = "q0") {
  TimeIndex grid = index;
  if (ast.range || ast.step) {
    grid = TimeIndex(ast.range ? ast.range->first : index.start_ts, ast.range ? ast.range->second : index.end_ts,
                     ast.step.value_or(index.step));
  }
  std::optional<dsl::CompiledPredicate> where;
  if (ast.where) where.emplace(*ast.where);

  struct Buckets {
    FeatureSource source;
    std::map<std::size_t, std::vector<double>> slots;
  };
  std::map<std::string, std::map<std::string, Buckets>> groups;
  for (const auto& r : records) {
    auto slot = grid.slot_of(r.ts);
    if (!slot) continue;
    if (where && !(*where)(r)) continue;
    auto& b = groups[dsl::family_key(ast.group_by, r)][series_id(r.metric, r.tags)];
    if (b.slots.empty()) b.source = FeatureSource{r.metric, r.tags};
    b.slots[*slot].push_back(r.value);
  }

  QueryResult out;
  out.index = grid;
  if (groups.empty()) {
    out.warnings.push_back("EmptyResult: query '" + pretty_print(ast) + "' matched no records");
    return out;
  }
  const bool suffix = ast.select.size() > 1;
  std::map<std::string, std::map<std::string, Vector>> dense;
  for (auto& [fam, series] : groups) {
    out.provenance[fam] = query_id;
    for (auto& [sid, b] : series) {
      for (const auto& item : ast.select) {
        RawSeries raw;
        raw.metric = b.source.metric;
        raw.tags = b.source.tags;
        for (auto& [slot, values] : b.slots) raw.points.emplace_back(grid.at(slot), dsl::aggregate(item, values));
        std::string fname = sid;
        if (suffix || item.alias) fname += "|" + (item.alias ? *item.alias : dsl::print_item(item, false));
        dense[fam][fname] = apply_lag(interpolate_missing(raw, grid), item.lag);
        out.features[fam][fname] = b.source;
      }
    }
  }
  for (std::size_t slot = 0; slot < grid.size(); ++slot) {
    for (const auto& [fam, feats] : dense) {
      QueryRow row;
      row.ts = grid.at(slot);
      row.name = fam;
      for (const auto& [fname, v] : feats) row.value[fname] = v(static_cast<Eigen::Index>(slot));
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

/// Concatenates results; family keys must be unique across inputs.
inline QueryResult union_results(const std::vector<QueryResult>& results) {
  QueryResult out;
  bool have_index = false;
  for (const auto& r : results) {
    if (r.features.empty()) {
      out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
      continue;
    }
    if (!have_index) {
      out.index = r.index;
      have_index = true;
    } else {
      // Cover both ranges; families are re-aligned when the table is built.
      out.index = TimeIndex(std::min(out.index.start_ts, r.index.start_ts), std::max(out.index.end_ts, r.index.end_ts),
                            std::min(out.index.step, r.index.step));
    }
    for (const auto& [fam, feats] : r.features) {
      if (out.features.count(fam)) throw Error(Errc::DuplicateFamilyKey, fam);
      out.features[fam] = feats;
    }
    for (const auto& [fam, id] : r.provenance) out.provenance[fam] = id;
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  std::stable_sort(out.rows.begin(), out.rows.end(), [](const QueryRow& a, const QueryRow& b) {
    return a.ts != b.ts ? a.ts < b.ts : a.name < b.name;
  });
  return out;
}

/// Serialises rows as JSON lines in the normalised schema.
inline std::string result_to_jsonl(const QueryResult& r) {
  std::string out;
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"timestamp", row.ts}, {"name", row.name}, {"value", row.value}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Dense family table on `index` (full outer join on time, then nearest-observation fill).
inline FamilyTable to_family_table(const QueryResult& result, const TimeIndex& index) {
  std::map<std::string, std::map<std::string, RawSeries>> series;
  for (const auto& [fam, feats] : result.features) {
    for (const auto& [fname, src] : feats) {
      auto& s = series[fam][fname];
      s.metric = src.metric;
      s.tags = src.tags;
      s.feature = fname;
    }
  }
  for (const auto& row : result.rows)
    for (const auto& [fname, v] : row.value) series[row.name][fname].points.emplace_back(row.ts, v);

  FamilyTable table(index);
  for (auto& [fam, feats] : series) {
    std::vector<RawSeries> cols;
    for (auto& [fname, s] : feats) cols.push_back(std::move(s));
    auto it = result.provenance.find(fam);
    table.add(assemble_family(cols, fam, index, it == result.provenance.end() ? std::string() : it->second));
  }
  return table;
}

struct HypothesisSet {
  std::vector<Hypothesis> hypotheses;
  std::vector<std::pair<std::string, std::string>> excluded;  // family key, reason
};

/// One hypothesis (X, target, condition) per search family. The target, the
/// conditioning families and anything overlapping them are excluded with a reason.
inline HypothesisSet generate_hypotheses(const FamilyTable& table, const std::string& target,
                                         const std::vector<std::string>& condition, const Glob& search = Glob("*")) {
  table.at(target);
  for (const auto& c : condition) table.at(c);
  if (std::find(condition.begin(), condition.end(), target) != condition.end())
    throw Error(Errc::OverlappingMetrics, "target '" + target + "' is also in the conditioning set");

  std::vector<std::string> keys;
  for (const auto& f : table.families()) keys.push_back(f.key);
  std::sort(keys.begin(), keys.end());

  HypothesisSet out;
  for (const auto& key : keys) {
    if (!search.matches(key)) continue;
    if (key == target) {
      out.excluded.emplace_back(key, "target");
      continue;
    }
    if (std::find(condition.begin(), condition.end(), key) != condition.end()) {
      out.excluded.emplace_back(key, "condition");
      continue;
    }
    Hypothesis h{key, target, condition};
    try {
      validate_hypothesis(h, table);
      out.hypotheses.push_back(std::move(h));
    } catch (const Error& e) {
      out.excluded.emplace_back(key, e.what());
    }
  }
  return out;
}

}  // namespace causerank
