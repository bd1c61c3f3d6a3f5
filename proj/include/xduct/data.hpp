#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xduct/errors.hpp"
#include "xduct/rng.hpp"
#include "xduct/vocab.hpp"

namespace xduct {

enum class TaskKind { G2P, Transliteration, Inflection, Synthetic };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::G2P: return "g2p";
    case TaskKind::Transliteration: return "translit";
    case TaskKind::Inflection: return "inflection";
    case TaskKind::Synthetic: return "synthetic";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view name) {
  if (name == "g2p") return TaskKind::G2P;
  if (name == "translit") return TaskKind::Transliteration;
  if (name == "inflection") return TaskKind::Inflection;
  if (name == "synthetic") return TaskKind::Synthetic;
  throw ArgumentError("unknown task '" + std::string(name) + "'");
}

struct Example {
  std::vector<std::string> source;
  std::vector<std::string> target;
  // Inflection only: number of leading source symbols that are morphological subtags.
  std::size_t tag_count = 0;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  TaskKind kind = TaskKind::Synthetic;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

// Splits UTF-8 text into code points, each returned as its own string.
inline std::vector<std::string> split_utf8(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto lead = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    if (i + len > s.size()) throw DataError("truncated UTF-8 sequence");
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> split_on(std::string_view s, char sep, bool collapse) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    const bool is_sep = collapse ? (ch == ' ' || ch == '\t' || ch == sep) : ch == sep;
    if (is_sep) {
      if (!cur.empty() || !collapse) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty() || !collapse) out.push_back(cur);
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// Parses one data line (without its newline) for the given task.
//   g2p:        word TAB space-separated phonemes
//   translit:   source TAB target (both split per character)
//   synthetic:  same as translit
//   inflection: lemma TAB form TAB semicolon-joined tag
inline Example parse_line(std::string_view line, TaskKind kind) {
  std::vector<std::string> cols = split_on(line, '\t', false);
  const std::size_t want = kind == TaskKind::Inflection ? 3 : 2;
  if (cols.size() != want) {
    throw DataError("expected " + std::to_string(want) + " tab-separated columns, found " +
                    std::to_string(cols.size()));
  }
  for (const auto& c : cols) {
    if (c.empty()) throw DataError("empty column");
  }
  Example ex;
  switch (kind) {
    case TaskKind::G2P:
      ex.source = split_utf8(cols[0]);
      ex.target = split_on(cols[1], ' ', true);
      break;
    case TaskKind::Transliteration:
    case TaskKind::Synthetic:
      ex.source = split_utf8(cols[0]);
      ex.target = split_utf8(cols[1]);
      break;
    case TaskKind::Inflection: {
      std::vector<std::string> tags = split_on(cols[2], ';', false);
      for (const auto& t : tags) {
        if (t.empty()) throw DataError("empty morphological subtag");
      }
      ex.tag_count = tags.size();
      ex.source = tags;
      for (auto& ch : split_utf8(cols[0])) ex.source.push_back(std::move(ch));
      ex.target = split_utf8(cols[1]);
      break;
    }
  }
  if (ex.source.empty() || ex.target.empty() ||
      (kind == TaskKind::Inflection && ex.source.size() == ex.tag_count)) {
    throw DataError("empty source or target");
  }
  return ex;
}

// Inverse of parse_line.
inline std::string format_line(const Example& ex, TaskKind kind) {
  switch (kind) {
    case TaskKind::G2P:
      return join(ex.source, "") + "\t" + join(ex.target, " ");
    case TaskKind::Transliteration:
    case TaskKind::Synthetic:
      return join(ex.source, "") + "\t" + join(ex.target, "");
    case TaskKind::Inflection: {
      std::vector<std::string> tags(ex.source.begin(), ex.source.begin() + static_cast<std::ptrdiff_t>(ex.tag_count));
      std::vector<std::string> lemma(ex.source.begin() + static_cast<std::ptrdiff_t>(ex.tag_count), ex.source.end());
      return join(lemma, "") + "\t" + join(ex.target, "") + "\t" + join(tags, ";");
    }
  }
  return {};
}

// Blank lines are skipped; a stream with no bytes at all is an error.
inline std::vector<Example> parse_tsv(std::istream& in, TaskKind kind, const std::string& origin) {
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  bool any_bytes = false;
  while (std::getline(in, line)) {
    ++line_no;
    any_bytes = true;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(parse_line(line, kind));
    } catch (const DataError& e) {
      throw DataError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!any_bytes) throw DataError(origin + ": empty file");
  return out;
}

inline std::vector<Example> read_tsv(const std::string& path, TaskKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return parse_tsv(in, kind, path);
}

inline void write_tsv(const std::string& path, const std::vector<Example>& examples, TaskKind kind) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& ex : examples) out << format_line(ex, kind) << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

enum class Side { Source, Target };

// Symbols are numbered by first occurrence, after the reserved entries.
inline Vocabulary build_vocab(const std::vector<Example>& examples, Side side) {
  if (examples.empty()) throw DataError("cannot build a vocabulary from an empty dataset");
  Vocabulary v;
  for (const auto& ex : examples) {
    for (const auto& s : side == Side::Source ? ex.source : ex.target) v.add(s);
  }
  return v;
}

struct Split {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

// Seeded shuffle, then 5% development, 10% test and the rest training.
inline Split split_g2p(const std::vector<Example>& examples, std::uint64_t seed) {
  if (examples.size() < 20) {
    throw DataError("need at least 20 examples to split, got " + std::to_string(examples.size()));
  }
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::derive(seed, "split");
  rng.shuffle(order);
  const std::size_t n_dev = examples.size() * 5 / 100;
  const std::size_t n_test = examples.size() * 10 / 100;
  Split s;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Example& ex = examples[order[k]];
    if (k < n_dev) s.dev.push_back(ex);
    else if (k < n_dev + n_test) s.test.push_back(ex);
    else s.train.push_back(ex);
  }
  return s;
}

enum class SyntheticRule { Copy, Reverse, Reduplicate };

inline SyntheticRule parse_rule(std::string_view name) {
  if (name == "copy") return SyntheticRule::Copy;
  if (name == "reverse") return SyntheticRule::Reverse;
  if (name == "reduplicate") return SyntheticRule::Reduplicate;
  throw ArgumentError("unknown synthetic rule '" + std::string(name) + "'");
}

inline constexpr std::size_t kReduplicationPrefix = 3;

// copy: s -> s; reverse: s -> reversed s; reduplicate: the first three
// symbols are prepended (mejr -> mejmejr).
inline std::vector<std::string> apply_rule(SyntheticRule rule, const std::vector<std::string>& s) {
  switch (rule) {
    case SyntheticRule::Copy:
      return s;
    case SyntheticRule::Reverse:
      return std::vector<std::string>(s.rbegin(), s.rend());
    case SyntheticRule::Reduplicate: {
      if (s.size() < kReduplicationPrefix) throw ArgumentError("reduplication needs at least 3 symbols");
      std::vector<std::string> out(s.begin(), s.begin() + kReduplicationPrefix);
      out.insert(out.end(), s.begin(), s.end());
      return out;
    }
  }
  return s;
}

struct SyntheticSpec {
  SyntheticRule rule = SyntheticRule::Copy;
  std::size_t train_size = 1000;  // dev and test each get max(1, train_size / 10)
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::size_t alphabet = 10;      // letters a.. (at most 26)
  std::uint64_t seed = 0;
};

// Uniformly random strings pushed through the rule; no string appears in
// more than one split.
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.alphabet == 0 || spec.alphabet > 26) throw ArgumentError("alphabet size must be in 1..26");
  if (spec.min_len == 0 || spec.min_len > spec.max_len) throw ArgumentError("invalid length range");
  if (spec.rule == SyntheticRule::Reduplicate && spec.min_len < kReduplicationPrefix) {
    throw ArgumentError("reduplication needs strings of length >= 3");
  }
  const std::size_t held_out = std::max<std::size_t>(1, spec.train_size / 10);
  const std::size_t needed = spec.train_size + 2 * held_out;
  double capacity = 0.0;
  for (std::size_t len = spec.min_len; len <= spec.max_len; ++len) {
    capacity += std::pow(static_cast<double>(spec.alphabet), static_cast<double>(len));
  }
  if (capacity < static_cast<double>(needed)) {
    throw ArgumentError("alphabet of " + std::to_string(spec.alphabet) + " symbols cannot produce " +
                        std::to_string(needed) + " distinct strings in the length range");
  }
  Rng rng = Rng::derive(spec.seed, "synthetic");
  auto letter = [](std::size_t k) { return std::string(1, static_cast<char>('a' + k)); };
  std::vector<std::vector<std::string>> strings;
  if (capacity <= 4.0 * static_cast<double>(needed)) {
    for (std::size_t len = spec.min_len; len <= spec.max_len; ++len) {
      std::vector<std::size_t> digits(len, 0);
      for (;;) {
        std::vector<std::string> s;
        for (std::size_t d : digits) s.push_back(letter(d));
        strings.push_back(std::move(s));
        std::size_t i = 0;
        while (i < len && ++digits[i] == spec.alphabet) digits[i++] = 0;
        if (i == len) break;
      }
    }
    rng.shuffle(strings);
    strings.resize(needed);
  } else {
    std::set<std::vector<std::string>> seen;
    while (strings.size() < needed) {
      const std::size_t len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
      std::vector<std::string> s;
      for (std::size_t k = 0; k < len; ++k) s.push_back(letter(rng.below(spec.alphabet)));
      if (seen.insert(s).second) strings.push_back(std::move(s));
    }
  }
  Dataset ds;
  ds.kind = TaskKind::Synthetic;
  for (std::size_t k = 0; k < strings.size(); ++k) {
    Example ex{strings[k], apply_rule(spec.rule, strings[k]), 0};
    if (k < spec.train_size) ds.train.push_back(std::move(ex));
    else if (k < spec.train_size + held_out) ds.dev.push_back(std::move(ex));
    else ds.test.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace xduct
