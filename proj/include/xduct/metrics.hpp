#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "xduct/data.hpp"
#include "xduct/errors.hpp"

namespace xduct {

using Symbols = std::vector<std::string>;

// Levenshtein distance with unit insertion, deletion and substitution costs.
inline std::size_t edit_distance(const Symbols& a, const Symbols& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace detail {
inline void require_parallel(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  if (refs.size() != hyps.size()) {
    throw ArgumentError("reference/hypothesis counts differ: " + std::to_string(refs.size()) + " vs " +
                        std::to_string(hyps.size()));
  }
}
}  // namespace detail

// Corpus-level phoneme error rate: sum of edit distances over sum of
// reference lengths.
inline double per(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  std::size_t dist = 0, len = 0;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (refs[k].empty()) throw ArgumentError("empty reference at position " + std::to_string(k));
    dist += edit_distance(hyps[k], refs[k]);
    len += refs[k].size();
  }
  if (len == 0) throw ArgumentError("PER of an empty corpus");
  return static_cast<double>(dist) / static_cast<double>(len);
}

// Mean over strings of ED / |reference|.
inline double per_string_mean(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  if (refs.empty()) throw ArgumentError("PER of an empty corpus");
  double total = 0.0;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (refs[k].empty()) throw ArgumentError("empty reference at position " + std::to_string(k));
    total += static_cast<double>(edit_distance(hyps[k], refs[k])) / static_cast<double>(refs[k].size());
  }
  return total / static_cast<double>(refs.size());
}

// Fraction of strings that are not reproduced exactly.
inline double wer(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  if (refs.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t k = 0; k < refs.size(); ++k) wrong += refs[k] != hyps[k];
  return static_cast<double>(wrong) / static_cast<double>(refs.size());
}

// Word accuracy in percent.
inline double acc(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  return 100.0 * (1.0 - wer(refs, hyps));
}

// F-score of one prediction against one reference from the LCS estimate
// LCS = (|c| + |r| - ED) / 2. Zero when LCS is zero or the prediction is empty.
inline double f_score(const Symbols& ref, const Symbols& hyp) {
  if (ref.empty() || hyp.empty()) return 0.0;
  const double lcs = 0.5 * (static_cast<double>(hyp.size() + ref.size()) -
                            static_cast<double>(edit_distance(hyp, ref)));
  if (lcs <= 0.0) return 0.0;
  const double recall = lcs / static_cast<double>(ref.size());
  const double precision = lcs / static_cast<double>(hyp.size());
  return 2.0 * recall * precision / (recall + precision);
}

inline double mfs(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  if (refs.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k < refs.size(); ++k) total += f_score(refs[k], hyps[k]);
  return total / static_cast<double>(refs.size());
}

// Mean Levenshtein distance.
inline double mld(const std::vector<Symbols>& refs, const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  if (refs.empty()) return 0.0;
  std::size_t total = 0;
  for (std::size_t k = 0; k < refs.size(); ++k) total += edit_distance(hyps[k], refs[k]);
  return static_cast<double>(total) / static_cast<double>(refs.size());
}

struct EvalRecord {
  Symbols source;
  Symbols reference;
  Symbols hypothesis;
  std::size_t distance = 0;
};

struct EvalReport {
  TaskKind task = TaskKind::Synthetic;
  std::vector<EvalRecord> records;
  double wer = 0.0;  // fraction
  double per = 0.0;  // corpus ratio
  double per_mean = 0.0;
  double acc = 0.0;  // percent
  double mfs = 0.0;
  double mld = 0.0;

  // Metric columns reported for a task, matching the shared-task conventions.
  static std::vector<std::string> columns(TaskKind task) {
    switch (task) {
      case TaskKind::G2P: return {"WER", "PER"};
      case TaskKind::Transliteration: return {"ACC", "MFS"};
      case TaskKind::Inflection:
      case TaskKind::Synthetic: return {"ACC", "MLD"};
    }
    return {};
  }

  std::string formatted(const std::string& column) const {
    char buf[64];
    if (column == "WER") std::snprintf(buf, sizeof buf, "%.1f", 100.0 * wer);
    else if (column == "PER") std::snprintf(buf, sizeof buf, "%.3f", per);
    else if (column == "PER_MEAN") std::snprintf(buf, sizeof buf, "%.3f", per_mean);
    else if (column == "ACC") std::snprintf(buf, sizeof buf, "%.1f", acc);
    else if (column == "MFS") std::snprintf(buf, sizeof buf, "%.3f", mfs);
    else if (column == "MLD") std::snprintf(buf, sizeof buf, "%.3f", mld);
    else throw ArgumentError("unknown metric column " + column);
    return buf;
  }

  // e.g. "WER 29.6 PER 0.072"
  std::string summary_line() const {
    std::string out;
    for (const auto& c : columns(task)) {
      if (!out.empty()) out += ' ';
      out += c + ' ' + formatted(c);
    }
    return out;
  }
};

inline EvalReport evaluate(TaskKind task, const std::vector<Symbols>& sources, const std::vector<Symbols>& refs,
                           const std::vector<Symbols>& hyps) {
  detail::require_parallel(refs, hyps);
  if (sources.size() != refs.size()) throw ArgumentError("source/reference counts differ");
  EvalReport r;
  r.task = task;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    r.records.push_back({sources[k], refs[k], hyps[k], edit_distance(hyps[k], refs[k])});
  }
  r.wer = wer(refs, hyps);
  r.acc = acc(refs, hyps);
  r.mfs = mfs(refs, hyps);
  r.mld = mld(refs, hyps);
  if (!refs.empty()) {
    r.per = per(refs, hyps);
    r.per_mean = per_string_mean(refs, hyps);
  }
  return r;
}

// Per-example TSV (source, reference, hypothesis, distance, correct) and a
// two-line summary TSV: metric names, then values.
inline void write_report(const EvalReport& r, const std::string& examples_path, const std::string& summary_path) {
  const char* sep = r.task == TaskKind::G2P ? " " : "";
  {
    std::ofstream out(examples_path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + examples_path + "' for writing");
    out << "source\treference\thypothesis\tdistance\tcorrect\n";
    for (const auto& rec : r.records) {
      out << join(rec.source, "") << '\t' << join(rec.reference, sep) << '\t' << join(rec.hypothesis, sep) << '\t'
          << rec.distance << '\t' << (rec.reference == rec.hypothesis ? 1 : 0) << '\n';
    }
  }
  std::ofstream out(summary_path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + summary_path + "' for writing");
  auto cols = EvalReport::columns(r.task);
  if (r.task == TaskKind::G2P) cols.push_back("PER_MEAN");
  for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "\t" : "") << cols[k];
  out << '\n';
  for (std::size_t k = 0; k < cols.size(); ++k) out << (k ? "\t" : "") << r.formatted(cols[k]);
  out << '\n';
}

}  // namespace xduct
