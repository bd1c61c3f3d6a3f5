#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "xduct/alignment.hpp"
#include "xduct/errors.hpp"
#include "xduct/model.hpp"
#include "xduct/ops.hpp"
#include "xduct/tensor.hpp"
#include "xduct/vocab.hpp"

namespace xduct {

struct DecodeResult {
  std::vector<int> output;                // emitted symbols, EOS included when reached
  std::vector<std::vector<double>> alpha;  // one row over source positions per emitted symbol
  std::vector<double> step_log_probs;     // log-probability of each emitted symbol
  bool reached_eos = false;
};

inline std::size_t default_max_len(std::size_t source_len) { return source_len + 50; }

namespace detail {

inline bool decodable(int v) {
  return v != Vocabulary::kPad && v != Vocabulary::kBos && v != Vocabulary::kUnk;
}

// Argmax over admissible symbols; the first maximum wins.
inline int pick_symbol(const std::vector<double>& logp) {
  int best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < logp.size(); ++v) {
    if (!decodable(static_cast<int>(v))) continue;
    if (best < 0 || logp[v] > best_v) {
      best = static_cast<int>(v);
      best_v = logp[v];
    }
  }
  return best;
}

}  // namespace detail

// Greedy decoding. The hard model emits from its per-step mixture
// sum_j α_j(i) p(y | a_i = j, ...).
inline DecodeResult greedy_decode(const TransducerModel& m, std::span<const int> x, std::size_t max_len) {
  if (x.empty()) throw ArgumentError("greedy_decode: empty source");
  if (max_len == 0) throw ArgumentError("greedy_decode: max_len must be at least 1");
  NoGradGuard no_grad;
  const std::size_t dd = m.config.dec_hidden, positions = x.size(), vocab = m.target_vocab;
  const bool hard = is_hard(m.config.arch);
  Tensor h_enc = reshape(encode(m.encoder, x), {1, positions, 2 * m.config.enc_hidden});
  Tensor keys = project_keys(h_enc, m.transfer);
  Tensor enc_proj;
  if (hard) enc_proj = project_encoder_for_output(h_enc, m.out_proj, dd);
  const bool fed = m.decoder.feed != FeedMode::None;
  Tensor feed = Tensor::zeros({1, m.out_dim});

  DecodeResult r;
  DecoderState state = initial_decoder_state(m.decoder, 1);
  int prev = Vocabulary::kBos;
  for (std::size_t step = 0; step < max_len; ++step) {
    const int in[1] = {prev};
    DecoderOutput out = decoder_step(m.decoder, in, state, fed ? &feed : nullptr);
    state = std::move(out.state);
    Tensor h = reshape(out.hidden, {1, 1, dd});
    Tensor scores = attention_scores_from_keys(h, keys, {});
    Tensor alpha = alignment_distribution(scores);
    std::vector<double> logp(vocab);
    Tensor cbar;
    if (hard || fed) cbar = attentional_vector(h, bmm(alpha, h_enc), m.out_proj);
    if (hard) {
      const Tensor log_alpha = alignment_log_distribution(scores);
      const Tensor all = hard_output_log_probs(h, enc_proj, m.out_proj, m.vocab_proj);  // [J x V]
      const auto la = log_alpha.data();
      const auto lp = all.data();
      std::vector<double> terms(positions);
      for (std::size_t v = 0; v < vocab; ++v) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < positions; ++j) {
          terms[j] = la[j] + lp[j * vocab + v];
          mx = std::max(mx, terms[j]);
        }
        double s = 0.0;
        for (double t : terms) s += std::exp(t - mx);
        logp[v] = mx + std::log(s);
      }
    } else {
      if (!fed) cbar = attentional_vector(h, bmm(alpha, h_enc), m.out_proj);
      const Tensor lp = log_softmax_rows(linear(cbar, m.vocab_proj));
      std::copy(lp.data().begin(), lp.data().end(), logp.begin());
    }
    const int y = detail::pick_symbol(logp);
    const auto a = alpha.data();
    r.alpha.emplace_back(a.begin(), a.end());
    r.output.push_back(y);
    r.step_log_probs.push_back(logp[static_cast<std::size_t>(y)]);
    if (fed) feed = reshape(cbar, {1, m.out_dim});
    if (y == Vocabulary::kEos) {
      r.reached_eos = true;
      break;
    }
    prev = y;
  }
  return r;
}

inline DecodeResult greedy_decode(const TransducerModel& m, std::span<const int> x) {
  return greedy_decode(m, x, default_max_len(x.size()));
}

// Decodes every source, splitting the work over `threads` workers. Results
// are independent of the thread count.
inline std::vector<DecodeResult> greedy_decode_all(const TransducerModel& m, const std::vector<std::vector<int>>& xs,
                                                   std::size_t threads = 1, std::size_t max_len = 0) {
  std::vector<DecodeResult> out(xs.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t k = begin; k < xs.size(); k += step) {
      out[k] = greedy_decode(m, xs[k], max_len ? max_len : default_max_len(xs[k].size()));
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, xs.size()));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// Output symbols without the trailing EOS.
inline std::vector<int> strip_eos(const std::vector<int>& ys) {
  std::vector<int> out;
  for (int y : ys) {
    if (y == Vocabulary::kEos) break;
    out.push_back(y);
  }
  return out;
}

struct Edge {
  std::size_t source;  // j
  std::size_t step;    // i
  bool operator==(const Edge&) const = default;
};

struct MonotonicityVerdict {
  std::vector<Edge> edges;
  bool crossing = false;
  bool correct = false;

  bool monotonic() const { return !crossing; }
};

// Crossing-edge test over rows of α. The EOS row takes part only when
// include_eos is set.
inline MonotonicityVerdict classify_alignment(const std::vector<std::vector<double>>& alpha, double threshold = 0.1) {
  MonotonicityVerdict v;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    for (std::size_t j = 0; j < alpha[i].size(); ++j) {
      if (alpha[i][j] > threshold) v.edges.push_back({j, i});
    }
  }
  // Edges are ordered by step; a crossing is a later step reaching an
  // earlier source position than some previous step.
  std::size_t max_before = 0;
  bool any_before = false;
  std::size_t k = 0;
  while (k < v.edges.size() && !v.crossing) {
    const std::size_t step = v.edges[k].step;
    std::size_t row_max = 0;
    std::size_t e = k;
    for (; e < v.edges.size() && v.edges[e].step == step; ++e) {
      if (any_before && v.edges[e].source < max_before) v.crossing = true;
      row_max = std::max(row_max, v.edges[e].source);
    }
    max_before = any_before ? std::max(max_before, row_max) : row_max;
    any_before = true;
    k = e;
  }
  return v;
}

inline MonotonicityVerdict classify_monotonicity(const DecodeResult& result, double threshold = 0.1,
                                                 bool include_eos = false) {
  std::vector<std::vector<double>> rows = result.alpha;
  if (!include_eos && result.reached_eos && !rows.empty()) rows.pop_back();
  return classify_alignment(rows, threshold);
}

// Counts indexed [monotonic, non-monotonic] x [correct, incorrect].
struct ConfusionTable {
  std::size_t counts[2][2] = {{0, 0}, {0, 0}};

  std::size_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  std::size_t monotonic() const { return counts[0][0] + counts[0][1]; }
  std::size_t non_monotonic() const { return counts[1][0] + counts[1][1]; }
};

inline ConfusionTable confusion_table(const std::vector<DecodeResult>& results,
                                      const std::vector<std::vector<int>>& references, double threshold = 0.1,
                                      bool include_eos = false) {
  if (results.size() != references.size()) {
    throw ArgumentError("confusion_table: " + std::to_string(results.size()) + " results vs " +
                        std::to_string(references.size()) + " references");
  }
  ConfusionTable t;
  for (std::size_t k = 0; k < results.size(); ++k) {
    MonotonicityVerdict v = classify_monotonicity(results[k], threshold, include_eos);
    const bool correct = strip_eos(results[k].output) == strip_eos(references[k]);
    ++t.counts[v.crossing ? 1 : 0][correct ? 0 : 1];
  }
  return t;
}

inline void write_confusion(const ConfusionTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "alignment\tcorrect\tincorrect\n";
  out << "monotonic\t" << t.counts[0][0] << '\t' << t.counts[0][1] << '\n';
  out << "non-monotonic\t" << t.counts[1][0] << '\t' << t.counts[1][1] << '\n';
}

// Heatmap matrix: a header row of source symbols, then one row per emitted
// symbol with its α values at 6 decimals. Tab separated.
struct Heatmap {
  std::vector<std::string> sources;
  std::vector<std::string> outputs;
  std::vector<std::vector<double>> cells;
};

inline Heatmap make_heatmap(const DecodeResult& r, const std::vector<std::string>& source_symbols,
                            const Vocabulary& target) {
  Heatmap h;
  h.sources = source_symbols;
  for (std::size_t i = 0; i < r.output.size(); ++i) h.outputs.push_back(target.symbol(r.output[i]));
  h.cells = r.alpha;
  return h;
}

inline void export_heatmap(const Heatmap& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& s : h.sources) out << '\t' << s;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < h.cells.size(); ++i) {
    out << (i < h.outputs.size() ? h.outputs[i] : std::string());
    for (double v : h.cells[i]) {
      std::snprintf(buf, sizeof buf, "%.6f", v);
      out << '\t' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline void export_heatmap(const DecodeResult& r, const std::vector<std::string>& source_symbols,
                           const Vocabulary& target, const std::string& path) {
  export_heatmap(make_heatmap(r, source_symbols, target), path);
}

inline Heatmap read_heatmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  Heatmap h;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty heatmap");
  auto header = split_on(line, '\t', false);
  if (header.empty() || !header[0].empty()) throw FormatError(path + ":1: header must start with a tab");
  h.sources.assign(header.begin() + 1, header.end());
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split_on(line, '\t', false);
    if (cols.size() != h.sources.size() + 1) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(h.sources.size() + 1) +
                        " columns");
    }
    h.outputs.push_back(cols[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cols.size(); ++c) {
      try {
        row.push_back(std::stod(cols[c]));
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": bad number '" + cols[c] + "'");
      }
    }
    h.cells.push_back(std::move(row));
  }
  return h;
}

}  // namespace xduct
