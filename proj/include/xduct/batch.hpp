#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "xduct/data.hpp"
#include "xduct/errors.hpp"
#include "xduct/rng.hpp"
#include "xduct/sequence_nets.hpp"
#include "xduct/vocab.hpp"

namespace xduct {

// Index form of an Example. The target holds y_1..y_n without EOS.
struct EncodedExample {
  std::vector<int> source;
  std::vector<int> target;
};

inline EncodedExample encode_example(const Example& ex, const Vocabulary& src, const Vocabulary& tgt) {
  return {src.encode(ex.source), tgt.encode(ex.target)};
}

inline std::vector<EncodedExample> encode_examples(const std::vector<Example>& exs, const Vocabulary& src,
                                                   const Vocabulary& tgt) {
  std::vector<EncodedExample> out;
  out.reserve(exs.size());
  for (const auto& ex : exs) out.push_back(encode_example(ex, src, tgt));
  return out;
}

// A padded minibatch. Decoder inputs are BOS y_1..y_n and targets are
// y_1..y_n EOS, both right-padded to `steps`.
struct Batch {
  PaddedSequences source;
  std::size_t steps = 0;
  std::vector<int> decoder_inputs;     // B * steps
  std::vector<int> targets;            // B * steps
  std::vector<double> target_weights;  // B * steps; 1 on real targets, 0 on padding
  std::vector<std::size_t> ids;        // positions in the originating dataset

  std::size_t size() const { return source.batch; }

  std::vector<int> input_column(std::size_t i) const {
    std::vector<int> col(size());
    for (std::size_t b = 0; b < size(); ++b) col[b] = decoder_inputs[b * steps + i];
    return col;
  }
  std::vector<int> target_column(std::size_t i) const {
    std::vector<int> col(size());
    for (std::size_t b = 0; b < size(); ++b) col[b] = targets[b * steps + i];
    return col;
  }
};

inline Batch make_batch(const std::vector<EncodedExample>& data, const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw ArgumentError("make_batch: empty batch");
  std::vector<std::vector<int>> sources;
  std::size_t steps = 0;
  for (std::size_t id : ids) {
    const EncodedExample& ex = data.at(id);
    if (ex.source.empty() || ex.target.empty()) {
      throw ArgumentError("example " + std::to_string(id) + " has an empty source or target");
    }
    sources.push_back(ex.source);
    steps = std::max(steps, ex.target.size() + 1);
  }
  Batch b;
  b.source = pad_sequences(sources, Vocabulary::kPad);
  b.steps = steps;
  b.ids = ids;
  const std::size_t n = ids.size();
  b.decoder_inputs.assign(n * steps, Vocabulary::kPad);
  b.targets.assign(n * steps, Vocabulary::kPad);
  b.target_weights.assign(n * steps, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& y = data[ids[k]].target;
    b.decoder_inputs[k * steps] = Vocabulary::kBos;
    for (std::size_t i = 0; i < y.size(); ++i) {
      b.decoder_inputs[k * steps + i + 1] = y[i];
      b.targets[k * steps + i] = y[i];
    }
    b.targets[k * steps + y.size()] = Vocabulary::kEos;
    for (std::size_t i = 0; i <= y.size(); ++i) b.target_weights[k * steps + i] = 1.0;
  }
  return b;
}

// Shuffles the dataset with `rng` and cuts it into consecutive batches; the
// last batch holds the remainder.
inline std::vector<Batch> make_batches(const std::vector<EncodedExample>& data, std::size_t batch_size, Rng& rng,
                                       bool shuffle = true) {
  if (data.empty()) throw DataError("cannot batch an empty dataset");
  if (batch_size == 0) throw ArgumentError("batch size must be at least 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.push_back(make_batch(data, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                            order.begin() + static_cast<std::ptrdiff_t>(end))));
  }
  return out;
}

inline std::vector<Batch> make_batches(const std::vector<EncodedExample>& data, std::size_t batch_size,
                                       std::uint64_t seed) {
  Rng rng = Rng::derive(seed, "shuffle");
  return make_batches(data, batch_size, rng, true);
}

}  // namespace xduct
