#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xduct/errors.hpp"
#include "xduct/ops.hpp"
#include "xduct/rng.hpp"
#include "xduct/tensor.hpp"

namespace xduct {

// Dropout settings for one forward pass. A null stream or zero rate means
// evaluation mode.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }
  Tensor apply(const Tensor& x) const { return active() ? dropout(x, rate, *rng) : x; }
};

// Gate order inside the stacked [4h x *] matrices: input, forget, cell, output.
struct LstmParams {
  Tensor w_ih;  // [4h x in]
  Tensor w_hh;  // [4h x h]
  Tensor bias;  // [4h]

  std::size_t input_dim() const { return w_ih.dim(1); }
  std::size_t hidden_dim() const { return w_hh.dim(1); }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

// Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

inline LstmParams make_lstm(std::size_t input_dim, std::size_t hidden_dim, Rng& rng) {
  LstmParams p;
  p.w_ih = init_uniform({4 * hidden_dim, input_dim}, input_dim, rng);
  p.w_hh = init_uniform({4 * hidden_dim, hidden_dim}, hidden_dim, rng);
  std::vector<double> b(4 * hidden_dim, 0.0);
  for (std::size_t k = hidden_dim; k < 2 * hidden_dim; ++k) b[k] = 1.0;
  p.bias = Tensor::from_data({4 * hidden_dim}, std::move(b), true);
  return p;
}

// One LSTM transition. x is [..., in]; h_prev and c_prev are [..., h] with
// matching leading dimensions.
inline LstmState lstm_step(const LstmParams& p, const Tensor& x, const Tensor& h_prev,
                           const Tensor& c_prev) {
  const std::size_t hd = p.hidden_dim();
  if (x.shape().back() != p.input_dim() || h_prev.shape().back() != hd || c_prev.shape() != h_prev.shape() ||
      x.numel() / p.input_dim() != h_prev.numel() / hd) {
    throw ShapeError("lstm_step: input " + shape_str(x.shape()) + ", state " + shape_str(h_prev.shape()) +
                     " incompatible with in=" + std::to_string(p.input_dim()) + " h=" + std::to_string(hd));
  }
  Tensor gates = add(linear(x, p.w_ih, p.bias), linear(h_prev, p.w_hh));
  const std::size_t axis = gates.rank() - 1;
  Tensor act = sigmoid(gates);
  Tensor in_gate = narrow(act, axis, 0, hd);
  Tensor forget_gate = narrow(act, axis, hd, hd);
  Tensor candidate = tanh(narrow(gates, axis, 2 * hd, hd));
  Tensor out_gate = narrow(act, axis, 3 * hd, hd);
  Tensor c = add(mul(forget_gate, c_prev), mul(in_gate, candidate));
  Tensor h = mul(out_gate, tanh(c));
  return {h, c};
}

// Right-padded batch of index sequences. mask[b*length + t] is 1 on real
// positions.
struct PaddedSequences {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<char> mask;
  std::vector<std::size_t> lengths;

  std::vector<int> column(std::size_t t) const {
    std::vector<int> col(batch);
    for (std::size_t b = 0; b < batch; ++b) col[b] = tokens[b * length + t];
    return col;
  }
  std::vector<char> mask_column(std::size_t t) const {
    std::vector<char> col(batch);
    for (std::size_t b = 0; b < batch; ++b) col[b] = mask[b * length + t];
    return col;
  }
};

inline PaddedSequences pad_sequences(const std::vector<std::vector<int>>& seqs, int pad = 0) {
  PaddedSequences out;
  out.batch = seqs.size();
  for (const auto& s : seqs) out.length = std::max(out.length, s.size());
  if (out.batch == 0 || out.length == 0) throw ArgumentError("pad_sequences: empty batch or sequences");
  out.tokens.assign(out.batch * out.length, pad);
  out.mask.assign(out.batch * out.length, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    if (seqs[b].empty()) throw ArgumentError("pad_sequences: empty sequence at batch position " + std::to_string(b));
    out.lengths.push_back(seqs[b].size());
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      out.tokens[b * out.length + t] = seqs[b][t];
      out.mask[b * out.length + t] = 1;
    }
  }
  return out;
}

// Bidirectional multi-layer LSTM encoder with a source embedding table.
struct EncoderParams {
  Tensor embedding;  // [|source vocab| x d_e]
  std::vector<LstmParams> forward;
  std::vector<LstmParams> backward;

  std::size_t hidden_dim() const { return forward.front().hidden_dim(); }
  std::size_t layers() const { return forward.size(); }
};

inline EncoderParams make_encoder(std::size_t vocab, std::size_t emb_dim, std::size_t hidden_dim,
                                  std::size_t layers, Rng& rng) {
  EncoderParams p;
  p.embedding = init_uniform({vocab, emb_dim}, emb_dim, rng);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? emb_dim : 2 * hidden_dim;
    p.forward.push_back(make_lstm(in, hidden_dim, rng));
    p.backward.push_back(make_lstm(in, hidden_dim, rng));
  }
  return p;
}

// Encodes a padded batch into [B x L x 2h]. Row j of each sequence is the
// forward state after x_j concatenated with the backward state after x_j.
// The backward recurrence holds its zero initial state across padding so each
// sequence starts from its own last symbol.
inline Tensor encode_batch(const EncoderParams& p, const PaddedSequences& src, const Dropout& drop = {}) {
  if (p.forward.size() != p.backward.size() || p.forward.empty()) {
    throw ConfigError("encoder forward/backward stacks must be non-empty and of equal depth");
  }
  const std::size_t batch = src.batch, steps = src.length, hd = p.hidden_dim();
  std::vector<Tensor> inputs;
  inputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    auto col = src.column(t);
    inputs.push_back(drop.apply(embedding(p.embedding, col)));
  }
  std::vector<std::vector<char>> masks;
  for (std::size_t t = 0; t < steps; ++t) masks.push_back(src.mask_column(t));

  const Tensor zero = Tensor::zeros({batch, hd});
  for (std::size_t l = 0; l < p.layers(); ++l) {
    std::vector<Tensor> fwd(steps), bwd(steps);
    LstmState s{zero, zero};
    for (std::size_t t = 0; t < steps; ++t) {
      s = lstm_step(p.forward[l], inputs[t], s.h, s.c);
      fwd[t] = s.h;
    }
    s = {zero, zero};
    for (std::size_t t = steps; t-- > 0;) {
      LstmState next = lstm_step(p.backward[l], inputs[t], s.h, s.c);
      bool all_real = std::all_of(masks[t].begin(), masks[t].end(), [](char m) { return m != 0; });
      if (all_real) {
        s = next;
      } else {
        s = {select_rows(masks[t], next.h, s.h), select_rows(masks[t], next.c, s.c)};
      }
      bwd[t] = s.h;
    }
    for (std::size_t t = 0; t < steps; ++t) inputs[t] = drop.apply(concat(fwd[t], bwd[t], 1));
  }
  return stack(inputs, 1);
}

// Single-sequence convenience: returns [|x| x 2h].
inline Tensor encode(const EncoderParams& p, std::span<const int> x, const Dropout& drop = {}) {
  if (x.empty()) throw ArgumentError("encode: empty source sequence");
  PaddedSequences src = pad_sequences({std::vector<int>(x.begin(), x.end())});
  Tensor h = encode_batch(p, src, drop);
  return reshape(h, {x.size(), 2 * p.hidden_dim()});
}

// How the previous attentional vector enters the decoder recurrence.
enum class FeedMode {
  None,    // plain decoder: input is the previous symbol's embedding only
  Merge,   // linear map of (embedding ++ feed) back to d_e
  Concat,  // raw concatenation (embedding ++ feed)
};

struct DecoderParams {
  Tensor embedding;  // [|target vocab| x d_e]
  std::vector<LstmParams> layers;
  FeedMode feed = FeedMode::None;
  Tensor merge_weight;  // [d_e x (d_e + d_s)], Merge only
  Tensor merge_bias;    // [d_e], Merge only

  std::size_t hidden_dim() const { return layers.back().hidden_dim(); }
  std::size_t embedding_dim() const { return embedding.dim(1); }
};

inline DecoderParams make_decoder(std::size_t vocab, std::size_t emb_dim, std::size_t hidden_dim,
                                  std::size_t layers, FeedMode feed, std::size_t feed_dim, Rng& rng) {
  DecoderParams p;
  p.feed = feed;
  p.embedding = init_uniform({vocab, emb_dim}, emb_dim, rng);
  std::size_t in = emb_dim;
  if (feed == FeedMode::Merge) {
    p.merge_weight = init_uniform({emb_dim, emb_dim + feed_dim}, emb_dim + feed_dim, rng);
    p.merge_bias = Tensor::zeros({emb_dim}, true);
  } else if (feed == FeedMode::Concat) {
    in = emb_dim + feed_dim;
  }
  for (std::size_t l = 0; l < layers; ++l) p.layers.push_back(make_lstm(l == 0 ? in : hidden_dim, hidden_dim, rng));
  return p;
}

struct DecoderState {
  std::vector<Tensor> h;
  std::vector<Tensor> c;
};

inline DecoderState initial_decoder_state(const DecoderParams& p, std::size_t batch) {
  DecoderState s;
  for (const auto& layer : p.layers) {
    Tensor z = Tensor::zeros({batch, layer.hidden_dim()});
    s.h.push_back(z);
    s.c.push_back(z);
  }
  return s;
}

struct DecoderOutput {
  Tensor hidden;  // top-layer state [B x d_dec], after output dropout
  DecoderState state;
};

// Advances the decoder by one symbol. `feed` is the previous attentional
// vector [B x d_s] and must be supplied exactly when the decoder is input-fed.
inline DecoderOutput decoder_step(const DecoderParams& p, std::span<const int> y_prev,
                                  const DecoderState& state, const Tensor* feed,
                                  const Dropout& drop = {}) {
  const bool fed = p.feed != FeedMode::None;
  if (fed && feed == nullptr) throw ContractError("input-fed decoder step requires the previous attentional vector");
  if (!fed && feed != nullptr) throw ContractError("plain decoder step must not receive an attentional vector");
  Tensor x = drop.apply(embedding(p.embedding, y_prev));
  if (fed) {
    if (feed->rank() != 2 || feed->dim(0) != y_prev.size()) {
      throw ShapeError("decoder_step: feed " + shape_str(feed->shape()) + " does not match batch of " +
                       std::to_string(y_prev.size()));
    }
    x = concat(x, *feed, 1);
    if (p.feed == FeedMode::Merge) x = linear(x, p.merge_weight, p.merge_bias);
  }
  DecoderOutput out;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    LstmState s = lstm_step(p.layers[l], x, state.h[l], state.c[l]);
    out.state.h.push_back(s.h);
    out.state.c.push_back(s.c);
    x = drop.apply(s.h);
  }
  out.hidden = x;
  return out;
}

}  // namespace xduct
