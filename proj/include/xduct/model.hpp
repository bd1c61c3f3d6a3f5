#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xduct/alignment.hpp"
#include "xduct/batch.hpp"
#include "xduct/errors.hpp"
#include "xduct/ops.hpp"
#include "xduct/rng.hpp"
#include "xduct/sequence_nets.hpp"
#include "xduct/tensor.hpp"
#include "xduct/vocab.hpp"

namespace xduct {

// ① soft-if, ② hard-if, ③ soft, ④ hard.
enum class Architecture { SoftInputFed, HardInputFed, Soft, Hard };

inline const char* architecture_name(Architecture a) {
  switch (a) {
    case Architecture::SoftInputFed: return "soft-if";
    case Architecture::HardInputFed: return "hard-if";
    case Architecture::Soft: return "soft";
    case Architecture::Hard: return "hard";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "soft-if") return Architecture::SoftInputFed;
  if (s == "hard-if") return Architecture::HardInputFed;
  if (s == "soft") return Architecture::Soft;
  if (s == "hard") return Architecture::Hard;
  throw ArgumentError("unknown architecture '" + s + "' (expected soft-if, hard-if, soft or hard)");
}

inline bool is_hard(Architecture a) { return a == Architecture::Hard || a == Architecture::HardInputFed; }
inline bool is_input_fed(Architecture a) {
  return a == Architecture::SoftInputFed || a == Architecture::HardInputFed;
}

struct ModelConfig {
  std::size_t emb_dim = 100;
  std::size_t enc_hidden = 200;  // per direction
  std::size_t enc_layers = 1;
  std::size_t dec_hidden = 200;
  std::size_t dec_layers = 1;
  std::size_t out_dim = 0;  // d_s; 0 means d_dec + 2 d_h
  double dropout = 0.2;
  Architecture arch = Architecture::Hard;
  bool reinforce = false;
  std::size_t samples = 2;
  bool uncontrolled = false;  // input feeding by raw concatenation, no parameter control

  static ModelConfig small() { return ModelConfig{}; }
  static ModelConfig large() {
    ModelConfig c;
    c.emb_dim = 200;
    c.enc_hidden = 400;
    c.enc_layers = 2;
    c.dec_hidden = 400;
    c.dec_layers = 1;
    c.dropout = 0.4;
    c.samples = 4;
    return c;
  }
  static ModelConfig preset(const std::string& name) {
    if (name == "small") return small();
    if (name == "large") return large();
    throw ConfigError("unknown preset '" + name + "' (expected small or large)");
  }

  std::size_t attention_input_dim() const { return dec_hidden + 2 * enc_hidden; }
  std::size_t base_out_dim() const { return out_dim ? out_dim : attention_input_dim(); }

  void validate() const {
    if (emb_dim == 0 || enc_hidden == 0 || enc_layers == 0 || dec_hidden == 0 || dec_layers == 0) {
      throw ConfigError("all model dimensions and layer counts must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (reinforce && samples == 0) throw ConfigError("REINFORCE needs at least one sample");
    if (reinforce && !is_hard(arch)) throw ConfigError("REINFORCE applies only to hard attention architectures");
    if (uncontrolled && !is_input_fed(arch)) {
      throw ConfigError("the uncontrolled variant applies only to input-fed architectures");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// Width of the attentional layer actually built. The controlled soft
// input-fed model shrinks d_s so that S, W and the merge map together hold
// as many weights as S and W of the plain model:
//   d_s' (D + V + d_e) + d_e^2 + d_e = d_s (D + V),  D = d_dec + 2 d_h.
inline std::size_t resolve_out_dim(const ModelConfig& c, std::size_t target_vocab) {
  const std::size_t base = c.base_out_dim();
  if (c.arch != Architecture::SoftInputFed || c.uncontrolled) return base;
  const long long d = static_cast<long long>(c.attention_input_dim());
  const long long v = static_cast<long long>(target_vocab);
  const long long e = static_cast<long long>(c.emb_dim);
  const long long num = static_cast<long long>(base) * (d + v) - e * e - e;
  const long long den = d + v + e;
  if (num < den) throw ConfigError("controlled input-fed model leaves no room for the attentional layer");
  return static_cast<std::size_t>(num / den);
}

inline FeedMode feed_mode(const ModelConfig& c) {
  if (!is_input_fed(c.arch)) return FeedMode::None;
  return c.uncontrolled ? FeedMode::Concat : FeedMode::Merge;
}

struct TransducerModel {
  ModelConfig config;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  std::size_t out_dim = 0;
  EncoderParams encoder;
  DecoderParams decoder;
  Tensor transfer;    // T [d_dec x 2 d_h]
  Tensor out_proj;    // S [d_s x (d_dec + 2 d_h)]
  Tensor vocab_proj;  // W [|target vocab| x d_s]

  // Stable names in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("encoder.embedding", encoder.embedding);
    auto add_lstm = [&out](const std::string& prefix, const LstmParams& p) {
      out.emplace_back(prefix + ".w_ih", p.w_ih);
      out.emplace_back(prefix + ".w_hh", p.w_hh);
      out.emplace_back(prefix + ".bias", p.bias);
    };
    for (std::size_t l = 0; l < encoder.layers(); ++l) {
      add_lstm("encoder.forward." + std::to_string(l), encoder.forward[l]);
      add_lstm("encoder.backward." + std::to_string(l), encoder.backward[l]);
    }
    out.emplace_back("decoder.embedding", decoder.embedding);
    if (decoder.feed == FeedMode::Merge) {
      out.emplace_back("decoder.merge.weight", decoder.merge_weight);
      out.emplace_back("decoder.merge.bias", decoder.merge_bias);
    }
    for (std::size_t l = 0; l < decoder.layers.size(); ++l) add_lstm("decoder." + std::to_string(l), decoder.layers[l]);
    out.emplace_back("attention.T", transfer);
    out.emplace_back("output.S", out_proj);
    out.emplace_back("output.W", vocab_proj);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (Tensor t : parameters()) t.zero_grad();
  }
};

inline std::size_t parameter_count(const TransducerModel& m) {
  std::size_t n = 0;
  for (const auto& [name, t] : m.named_parameters()) n += t.numel();
  return n;
}

// Each parameter group draws from its own named stream, so groups shared by
// two architectures get identical values under the same seed.
inline TransducerModel build_model(const ModelConfig& config, std::size_t source_vocab, std::size_t target_vocab,
                                   std::uint64_t seed) {
  config.validate();
  if (source_vocab <= Vocabulary::kReserved || target_vocab <= Vocabulary::kReserved) {
    throw ConfigError("vocabularies must contain at least one data symbol");
  }
  TransducerModel m;
  m.config = config;
  m.source_vocab = source_vocab;
  m.target_vocab = target_vocab;
  m.out_dim = resolve_out_dim(config, target_vocab);

  Rng enc_rng = Rng::derive(seed, "init/encoder");
  m.encoder = make_encoder(source_vocab, config.emb_dim, config.enc_hidden, config.enc_layers, enc_rng);

  const FeedMode feed = feed_mode(config);
  Rng dec_rng = Rng::derive(seed, "init/decoder");
  if (feed == FeedMode::Merge) {
    // Keep the recurrent weights on the same stream as the plain decoder by
    // drawing the merge map from a separate one.
    m.decoder = make_decoder(target_vocab, config.emb_dim, config.dec_hidden, config.dec_layers, FeedMode::None, 0,
                             dec_rng);
    Rng merge_rng = Rng::derive(seed, "init/merge");
    const std::size_t in = config.emb_dim + m.out_dim;
    m.decoder.feed = FeedMode::Merge;
    m.decoder.merge_weight = init_uniform({config.emb_dim, in}, in, merge_rng);
    m.decoder.merge_bias = Tensor::zeros({config.emb_dim}, true);
  } else {
    m.decoder = make_decoder(target_vocab, config.emb_dim, config.dec_hidden, config.dec_layers, feed, m.out_dim,
                             dec_rng);
  }

  const std::size_t enc_width = 2 * config.enc_hidden;
  const std::size_t in_width = config.attention_input_dim();
  Rng t_rng = Rng::derive(seed, "init/T");
  m.transfer = init_uniform({config.dec_hidden, enc_width}, enc_width, t_rng);
  Rng s_rng = Rng::derive(seed, "init/S");
  m.out_proj = init_uniform({m.out_dim, in_width}, in_width, s_rng);
  Rng w_rng = Rng::derive(seed, "init/W");
  m.vocab_proj = init_uniform({target_vocab, m.out_dim}, m.out_dim, w_rng);
  return m;
}

inline TransducerModel build_model(const ModelConfig& config, const Vocabulary& source, const Vocabulary& target,
                                   std::uint64_t seed) {
  return build_model(config, source.size(), target.size(), seed);
}

// Everything one forward pass over a batch produces. Hard models fill the
// lattice; soft models fill target_log_probs [B x I].
struct ForwardPass {
  AlignmentLattice lattice;
  Tensor target_log_probs;
  Tensor alpha;  // [B x I x J] attention or alignment distribution
  std::vector<double> step_weights;
};

inline Tensor encoder_states(const TransducerModel& m, const Batch& batch, const Dropout& drop = {}) {
  return encode_batch(m.encoder, batch.source, drop);
}

// Top-layer decoder states [B x I x d_dec] of a plain decoder under teacher forcing.
inline Tensor decoder_states(const TransducerModel& m, const Batch& batch, const Dropout& drop = {}) {
  if (m.decoder.feed != FeedMode::None) {
    throw ContractError("decoder states of an input-fed model depend on attention; run the full forward pass");
  }
  DecoderState state = initial_decoder_state(m.decoder, batch.size());
  std::vector<Tensor> hs;
  for (std::size_t i = 0; i < batch.steps; ++i) {
    const std::vector<int> in = batch.input_column(i);
    DecoderOutput out = decoder_step(m.decoder, in, state, nullptr, drop);
    hs.push_back(out.hidden);
    state = std::move(out.state);
  }
  return stack(hs, 1);
}

inline ForwardPass forward(const TransducerModel& m, const Batch& batch, const Dropout& drop = {}) {
  const std::size_t bsz = batch.size(), steps = batch.steps, positions = batch.source.length;
  const std::size_t dd = m.config.dec_hidden;
  const bool hard = is_hard(m.config.arch);
  Tensor h_enc = encoder_states(m, batch, drop);
  Tensor keys = project_keys(h_enc, m.transfer);
  Tensor enc_proj;
  if (hard) enc_proj = project_encoder_for_output(h_enc, m.out_proj, dd);
  const std::vector<char>& keep = batch.source.mask;

  ForwardPass fp;
  fp.step_weights = batch.target_weights;

  if (m.decoder.feed == FeedMode::None) {
    Tensor h_dec = decoder_states(m, batch, drop);
    Tensor scores = attention_scores_from_keys(h_dec, keys, keep);
    if (hard) {
      Tensor logp = hard_output_log_probs(h_dec, enc_proj, m.out_proj, m.vocab_proj);
      Tensor emission = gather_last(logp, expand_targets(batch.targets, bsz, steps, positions));
      fp.lattice = make_lattice(alignment_log_distribution(scores), emission, batch.target_weights);
      fp.alpha = exp(fp.lattice.log_alpha);
    } else {
      fp.alpha = alignment_distribution(scores);
      Tensor logp = soft_output_log_probs(h_dec, bmm(fp.alpha, h_enc), m.out_proj, m.vocab_proj);
      fp.target_log_probs = gather_last(logp, batch.targets);
    }
    return fp;
  }

  // Input feeding: the recurrence consumes the previous attentional vector,
  // the expected c̄ under α for the hard model.
  DecoderState state = initial_decoder_state(m.decoder, bsz);
  Tensor feed = Tensor::zeros({bsz, m.out_dim});
  std::vector<Tensor> alphas, log_alphas, emissions, target_lp;
  for (std::size_t i = 0; i < steps; ++i) {
    const std::vector<int> in = batch.input_column(i);
    const std::vector<int> tgt = batch.target_column(i);
    DecoderOutput out = decoder_step(m.decoder, in, state, &feed, drop);
    state = std::move(out.state);
    Tensor h = reshape(out.hidden, {bsz, 1, dd});
    Tensor scores = attention_scores_from_keys(h, keys, keep);
    Tensor alpha = alignment_distribution(scores);
    Tensor cbar = attentional_vector(h, bmm(alpha, h_enc), m.out_proj);  // [B x 1 x d_s]
    if (hard) {
      Tensor logp = hard_output_log_probs(h, enc_proj, m.out_proj, m.vocab_proj);
      log_alphas.push_back(alignment_log_distribution(scores));
      emissions.push_back(gather_last(logp, expand_targets(tgt, bsz, 1, positions)));
    } else {
      Tensor logp = log_softmax_rows(linear(cbar, m.vocab_proj));
      target_lp.push_back(gather_last(logp, tgt));  // [B x 1]
    }
    alphas.push_back(alpha);
    feed = reshape(cbar, {bsz, m.out_dim});
  }
  fp.alpha = concat(alphas, 1);
  if (hard) {
    fp.lattice = make_lattice(concat(log_alphas, 1), concat(emissions, 1), batch.target_weights);
  } else {
    fp.target_log_probs = concat(target_lp, 1);
  }
  return fp;
}

// Exact log p(y|x) per sequence, [B].
inline Tensor batch_log_likelihood(const TransducerModel& m, const Batch& batch, const Dropout& drop = {}) {
  ForwardPass fp = forward(m, batch, drop);
  if (is_hard(m.config.arch)) return marginal_log_likelihood(fp.lattice);
  return weighted_row_sum(fp.target_log_probs, fp.step_weights);
}

// Randomness used by one training step.
struct StepContext {
  Dropout dropout;
  Rng* sampler = nullptr;              // REINFORCE draws
  MovingBaseline* baseline = nullptr;  // REINFORCE baseline
};

struct LossResult {
  Tensor loss;                    // scalar to differentiate
  double log_likelihood = 0.0;    // mean exact log p(y|x) over the batch
  double mean_reward = 0.0;       // REINFORCE only
};

// Training objective for one batch: the mean negative log-likelihood per
// sequence, or the REINFORCE surrogate when the flag is set.
inline LossResult batch_loss(const TransducerModel& m, const Batch& batch, const StepContext& ctx = {}) {
  ForwardPass fp = forward(m, batch, ctx.dropout);
  LossResult r;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  Tensor ll;
  if (is_hard(m.config.arch)) {
    ll = marginal_log_likelihood(fp.lattice);
  } else {
    ll = weighted_row_sum(fp.target_log_probs, fp.step_weights);
  }
  for (double v : ll.data()) r.log_likelihood += v * inv_b;
  if (is_hard(m.config.arch) && m.config.reinforce) {
    if (!ctx.sampler || !ctx.baseline) throw ContractError("REINFORCE training needs a sampler and a baseline");
    ReinforceResult rr = reinforce_objective(fp.lattice, m.config.samples, *ctx.baseline, *ctx.sampler);
    r.loss = rr.surrogate;
    r.mean_reward = rr.mean_reward;
  } else {
    r.loss = scale(sum(ll), -inv_b);
  }
  return r;
}

// log p(y|x) for one pair. y must end with EOS, which is scored as the final step.
inline Tensor sequence_log_likelihood(const TransducerModel& m, std::span<const int> x, std::span<const int> y) {
  if (x.empty() || y.empty()) throw ArgumentError("sequence_log_likelihood: empty source or target");
  if (y.back() != Vocabulary::kEos) throw ArgumentError("sequence_log_likelihood: target must end with EOS");
  if (y.size() < 2) throw ArgumentError("sequence_log_likelihood: target has no symbols before EOS");
  auto check = [](std::span<const int> s, std::size_t vocab, const char* side) {
    for (int v : s) {
      if (v < 0 || static_cast<std::size_t>(v) >= vocab) {
        throw EncodingError(std::string(side) + " index " + std::to_string(v) + " out of range");
      }
    }
  };
  check(x, m.source_vocab, "source");
  check(y, m.target_vocab, "target");
  std::vector<EncodedExample> one{{std::vector<int>(x.begin(), x.end()), std::vector<int>(y.begin(), y.end() - 1)}};
  Tensor ll = batch_log_likelihood(m, make_batch(one, {0}));
  return reshape(ll, {1});
}

}  // namespace xduct
