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

// Alignment machinery shared by the soft and hard attention models.
//
// Shapes use B for batch, I for output steps, J for source positions,
// d_dec for the decoder width, 2h for the bidirectional encoder width and
// d_s for the attentional layer width. Masked source positions carry -inf
// scores and therefore zero alignment mass.

namespace xduct {

namespace detail {

inline Tensor as_batch(const Tensor& t) {
  if (t.rank() == 3) return t;
  if (t.rank() == 2) return reshape(t, {1, t.dim(0), t.dim(1)});
  throw ShapeError("expected a [I x d] or [B x I x d] tensor, got " + shape_str(t.shape()));
}

inline std::vector<char> all_kept(std::size_t n) { return std::vector<char>(n, 1); }

}  // namespace detail

// Keys for bilinear scoring: T h_enc_j for every source position, [B x J x d_dec].
inline Tensor project_keys(const Tensor& h_enc, const Tensor& transfer) {
  if (transfer.rank() != 2 || h_enc.shape().back() != transfer.dim(1)) {
    throw ShapeError("attention: encoder states " + shape_str(h_enc.shape()) + " do not fit T " +
                     shape_str(transfer.shape()));
  }
  return linear(h_enc, transfer);
}

// e_ij = h_dec_i^T T h_enc_j with masked columns forced to -inf.
// `keep` has one entry per (batch, source position); empty keeps everything.
inline Tensor attention_scores_from_keys(const Tensor& h_dec, const Tensor& keys, std::vector<char> keep) {
  if (h_dec.rank() != 3 || keys.rank() != 3 || h_dec.dim(0) != keys.dim(0) || h_dec.dim(2) != keys.dim(2)) {
    throw ShapeError("attention: decoder states " + shape_str(h_dec.shape()) + " do not fit keys " +
                     shape_str(keys.shape()));
  }
  Tensor scores = bmm(h_dec, keys, true);
  if (keep.empty()) return scores;
  return mask_columns(scores, keep);
}

inline Tensor attention_scores(const Tensor& h_dec, const Tensor& h_enc, const Tensor& transfer,
                               std::vector<char> keep = {}) {
  const bool single = h_dec.rank() == 2;
  Tensor hd = detail::as_batch(h_dec);
  Tensor he = detail::as_batch(h_enc);
  if (hd.dim(0) != he.dim(0)) throw ShapeError("attention: batch sizes differ");
  if (!keep.empty() && keep.size() != he.dim(0) * he.dim(1)) {
    throw ShapeError("attention: mask length " + std::to_string(keep.size()) + " does not match " +
                     std::to_string(he.dim(0) * he.dim(1)) + " source positions");
  }
  Tensor s = attention_scores_from_keys(hd, project_keys(he, transfer), std::move(keep));
  return single ? reshape(s, {s.dim(1), s.dim(2)}) : s;
}

// α_j(i): row-wise softmax of the scores.
inline Tensor alignment_distribution(const Tensor& scores) { return softmax_rows(scores); }

// log α_j(i); -inf on masked columns.
inline Tensor alignment_log_distribution(const Tensor& scores) { return log_softmax_rows(scores); }

// c_i = sum_j α_j(i) h_enc_j. Accepts α [B x I x J] with h_enc [B x J x 2h],
// α [I x J] with h_enc [J x 2h], or a single row α [J].
inline Tensor soft_context(const Tensor& alpha, const Tensor& h_enc) {
  if (alpha.rank() == 1) {
    Tensor c = soft_context(reshape(alpha, {1, alpha.dim(0)}), h_enc);
    return reshape(c, {c.dim(1)});
  }
  if (alpha.rank() == 2) {
    if (h_enc.rank() != 2) throw ShapeError("soft_context: encoder states must be [J x 2h]");
    return matmul(alpha, h_enc);
  }
  return bmm(alpha, h_enc);
}

// tanh(S (h_dec ++ context)) over [.. x d_dec] and [.. x 2h] inputs.
inline Tensor attentional_vector(const Tensor& h_dec, const Tensor& context, const Tensor& out_proj) {
  const std::size_t axis = h_dec.rank() - 1;
  Tensor joined = concat(h_dec, context, axis);
  if (joined.shape().back() != out_proj.dim(1)) {
    throw ShapeError("attentional layer: input width " + std::to_string(joined.shape().back()) +
                     " does not match S " + shape_str(out_proj.shape()));
  }
  return tanh(linear(joined, out_proj));
}

// log softmax(W tanh(S (h_dec ++ h_enc_j))) for a single decoder state and a
// single encoder position.
inline Tensor output_logits_given_alignment(const Tensor& h_dec, const Tensor& h_enc_j, const Tensor& out_proj,
                                            const Tensor& vocab_proj) {
  if (h_dec.rank() != 1 || h_enc_j.rank() != 1) {
    throw ShapeError("output_logits_given_alignment expects two vectors, got " + shape_str(h_dec.shape()) +
                     " and " + shape_str(h_enc_j.shape()));
  }
  Tensor hidden = attentional_vector(h_dec, h_enc_j, out_proj);
  if (hidden.dim(0) != vocab_proj.dim(1)) {
    throw ShapeError("output layer: W " + shape_str(vocab_proj.shape()) + " does not fit width " +
                     std::to_string(hidden.dim(0)));
  }
  return log_softmax_rows(linear(hidden, vocab_proj));
}

// Soft attention output law: log softmax(W tanh(S (h_dec ++ c))) -> [.. x V].
inline Tensor soft_output_log_probs(const Tensor& h_dec, const Tensor& context, const Tensor& out_proj,
                                    const Tensor& vocab_proj) {
  return log_softmax_rows(linear(attentional_vector(h_dec, context, out_proj), vocab_proj));
}

// Encoder half of S applied once per source position: [B x J x d_s].
inline Tensor project_encoder_for_output(const Tensor& h_enc, const Tensor& out_proj, std::size_t dec_dim) {
  const std::size_t enc_dim = h_enc.shape().back();
  if (out_proj.dim(1) != dec_dim + enc_dim) {
    throw ShapeError("S " + shape_str(out_proj.shape()) + " does not fit decoder width " +
                     std::to_string(dec_dim) + " plus encoder width " + std::to_string(enc_dim));
  }
  return linear(h_enc, narrow(out_proj, 1, dec_dim, enc_dim));
}

// Every per-alignment output distribution at once:
// out[b,i,j,:] = log softmax(W tanh(S_dec h_dec_i + S_enc h_enc_j)).
// Splitting S this way is exact since S (a ++ b) = S_dec a + S_enc b.
inline Tensor hard_output_log_probs(const Tensor& h_dec, const Tensor& enc_proj, const Tensor& out_proj,
                                    const Tensor& vocab_proj) {
  const std::size_t dec_dim = h_dec.shape().back();
  Tensor dec_part = linear(h_dec, narrow(out_proj, 1, 0, dec_dim));
  Tensor hidden = tanh(pairwise_add(dec_part, enc_proj));
  return log_softmax_rows(linear(hidden, vocab_proj));
}

// Repeats per-step targets across the J source positions for gathering.
inline std::vector<int> expand_targets(std::span<const int> targets, std::size_t batch, std::size_t steps,
                                       std::size_t positions) {
  if (targets.size() != batch * steps) throw ShapeError("targets do not match batch x steps");
  std::vector<int> out(batch * steps * positions);
  for (std::size_t r = 0; r < batch * steps; ++r)
    for (std::size_t j = 0; j < positions; ++j) out[r * positions + j] = targets[r];
  return out;
}

// The two ingredients of the hard-alignment likelihood for every sequence,
// output step and source position.
struct AlignmentLattice {
  Tensor log_alpha;     // [B x I x J]; log α_j(i)
  Tensor log_emission;  // [B x I x J]; log p(y_i | a_i = j, y_<i, x)
  std::vector<double> step_weights;  // B*I; 1 on real target steps, 0 on padding. Empty = all real.

  std::size_t batch() const { return log_alpha.dim(0); }
  std::size_t steps() const { return log_alpha.dim(1); }
  std::size_t positions() const { return log_alpha.dim(2); }
  double weight(std::size_t b, std::size_t i) const {
    return step_weights.empty() ? 1.0 : step_weights[b * steps() + i];
  }
};

inline AlignmentLattice make_lattice(Tensor log_alpha, Tensor log_emission, std::vector<double> step_weights = {}) {
  AlignmentLattice l{detail::as_batch(log_alpha), detail::as_batch(log_emission), std::move(step_weights)};
  if (l.log_alpha.shape() != l.log_emission.shape()) {
    throw ShapeError("lattice: log_alpha " + shape_str(l.log_alpha.shape()) + " and log_emission " +
                     shape_str(l.log_emission.shape()) + " differ");
  }
  if (!l.step_weights.empty() && l.step_weights.size() != l.batch() * l.steps()) {
    throw ShapeError("lattice: step weight count mismatch");
  }
  return l;
}

// Exact marginal over all |x|^|y| alignments by exchanging sum and product:
// log p(y|x) = sum_i logsumexp_j [log α_j(i) + log p(y_i | a_i=j, ...)].
// Returns one log-likelihood per sequence, [B].
inline Tensor marginal_log_likelihood(const AlignmentLattice& lattice) {
  Tensor per_step = logsumexp_rows(add(lattice.log_alpha, lattice.log_emission));
  std::vector<double> w = lattice.step_weights;
  if (w.empty()) w.assign(lattice.batch() * lattice.steps(), 1.0);
  return weighted_row_sum(per_step, std::move(w));
}

// Hard-alignment log-likelihood from decoder/encoder states and the T, S, W
// parameters. targets has B*I entries; keep marks real source positions
// (B*J, empty = all real).
inline Tensor hard_alignment_lattice_log_alpha(const Tensor& h_dec, const Tensor& keys, std::vector<char> keep) {
  return alignment_log_distribution(attention_scores_from_keys(h_dec, keys, std::move(keep)));
}

inline AlignmentLattice build_hard_lattice(const Tensor& h_dec, const Tensor& h_enc, const Tensor& transfer,
                                           const Tensor& out_proj, const Tensor& vocab_proj,
                                           std::span<const int> targets, std::vector<char> keep = {},
                                           std::vector<double> step_weights = {}) {
  Tensor hd = detail::as_batch(h_dec);
  Tensor he = detail::as_batch(h_enc);
  const std::size_t batch = hd.dim(0), steps = hd.dim(1), positions = he.dim(1);
  Tensor log_alpha = hard_alignment_lattice_log_alpha(hd, project_keys(he, transfer), std::move(keep));
  Tensor enc_proj = project_encoder_for_output(he, out_proj, hd.dim(2));
  Tensor logp = hard_output_log_probs(hd, enc_proj, out_proj, vocab_proj);
  Tensor emission = gather_last(logp, expand_targets(targets, batch, steps, positions));
  return make_lattice(log_alpha, emission, std::move(step_weights));
}

inline Tensor hard_marginal_log_likelihood(const Tensor& h_dec, const Tensor& h_enc, const Tensor& transfer,
                                           const Tensor& out_proj, const Tensor& vocab_proj,
                                           std::span<const int> targets, std::vector<char> keep = {},
                                           std::vector<double> step_weights = {}) {
  return marginal_log_likelihood(
      build_hard_lattice(h_dec, h_enc, transfer, out_proj, vocab_proj, targets, std::move(keep), std::move(step_weights)));
}

// Enumerates every alignment of one sequence explicitly and sums
// p(y, a | x) in log space. Exponential; intended as a test oracle.
// log_alpha and log_emission are [I x J] value arrays.
inline double brute_force_log_likelihood(std::span<const double> log_alpha, std::span<const double> log_emission,
                                         std::size_t steps, std::size_t positions,
                                         std::size_t* alignments_visited = nullptr,
                                         double guard = 1e6) {
  if (steps == 0 || positions == 0) throw ArgumentError("brute force: empty lattice");
  if (log_alpha.size() != steps * positions || log_emission.size() != steps * positions) {
    throw ShapeError("brute force: lattice size mismatch");
  }
  if (std::pow(static_cast<double>(positions), static_cast<double>(steps)) > guard) {
    throw SizeError("brute force: " + std::to_string(positions) + "^" + std::to_string(steps) +
                    " alignments exceed the enumeration guard");
  }
  std::vector<std::size_t> a(steps, 0);
  std::vector<double> terms;
  for (;;) {
    double t = 0.0;
    for (std::size_t i = 0; i < steps; ++i) t += log_alpha[i * positions + a[i]] + log_emission[i * positions + a[i]];
    terms.push_back(t);
    std::size_t i = 0;
    while (i < steps && ++a[i] == positions) a[i++] = 0;
    if (i == steps) break;
  }
  if (alignments_visited) *alignments_visited = terms.size();
  double m = detail::kNegInf;
  for (double t : terms) m = std::max(m, t);
  if (m == detail::kNegInf) return m;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

inline double brute_force_log_likelihood(const AlignmentLattice& lattice, std::size_t b = 0,
                                         std::size_t* alignments_visited = nullptr) {
  const std::size_t n = lattice.steps() * lattice.positions();
  std::span<const double> la = lattice.log_alpha.data().subspan(b * n, n);
  std::span<const double> le = lattice.log_emission.data().subspan(b * n, n);
  return brute_force_log_likelihood(la, le, lattice.steps(), lattice.positions(), alignments_visited);
}

// Jensen lower bound sum_a p(a|x) log p(y|x,a) for one sequence, built by
// enumeration under autodiff. Test oracle for the score-function estimator.
inline Tensor jensen_bound_by_enumeration(const Tensor& log_alpha, const Tensor& log_emission) {
  if (log_alpha.rank() != 2 || log_alpha.shape() != log_emission.shape()) {
    throw ShapeError("jensen bound: expects matching [I x J] inputs");
  }
  const std::size_t steps = log_alpha.dim(0), positions = log_alpha.dim(1);
  if (std::pow(static_cast<double>(positions), static_cast<double>(steps)) > 1e5) {
    throw SizeError("jensen bound: too many alignments to enumerate");
  }
  std::vector<std::size_t> a(steps, 0);
  std::vector<Tensor> terms;
  for (;;) {
    std::vector<std::size_t> flat(steps);
    for (std::size_t i = 0; i < steps; ++i) flat[i] = i * positions + a[i];
    std::vector<double> ones(steps, 1.0);
    Tensor prior = exp(weighted_gather_sum(log_alpha, flat, ones));
    Tensor reward = weighted_gather_sum(log_emission, flat, ones);
    terms.push_back(mul(prior, reward));
    std::size_t i = 0;
    while (i < steps && ++a[i] == positions) a[i++] = 0;
    if (i == steps) break;
  }
  return sum(stack(terms, 0));
}

// One sampled alignment: a source position per output step.
struct AlignmentSample {
  std::vector<std::size_t> positions;
  std::vector<double> log_probs;  // log α_{a_i}(i)
  double total_log_prob = 0.0;
};

// Draws a_i independently from each row of α ([I x J] probabilities).
inline AlignmentSample sample_alignment(std::span<const double> alpha, std::size_t steps, std::size_t positions,
                                        Rng& rng) {
  if (alpha.size() != steps * positions) throw ShapeError("sample_alignment: α size mismatch");
  AlignmentSample s;
  for (std::size_t i = 0; i < steps; ++i) {
    const double* row = alpha.data() + i * positions;
    const std::size_t j = rng.categorical(row, positions);
    s.positions.push_back(j);
    s.log_probs.push_back(std::log(row[j]));
    s.total_log_prob += s.log_probs.back();
  }
  return s;
}

// Exponential moving average of rewards; the first observation seeds it.
struct MovingBaseline {
  double value = 0.0;
  double decay = 0.9;
  bool initialized = false;

  double current(double fallback) const { return initialized ? value : fallback; }
  void update(double mean_reward) {
    if (!initialized) {
      value = mean_reward;
      initialized = true;
    } else {
      value = decay * value + (1.0 - decay) * mean_reward;
    }
  }
};

struct ReinforceResult {
  Tensor surrogate;           // scalar; its gradient estimates -∇ of the Jensen bound
  double mean_reward = 0.0;   // mean log p(y|x,a) over drawn samples
  double baseline_used = 0.0;
};

// Score-function surrogate averaged over the batch:
// -(1/(B k)) sum_b sum_s [ log p(y|x,a_s) + (r_s - baseline) log p(a_s|x) ]
// with r_s = log p(y|x,a_s) held constant. k alignments are drawn per
// sequence, each position independently per step (with replacement).
inline ReinforceResult reinforce_objective(const AlignmentLattice& lattice, std::size_t samples, double baseline,
                                           Rng& rng) {
  if (samples == 0) throw ArgumentError("reinforce: need at least one sample");
  const std::size_t batch = lattice.batch(), steps = lattice.steps(), positions = lattice.positions();
  const double norm = 1.0 / static_cast<double>(batch * samples);
  const auto la = lattice.log_alpha.data();
  const auto le = lattice.log_emission.data();
  std::vector<double> alpha(la.size());
  for (std::size_t k = 0; k < la.size(); ++k) alpha[k] = std::exp(la[k]);

  std::vector<std::size_t> idx;
  std::vector<double> emission_w, prior_w;
  double reward_total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < samples; ++s) {
      std::vector<std::size_t> chosen;
      double reward = 0.0;
      for (std::size_t i = 0; i < steps; ++i) {
        if (lattice.weight(b, i) == 0.0) continue;
        const std::size_t row = (b * steps + i) * positions;
        const std::size_t j = rng.categorical(alpha.data() + row, positions);
        chosen.push_back(row + j);
        reward += le[row + j];
      }
      reward_total += reward;
      for (std::size_t f : chosen) {
        idx.push_back(f);
        emission_w.push_back(-norm);
        prior_w.push_back(-norm * (reward - baseline));
      }
    }
  }
  ReinforceResult r;
  r.mean_reward = reward_total * norm;
  r.baseline_used = baseline;
  r.surrogate = add(weighted_gather_sum(lattice.log_emission, idx, emission_w),
                    weighted_gather_sum(lattice.log_alpha, idx, prior_w));
  return r;
}

// Same, with a moving-average baseline that is read before and updated after use.
inline ReinforceResult reinforce_objective(const AlignmentLattice& lattice, std::size_t samples,
                                           MovingBaseline& baseline, Rng& rng) {
  if (!baseline.initialized) {
    // Seed from this batch's own rewards: draw, then redo with the seeded value.
    Rng probe = rng;
    ReinforceResult first = reinforce_objective(lattice, samples, 0.0, probe);
    baseline.update(first.mean_reward);
    ReinforceResult r = reinforce_objective(lattice, samples, baseline.value, rng);
    return r;
  }
  ReinforceResult r = reinforce_objective(lattice, samples, baseline.value, rng);
  baseline.update(r.mean_reward);
  return r;
}

}  // namespace xduct
