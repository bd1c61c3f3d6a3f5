#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"
#include "xduct/model.hpp"

using namespace xduct;
using xduct::testing::grad_check;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ModelConfig tiny(Architecture arch) {
  ModelConfig c;
  c.emb_dim = 3;
  c.enc_hidden = 3;
  c.dec_hidden = 4;
  c.dropout = 0.0;
  c.arch = arch;
  return c;
}

std::vector<EncodedExample> toy_data() {
  return {{{4, 5, 6}, {6, 5}}, {{5, 4}, {4, 4, 6, 5}}, {{6}, {5}}};
}

const Architecture kAll[] = {Architecture::SoftInputFed, Architecture::HardInputFed, Architecture::Soft,
                             Architecture::Hard};

}  // namespace

TEST(Config, PresetsBindTableValues) {
  ModelConfig s = ModelConfig::small(), l = ModelConfig::large();
  EXPECT_EQ(std::make_tuple(s.emb_dim, s.enc_hidden, s.enc_layers, s.dec_hidden, s.dec_layers, s.dropout),
            std::make_tuple(100u, 200u, 1u, 200u, 1u, 0.2));
  EXPECT_EQ(std::make_tuple(l.emb_dim, l.enc_hidden, l.enc_layers, l.dec_hidden, l.dec_layers, l.dropout),
            std::make_tuple(200u, 400u, 2u, 400u, 1u, 0.4));
  EXPECT_EQ(s.samples, 2u);
  EXPECT_EQ(l.samples, 4u);
  EXPECT_THROW(ModelConfig::preset("medium"), ConfigError);
}

TEST(Config, Validation) {
  ModelConfig c = tiny(Architecture::Soft);
  c.reinforce = true;
  EXPECT_THROW(build_model(c, 6, 6, 0), ConfigError);
  c = tiny(Architecture::Hard);
  c.reinforce = true;
  c.samples = 0;
  EXPECT_THROW(build_model(c, 6, 6, 0), ConfigError);
  c = tiny(Architecture::Hard);
  c.emb_dim = 0;
  EXPECT_THROW(build_model(c, 6, 6, 0), ConfigError);
  EXPECT_THROW(build_model(tiny(Architecture::Hard), 4, 6, 0), ConfigError);
  c = tiny(Architecture::Soft);
  c.uncontrolled = true;
  EXPECT_THROW(build_model(c, 6, 6, 0), ConfigError);
}

TEST(Build, SoftAndHardShareParametersBitForBit) {
  TransducerModel a = build_model(tiny(Architecture::Soft), 7, 8, 42);
  TransducerModel b = build_model(tiny(Architecture::Hard), 7, 8, 42);
  auto na = a.named_parameters(), nb = b.named_parameters();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t k = 0; k < na.size(); ++k) {
    EXPECT_EQ(na[k].first, nb[k].first);
    EXPECT_EQ(values(na[k].second), values(nb[k].second)) << na[k].first;
  }
  EXPECT_EQ(parameter_count(a), parameter_count(b));
}

TEST(Build, SameSeedSameRegistryNamesUnique) {
  for (Architecture arch : kAll) {
    TransducerModel a = build_model(tiny(arch), 7, 8, 1), b = build_model(tiny(arch), 7, 8, 1);
    auto na = a.named_parameters(), nb = b.named_parameters();
    std::set<std::string> names;
    for (std::size_t k = 0; k < na.size(); ++k) {
      EXPECT_EQ(na[k].first, nb[k].first);
      EXPECT_EQ(values(na[k].second), values(nb[k].second));
      EXPECT_TRUE(names.insert(na[k].first).second) << na[k].first;
    }
  }
  TransducerModel c = build_model(tiny(Architecture::Hard), 7, 8, 2);
  EXPECT_NE(values(c.transfer), values(build_model(tiny(Architecture::Hard), 7, 8, 1).transfer));
}

TEST(Build, ControlledAndUncontrolledDifferOnlyInWidthAndMerge) {
  ModelConfig cc = ModelConfig::small();
  cc.arch = Architecture::SoftInputFed;
  ModelConfig uc = cc;
  uc.uncontrolled = true;
  TransducerModel c = build_model(cc, 50, 50, 0), u = build_model(uc, 50, 50, 0);
  std::map<std::string, Shape> sc, su;
  for (auto& [n, t] : c.named_parameters()) sc[n] = t.shape();
  for (auto& [n, t] : u.named_parameters()) su[n] = t.shape();
  std::set<std::string> differing;
  for (auto& [n, s] : sc)
    if (!su.count(n) || su[n] != s) differing.insert(n);
  for (auto& [n, s] : su)
    if (!sc.count(n)) differing.insert(n);
  EXPECT_EQ(differing, (std::set<std::string>{"decoder.merge.weight", "decoder.merge.bias", "decoder.0.w_ih",
                                               "output.S", "output.W"}));
  EXPECT_EQ(u.out_dim, 600u);
  EXPECT_LT(c.out_dim, 600u);
  EXPECT_EQ(c.decoder.layers[0].input_dim(), cc.emb_dim);
  EXPECT_EQ(u.decoder.layers[0].input_dim(), cc.emb_dim + 600);
}

TEST(ParameterCount, TinyHandTally) {
  ModelConfig c;
  c.emb_dim = 2;
  c.enc_hidden = 2;
  c.dec_hidden = 2;
  c.arch = Architecture::Hard;
  TransducerModel m = build_model(c, 5, 5, 0);
  // encoder: 5*2 + 2 directions * (4*2*2 + 4*2*2 + 4*2)
  const std::size_t enc = 10 + 2 * (16 + 16 + 8);
  // decoder: 5*2 + 4*2*2 + 4*2*2 + 4*2
  const std::size_t dec = 10 + 16 + 16 + 8;
  // T 2x4, S 6x6, W 5x6
  const std::size_t rest = 8 + 36 + 30;
  EXPECT_EQ(parameter_count(m), enc + dec + rest);
}

TEST(ParameterCount, ControlledInputFeedingWithinOnePercent) {
  for (const char* preset : {"small", "large"}) {
    for (std::size_t vocab : {30u, 46u, 83u, 200u}) {
      ModelConfig soft = ModelConfig::preset(preset), fed = soft;
      soft.arch = Architecture::Soft;
      fed.arch = Architecture::SoftInputFed;
      const double a = static_cast<double>(parameter_count(build_model(soft, vocab, vocab, 0)));
      const double b = static_cast<double>(parameter_count(build_model(fed, vocab, vocab, 0)));
      EXPECT_LT(std::abs(a - b) / a, 0.01) << preset << " vocab " << vocab;
      EXPECT_LE(b, a);
    }
  }
}

TEST(ParameterCount, PublishedTotalsAtMatchingVocabularySizes) {
  // Table totals depend on vocabulary sizes; these are the sizes at which
  // they come out exactly.
  auto millions = [](std::size_t n) { return std::round(static_cast<double>(n) / 1000.0) / 1000.0; };
  ModelConfig s = ModelConfig::small(), l = ModelConfig::large();
  EXPECT_EQ(millions(parameter_count(build_model(s, 46, 46, 0))), 1.199);
  EXPECT_EQ(millions(parameter_count(build_model(l, 83, 83, 0))), 8.621);
  // Uncontrolled input feeding adds d_dec * 4 * d_s recurrent input weights.
  for (auto [cfg, vocab, extra] : {std::tuple{s, 46u, 480000u}, std::tuple{l, 83u, 1920000u}}) {
    ModelConfig base = cfg, u = cfg;
    base.arch = Architecture::Soft;
    u.arch = Architecture::SoftInputFed;
    u.uncontrolled = true;
    EXPECT_EQ(parameter_count(build_model(u, vocab, vocab, 0)) - parameter_count(build_model(base, vocab, vocab, 0)),
              extra);
  }
}

TEST(Likelihood, NonPositiveForEveryArchitecture) {
  for (Architecture arch : kAll) {
    TransducerModel m = build_model(tiny(arch), 7, 7, 3);
    for (const auto& ex : toy_data()) {
      std::vector<int> y = ex.target;
      y.push_back(Vocabulary::kEos);
      EXPECT_LE(sequence_log_likelihood(m, ex.source, y).item(), 0.0);
    }
  }
}

TEST(Likelihood, ArgumentErrors) {
  TransducerModel m = build_model(tiny(Architecture::Hard), 7, 7, 3);
  const std::vector<int> x{4, 5}, y{5, Vocabulary::kEos}, no_eos{5, 6}, empty;
  EXPECT_THROW(sequence_log_likelihood(m, empty, y), ArgumentError);
  EXPECT_THROW(sequence_log_likelihood(m, x, empty), ArgumentError);
  EXPECT_THROW(sequence_log_likelihood(m, x, no_eos), ArgumentError);
  EXPECT_THROW(sequence_log_likelihood(m, std::vector<int>{9}, y), EncodingError);
}

TEST(Likelihood, HardModelMatchesBruteForceOverItsLattice) {
  TransducerModel m = build_model(tiny(Architecture::Hard), 7, 7, 4);
  auto data = toy_data();
  Batch b = make_batch(data, {0, 1, 2});
  ForwardPass fp = forward(m, b);
  Tensor ll = batch_log_likelihood(m, b);
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t steps = data[k].target.size() + 1, positions = data[k].source.size();
    std::vector<double> la, le;
    for (std::size_t i = 0; i < steps; ++i)
      for (std::size_t j = 0; j < positions; ++j) {
        const std::size_t f = (k * b.steps + i) * b.source.length + j;
        la.push_back(fp.lattice.log_alpha[f]);
        le.push_back(fp.lattice.log_emission[f]);
      }
    EXPECT_NEAR(ll[k], brute_force_log_likelihood(la, le, steps, positions), 1e-12);
  }
}

TEST(Likelihood, SoftWithOneHotAlphaEqualsHardWithOneHotAlpha) {
  TransducerModel soft = build_model(tiny(Architecture::Soft), 7, 7, 5);
  auto data = toy_data();
  Batch b = make_batch(data, {0});
  Tensor h_enc = encoder_states(soft, b), h_dec = decoder_states(soft, b);  // [1x3x6], [1x3x4]
  const std::vector<double> one_hot{0, 0, 1, 1, 0, 0, 0, 1, 0};
  Tensor lp = soft_output_log_probs(h_dec, bmm(Tensor::from_data({1, 3, 3}, one_hot), h_enc), soft.out_proj,
                                    soft.vocab_proj);
  const double s = sum(gather_last(lp, b.targets)).item();
  std::vector<double> la(9, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < 9; ++k)
    if (one_hot[k] == 1) la[k] = 0;
  Tensor enc_proj = project_encoder_for_output(h_enc, soft.out_proj, 4);
  Tensor em = gather_last(hard_output_log_probs(h_dec, enc_proj, soft.out_proj, soft.vocab_proj),
                          expand_targets(b.targets, 1, 3, 3));
  EXPECT_NEAR(s, marginal_log_likelihood(make_lattice(Tensor::from_data({1, 3, 3}, la), em)).item(), 1e-12);
}

TEST(Likelihood, PlainDecoderStatesIndependentOfArchitecture) {
  TransducerModel soft = build_model(tiny(Architecture::Soft), 7, 7, 6);
  TransducerModel hard = build_model(tiny(Architecture::Hard), 7, 7, 6);
  auto data = toy_data();
  Batch b = make_batch(data, {0, 1, 2});
  forward(soft, b);  // attention work in between must not matter
  EXPECT_EQ(values(decoder_states(soft, b)), values(decoder_states(hard, b)));
  TransducerModel fed = build_model(tiny(Architecture::HardInputFed), 7, 7, 6);
  EXPECT_THROW(decoder_states(fed, b), ContractError);
}

TEST(Likelihood, BatchedLossEqualsMeanOfSequenceLosses) {
  auto data = toy_data();
  for (Architecture arch : kAll) {
    TransducerModel m = build_model(tiny(arch), 7, 7, 7);
    const double batched = batch_loss(m, make_batch(data, {0, 1, 2})).loss.item();
    double total = 0;
    for (const auto& ex : data) {
      std::vector<int> y = ex.target;
      y.push_back(Vocabulary::kEos);
      total -= sequence_log_likelihood(m, ex.source, y).item();
    }
    EXPECT_NEAR(batched, total / 3.0, 1e-10) << architecture_name(arch);
  }
}

TEST(Likelihood, HardEvaluationIgnoresReinforceFlag) {
  ModelConfig c = tiny(Architecture::Hard);
  TransducerModel exact = build_model(c, 7, 7, 8);
  c.reinforce = true;
  TransducerModel sampled = build_model(c, 7, 7, 8);
  auto data = toy_data();
  Batch b = make_batch(data, {0, 1, 2});
  EXPECT_EQ(values(batch_log_likelihood(exact, b)), values(batch_log_likelihood(sampled, b)));
  EXPECT_EQ(values(batch_log_likelihood(sampled, b)), values(batch_log_likelihood(sampled, b)));
  EXPECT_THROW(batch_loss(sampled, b), ContractError);
  Rng rng(1);
  MovingBaseline base;
  LossResult r = batch_loss(sampled, b, StepContext{{}, &rng, &base});
  EXPECT_TRUE(base.initialized);
  EXPECT_TRUE(std::isfinite(r.loss.item()));
}

TEST(Likelihood, GradientsMatchFiniteDifferencesForAllArchitectures) {
  auto data = toy_data();
  for (Architecture arch : kAll) {
    ModelConfig c = tiny(arch);
    c.emb_dim = 4;
    c.enc_hidden = 4;
    c.dec_hidden = 4;
    TransducerModel m = build_model(c, 7, 7, 9);
    std::vector<std::string> names;
    std::vector<Tensor> leaves;
    for (auto& [n, t] : m.named_parameters()) {
      names.push_back(n);
      leaves.push_back(t);
    }
    const std::vector<int> y{4, 4, 6, 5, Vocabulary::kEos};
    const std::vector<int> x{5, 4};
    auto f = [&] { return sequence_log_likelihood(m, x, y); };
    auto r = grad_check(f, leaves, 1e-5, names);
    EXPECT_LT(r.max_rel_error, 1e-4) << architecture_name(arch) << " worst at " << r.worst;
  }
}

TEST(Forward, AlphaRowsAreDistributionsWithNoMassOnPadding) {
  auto data = toy_data();
  Batch b = make_batch(data, {0, 1, 2});
  for (Architecture arch : kAll) {
    TransducerModel m = build_model(tiny(arch), 7, 7, 10);
    ForwardPass fp = forward(m, b);
    const std::size_t J = b.source.length;
    for (std::size_t bi = 0; bi < 3; ++bi)
      for (std::size_t i = 0; i < b.steps; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < J; ++j) {
          const double a = fp.alpha[(bi * b.steps + i) * J + j];
          if (!b.source.mask[bi * J + j]) EXPECT_EQ(a, 0.0);
          total += a;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
  }
}
