#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "xduct/training.hpp"

using namespace xduct;

namespace {

std::vector<EncodedExample> numbered(std::size_t n) {
  std::vector<EncodedExample> out;
  for (std::size_t k = 0; k < n; ++k) {
    const int a = 4 + static_cast<int>(k % 5), b = 4 + static_cast<int>(k / 5 % 5);
    out.push_back({{a, b, a}, {b, a}});
  }
  return out;
}

ModelConfig tiny(Architecture arch = Architecture::Hard) {
  ModelConfig c;
  c.emb_dim = 6;
  c.enc_hidden = 6;
  c.dec_hidden = 8;
  c.dropout = 0.0;
  c.arch = arch;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("xduct_training_test_" + name)).string();
}

std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Batches, SizesAndRemainder) {
  auto data = numbered(45);
  Rng rng(3);
  auto batches = make_batches(data, 20, rng, true);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 20u);
  EXPECT_EQ(batches[1].size(), 20u);
  EXPECT_EQ(batches[2].size(), 5u);
  std::vector<std::size_t> all;
  for (const auto& b : batches) all.insert(all.end(), b.ids.begin(), b.ids.end());
  std::sort(all.begin(), all.end());
  for (std::size_t k = 0; k < 45; ++k) EXPECT_EQ(all[k], k);
}

TEST(Batches, SeedDeterminesOrder) {
  auto data = numbered(45);
  auto a = make_batches(data, 20, 11), b = make_batches(data, 20, 11), c = make_batches(data, 20, 12);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].ids, b[k].ids);
  EXPECT_NE(a[0].ids, c[0].ids);
  Rng rng(0);
  auto unshuffled = make_batches(data, 20, rng, false);
  EXPECT_EQ(unshuffled[0].ids.front(), 0u);
  EXPECT_EQ(unshuffled[2].ids.back(), 44u);
}

TEST(Batches, DecoderInputsAndTargetsAreShiftedByOne) {
  std::vector<EncodedExample> data{{{4, 5}, {6, 7, 8}}, {{4}, {6}}};
  Batch b = make_batch(data, {0, 1});
  EXPECT_EQ(b.steps, 4u);
  EXPECT_EQ(b.input_column(0), (std::vector<int>{Vocabulary::kBos, Vocabulary::kBos}));
  EXPECT_EQ(b.target_column(0), (std::vector<int>{6, 6}));
  EXPECT_EQ(b.input_column(1), (std::vector<int>{6, 6}));
  EXPECT_EQ(b.target_column(1), (std::vector<int>{7, Vocabulary::kEos}));
  EXPECT_EQ(b.target_column(3), (std::vector<int>{Vocabulary::kEos, Vocabulary::kPad}));
  EXPECT_EQ(b.target_weights, (std::vector<double>{1, 1, 1, 1, 1, 1, 0, 0}));
  std::vector<EncodedExample> bad{{{}, {6}}};
  EXPECT_THROW(make_batch(bad, {0}), ArgumentError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  std::vector<Tensor> ps{p};
  backward(sum(mul(p, Tensor::from_data({3}, {1.0, -3.0, 0.0}))));
  AdamState s;
  adam_step(ps, s, 0.01);
  const double eps = 1e-8;
  EXPECT_NEAR(p[0], 1.0 - 0.01 * 1.0 / (1.0 + eps), 1e-15);
  EXPECT_NEAR(p[1], -2.0 + 0.01 * 3.0 / (3.0 + eps), 1e-15);
  EXPECT_EQ(p[2], 0.5);
}

TEST(Adam, MatchesScalarRecurrence) {
  Tensor p = Tensor::from_data({1}, {2.0}, true);
  std::vector<Tensor> ps{p};
  AdamState s;
  double w = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    p.zero_grad();
    backward(sum(mul(p, p)));  // gradient 2w
    const double g = 2.0 * w;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    adam_step(ps, s, 0.1);
    EXPECT_NEAR(p[0], w, 1e-13) << "step " << t;
  }
  EXPECT_EQ(s.step, 5u);
}

TEST(Adam, MismatchedStateIsShapeError) {
  std::vector<Tensor> ps{Tensor::zeros({2}, true)};
  AdamState s = AdamState::for_parameters(std::vector<Tensor>{Tensor::zeros({3}, true)});
  EXPECT_THROW(adam_step(ps, s, 0.1), ShapeError);
}

TEST(Schedule, HalvesOnPlateauUntilFloor) {
  PlateauSchedule s{1e-3, 1e-5};
  EXPECT_TRUE(s.observe(-5.0));
  EXPECT_TRUE(s.observe(-4.0));
  EXPECT_FALSE(s.observe(-4.0));  // equal is not an improvement
  EXPECT_DOUBLE_EQ(s.lr, 5e-4);
  std::size_t epochs = 3;
  while (!s.finished()) {
    s.observe(-10.0);
    ++epochs;
  }
  // 1e-3 / 2^7 < 1e-5 <= 1e-3 / 2^6
  EXPECT_EQ(s.halvings, 7u);
  EXPECT_EQ(epochs, 9u);
}

TEST(Config, TrainConfigValidation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_floor = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  TransducerModel m = build_model(tiny(), 9, 9, 0);
  EXPECT_THROW(fit(m, {}, numbered(3), TrainConfig{}), DataError);
}

TEST(Fit, SingleExampleLossFalls) {
  std::vector<EncodedExample> one{{{4, 5, 6}, {6, 5, 4}}};
  TransducerModel m = build_model(tiny(), 9, 9, 1);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.max_epochs = 5;
  cfg.lr_floor = 1e-6;
  FitResult r = fit(m, one, one, cfg);
  ASSERT_GE(r.log.size(), 2u);
  for (std::size_t k = 1; k < r.log.size(); ++k) EXPECT_LT(r.log[k].train_loss, r.log[k - 1].train_loss);
}

TEST(Fit, BestCheckpointIsBestLoggedEpochAndIsRestored) {
  auto data = numbered(25);
  TransducerModel m = build_model(tiny(), 9, 9, 2);
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.max_epochs = 6;
  cfg.batch_size = 5;
  cfg.seed = 4;
  std::size_t calls = 0;
  cfg.on_epoch = [&](const EpochRecord&) { ++calls; };
  FitResult r = fit(m, data, data, cfg);
  EXPECT_EQ(calls, r.log.size());
  const auto best = std::max_element(r.log.begin(), r.log.end(), [](const auto& a, const auto& b) {
    return a.dev_accuracy < b.dev_accuracy ||
           (a.dev_accuracy == b.dev_accuracy && a.dev_log_likelihood < b.dev_log_likelihood);
  });
  EXPECT_EQ(r.best_epoch, best->epoch);
  EXPECT_EQ(r.best.epoch, best->epoch);
  EXPECT_DOUBLE_EQ(mean_log_likelihood(m, data), best->dev_log_likelihood);
  EXPECT_EQ(r.best.history, r.log);
}

TEST(Fit, SameSeedSameRun) {
  auto data = numbered(10);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  ModelConfig mc = tiny();
  mc.dropout = 0.3;
  mc.reinforce = true;
  TransducerModel a = build_model(mc, 9, 9, 3), b = build_model(mc, 9, 9, 3);
  fit(a, data, data, cfg);
  fit(b, data, data, cfg);
  EXPECT_EQ(snapshot(a).params, snapshot(b).params);
}

TEST(Clipping, GlobalNormBounded) {
  std::vector<EncodedExample> one{{{4, 5}, {5, 4}}};
  TransducerModel m = build_model(tiny(), 9, 9, 4);
  m.zero_grad();
  backward(batch_loss(m, make_batch(one, {0})).loss);
  auto params = m.parameters();
  clip_global_norm(params, 1e-3);
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 1e-3, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto data = numbered(10);
  TransducerModel m = build_model(tiny(), 9, 9, 5);
  AdamState adam;
  auto params = m.parameters();
  train_step(m, make_batch(data, {0, 1, 2}), adam, 1e-3, {});
  Checkpoint c = snapshot(m, &adam);
  c.seed = 77;
  c.epoch = 3;
  c.task = "g2p";
  c.source = Vocabulary::from_data_symbols({"a", "b", "c", "d", "e"});
  c.target = c.source;
  c.history.push_back({1, 2.5, -3.25, 40.0, 1e-3, 0.1});
  const std::string path = temp_path("roundtrip.ckpt");
  save_checkpoint(c, path);
  Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.adam.m, adam.m);
  EXPECT_EQ(back.adam.v, adam.v);
  EXPECT_EQ(back.adam.step, adam.step);
  EXPECT_EQ(back.config, c.config);
  EXPECT_EQ(back.history, c.history);
  EXPECT_EQ(back.source, c.source);
  EXPECT_EQ(std::tie(back.seed, back.epoch, back.task), std::tie(c.seed, c.epoch, c.task));
  TransducerModel r = restore_model(back);
  for (const auto& ex : data) {
    std::vector<int> y = ex.target;
    y.push_back(Vocabulary::kEos);
    EXPECT_EQ(sequence_log_likelihood(r, ex.source, y).item(), sequence_log_likelihood(m, ex.source, y).item());
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  TransducerModel m = build_model(tiny(), 9, 9, 6);
  const std::string path = temp_path("corrupt.ckpt");
  save_checkpoint(snapshot(m), path);
  const std::string good = read_all(path);
  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  write_all(path, flipped);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  write_all(path, good.substr(0, good.size() - 9));
  EXPECT_THROW(load_checkpoint(path), FormatError);
  write_all(path, good.substr(0, 10));
  EXPECT_THROW(load_checkpoint(path), FormatError);
  write_all(path, "not a checkpoint at all, just some text");
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, ArchitectureMismatchRefusedUnlessOverridden) {
  TransducerModel hard = build_model(tiny(Architecture::Hard), 9, 9, 7);
  Checkpoint c = snapshot(hard);
  ModelConfig soft = tiny(Architecture::Soft);
  EXPECT_THROW(check_compatible(c, soft), ConfigError);
  EXPECT_THROW(restore_model(c, &soft), ConfigError);
  TransducerModel s = restore_model(c, &soft, true);
  EXPECT_EQ(s.config.arch, Architecture::Soft);
  EXPECT_EQ(snapshot(s).params, c.params);
  ModelConfig other = tiny(Architecture::SoftInputFed);
  EXPECT_THROW(restore_model(c, &other, true), FormatError);
}
