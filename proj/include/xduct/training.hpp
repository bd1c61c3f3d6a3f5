#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "xduct/batch.hpp"
#include "xduct/checkpoint.hpp"
#include "xduct/decode.hpp"
#include "xduct/errors.hpp"
#include "xduct/model.hpp"
#include "xduct/ops.hpp"
#include "xduct/optim.hpp"
#include "xduct/rng.hpp"

namespace xduct {

struct TrainConfig {
  double lr = 1e-3;
  double lr_floor = 1e-5;
  std::size_t max_epochs = 50;
  std::size_t batch_size = 20;
  double clip_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // dev decoding workers
  bool checked = false;     // abort on NaN/Inf
  bool select_by_accuracy = true;  // otherwise by dev log-likelihood alone
  double stop_at_accuracy = 0.0;   // > 0: stop once dev accuracy (percent) reaches this
  bool deterministic = false;      // record no wall-clock times, so equal seeds give equal checkpoint bytes
  std::function<void(const EpochRecord&)> on_epoch;

  void validate() const {
    if (stop_at_accuracy < 0.0 || stop_at_accuracy > 100.0) {
      throw ConfigError("stop accuracy must be a percentage");
    }
    if (!(lr > 0.0) || !(lr_floor > 0.0) || !(lr_floor < lr)) {
      throw ConfigError("learning rates must satisfy 0 < floor < initial rate");
    }
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (max_epochs == 0) throw ConfigError("max epochs must be at least 1");
    if (clip_norm < 0.0) throw ConfigError("clip norm must be non-negative");
  }
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
};

// Mean exact log-likelihood per sequence.
inline double mean_log_likelihood(const TransducerModel& m, const std::vector<EncodedExample>& data,
                                  std::size_t batch_size = 50) {
  if (data.empty()) throw DataError("cannot score an empty dataset");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> ids;
    for (std::size_t k = start; k < std::min(data.size(), start + batch_size); ++k) ids.push_back(k);
    const Tensor ll = batch_log_likelihood(m, make_batch(data, ids));
    for (double v : ll.data()) total += v;
  }
  return total / static_cast<double>(data.size());
}

// Percentage of sources whose greedy output equals the target.
inline double sequence_accuracy(const TransducerModel& m, const std::vector<EncodedExample>& data,
                                std::size_t threads = 1) {
  if (data.empty()) throw DataError("cannot score an empty dataset");
  std::vector<std::vector<int>> xs;
  for (const auto& ex : data) xs.push_back(ex.source);
  auto results = greedy_decode_all(m, xs, threads);
  std::size_t right = 0;
  for (std::size_t k = 0; k < data.size(); ++k) right += strip_eos(results[k].output) == data[k].target;
  return 100.0 * static_cast<double>(right) / static_cast<double>(data.size());
}

// One optimization step on a batch. Returns the loss value.
inline double train_step(TransducerModel& m, const Batch& batch, AdamState& adam, double lr, const StepContext& ctx,
                         double clip_norm = 0.0) {
  m.zero_grad();
  LossResult r = batch_loss(m, batch, ctx);
  const double loss = r.loss.item();
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss " + std::to_string(loss));
  backward(r.loss);
  std::vector<Tensor> params = m.parameters();
  if (clip_norm > 0.0) clip_global_norm(params, clip_norm);
  adam_step(params, adam, lr);
  return loss;
}

// Trains until the learning rate falls below the floor or the epoch cap is
// hit. The model is left holding the best parameters.
inline FitResult fit(TransducerModel& m, const std::vector<EncodedExample>& train,
                     const std::vector<EncodedExample>& dev, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty() || dev.empty()) throw DataError("training needs non-empty train and dev sets");
  const bool was_checked = checked_mode();
  if (cfg.checked) set_checked_mode(true);
  struct Restore {
    bool prev;
    ~Restore() { set_checked_mode(prev); }
  } restore{was_checked};

  Rng shuffle_rng = Rng::derive(cfg.seed, "shuffle");
  Rng dropout_rng = Rng::derive(cfg.seed, "dropout");
  Rng sample_rng = Rng::derive(cfg.seed, "reinforce");
  MovingBaseline baseline;
  StepContext ctx{Dropout{m.config.dropout, &dropout_rng}, &sample_rng, &baseline};

  std::vector<Tensor> params = m.parameters();
  AdamState adam = AdamState::for_parameters(params);
  PlateauSchedule schedule{cfg.lr, cfg.lr_floor};

  FitResult result;
  double best_acc = -1.0, best_ll = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = schedule.lr;
    std::vector<Batch> batches = make_batches(train, cfg.batch_size, shuffle_rng, true);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        loss_sum += train_step(m, batches[b], adam, lr, ctx, cfg.clip_norm);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches.size());
    rec.dev_log_likelihood = mean_log_likelihood(m, dev);
    rec.dev_accuracy = cfg.select_by_accuracy ? sequence_accuracy(m, dev, cfg.threads) : 0.0;
    rec.lr = lr;
    if (!cfg.deterministic) {
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.push_back(rec);

    const bool better = rec.dev_accuracy > best_acc ||
                        (rec.dev_accuracy == best_acc && rec.dev_log_likelihood > best_ll);
    if (better) {
      best_acc = rec.dev_accuracy;
      best_ll = rec.dev_log_likelihood;
      result.best = snapshot(m, &adam);
      result.best.epoch = epoch;
      result.best.seed = cfg.seed;
      result.best_epoch = epoch;
    }
    if (cfg.on_epoch) cfg.on_epoch(rec);
    schedule.observe(rec.dev_log_likelihood);
    if (schedule.finished()) break;
    if (cfg.stop_at_accuracy > 0.0 && cfg.select_by_accuracy && rec.dev_accuracy >= cfg.stop_at_accuracy) break;
  }
  result.best.history = result.log;
  load_parameters(m, result.best);
  return result;
}

}  // namespace xduct
