#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fixattn/data.hpp"
#include "fixattn/error.hpp"
#include "fixattn/model.hpp"
#include "fixattn/tensor.hpp"

namespace fixattn {

struct TrainOptions {
  std::size_t steps = 2000;
  AdamConfig adam;
  std::size_t batch_tokens = 1000;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
  // When positive and a validation set is given, training stops at the first
  // validation check reaching this teacher-forced token accuracy.
  double stop_at_accuracy = 0.0;
  std::size_t validate_every = 100;
};

struct TrainLogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double token_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<TrainLogEntry> log;
  std::size_t skipped = 0;
  std::optional<double> validation_accuracy;
};

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double loss = 0.0;  // mean per-token negative log-likelihood

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

// Teacher-forced argmax accuracy over every target token including </s>.
template <class T>
TokenAccuracy teacher_forced_accuracy(const Transformer<T>& model, const EncodedCorpus& corpus,
                                      std::size_t batch_tokens = 1000) {
  TokenAccuracy acc;
  BatchIterator batches(corpus, batch_tokens, 0, model.config().max_len);
  double nll = 0.0;
  while (auto batch = batches.next()) {
    const auto r = model.evaluate(*batch);
    acc.correct += r.correct;
    acc.total += r.counted;
    nll += static_cast<double>(r.loss.item()) * static_cast<double>(r.counted);
  }
  if (acc.total > 0) acc.loss = nll / static_cast<double>(acc.total);
  return acc;
}

// Adam training over token-capped batches, reshuffled every epoch. Logged loss
// and accuracy are averages over the batches since the previous log line.
template <class T>
TrainResult train(Transformer<T>& model, const EncodedCorpus& corpus, const TrainOptions& options,
                  const EncodedCorpus* validation = nullptr,
                  const std::function<void(const TrainLogEntry&)>& on_log = {},
                  const BatchIterator::WarningSink& warn = {}) {
  TrainResult result;
  AdamState<T> state;
  const auto start = std::chrono::steady_clock::now();
  const bool was_training = model.training();
  model.set_training(true);

  double window_loss = 0.0;
  std::size_t window_batches = 0, window_correct = 0, window_tokens = 0;
  std::size_t step = 0;
  for (std::uint64_t epoch = 0; step < options.steps; ++epoch) {
    BatchIterator batches(corpus, options.batch_tokens, options.seed + epoch, model.config().max_len,
                          epoch == 0 ? warn : BatchIterator::WarningSink{});
    if (epoch == 0) result.skipped = batches.skipped();
    bool any = false;
    while (step < options.steps) {
      auto batch = batches.next();
      if (!batch) break;
      any = true;
      zero_grad(model.parameters());
      const auto r = model.loss(*batch);
      const double loss = static_cast<double>(r.loss.item());
      ++step;
      if (!std::isfinite(loss)) throw NumericalError("loss is not finite at step " + std::to_string(step));
      backward(r.loss);
      try {
        adam_step(model.parameters(), state, options.adam);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
      }
      window_loss += loss;
      ++window_batches;
      window_correct += r.correct;
      window_tokens += r.counted;

      if (options.log_every > 0 && (step % options.log_every == 0 || step == options.steps)) {
        TrainLogEntry entry;
        entry.step = step;
        entry.loss = window_loss / static_cast<double>(window_batches);
        entry.token_accuracy = static_cast<double>(window_correct) / static_cast<double>(window_tokens);
        entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.log.push_back(entry);
        if (on_log) on_log(entry);
        window_loss = 0.0;
        window_batches = window_correct = window_tokens = 0;
      }

      if (validation != nullptr && options.stop_at_accuracy > 0.0 && options.validate_every > 0 &&
          step % options.validate_every == 0) {
        const auto acc = teacher_forced_accuracy(model, *validation, options.batch_tokens).accuracy();
        result.validation_accuracy = acc;
        if (acc >= options.stop_at_accuracy) {
          result.steps = step;
          model.set_training(was_training);
          zero_grad(model.parameters());
          return result;
        }
      }
    }
    if (!any) throw InvalidInput("training corpus has no usable sentence pairs");
  }
  result.steps = step;
  if (validation != nullptr) {
    result.validation_accuracy = teacher_forced_accuracy(model, *validation, options.batch_tokens).accuracy();
  }
  model.set_training(was_training);
  zero_grad(model.parameters());
  return result;
}

}  // namespace fixattn
