#pragma once
// Minibatch training loop over a synthetic training split.

#include <cstdint>
#include <functional>
#include <vector>

#include "lnfmm/model.hpp"
#include "lnfmm/optim.hpp"

namespace lnfmm::train {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double clip_norm = 5.0;  // 0 disables clipping
};

struct StepRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // global optimizer step after this update, 1-based
  model::TermReport report;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  model::TermReport mean;  // per-term means over the epoch's steps
};

class Trainer {
 public:
  Trainer(model::LnfmmModel& model, model::ObjectiveWeights weights, TrainConfig config, std::uint64_t seed);

  // One pass over `records` in a freshly shuffled order. Throws
  // NonFiniteError without updating parameters when a step goes non-finite.
  EpochRecord run_epoch(const std::vector<synthia::Record>& records,
                        const std::function<void(const StepRecord&)>& on_step = {});

  std::size_t step() const { return step_; }
  std::size_t epoch() const { return epoch_; }
  Adam& optimizer() { return adam_; }
  Rng& rng() { return rng_; }
  // Restores counters after loading a checkpoint.
  void set_progress(std::size_t step, std::size_t epoch) {
    step_ = step;
    epoch_ = epoch;
  }

 private:
  model::LnfmmModel& model_;
  model::ObjectiveWeights weights_;
  TrainConfig config_;
  Adam adam_;
  Rng rng_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace lnfmm::train
