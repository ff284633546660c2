#pragma once
// Binary checkpoint container.
//
// Layout: 8-byte magic "LNFMMCKP", u32 format version, u64 header length,
// JSON header, then raw little-endian doubles for every tensor listed in the
// header's index, in index order. The header carries the resolved run
// config, its hash, progress counters, the training RNG state and whether
// the data-dependent prior init has run.

#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "lnfmm/config.hpp"
#include "lnfmm/model.hpp"
#include "lnfmm/optim.hpp"
#include "lnfmm/train.hpp"

namespace lnfmm::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::string config_hash;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string rng_state;  // empty when saved without a trainer
  bool priors_initialized = false;
  double best_objective = 0.0;
  std::map<std::string, Matrix> params;
  std::uint64_t adam_steps = 0;
  std::map<std::string, Adam::Moments> moments;
};

// Captures the model and, when given, the trainer's optimizer, counters and
// RNG stream.
Checkpoint capture(const RunConfig& config, const model::LnfmmModel& model, train::Trainer* trainer,
                   double best_objective = 0.0);

// Writes to a sibling temp file and renames it over `path`, so a failed
// write never clobbers an existing checkpoint.
void write(const std::string& path, const Checkpoint& ckpt);
Checkpoint read(const std::string& path);

// Rebuilds a model from the stored config and copies every tensor in.
// Throws FormatError when names or shapes disagree with the config.
std::unique_ptr<model::LnfmmModel> restore_model(const Checkpoint& ckpt);

// Restores optimizer moments, counters and the RNG stream.
void restore_trainer(const Checkpoint& ckpt, train::Trainer& trainer);

}  // namespace lnfmm::checkpoint
