#pragma once
// Run configuration: one JSON document with data, model, objective, train
// and eval sections plus a top-level seed. Unknown keys are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lnfmm/eval.hpp"
#include "lnfmm/model.hpp"
#include "lnfmm/synthia.hpp"
#include "lnfmm/train.hpp"

namespace lnfmm {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunConfig {
  std::uint64_t seed = 0;
  synthia::GeneratorConfig data;  // data.seed mirrors `seed`
  model::ModelConfig model;
  model::ObjectiveWeights objective;
  train::TrainConfig train;
  eval::EvalConfig eval;

  // Model dimensions that must agree with the data are copied over, and
  // every section is validated.
  void resolve();
};

nlohmann::json to_json(const RunConfig& config);

// Overlays `doc` onto `base`. Throws ConfigError naming the offending field
// for unknown keys, wrong types and invalid values.
RunConfig from_json(const nlohmann::json& doc, RunConfig base = {});

RunConfig load_config(const std::string& path, RunConfig base = {});

// Applies "section.key=value" where value parses as JSON, falling back to a
// bare string.
void apply_override(RunConfig& config, const std::string& assignment);

// FNV-1a over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& config);

// Header object written at the top of every output artifact.
nlohmann::json artifact_header(const RunConfig& config, const std::string& kind);

}  // namespace lnfmm
