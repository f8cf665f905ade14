#pragma once

// Run configuration file: strict JSON, every key optional, unknown keys
// rejected. Errors are ConfigError with the dotted path of the field.

#include "avdit/sampler.hpp"
#include "avdit/training.hpp"

#include <json.hpp>

#include <string>

namespace avdit::cli {

struct RunPaths {
  std::string metrics;     // CSV, empty: none
  std::string checkpoint;  // final checkpoint, plus periodic ones when train.checkpoint_every > 0
  std::string init;        // weights to start from
  std::string out;         // default output directory for sample / eval / inspect-attn
};

struct RunConfig {
  /// Architecture only; the latent extents always follow `world`.
  ModelConfig model = model_config_for(ToyWorldConfig{});
  ToyWorldConfig world;
  TrainConfig train;
  GuidanceSpec sample;
  RunPaths paths;
  /// Seed for the initial weights when no init checkpoint is given.
  std::uint64_t init_seed = 0;

  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
/// Reads, parses and validates. Unreadable or malformed files throw
/// ConfigError with the field "file".
RunConfig load_run_config(const std::string& path);

nlohmann::ordered_json to_json(const RunConfig& c);

}  // namespace avdit::cli
