#pragma once

// Merged run configuration: defaults < JSON config file < command-line flags.

#include "consistentid/checkpoint.hpp"
#include "consistentid/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>

namespace cid {

struct RunConfig {
  // Drives model init, both training stages and sampling.
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainingConfig pretrain = TrainingConfig::pretrain_defaults();
  TrainingConfig train;
  int steps = 50;
  double guidance_scale = 5.0;
  int merge_step = 10;

  void validate() const;
  nlohmann::json to_json() const;
  // Strict: unknown keys anywhere raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  // Keys present in `overlay` replace those of this config.
  RunConfig merged(const nlohmann::json& overlay) const;

  TrainingConfig pretrain_config() const;
  TrainingConfig train_config() const;
};

// Defaults, overlaid by the file when given. MissingFile / ConfigError.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path);

}  // namespace cid
