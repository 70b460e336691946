#include "consistentid/run_config.hpp"

#include "consistentid/errors.hpp"

#include <fstream>

namespace cid {

namespace {

nlohmann::json training_json(const TrainingConfig& c) {
  nlohmann::json j = c.to_json();
  j.erase("seed");
  return j;
}

TrainingConfig training_from(const nlohmann::json& j, const TrainingConfig& base, const char* section) {
  if (j.is_object() && j.contains("seed")) {
    throw ConfigError(std::string(section) + ": unknown key 'seed' (the run seed is global)");
  }
  return TrainingConfig::from_json(j, base);
}

}  // namespace

void RunConfig::validate() const {
  pretrain.validate();
  train.validate();
  if (steps < 1 || steps > model.timesteps) {
    throw ConfigError("sampler.steps must be in [1, " + std::to_string(model.timesteps) + "]");
  }
  if (merge_step < 0 || merge_step > steps) throw ConfigError("sampler.merge_step must be in [0, steps]");
  if (!(guidance_scale >= 0.0)) throw ConfigError("sampler.guidance_scale must be >= 0");
}

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"model", model.to_json()},
          {"pretrain", training_json(pretrain)},
          {"train", training_json(train)},
          {"sampler", {{"steps", steps}, {"guidance_scale", guidance_scale}, {"merge_step", merge_step}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected an object");
  RunConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (k == "model") {
        c.model = ModelConfig::from_json(v);
      } else if (k == "pretrain") {
        c.pretrain = training_from(v, TrainingConfig::pretrain_defaults(), "pretrain");
      } else if (k == "train") {
        c.train = training_from(v, TrainingConfig{}, "train");
      } else if (k == "sampler") {
        if (!v.is_object()) throw ConfigError("sampler: expected an object");
        for (const auto& [k2, v2] : v.items()) {
          if (k2 == "steps") c.steps = v2.get<int>();
          else if (k2 == "guidance_scale") c.guidance_scale = v2.get<double>();
          else if (k2 == "merge_step") c.merge_step = v2.get<int>();
          else throw ConfigError("sampler: unknown key '" + k2 + "'");
        }
      } else {
        throw ConfigError("config: unknown key '" + k + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::merged(const nlohmann::json& overlay) const {
  if (!overlay.is_object()) throw ConfigError("config: expected an object");
  nlohmann::json full = to_json();
  full.merge_patch(overlay);
  return from_json(full);
}

TrainingConfig RunConfig::pretrain_config() const {
  TrainingConfig c = pretrain;
  c.seed = seed;
  return c;
}

TrainingConfig RunConfig::train_config() const {
  TrainingConfig c = train;
  c.seed = seed;
  return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path) {
  RunConfig c;
  if (!path) return c;
  std::ifstream f(*path);
  if (!f) throw MissingFile("config not found: " + path->string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path->string() + ": " + e.what());
  }
  return c.merged(j);
}

}  // namespace cid
