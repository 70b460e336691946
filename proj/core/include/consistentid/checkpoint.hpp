#pragma once

// Weight files: 8-byte little-endian header length, a JSON header, then the tensors as raw
// little-endian float64 in header order.

#include "consistentid/autodiff.hpp"
#include "consistentid/encoders.hpp"
#include "consistentid/facial_prompt_generator.hpp"
#include "consistentid/prompt_assembly.hpp"
#include "consistentid/toy_diffusion.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cid {

struct Checkpoint {
  static constexpr int kVersion = 1;

  std::string module;
  int version = kVersion;
  std::uint64_t seed = 0;
  std::string vocabulary_sha256;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::pair<std::string, ad::Matrix>> tensors;

  void add(const ad::Parameter& p) { tensors.emplace_back(p.name, p.value); }
  const ad::Matrix* find(std::string_view name) const;
  // Copies every named tensor into the matching parameter; CheckpointMismatch on a missing
  // name or a shape difference.
  void load_into(const std::vector<ad::Parameter*>& params) const;

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct ModelConfig {
  TextEncoderConfig text;
  DenoiserConfig denoiser;
  FacialEncoderConfig facial;
  EncoderConfig encoders;
  int timesteps = 100;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Everything a generation needs. The base model (text encoder + denoiser) comes from
// pretraining; the facial encoder from the ConsistentID stage.
struct Models {
  ModelConfig config;
  std::uint64_t seed = 0;
  TextEncoder text;
  Denoiser denoiser;
  std::optional<FacialEncoder> facial;

  static Models create(const ModelConfig& config, std::uint64_t seed, const Vocabulary& vocab = Vocabulary::standard());

  // module "base" or "consistentid" depending on whether the facial encoder is set.
  Checkpoint to_checkpoint(const Vocabulary& vocab = Vocabulary::standard()) const;
  static Models from_checkpoint(const Checkpoint& ckpt, const Vocabulary& vocab = Vocabulary::standard());

  // sha256 over the serialized checkpoint.
  std::string checksum() const;
};

}  // namespace cid
