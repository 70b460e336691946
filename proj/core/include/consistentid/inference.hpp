#pragma once

// Generation with delayed primacy: sampler steps before the merge step see the plain text
// prompt, the remaining steps see the fused facial prompt plus the overall-ID token.

#include "consistentid/checkpoint.hpp"
#include "consistentid/face_parsing.hpp"
#include "consistentid/toy_diffusion.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace cid {

struct GenerationRequest {
  Image reference_face;
  // Optional label recorded in metadata (e.g. the reference path).
  std::string reference_path;
  std::string prompt_text = std::string(kFixedPhrase);
  int steps = 50;
  double guidance_scale = 5.0;
  int merge_step = 10;
  std::uint64_t seed = 0;

  void validate() const;
  SamplerConfig sampler() const { return SamplerConfig{steps, guidance_scale, merge_step, seed}; }
};

struct PreparedPrompts {
  MultimodalPrompt plain;  // prompt text plus region keywords
  MultimodalPrompt fused;  // same with keywords replaced by the delimiter
};

// Region text for the reference is the bare keyword of each present region.
PreparedPrompts prepare_prompts(const std::string& prompt_text, const RegionMaskSet& masks);

StepConditions build_step_conditions(const Models& models, const Encoders& encoders, const Image& reference,
                                     const RegionMaskSet& masks, const PreparedPrompts& prompts);

struct GenerationResult {
  Image image;
  nlohmann::json metadata;
};

// CheckpointMismatch if the models lack a facial encoder.
GenerationResult generate(const GenerationRequest& request, const Models& models, const FaceParser& parser);
// Same, with masks supplied directly.
GenerationResult generate(const GenerationRequest& request, const Models& models, const RegionMaskSet& masks);

// Plain-text conditioning at every step.
Image generate_text_only(const Models& models, const std::string& prompt_text, const RegionMaskSet& masks,
                         const SamplerConfig& sampler);

// Re-runs a generation from its metadata; the reference image is read from the recorded path
// and must match the recorded checksum.
GenerationResult replay(const nlohmann::json& metadata, const Models& models, const FaceParser& parser);

void write_generation(const std::filesystem::path& image_path, const GenerationResult& result);

struct SweepRow {
  int merge_step = 0;
  double clip_t = 0.0;
  double clip_i = 0.0;
  double fgis = 0.0;
  double face_sim = 0.0;
};

struct SweepResult {
  std::vector<Image> images;
  std::vector<SweepRow> rows;

  std::string csv() const;
};

SweepResult sweep_merge_step(const GenerationRequest& request, const std::vector<int>& values, const Models& models,
                             const RegionMaskSet& reference_masks);

// Tiles images left to right.
Image image_grid(const std::vector<Image>& images);

}  // namespace cid
