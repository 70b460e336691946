#pragma once

// Two-stage training. Stage A fits the denoiser and text encoder on text-described faces;
// stage B freezes both and fits the facial encoder with L_noise + lambda * L_facial.

#include "consistentid/checkpoint.hpp"
#include "consistentid/objectives.hpp"
#include "consistentid/prompt_assembly.hpp"
#include "consistentid/rng.hpp"
#include "consistentid/synth_faces.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cid {

struct TrainingExample {
  std::string image_id;
  Image image;
  RegionMaskSet masks;
  RegionDescriptions descriptions;  // from the dataset captioner
};

std::vector<TrainingExample> examples_from_faces(const std::vector<SyntheticFace>& faces, const Captioner& captioner);

enum class TrainableSet { denoiser_only, consistentid_modules };

// Region text used for the stage-B prompt: the dataset descriptions, or bare keywords after
// the fixed inference phrase.
enum class PromptMode { descriptive, fixed_phrase };

struct TrainingConfig {
  double lambda = 0.01;
  double lr = 1e-4;
  int batch_size = 16;
  double bg_drop_prob = 0.5;
  double zero_text_prob = 0.1;
  int steps = 2000;
  std::uint64_t seed = 0;
  TrainableSet trainable_set = TrainableSet::consistentid_modules;
  PromptMode prompt_mode = PromptMode::fixed_phrase;

  // Stage A defaults: text-conditioned denoiser fit without background removal.
  static TrainingConfig pretrain_defaults();

  void validate() const;
  nlohmann::json to_json() const;
  // Keys in j override base.
  static TrainingConfig from_json(const nlohmann::json& j, TrainingConfig base);
};

class Adam {
 public:
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  // Updates trainable parameters from their grads and zeroes the grads.
  void step(const std::vector<ad::Parameter*>& params);

  int steps_taken() const { return t_; }
  std::map<std::string, std::pair<ad::Matrix, ad::Matrix>>& moments() { return moments_; }
  const std::map<std::string, std::pair<ad::Matrix, ad::Matrix>>& moments() const { return moments_; }
  void set_steps_taken(int t) { t_ = t; }

 private:
  int t_ = 0;
  std::map<std::string, std::pair<ad::Matrix, ad::Matrix>> moments_;
};

struct LossRecord {
  int step = 0;
  LossBreakdown loss;
  int skipped_regions = 0;

  nlohmann::json to_json() const;
};

struct TrainState {
  int step = 0;
  Adam optimizer;
  std::vector<LossRecord> log;

  Checkpoint to_checkpoint(const TrainingConfig& config) const;
  static TrainState from_checkpoint(const Checkpoint& ckpt);
};

// Per-sample random draws, a pure function of (seed, step, sample).
struct SampleDraw {
  int example = 0;
  bool drop_background = false;
  bool zero_text = false;
  int t = 1;
  ad::Matrix eps;
};

SampleDraw draw_sample(const TrainingConfig& config, int step, int sample, int n_examples, const LatentShape& shape,
                       int timesteps);

inline constexpr double kNeutralGray = 0.5;

// With probability bg_drop_prob, pixels outside face_mask become neutral gray.
Image apply_background_dropout(const Image& image, const Mask& face_mask, Rng& rng, double bg_drop_prob);
Image fill_background(const Image& image, const Mask& face_mask);

struct TrainingHooks {
  std::function<void(const LossRecord&)> on_step;
  // Conditioning matrix that entered the denoiser for (step, sample).
  std::function<void(int, int, const ad::Matrix&)> on_condition;
};

// DivergenceError on a non-finite loss.
TrainState pretrain_denoiser(Models& models, const std::vector<TrainingExample>& data, const TrainingConfig& config,
                             TrainState state = {}, const TrainingHooks& hooks = {});

// Creates the facial encoder if the models lack one. FrozenViolation if the base model changed.
TrainState train_consistentid(Models& models, const std::vector<TrainingExample>& data, const TrainingConfig& config,
                              TrainState state = {}, const TrainingHooks& hooks = {});

// Mean text-conditioned noise loss over fixed draws.
double heldout_noise_loss(const Models& models, const std::vector<TrainingExample>& data, std::uint64_t seed,
                          int draws);

struct LocalizationStats {
  double l_facial = 0.0;
  double mass_in_masks = 0.0;
};

// Facial loss and in-mask attention mass of the delimiter tokens, averaged over fixed draws.
LocalizationStats evaluate_localization(const Models& models, const std::vector<TrainingExample>& data,
                                        const TrainingConfig& config, std::uint64_t seed, int draws);

// Stage-B prompt of an example under the configured prompt mode.
MultimodalPrompt training_prompt(const TrainingExample& example, PromptMode mode);

// sha256 over the base model (text encoder + denoiser) tensors.
std::string base_fingerprint(const Models& models);

}  // namespace cid
