#pragma once

// Small latent diffusion model: cosine schedule, a fixed block autoencoder, a two-scale
// convolutional denoiser with one cross-attention block per scale, and a DDIM sampler.

#include "consistentid/autodiff.hpp"
#include "consistentid/image.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace cid {

class NoiseSchedule {
 public:
  // Cosine schedule; alpha_bar(0) == 1 exactly, betas clipped at 0.999.
  explicit NoiseSchedule(int timesteps = 100);

  int timesteps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  // TimestepError outside [0, T].
  double alpha_bar(int t) const;

 private:
  std::vector<double> alpha_bar_;
};

// Latents are (h*w) x c matrices, row-major over latent pixels.
struct LatentShape {
  int height = 16;
  int width = 16;
  int channels = 4;
};

// Linear per-block map: each 4x4 pixel block becomes its mean color (channels 0-2) and a
// checkerboard detail coefficient (channel 3). Decoding is the transpose, so the round trip
// is exact for images whose blocks are flat.
class BlockAutoencoder {
 public:
  static constexpr int kFactor = 4;
  static constexpr double kScale = 2.0;

  ad::Matrix encode(const Image& image) const;
  Image decode(const ad::Matrix& latent, int latent_height, int latent_width) const;

  // Range of encoded [0,1] images: colors in [0, kScale], detail in [-kScale/2, kScale/2].
  static ad::Matrix clamp_to_range(const ad::Matrix& latent);
};

ad::Matrix encode_latent(const Image& image);
Image decode_latent(const ad::Matrix& latent, int latent_height = 16, int latent_width = 16);

// z_t = sqrt(ab) z0 + sqrt(1-ab) eps
ad::Matrix add_noise(const ad::Matrix& z0, int t, const ad::Matrix& eps, const NoiseSchedule& schedule);

struct DenoiserConfig {
  LatentShape latent;
  int channels1 = 16;
  int channels2 = 32;
  int attention_dim = 32;
  int context_dim = 64;
  int time_dim = 32;
};

struct CrossAttentionMap {
  int layer = 0;
  int head = 0;
  int height = 0;
  int width = 0;
  ad::Var probs;  // (height*width) x n, rows sum to 1
};

struct DenoiserOutput {
  ad::Var eps;
  std::vector<CrossAttentionMap> maps;  // empty unless requested
};

struct Denoiser {
  DenoiserConfig config;

  ad::Parameter t_w1, t_b1, t_w2, t_b2;
  ad::Parameter c1a_w, c1a_b, c1a_t, c1b_w, c1b_b;
  ad::Parameter a1_q, a1_k, a1_v, a1_o;
  ad::Parameter c2a_w, c2a_b, c2a_t, c2b_w, c2b_b;
  ad::Parameter a2_q, a2_k, a2_v, a2_o;
  ad::Parameter c3_w, c3_b, c3_t, out_w, out_b;

  static Denoiser create(const DenoiserConfig& config, std::uint64_t seed);
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  void set_trainable(bool trainable);
};

// context: n x context_dim conditioning tokens.
DenoiserOutput denoise(ad::Tape& tape, Denoiser& denoiser, const ad::Var& z_t, int t, const ad::Var& context,
                       bool collect_maps = false);
// Inference convenience on a no-grad tape.
ad::Matrix denoise_eps(const Denoiser& denoiser, const ad::Matrix& z_t, int t, const ad::Matrix& context);

// eps_c + (s - 1)(eps_c - eps_u): equals eps_u + s(eps_c - eps_u), and is exactly eps_c at s = 1.
ad::Matrix cfg_combine(const ad::Matrix& eps_cond, const ad::Matrix& eps_uncond, double guidance_scale);

// Deterministic DDIM update. clip_x0 clamps the predicted clean latent to the encoder's
// range and re-derives eps from the clamped value.
ad::Matrix ddim_step(const ad::Matrix& z_t, const ad::Matrix& eps_hat, int t, int t_prev, const NoiseSchedule& schedule,
                     bool clip_x0 = true);

// Descending timesteps used by a `steps`-step sampler; the step after the last one lands on 0.
std::vector<int> ddim_timesteps(int steps, int train_timesteps);

struct SamplerConfig {
  int steps = 50;
  double guidance_scale = 5.0;
  int merge_step = 10;
  std::uint64_t seed = 0;
};

// Conditioning chosen per step index: i < merge_step uses `before`, the rest `after`.
struct StepConditions {
  ad::Matrix before;
  ad::Matrix after;
};

ad::Matrix initial_noise(const LatentShape& shape, std::uint64_t seed);

// Returns the final latent. The unconditional branch uses an all-zero context.
ad::Matrix sample_latent(const Denoiser& denoiser, const NoiseSchedule& schedule, const StepConditions& conditions,
                         const SamplerConfig& config,
                         const std::function<void(int, const ad::Matrix&)>& on_step_eps = nullptr);
// Decoded and clamped to [0, 1].
Image sample(const Denoiser& denoiser, const NoiseSchedule& schedule, const StepConditions& conditions,
             const SamplerConfig& config);

}  // namespace cid
