#pragma once

// Multimodal facial prompt: region features aligned against the whole face, written into
// the text embedding at the delimiter positions, projected by two residual MLP blocks, and
// followed by one overall-identity token.

#include "consistentid/autodiff.hpp"
#include "consistentid/encoders.hpp"
#include "consistentid/face_parsing.hpp"
#include "consistentid/prompt_assembly.hpp"
#include "consistentid/regions.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace cid {

struct FacialEncoderConfig {
  int embed_dim = 64;   // D, shared with the text encoder
  int image_dim = 64;   // region / whole-face embedding size
  int id_dim = 32;
  int mlp_hidden = 128;
};

struct FacialEncoder {
  FacialEncoderConfig config;

  // Self-attention alignment.
  ad::Parameter w_in, wq, wk, wv, wo;
  // Fused projection: two blocks x + W2 silu(W1 x + b1) + b2.
  ad::Parameter f1_w1, f1_b1, f1_w2, f1_b2;
  ad::Parameter f2_w1, f2_b1, f2_w2, f2_b2;
  // Overall-ID projection: concat(image, id) -> hidden -> D.
  ad::Parameter id_w1, id_b1, id_w2, id_b2;

  static FacialEncoder create(const FacialEncoderConfig& config, std::uint64_t seed);
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
};

// Encoder inputs derived from one reference face. Absent regions have zero rows.
struct FacialInputs {
  ad::Matrix whole;    // 1 x image_dim
  ad::Matrix regions;  // N x image_dim
  ad::Matrix identity; // 1 x id_dim
  RegionFlags presence{};
};

FacialInputs facial_inputs(const Image& image, const RegionMaskSet& masks, const Encoders& encoders);

// N x D. Region j attends to the whole-face token and to itself only, so every row depends
// on its own region alone; rows of absent regions are zeroed.
ad::Var align_features(ad::Tape& tape, const ad::Matrix& whole, const ad::Matrix& regions, const RegionFlags& presence,
                       FacialEncoder& encoder);

// Row positions[k] of the output is row k of the present rows of fhat (canonical order).
ad::Var visual_token_replace(const ad::Var& text, const ad::Var& fhat, const RegionFlags& presence,
                             std::span<const int> positions);
ad::Matrix visual_token_replace(const ad::Matrix& text, const ad::Matrix& fhat, const RegionFlags& presence,
                                std::span<const int> positions);

ad::Var project_fused(const ad::Var& x, FacialEncoder& encoder);

// 1 x D overall facial ID token.
ad::Var extract_overall_id(ad::Tape& tape, const ad::Matrix& image_embedding, const ad::Matrix& id_embedding,
                           FacialEncoder& encoder);

// (L+1) x D: fused C_f followed by the C_i token.
ad::Var build_condition(ad::Tape& tape, const ad::Var& text_embedding, const MultimodalPrompt& prompt,
                        const FacialInputs& inputs, FacialEncoder& encoder);

}  // namespace cid
