#pragma once

#include "consistentid/autodiff.hpp"
#include "consistentid/regions.hpp"
#include "consistentid/toy_diffusion.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <vector>

namespace cid {

struct LossBreakdown {
  double l_noise = 0.0;
  double l_facial = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;

  nlohmann::json to_json() const;
};

// One delimiter token per participating region: token index and canonical region.
struct FacialToken {
  int position = 0;
  RegionLabel region = RegionLabel::eyes;
};

std::vector<FacialToken> facial_tokens(std::span<const int> positions, std::span<const RegionLabel> regions);

struct FacialLoss {
  ad::Var value;      // 1x1; a constant zero when nothing participates
  int skipped = 0;    // (layer, region) pairs dropped for degenerate masks
  int participating = 0;
};

// Per layer: (1/N) sum_j [ mean(P_ij off m_j) - mean(P_ij on m_j) ], with masks downsampled to
// the layer's grid and N the number of regions whose downsampled mask is neither empty nor
// full. Layers are averaged. With strict set, a degenerate mask raises EmptyMaskError
// instead of being skipped.
FacialLoss facial_attention_loss(ad::Tape& tape, const std::vector<CrossAttentionMap>& maps,
                                 const RegionMaskSet& masks, std::span<const FacialToken> tokens, bool strict = false);

// Same formula on plain maps; each entry of `probs` is an (h*w) x n matrix.
struct PlainMap {
  int height = 0;
  int width = 0;
  ad::Matrix probs;
};
double facial_attention_loss(const std::vector<PlainMap>& maps, const RegionMaskSet& masks,
                             std::span<const FacialToken> tokens);

// Weight matrix W with loss = sum(P .* W) for one layer; second value is the participant count.
std::pair<ad::Matrix, int> facial_loss_weights(int height, int width, int tokens, const RegionMaskSet& masks,
                                               std::span<const FacialToken> facial, bool strict, int* skipped);

ad::Var noise_loss(const ad::Var& eps, const ad::Var& eps_hat);
double noise_loss(const ad::Matrix& eps, const ad::Matrix& eps_hat);

LossBreakdown total_loss(double l_noise, double l_facial, double lambda = 0.01);

// Fraction of each facial token's attention that falls inside its downsampled mask,
// averaged over tokens and layers.
double attention_mass_in_masks(const std::vector<PlainMap>& maps, const RegionMaskSet& masks,
                               std::span<const FacialToken> tokens);

}  // namespace cid
