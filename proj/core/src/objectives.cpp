#include "consistentid/objectives.hpp"

#include "consistentid/errors.hpp"
#include "consistentid/face_parsing.hpp"

namespace cid {

nlohmann::json LossBreakdown::to_json() const {
  return nlohmann::json{{"l_noise", l_noise}, {"l_facial", l_facial}, {"l_total", l_total}, {"lambda", lambda}};
}

std::vector<FacialToken> facial_tokens(std::span<const int> positions, std::span<const RegionLabel> regions) {
  if (positions.size() != regions.size()) throw ArityError("facial_tokens: positions and regions differ in length");
  std::vector<FacialToken> out;
  for (std::size_t k = 0; k < positions.size(); ++k) out.push_back(FacialToken{positions[k], regions[k]});
  return out;
}

std::pair<ad::Matrix, int> facial_loss_weights(int height, int width, int tokens, const RegionMaskSet& masks,
                                               std::span<const FacialToken> facial, bool strict, int* skipped) {
  ad::Matrix w = ad::Matrix::Zero(static_cast<Eigen::Index>(height) * width, tokens);
  int n = 0;
  for (const auto& tok : facial) {
    if (tok.position < 0 || tok.position >= tokens) throw IndexError("facial token position outside the attention map");
    if (!masks.presence[static_cast<std::size_t>(index_of(tok.region))]) continue;
    const Mask m = downsample_mask(masks[tok.region], height, width);
    const auto on = static_cast<double>(m.area());
    const double off = static_cast<double>(m.data.size()) - on;
    if (on == 0.0 || off == 0.0) {
      if (strict) {
        throw EmptyMaskError("region '" + std::string(region_name(tok.region)) + "' is " + (on == 0.0 ? "empty" : "full") +
                             " at " + std::to_string(height) + "x" + std::to_string(width));
      }
      if (skipped) ++*skipped;
      continue;
    }
    for (std::size_t p = 0; p < m.data.size(); ++p) {
      w(static_cast<Eigen::Index>(p), tok.position) += m.data[p] ? -1.0 / on : 1.0 / off;
    }
    ++n;
  }
  if (n > 0) w /= static_cast<double>(n);
  return {std::move(w), n};
}

FacialLoss facial_attention_loss(ad::Tape& tape, const std::vector<CrossAttentionMap>& maps,
                                 const RegionMaskSet& masks, std::span<const FacialToken> tokens, bool strict) {
  FacialLoss out;
  ad::Var acc;
  int layers = 0;
  for (const auto& map : maps) {
    auto [w, n] = facial_loss_weights(map.height, map.width, static_cast<int>(map.probs.cols()), masks, tokens, strict,
                                      &out.skipped);
    if (n == 0) continue;
    out.participating += n;
    ad::Var l = ad::weighted_sum(map.probs, w);
    acc = acc.valid() ? ad::add(acc, l) : l;
    ++layers;
  }
  out.value = layers == 0 ? tape.constant(ad::Matrix::Zero(1, 1)) : ad::scale(acc, 1.0 / layers);
  return out;
}

double facial_attention_loss(const std::vector<PlainMap>& maps, const RegionMaskSet& masks,
                             std::span<const FacialToken> tokens) {
  double acc = 0.0;
  int layers = 0;
  int skipped = 0;
  for (const auto& map : maps) {
    if (map.probs.rows() != static_cast<Eigen::Index>(map.height) * map.width) {
      throw ShapeError("attention map rows must equal height*width");
    }
    auto [w, n] = facial_loss_weights(map.height, map.width, static_cast<int>(map.probs.cols()), masks, tokens, false,
                                      &skipped);
    if (n == 0) continue;
    acc += map.probs.cwiseProduct(w).sum();
    ++layers;
  }
  return layers == 0 ? 0.0 : acc / layers;
}

ad::Var noise_loss(const ad::Var& eps, const ad::Var& eps_hat) {
  if (eps.rows() != eps_hat.rows() || eps.cols() != eps_hat.cols()) throw ShapeError("noise_loss: shape mismatch");
  return ad::mse(eps_hat, eps);
}

double noise_loss(const ad::Matrix& eps, const ad::Matrix& eps_hat) {
  if (eps.rows() != eps_hat.rows() || eps.cols() != eps_hat.cols()) throw ShapeError("noise_loss: shape mismatch");
  return (eps - eps_hat).squaredNorm() / static_cast<double>(eps.size());
}

LossBreakdown total_loss(double l_noise, double l_facial, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  return LossBreakdown{l_noise, l_facial, l_noise + lambda * l_facial, lambda};
}

double attention_mass_in_masks(const std::vector<PlainMap>& maps, const RegionMaskSet& masks,
                               std::span<const FacialToken> tokens) {
  double acc = 0.0;
  int count = 0;
  for (const auto& map : maps) {
    for (const auto& tok : tokens) {
      if (!masks.presence[static_cast<std::size_t>(index_of(tok.region))]) continue;
      const Mask m = downsample_mask(masks[tok.region], map.height, map.width);
      if (m.empty() || m.area() == m.data.size()) continue;
      double inside = 0.0;
      const double total = map.probs.col(tok.position).sum();
      for (std::size_t p = 0; p < m.data.size(); ++p) {
        if (m.data[p]) inside += map.probs(static_cast<Eigen::Index>(p), tok.position);
      }
      if (total > 0.0) {
        acc += inside / total;
        ++count;
      }
    }
  }
  return count == 0 ? 0.0 : acc / count;
}

}  // namespace cid
