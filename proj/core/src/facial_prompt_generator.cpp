#include "consistentid/facial_prompt_generator.hpp"

#include "consistentid/errors.hpp"
#include "consistentid/rng.hpp"

#include <cmath>

namespace cid {

namespace {

ad::Parameter gaussian(std::string name, int rows, int cols, double stddev, Rng& rng) {
  ad::Parameter p;
  p.name = std::move(name);
  p.value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = stddev * rng.normal();
  p.zero_grad();
  return p;
}

ad::Parameter zeros(std::string name, int rows, int cols) {
  ad::Parameter p;
  p.name = std::move(name);
  p.value = ad::Matrix::Zero(rows, cols);
  p.zero_grad();
  return p;
}

ad::Var residual_block(const ad::Var& x, ad::Parameter& w1, ad::Parameter& b1, ad::Parameter& w2, ad::Parameter& b2) {
  ad::Tape& t = *x.tape();
  ad::Var h = ad::silu(ad::add_row(ad::matmul(x, t.param(w1)), t.param(b1)));
  return ad::add(x, ad::add_row(ad::matmul(h, t.param(w2)), t.param(b2)));
}

}  // namespace

FacialEncoder FacialEncoder::create(const FacialEncoderConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x66616365ULL}));
  const int D = config.embed_dim;
  const int H = config.mlp_hidden;
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  const double sh = 1.0 / std::sqrt(static_cast<double>(H));
  FacialEncoder e;
  e.config = config;
  e.w_in = gaussian("facial.w_in", config.image_dim, D, 1.0 / std::sqrt(static_cast<double>(config.image_dim)), rng);
  e.wq = gaussian("facial.wq", D, D, sd, rng);
  e.wk = gaussian("facial.wk", D, D, sd, rng);
  e.wv = gaussian("facial.wv", D, D, sd, rng);
  e.wo = gaussian("facial.wo", D, D, sd, rng);
  // The second layer of each block starts small so the fused projection is close to the identity.
  e.f1_w1 = gaussian("facial.f1_w1", D, H, sd, rng);
  e.f1_b1 = zeros("facial.f1_b1", 1, H);
  e.f1_w2 = gaussian("facial.f1_w2", H, D, 0.1 * sh, rng);
  e.f1_b2 = zeros("facial.f1_b2", 1, D);
  e.f2_w1 = gaussian("facial.f2_w1", D, H, sd, rng);
  e.f2_b1 = zeros("facial.f2_b1", 1, H);
  e.f2_w2 = gaussian("facial.f2_w2", H, D, 0.1 * sh, rng);
  e.f2_b2 = zeros("facial.f2_b2", 1, D);
  const int in = config.image_dim + config.id_dim;
  e.id_w1 = gaussian("facial.id_w1", in, H, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  e.id_b1 = zeros("facial.id_b1", 1, H);
  e.id_w2 = gaussian("facial.id_w2", H, D, sh, rng);
  e.id_b2 = zeros("facial.id_b2", 1, D);
  return e;
}

std::vector<ad::Parameter*> FacialEncoder::parameters() {
  return {&w_in,  &wq,    &wk,    &wv,    &wo,    &f1_w1, &f1_b1, &f1_w2, &f1_b2,
          &f2_w1, &f2_b1, &f2_w2, &f2_b2, &id_w1, &id_b1, &id_w2, &id_b2};
}

std::vector<const ad::Parameter*> FacialEncoder::parameters() const {
  auto* self = const_cast<FacialEncoder*>(this);
  auto ps = self->parameters();
  return {ps.begin(), ps.end()};
}

FacialInputs facial_inputs(const Image& image, const RegionMaskSet& masks, const Encoders& encoders) {
  const RegionCrops crops = crop_regions(image, masks);
  FacialInputs in;
  in.presence = masks.presence;
  in.whole = embed_image(crops.face, encoders.image).values.transpose();
  in.regions = ad::Matrix::Zero(kRegionCount, encoders.image.dim());
  for (int j = 0; j < kRegionCount; ++j) {
    if (!masks.presence[static_cast<std::size_t>(j)]) continue;
    in.regions.row(j) = embed_image(crops.crops[static_cast<std::size_t>(j)], encoders.image).values.transpose();
  }
  in.identity = embed_identity(crops.face, encoders.identity).transpose();
  return in;
}

ad::Var align_features(ad::Tape& tape, const ad::Matrix& whole, const ad::Matrix& regions, const RegionFlags& presence,
                       FacialEncoder& encoder) {
  const auto& cfg = encoder.config;
  if (whole.rows() != 1 || whole.cols() != cfg.image_dim || regions.rows() != kRegionCount ||
      regions.cols() != cfg.image_dim) {
    throw ShapeError("align_features: expected 1x" + std::to_string(cfg.image_dim) + " whole-face and " +
                     std::to_string(kRegionCount) + "x" + std::to_string(cfg.image_dim) + " region embeddings");
  }
  ad::Matrix tokens(kRegionCount + 1, cfg.image_dim);
  tokens.row(0) = whole.row(0);
  for (int j = 0; j < kRegionCount; ++j) {
    if (presence[static_cast<std::size_t>(j)]) tokens.row(j + 1) = regions.row(j);
    else tokens.row(j + 1).setZero();
  }
  ad::Var h = ad::matmul(tape.constant(std::move(tokens)), tape.param(encoder.w_in));
  ad::Var hr = ad::slice_rows(h, 1, kRegionCount);
  ad::Var q = ad::matmul(hr, tape.param(encoder.wq));
  ad::Var k = ad::matmul(h, tape.param(encoder.wk));
  ad::Var v = ad::matmul(h, tape.param(encoder.wv));
  ad::Var scores = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  ad::Matrix bias = ad::Matrix::Constant(kRegionCount, kRegionCount + 1, -1e9);
  for (int j = 0; j < kRegionCount; ++j) {
    bias(j, 0) = 0.0;
    bias(j, j + 1) = 0.0;
  }
  ad::Var attn = ad::softmax_rows(ad::add(scores, tape.constant(std::move(bias))));
  ad::Var out = ad::matmul(ad::matmul(attn, v), tape.param(encoder.wo));
  return ad::mask_rows(out, std::vector<bool>(presence.begin(), presence.end()));
}

namespace {

std::vector<int> present_rows(const RegionFlags& presence, std::span<const int> positions, Eigen::Index length) {
  std::vector<int> rows;
  for (int j = 0; j < kRegionCount; ++j) {
    if (presence[static_cast<std::size_t>(j)]) rows.push_back(j);
  }
  if (rows.size() != positions.size()) {
    throw ArityError("visual_token_replace: " + std::to_string(positions.size()) + " delimiter positions for " +
                     std::to_string(rows.size()) + " present regions");
  }
  for (int p : positions) {
    if (p < 0 || p >= length) {
      throw IndexError("visual_token_replace: position " + std::to_string(p) + " outside sequence of length " +
                       std::to_string(length));
    }
  }
  return rows;
}

}  // namespace

ad::Var visual_token_replace(const ad::Var& text, const ad::Var& fhat, const RegionFlags& presence,
                             std::span<const int> positions) {
  if (fhat.rows() != kRegionCount || fhat.cols() != text.cols()) throw ShapeError("visual_token_replace: fhat must be N x D");
  const auto rows = present_rows(presence, positions, text.rows());
  if (rows.empty()) return text;
  return ad::replace_rows(text, ad::gather_rows(fhat, rows), positions);
}

ad::Matrix visual_token_replace(const ad::Matrix& text, const ad::Matrix& fhat, const RegionFlags& presence,
                                std::span<const int> positions) {
  if (fhat.rows() != kRegionCount || fhat.cols() != text.cols()) throw ShapeError("visual_token_replace: fhat must be N x D");
  const auto rows = present_rows(presence, positions, text.rows());
  ad::Matrix out = text;
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(positions[k]) = fhat.row(rows[k]);
  return out;
}

ad::Var project_fused(const ad::Var& x, FacialEncoder& encoder) {
  if (x.cols() != encoder.config.embed_dim) throw ShapeError("project_fused: width must equal the embedding dim");
  ad::Var h = residual_block(x, encoder.f1_w1, encoder.f1_b1, encoder.f1_w2, encoder.f1_b2);
  return residual_block(h, encoder.f2_w1, encoder.f2_b1, encoder.f2_w2, encoder.f2_b2);
}

ad::Var extract_overall_id(ad::Tape& tape, const ad::Matrix& image_embedding, const ad::Matrix& id_embedding,
                           FacialEncoder& encoder) {
  const auto& cfg = encoder.config;
  if (image_embedding.rows() != 1 || image_embedding.cols() != cfg.image_dim || id_embedding.rows() != 1 ||
      id_embedding.cols() != cfg.id_dim) {
    throw ShapeError("extract_overall_id: embedding sizes do not match the encoder config");
  }
  ad::Matrix in(1, cfg.image_dim + cfg.id_dim);
  in << image_embedding, id_embedding;
  ad::Var h = ad::silu(ad::add_row(ad::matmul(tape.constant(std::move(in)), tape.param(encoder.id_w1)),
                                   tape.param(encoder.id_b1)));
  return ad::add_row(ad::matmul(h, tape.param(encoder.id_w2)), tape.param(encoder.id_b2));
}

ad::Var build_condition(ad::Tape& tape, const ad::Var& text_embedding, const MultimodalPrompt& prompt,
                        const FacialInputs& inputs, FacialEncoder& encoder) {
  RegionFlags used{};
  for (RegionLabel r : prompt.facial_regions) used[static_cast<std::size_t>(index_of(r))] = true;
  for (int j = 0; j < kRegionCount; ++j) {
    if (used[static_cast<std::size_t>(j)] && !inputs.presence[static_cast<std::size_t>(j)]) {
      throw ArityError("prompt has a delimiter for region '" + std::string(region_name(kRegionOrder[static_cast<std::size_t>(j)])) +
                       "' that the reference face lacks");
    }
  }
  ad::Var fhat = align_features(tape, inputs.whole, inputs.regions, inputs.presence, encoder);
  ad::Var replaced = visual_token_replace(text_embedding, fhat, used, prompt.facial_positions);
  ad::Var cf = project_fused(replaced, encoder);
  ad::Var ci = extract_overall_id(tape, inputs.whole, inputs.identity, encoder);
  return ad::concat_rows(cf, ci);
}

}  // namespace cid
