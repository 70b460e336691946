#pragma once

// Embedding seams. Every "pretrained" model is a fixed, seed-pinned random projection so
// metrics and conditioning are reproducible oracles.

#include "consistentid/autodiff.hpp"
#include "consistentid/image.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <string_view>

namespace cid {

using Vector = Eigen::VectorXd;

enum class EmbeddingSource { whole_face, region, generated };

struct ImageEmbedding {
  Vector values;
  EmbeddingSource source = EmbeddingSource::region;
};

struct EncoderConfig {
  std::string kind = "stub";  // stub | file | service
  std::uint64_t seed = 20240501;
  int image_dim = 64;
  int id_dim = 32;
  int dino_dim = 64;
  int clip_dim = 64;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Bias-free linear map of a patch. Inputs are 16x16 RGB, or an integer multiple of that,
// which is area-pooled down to 16x16 first (still linear).
class LinearPatchEncoder {
 public:
  static constexpr int kPatch = 16;

  LinearPatchEncoder() = default;
  LinearPatchEncoder(int out_dim, std::uint64_t seed);

  Vector embed(const Image& patch) const;
  int dim() const { return static_cast<int>(weight_.rows()); }
  const ad::Matrix& weight() const { return weight_; }

 private:
  ad::Matrix weight_;  // out_dim x (16*16*3)
};

class ImageEncoder {
 public:
  ImageEncoder(int dim, std::uint64_t seed) : proj_(dim, seed) {}
  ImageEmbedding embed(const Image& patch, EmbeddingSource source = EmbeddingSource::region) const;
  int dim() const { return proj_.dim(); }

 private:
  LinearPatchEncoder proj_;
};

// Aligns the face to the bounding box of its non-zero pixels, projects, and normalizes.
// A blank image has no face and embeds to zero.
class IdEmbedder {
 public:
  IdEmbedder(int dim, std::uint64_t seed) : proj_(dim, seed) {}
  Vector embed(const Image& face) const;
  int dim() const { return proj_.dim(); }

 private:
  LinearPatchEncoder proj_;
};

// Bag of hashed tokens: each token maps to a seeded Gaussian vector; the text vector is their sum.
class TextStub {
 public:
  TextStub(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  Vector embed(std::string_view text) const;
  int dim() const { return dim_; }

 private:
  int dim_;
  std::uint64_t seed_;
};

struct Encoders {
  EncoderConfig config;
  ImageEncoder image;
  IdEmbedder identity;
  LinearPatchEncoder dino;
  LinearPatchEncoder clip_image;
  TextStub clip_text;

  // AdapterUnavailable for kinds other than "stub".
  static Encoders create(const EncoderConfig& config = {});
};

ImageEmbedding embed_image(const Image& patch, const ImageEncoder& encoder);
Vector embed_identity(const Image& face, const IdEmbedder& embedder);
Vector stub_dino(const Image& patch, const Encoders& encoders);
Vector stub_clip_image(const Image& image, const Encoders& encoders);
Vector stub_clip_text(std::string_view text, const Encoders& encoders);

// 0 when either vector is zero.
double cosine(const Vector& a, const Vector& b);

}  // namespace cid
