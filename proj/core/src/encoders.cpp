#include "consistentid/encoders.hpp"

#include "consistentid/errors.hpp"
#include "consistentid/prompt_assembly.hpp"
#include "consistentid/rng.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace cid {

namespace {

constexpr int kInputDim = LinearPatchEncoder::kPatch * LinearPatchEncoder::kPatch * 3;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vector pooled(const Image& patch) {
  constexpr int P = LinearPatchEncoder::kPatch;
  if (patch.channels != 3 || patch.height < P || patch.width < P || patch.height % P != 0 || patch.width % P != 0) {
    throw ShapeError("encoder expects an RGB patch of 16x16 or an integer multiple, got " + std::to_string(patch.height) +
                     "x" + std::to_string(patch.width) + "x" + std::to_string(patch.channels));
  }
  const int fy = patch.height / P;
  const int fx = patch.width / P;
  Vector v = Vector::Zero(kInputDim);
  const double inv = 1.0 / (fy * fx);
  for (int y = 0; y < patch.height; ++y) {
    for (int x = 0; x < patch.width; ++x) {
      const int base = ((y / fy) * P + x / fx) * 3;
      for (int c = 0; c < 3; ++c) v[base + c] += patch.at(y, x, c) * inv;
    }
  }
  return v;
}

}  // namespace

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"kind", kind},           {"seed", seed},         {"image_dim", image_dim},
                        {"id_dim", id_dim},       {"dino_dim", dino_dim}, {"clip_dim", clip_dim}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  if (!j.is_object()) throw ConfigError("encoders: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") c.kind = value.get<std::string>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "image_dim") c.image_dim = value.get<int>();
    else if (key == "id_dim") c.id_dim = value.get<int>();
    else if (key == "dino_dim") c.dino_dim = value.get<int>();
    else if (key == "clip_dim") c.clip_dim = value.get<int>();
    else throw ConfigError("encoders: unknown key '" + key + "'");
  }
  return c;
}

LinearPatchEncoder::LinearPatchEncoder(int out_dim, std::uint64_t seed) : weight_(out_dim, kInputDim) {
  if (out_dim <= 0) throw ConfigError("encoder dimension must be positive");
  Rng rng(seed);
  const double s = 1.0 / std::sqrt(static_cast<double>(kInputDim));
  for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = s * rng.normal();
}

Vector LinearPatchEncoder::embed(const Image& patch) const { return weight_ * pooled(patch); }

ImageEmbedding ImageEncoder::embed(const Image& patch, EmbeddingSource source) const {
  return ImageEmbedding{proj_.embed(patch), source};
}

Vector IdEmbedder::embed(const Image& face) const {
  if (face.channels != 3) throw ShapeError("identity embedder expects an RGB image");
  int y0 = face.height, x0 = face.width;
  for (int y = 0; y < face.height; ++y) {
    for (int x = 0; x < face.width; ++x) {
      if (face.at(y, x, 0) != 0.0 || face.at(y, x, 1) != 0.0 || face.at(y, x, 2) != 0.0) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
      }
    }
  }
  Image aligned(face.height, face.width, 3);
  if (y0 < face.height) {
    for (int y = y0; y < face.height; ++y) {
      for (int x = x0; x < face.width; ++x) {
        for (int c = 0; c < 3; ++c) aligned.at(y - y0, x - x0, c) = face.at(y, x, c);
      }
    }
  }
  Vector v = proj_.embed(aligned);
  const double n = v.norm();
  // No face pixels: nothing to identify, return zero rather than an arbitrary unit vector.
  if (n == 0.0) return v;
  return v / n;
}

Vector TextStub::embed(std::string_view text) const {
  Vector v = Vector::Zero(dim_);
  for (const auto& tok : split_tokens(text)) {
    std::string lower = tok;
    for (char& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    Rng rng(derive_seed({seed_, fnv1a(lower)}));
    for (int i = 0; i < dim_; ++i) v[i] += rng.normal();
  }
  return v;
}

Encoders Encoders::create(const EncoderConfig& config) {
  if (config.kind != "stub") {
    throw AdapterUnavailable("encoder kind '" + config.kind + "' has no adapter in this build; use 'stub'");
  }
  return Encoders{config,
                  ImageEncoder(config.image_dim, derive_seed({config.seed, 1})),
                  IdEmbedder(config.id_dim, derive_seed({config.seed, 2})),
                  LinearPatchEncoder(config.dino_dim, derive_seed({config.seed, 3})),
                  LinearPatchEncoder(config.clip_dim, derive_seed({config.seed, 4})),
                  TextStub(config.clip_dim, derive_seed({config.seed, 5}))};
}

ImageEmbedding embed_image(const Image& patch, const ImageEncoder& encoder) { return encoder.embed(patch); }

Vector embed_identity(const Image& face, const IdEmbedder& embedder) { return embedder.embed(face); }

Vector stub_dino(const Image& patch, const Encoders& encoders) { return encoders.dino.embed(patch); }

Vector stub_clip_image(const Image& image, const Encoders& encoders) { return encoders.clip_image.embed(image); }

Vector stub_clip_text(std::string_view text, const Encoders& encoders) { return encoders.clip_text.embed(text); }

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace cid
