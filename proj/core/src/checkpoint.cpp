#include "consistentid/checkpoint.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"
#include "consistentid/rng.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace cid {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const ad::Matrix* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return &m;
  }
  return nullptr;
}

void Checkpoint::load_into(const std::vector<ad::Parameter*>& params) const {
  for (ad::Parameter* p : params) {
    const ad::Matrix* m = find(p->name);
    if (!m) throw CheckpointMismatch("checkpoint (" + module + ") lacks tensor '" + p->name + "'");
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols()) {
      throw CheckpointMismatch("tensor '" + p->name + "' is " + std::to_string(m->rows()) + "x" +
                               std::to_string(m->cols()) + " in the checkpoint but " +
                               std::to_string(p->value.rows()) + "x" + std::to_string(p->value.cols()) +
                               " in the model");
    }
    p->value = *m;
    p->zero_grad();
  }
}

std::string Checkpoint::serialize() const {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& [name, m] : tensors) shapes.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}});
  const nlohmann::json header = {{"module", module},   {"version", version},
                                 {"seed", seed},       {"shapes", shapes},
                                 {"vocabulary_sha256", vocabulary_sha256}, {"config", config}};
  const std::string h = header.dump();
  std::string out;
  const std::uint64_t n = h.size();
  out.append(reinterpret_cast<const char*>(&n), sizeof n);
  out += h;
  for (const auto& [name, m] : tensors) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  if (bytes.size() < 8) throw CheckpointMismatch("checkpoint truncated before the header length");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), sizeof n);
  if (n > bytes.size() - 8) throw CheckpointMismatch("checkpoint header length exceeds the file");
  Checkpoint c;
  std::size_t offset = 8 + static_cast<std::size_t>(n);
  try {
    const auto header = nlohmann::json::parse(bytes.substr(8, static_cast<std::size_t>(n)));
    c.module = header.at("module").get<std::string>();
    c.version = header.at("version").get<int>();
    if (c.version != kVersion) throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(c.version));
    c.seed = header.at("seed").get<std::uint64_t>();
    c.vocabulary_sha256 = header.at("vocabulary_sha256").get<std::string>();
    c.config = header.value("config", nlohmann::json::object());
    for (const auto& s : header.at("shapes")) {
      const auto rows = s.at("shape").at(0).get<Eigen::Index>();
      const auto cols = s.at("shape").at(1).get<Eigen::Index>();
      const std::size_t len = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (rows < 0 || cols < 0 || offset + len > bytes.size()) throw CheckpointMismatch("checkpoint tensor data truncated");
      ad::Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + offset, len);
      offset += len;
      c.tensors.emplace_back(s.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint header is not valid: ") + e.what());
  }
  if (offset != bytes.size()) throw CheckpointMismatch("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  const std::string bytes = checkpoint.serialize();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFile("checkpoint not found: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return Checkpoint::deserialize(ss.str());
}

namespace {

template <class F>
void strict_object(const nlohmann::json& j, const char* what, F&& on_key) {
  if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!on_key(key, value)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {
      {"text", {{"max_length", text.max_length}, {"embed_dim", text.embed_dim}}},
      {"denoiser",
       {{"latent", {denoiser.latent.height, denoiser.latent.width, denoiser.latent.channels}},
        {"channels1", denoiser.channels1},
        {"channels2", denoiser.channels2},
        {"attention_dim", denoiser.attention_dim},
        {"context_dim", denoiser.context_dim},
        {"time_dim", denoiser.time_dim}}},
      {"facial",
       {{"embed_dim", facial.embed_dim},
        {"image_dim", facial.image_dim},
        {"id_dim", facial.id_dim},
        {"mlp_hidden", facial.mlp_hidden}}},
      {"encoders", encoders.to_json()},
      {"timesteps", timesteps},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    strict_object(j, "model", [&](const std::string& k, const nlohmann::json& v) {
      if (k == "text") {
        strict_object(v, "model.text", [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "max_length") c.text.max_length = v2.get<int>();
          else if (k2 == "embed_dim") c.text.embed_dim = v2.get<int>();
          else return false;
          return true;
        });
      } else if (k == "denoiser") {
        strict_object(v, "model.denoiser", [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "latent") {
            c.denoiser.latent = {v2.at(0).get<int>(), v2.at(1).get<int>(), v2.at(2).get<int>()};
          } else if (k2 == "channels1") c.denoiser.channels1 = v2.get<int>();
          else if (k2 == "channels2") c.denoiser.channels2 = v2.get<int>();
          else if (k2 == "attention_dim") c.denoiser.attention_dim = v2.get<int>();
          else if (k2 == "context_dim") c.denoiser.context_dim = v2.get<int>();
          else if (k2 == "time_dim") c.denoiser.time_dim = v2.get<int>();
          else return false;
          return true;
        });
      } else if (k == "facial") {
        strict_object(v, "model.facial", [&](const std::string& k2, const nlohmann::json& v2) {
          if (k2 == "embed_dim") c.facial.embed_dim = v2.get<int>();
          else if (k2 == "image_dim") c.facial.image_dim = v2.get<int>();
          else if (k2 == "id_dim") c.facial.id_dim = v2.get<int>();
          else if (k2 == "mlp_hidden") c.facial.mlp_hidden = v2.get<int>();
          else return false;
          return true;
        });
      } else if (k == "encoders") {
        c.encoders = EncoderConfig::from_json(v);
      } else if (k == "timesteps") {
        c.timesteps = v.get<int>();
      } else {
        return false;
      }
      return true;
    });
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (c.text.embed_dim != c.denoiser.context_dim || c.text.embed_dim != c.facial.embed_dim) {
    throw ConfigError("model config: text, denoiser context and facial embedding dims must agree");
  }
  if (c.facial.image_dim != c.encoders.image_dim || c.facial.id_dim != c.encoders.id_dim) {
    throw ConfigError("model config: facial encoder input dims must match the encoder config");
  }
  return c;
}

Models Models::create(const ModelConfig& config, std::uint64_t seed, const Vocabulary& vocab) {
  Models m;
  m.config = config;
  m.seed = seed;
  m.text = TextEncoder::create(vocab, config.text, derive_seed({seed, 1}));
  m.denoiser = Denoiser::create(config.denoiser, derive_seed({seed, 2}));
  return m;
}

Checkpoint Models::to_checkpoint(const Vocabulary& vocab) const {
  Checkpoint c;
  c.module = facial ? "consistentid" : "base";
  c.seed = seed;
  c.vocabulary_sha256 = vocab.digest();
  c.config = config.to_json();
  c.add(text.table);
  for (const auto* p : denoiser.parameters()) c.add(*p);
  if (facial) {
    for (const auto* p : facial->parameters()) c.add(*p);
  }
  return c;
}

Models Models::from_checkpoint(const Checkpoint& ckpt, const Vocabulary& vocab) {
  if (ckpt.module != "base" && ckpt.module != "consistentid") {
    throw CheckpointMismatch("unexpected checkpoint module '" + ckpt.module + "'");
  }
  if (ckpt.vocabulary_sha256 != vocab.digest()) {
    throw CheckpointMismatch("checkpoint was trained with a different vocabulary");
  }
  Models m = create(ModelConfig::from_json(ckpt.config), ckpt.seed, vocab);
  ckpt.load_into(m.text.parameters());
  ckpt.load_into(m.denoiser.parameters());
  if (ckpt.module == "consistentid") {
    m.facial = FacialEncoder::create(m.config.facial, derive_seed({ckpt.seed, 3}));
    ckpt.load_into(m.facial->parameters());
  }
  return m;
}

std::string Models::checksum() const { return sha256_hex(to_checkpoint().serialize()); }

}  // namespace cid
