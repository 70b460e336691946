#include "consistentid/inference.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"
#include "consistentid/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cid {

namespace {

// Digest of the 8-bit pixels, so it survives a PNG round trip.
std::string image_digest(const Image& image) {
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  return sha256_hex(bytes);
}

nlohmann::json request_json(const GenerationRequest& r) {
  return {{"prompt_text", r.prompt_text},     {"steps", r.steps},           {"guidance_scale", r.guidance_scale},
          {"merge_step", r.merge_step},       {"seed", r.seed},             {"reference_path", r.reference_path},
          {"reference_sha256", image_digest(r.reference_face)}};
}

const Models& require_facial(const Models& models) {
  if (!models.facial) throw CheckpointMismatch("generation needs a trained facial encoder (module 'consistentid')");
  return models;
}

}  // namespace

void GenerationRequest::validate() const {
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (merge_step < 0 || merge_step > steps) {
    throw ConfigError("merge_step " + std::to_string(merge_step) + " outside [0, " + std::to_string(steps) + "]");
  }
  if (!(guidance_scale >= 0.0)) throw ConfigError("guidance_scale must be non-negative");
  if (reference_face.channels != 3) throw ShapeError("reference face must be an RGB image");
}

PreparedPrompts prepare_prompts(const std::string& prompt_text, const RegionMaskSet& masks) {
  RegionDescriptions d;
  d.caption = prompt_text;
  for (int i = 0; i < kRegionCount; ++i) {
    if (masks.presence[static_cast<std::size_t>(i)]) {
      d.regions[static_cast<std::size_t>(i)] = std::string(region_keyword(kRegionOrder[static_cast<std::size_t>(i)]));
    }
  }
  return {compose_prompt(d, masks.presence), substitute_delimiters(d, masks.presence)};
}

StepConditions build_step_conditions(const Models& models, const Encoders& encoders, const Image& reference,
                                     const RegionMaskSet& masks, const PreparedPrompts& prompts) {
  require_facial(models);
  // build_condition wants mutable parameters; a copy keeps the models const.
  FacialEncoder facial = *models.facial;
  ad::Tape tape(false);
  const FacialInputs inputs = facial_inputs(reference, masks, encoders);
  const ad::Var fused =
      build_condition(tape, tape.constant(encode_text(prompts.fused, models.text)), prompts.fused, inputs, facial);
  StepConditions c;
  c.before = encode_text(prompts.plain, models.text);
  c.after = fused.value();
  return c;
}

GenerationResult generate(const GenerationRequest& request, const Models& models, const FaceParser& parser) {
  request.validate();
  // parsers look masks up by file stem, not the full recorded path
  const std::string stem = std::filesystem::path(request.reference_path).stem().string();
  return generate(request, models, parse_face(request.reference_face, parser, stem));
}

GenerationResult generate(const GenerationRequest& request, const Models& models, const RegionMaskSet& masks) {
  request.validate();
  require_facial(models);
  const Encoders encoders = Encoders::create(models.config.encoders);
  const PreparedPrompts prompts = prepare_prompts(request.prompt_text, masks);
  const StepConditions conditions = build_step_conditions(models, encoders, request.reference_face, masks, prompts);
  GenerationResult r;
  r.image = sample(models.denoiser, NoiseSchedule(models.config.timesteps), conditions, request.sampler());
  r.metadata = {{"format", "consistentid-generation/1"},
                {"request", request_json(request)},
                {"checkpoint_sha256", models.checksum()},
                {"seed", request.seed},
                {"fused_prompt", prompts.fused.raw_text},
                {"plain_prompt", prompts.plain.raw_text},
                {"image_sha256", image_digest(r.image)}};
  return r;
}

Image generate_text_only(const Models& models, const std::string& prompt_text, const RegionMaskSet& masks,
                         const SamplerConfig& sampler) {
  const PreparedPrompts prompts = prepare_prompts(prompt_text, masks);
  const ad::Matrix text = encode_text(prompts.plain, models.text);
  return sample(models.denoiser, NoiseSchedule(models.config.timesteps), StepConditions{text, text}, sampler);
}

GenerationResult replay(const nlohmann::json& metadata, const Models& models, const FaceParser& parser) {
  GenerationRequest r;
  std::string want_reference, want_checkpoint;
  try {
    if (metadata.at("format").get<std::string>() != "consistentid-generation/1") {
      throw ConfigError("unsupported generation metadata format");
    }
    const auto& q = metadata.at("request");
    r.prompt_text = q.at("prompt_text").get<std::string>();
    r.steps = q.at("steps").get<int>();
    r.guidance_scale = q.at("guidance_scale").get<double>();
    r.merge_step = q.at("merge_step").get<int>();
    r.seed = q.at("seed").get<std::uint64_t>();
    r.reference_path = q.at("reference_path").get<std::string>();
    want_reference = q.at("reference_sha256").get<std::string>();
    want_checkpoint = metadata.at("checkpoint_sha256").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generation metadata: ") + e.what());
  }
  if (r.reference_path.empty()) throw ConfigError("generation metadata has no reference path to replay from");
  r.reference_face = read_png(r.reference_path);
  if (image_digest(r.reference_face) != want_reference) {
    throw CheckpointMismatch("reference image " + r.reference_path + " changed since generation");
  }
  if (models.checksum() != want_checkpoint) throw CheckpointMismatch("checkpoint differs from the one used to generate");
  return generate(r, models, parser);
}

void write_generation(const std::filesystem::path& image_path, const GenerationResult& result) {
  write_png(image_path, result.image);
  std::filesystem::path meta = image_path;
  meta.replace_extension(".json");
  std::ofstream f(meta);
  if (!f) throw IoError("cannot write " + meta.string());
  f << result.metadata.dump(2) << "\n";
}

std::string SweepResult::csv() const {
  std::ostringstream s;
  s << "merge_step,clip_t,clip_i,fgis,face_sim\n";
  s.precision(6);
  for (const auto& r : rows) {
    s << r.merge_step << "," << r.clip_t << "," << r.clip_i << "," << r.fgis << "," << r.face_sim << "\n";
  }
  return s.str();
}

SweepResult sweep_merge_step(const GenerationRequest& request, const std::vector<int>& values, const Models& models,
                             const RegionMaskSet& reference_masks) {
  request.validate();
  const Encoders encoders = Encoders::create(models.config.encoders);
  const PreparedPrompts prompts = prepare_prompts(request.prompt_text, reference_masks);
  const StepConditions conditions =
      build_step_conditions(models, encoders, request.reference_face, reference_masks, prompts);
  const NoiseSchedule schedule(models.config.timesteps);
  const ReferenceAlignedParser aligned(reference_masks);
  const Mask face_mask = reference_masks.union_mask();
  SweepResult out;
  for (int m : values) {
    SamplerConfig s = request.sampler();
    s.merge_step = m;
    Image img = sample(models.denoiser, schedule, conditions, s);
    SweepRow row;
    row.merge_step = m;
    row.clip_t = clip_t(request.prompt_text, img, encoders);
    row.clip_i = clip_i(request.reference_face, img, encoders);
    row.fgis = fgis(request.reference_face, reference_masks, img, aligned, encoders);
    row.face_sim = face_sim(request.reference_face, img, face_mask, encoders);
    out.rows.push_back(row);
    out.images.push_back(std::move(img));
  }
  return out;
}

Image image_grid(const std::vector<Image>& images) {
  if (images.empty()) return {};
  const int h = images.front().height;
  const int c = images.front().channels;
  int w = 0;
  for (const auto& im : images) {
    if (im.height != h || im.channels != c) throw ShapeError("grid images must share height and channels");
    w += im.width;
  }
  Image out(h, w, c);
  int x0 = 0;
  for (const auto& im : images) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < im.width; ++x) {
        for (int k = 0; k < c; ++k) out.at(y, x0 + x, k) = im.at(y, x, k);
      }
    }
    x0 += im.width;
  }
  return out;
}

}  // namespace cid
