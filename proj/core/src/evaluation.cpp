#include "consistentid/evaluation.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"
#include "consistentid/inference.hpp"
#include "consistentid/rng.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace cid {

std::array<double, kRegionCount> fgis_regions(const Image& reference, const RegionMaskSet& reference_masks,
                                              const Image& generated, const RegionMaskSet& generated_masks,
                                              const Encoders& encoders) {
  const RegionCrops a = crop_regions(reference, reference_masks);
  const RegionCrops b = crop_regions(generated, generated_masks);
  std::array<double, kRegionCount> out;
  out.fill(std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < kRegionCount; ++i) {
    if (!reference_masks.presence[i] || !generated_masks.presence[i]) continue;
    out[i] = cosine(stub_dino(a.crops[i], encoders), stub_dino(b.crops[i], encoders));
  }
  return out;
}

double fgis(const Image& reference, const RegionMaskSet& reference_masks, const Image& generated,
            const FaceParser& parser, const Encoders& encoders) {
  const RegionMaskSet gen_masks = parse_face(generated, parser, "generated");
  const auto per_region = fgis_regions(reference, reference_masks, generated, gen_masks, encoders);
  double sum = 0.0;
  int n = 0;
  for (double v : per_region) {
    if (std::isnan(v)) continue;
    sum += v;
    ++n;
  }
  if (n == 0) throw NoCommonRegions("reference and generated image share no facial regions");
  return sum / n;
}

double clip_t(std::string_view prompt, const Image& image, const Encoders& encoders) {
  return cosine(stub_clip_text(prompt, encoders), stub_clip_image(image, encoders));
}

double clip_i(const Image& reference, const Image& generated, const Encoders& encoders) {
  return cosine(stub_clip_image(reference, encoders), stub_clip_image(generated, encoders));
}

double dino_i(const Image& reference, const Image& generated, const Encoders& encoders) {
  return cosine(stub_dino(reference, encoders), stub_dino(generated, encoders));
}

namespace {

Image apply_mask(const Image& image, const Mask& mask) {
  if (image.height != mask.height || image.width != mask.width) throw ShapeError("mask and image sizes differ");
  Image out = image;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (mask.at(y, x)) continue;
      for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = 0.0;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

constexpr const char* kMetricNames[] = {"clip_t", "clip_i", "dino_i", "face_sim", "fgis"};

std::array<double, 5> metric_values(const MetricRow& r) { return {r.clip_t, r.clip_i, r.dino_i, r.face_sim, r.fgis}; }

}  // namespace

double face_sim(const Image& reference, const Image& generated, const Mask& face_mask, const Encoders& encoders) {
  return cosine(embed_identity(apply_mask(reference, face_mask), encoders.identity),
                embed_identity(apply_mask(generated, face_mask), encoders.identity));
}

std::string class_word(const IdentitySpec& identity) { return identity.gender == Gender::male ? "man" : "woman"; }

nlohmann::json BenchmarkConfig::to_json() const {
  return {{"steps", steps}, {"guidance_scale", guidance_scale}, {"merge_step", merge_step}, {"seed", seed}};
}

std::string metric_csv_header() { return "identity,prompt_index,category,prompt,seed,image,clip_t,clip_i,dino_i,face_sim,fgis"; }

std::string metric_csv_row(const MetricRow& r) {
  std::string s = std::to_string(r.identity) + "," + std::to_string(r.prompt_index) + "," + csv_field(r.category) + "," +
                  csv_field(r.prompt) + "," + std::to_string(r.seed) + "," + csv_field(r.image);
  for (double v : metric_values(r)) s += "," + fmt(v);
  return s;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json m = nlohmann::json::object();
  for (const auto& [k, v] : metrics) m[k] = {{"mean", v.mean}, {"std", v.std}};
  nlohmann::json ids = nlohmann::json::object();
  for (const auto& [id, vals] : per_identity) ids[std::to_string(id)] = vals;
  return {{"metrics", m},
          {"per_identity", ids},
          {"images", rows.size()},
          {"config_fingerprint", config_fingerprint},
          {"published_reference_not_reproducible",
           {{"clip_t", PublishedReference::clip_t},
            {"clip_i", PublishedReference::clip_i},
            {"dino", PublishedReference::dino},
            {"face_sim", PublishedReference::face_sim},
            {"fgis", PublishedReference::fgis}}}};
}

std::string EvalReport::csv() const {
  std::string s = metric_csv_header() + "\n";
  for (const auto& r : rows) s += metric_csv_row(r) + "\n";
  return s;
}

EvalReport run_benchmark(const Models& models, const std::vector<SyntheticFace>& references,
                         const EvalPromptSet& prompts, const BenchmarkConfig& config,
                         const std::optional<std::filesystem::path>& out_dir) {
  if (!models.facial) throw CheckpointMismatch("benchmark needs a trained facial encoder");
  const Encoders encoders = Encoders::create(models.config.encoders);
  const NoiseSchedule schedule(models.config.timesteps);

  EvalReport report;
  report.config_fingerprint =
      sha256_hex(config.to_json().dump() + models.checksum() + std::to_string(references.size()));

  std::ofstream csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir / "images");
    csv.open(*out_dir / "metrics.csv");
    if (!csv) throw IoError("cannot write " + (*out_dir / "metrics.csv").string());
    csv << metric_csv_header() << "\n" << std::flush;
  }

  std::vector<std::string> categories;
  for (const auto& c : prompts.categories) {
    for (std::size_t k = 0; k < c.templates.size(); ++k) categories.push_back(c.name);
  }

  for (std::size_t i = 0; i < references.size(); ++i) {
    const SyntheticFace& ref = references[i];
    const ReferenceAlignedParser aligned(ref.masks);
    const Mask face_mask = ref.masks.union_mask();
    const auto texts = prompts.instantiate(class_word(ref.identity));
    for (std::size_t k = 0; k < texts.size(); ++k) {
      const PreparedPrompts pp = prepare_prompts(texts[k], ref.masks);
      const StepConditions conditions = build_step_conditions(models, encoders, ref.image, ref.masks, pp);
      MetricRow row;
      row.identity = static_cast<int>(i);
      row.prompt_index = static_cast<int>(k);
      row.category = categories[k];
      row.prompt = texts[k];
      row.seed = derive_seed({config.seed, i, k});
      const Image img = sample(models.denoiser, schedule, conditions,
                               SamplerConfig{config.steps, config.guidance_scale, config.merge_step, row.seed});
      row.clip_t = clip_t(texts[k], img, encoders);
      row.clip_i = clip_i(ref.image, img, encoders);
      row.dino_i = dino_i(ref.image, img, encoders);
      row.face_sim = face_sim(ref.image, img, face_mask, encoders);
      row.fgis = fgis(ref.image, ref.masks, img, aligned, encoders);
      if (out_dir) {
        row.image = "images/id" + std::to_string(i) + "_p" + std::to_string(k) + ".png";
        write_png(*out_dir / row.image, img);
        csv << metric_csv_row(row) << "\n" << std::flush;
      }
      report.rows.push_back(std::move(row));
    }
  }

  for (std::size_t m = 0; m < std::size(kMetricNames); ++m) {
    double sum = 0.0, sq = 0.0;
    std::map<int, std::pair<double, int>> by_id;
    for (const auto& r : report.rows) {
      const double v = metric_values(r)[m];
      sum += v;
      sq += v * v;
      by_id[r.identity].first += v;
      by_id[r.identity].second += 1;
    }
    const double n = static_cast<double>(report.rows.size());
    MetricSummary s;
    if (n > 0) {
      s.mean = sum / n;
      s.std = std::sqrt(std::max(0.0, sq / n - s.mean * s.mean));
    }
    report.metrics[kMetricNames[m]] = s;
    for (const auto& [id, acc] : by_id) report.per_identity[id][kMetricNames[m]] = acc.first / acc.second;
  }

  if (out_dir) {
    std::ofstream f(*out_dir / "report.json");
    if (!f) throw IoError("cannot write report.json");
    f << report.to_json().dump(2) << "\n";
  }
  return report;
}

}  // namespace cid
