#pragma once

// Metric suite over stub embedders, plus the benchmark driver.

#include "consistentid/checkpoint.hpp"
#include "consistentid/encoders.hpp"
#include "consistentid/eval_prompts.hpp"
#include "consistentid/face_parsing.hpp"
#include "consistentid/synth_faces.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cid {

// Documentation only; not reproducible with stub embedders.
struct PublishedReference {
  static constexpr double clip_t = 31.1;
  static constexpr double clip_i = 76.7;
  static constexpr double dino = 78.5;
  static constexpr double face_sim = 77.2;
  static constexpr double fgis = 81.4;
};

// Mean cosine of stub_dino crop embeddings over regions present in both images; the
// generated image's regions come from `parser`. NoCommonRegions if none overlap.
double fgis(const Image& reference, const RegionMaskSet& reference_masks, const Image& generated,
            const FaceParser& parser, const Encoders& encoders);
// Per-region cosines, NaN where a region is missing on either side.
std::array<double, kRegionCount> fgis_regions(const Image& reference, const RegionMaskSet& reference_masks,
                                              const Image& generated, const RegionMaskSet& generated_masks,
                                              const Encoders& encoders);

double clip_t(std::string_view prompt, const Image& image, const Encoders& encoders);
double clip_i(const Image& reference, const Image& generated, const Encoders& encoders);
double dino_i(const Image& reference, const Image& generated, const Encoders& encoders);
// Cosine of identity embeddings of the two images, each masked by `face_mask`.
double face_sim(const Image& reference, const Image& generated, const Mask& face_mask, const Encoders& encoders);

// Class word for a synthetic identity's gender attribute.
std::string class_word(const IdentitySpec& identity);

struct BenchmarkConfig {
  int steps = 50;
  double guidance_scale = 5.0;
  int merge_step = 10;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct MetricRow {
  int identity = 0;
  int prompt_index = 0;
  std::string category;
  std::string prompt;
  std::uint64_t seed = 0;
  std::string image;
  double clip_t = 0.0;
  double clip_i = 0.0;
  double dino_i = 0.0;
  double face_sim = 0.0;
  double fgis = 0.0;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
};

struct EvalReport {
  std::vector<MetricRow> rows;
  std::map<std::string, MetricSummary> metrics;
  std::map<int, std::map<std::string, double>> per_identity;
  std::string config_fingerprint;

  nlohmann::json to_json() const;
  std::string csv() const;
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricRow& row);

// Generates one image per (identity, prompt) with the identity's pose-0 render as reference.
// When out_dir is set, images, metrics.csv (flushed per row) and report.json are written there.
EvalReport run_benchmark(const Models& models, const std::vector<SyntheticFace>& references,
                         const EvalPromptSet& prompts, const BenchmarkConfig& config,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace cid
