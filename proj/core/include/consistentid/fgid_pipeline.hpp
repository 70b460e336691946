#pragma once

// FGID dataset: per-image masks, region crops, identity embedding and captions, indexed
// by a strict JSON-lines manifest.
//
//   root/images/<id>.png
//   root/masks/<id>.mask.<region>.pgm
//   root/crops/<id>.<region>.png
//   root/manifest.jsonl
//   root/stats.json

#include "consistentid/encoders.hpp"
#include "consistentid/face_parsing.hpp"
#include "consistentid/prompt_assembly.hpp"
#include "consistentid/synth_faces.hpp"
#include "consistentid/training.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cid {

inline constexpr std::string_view kFgidVersion = "fgid/1";

struct FgidAttributes {
  int age = 0;
  Gender gender = Gender::female;

  friend bool operator==(const FgidAttributes&, const FgidAttributes&) = default;
};

struct FgidRecord {
  std::string image_id;
  // Paths are relative to the dataset root.
  std::string image;
  std::array<std::string, kRegionCount> masks;
  std::array<std::string, kRegionCount> crops;
  std::vector<double> identity_embedding;
  std::string caption;
  std::array<std::string, kRegionCount> region_descriptions;
  std::optional<std::string> identity_id;
  std::optional<FgidAttributes> attributes;
  // sha256 per written file, keyed by relative path.
  std::map<std::string, std::string> checksums;

  friend bool operator==(const FgidRecord&, const FgidRecord&) = default;
};

struct RecordSource {
  std::string image_id;
  Image image;
  std::optional<std::string> identity_id;
  std::optional<FgidAttributes> attributes;
};

// Writes the image, masks and crops under root. Parser and captioner failures are rethrown
// with the image id prefixed.
FgidRecord build_record(const RecordSource& source, const std::filesystem::path& root, const FaceParser& parser,
                        const Encoders& encoders, const Captioner& captioner);

nlohmann::ordered_json record_to_json(const FgidRecord& record);
// Strict: every key required, unknown keys rejected. Errors name the offending key.
FgidRecord record_from_json(const nlohmann::json& j);

void write_manifest(const std::vector<FgidRecord>& records, const std::filesystem::path& path);
// ManifestCorrupt carries the 1-based line number; MissingFile if the path is absent.
std::vector<FgidRecord> load_manifest(const std::filesystem::path& path);

// Files exist and match their checksums, masks are binary, the embedding is unit-norm.
void validate_record(const FgidRecord& record, const std::filesystem::path& root);

struct DatasetStats {
  // Documentation constants for the full-scale dataset; not derived from any manifest.
  static constexpr long kReferenceTotal = 524258;
  static constexpr long kReferenceRecognizable = 107048;

  long total = 0;
  long recognizable = 0;
  // Decade bins ("20-29") and gender names.
  std::map<std::string, long> age_histogram;
  std::map<std::string, long> gender_histogram;

  nlohmann::json to_json() const;
  friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

DatasetStats compute_stats(const std::vector<FgidRecord>& records);
DatasetStats compute_stats(const std::filesystem::path& manifest);

std::string_view gender_name(Gender g);

// Raw synthetic corpus as written by the synth command: images, ground-truth masks and
// corpus.json with the generating parameters.
struct CorpusInfo {
  int identities = 0;
  int poses = 0;
  std::uint64_t seed = 0;
};

void write_corpus(const std::vector<SyntheticFace>& faces, const CorpusInfo& info, const std::filesystem::path& dir);
CorpusInfo read_corpus_info(const std::filesystem::path& dir);

// 8-bit rounding, matching a PNG round trip.
Image quantize8(const Image& image);

// Builds records for every image of a synth-command corpus.
std::vector<FgidRecord> build_dataset(const std::filesystem::path& corpus_dir, const std::filesystem::path& out,
                                      const FaceParser& parser, const Encoders& encoders, const Captioner& captioner);

// Validates every record, then reads images, masks and stored captions back.
std::vector<TrainingExample> load_training_examples(const std::filesystem::path& root);

}  // namespace cid
