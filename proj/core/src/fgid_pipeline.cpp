#include "consistentid/fgid_pipeline.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace cid {

namespace fs = std::filesystem;

namespace {

std::string rel_mask(const std::string& id, RegionLabel label) { return "masks/" + mask_file_name(id, label); }
std::string rel_crop(const std::string& id, RegionLabel label) {
  return "crops/" + id + "." + std::string(region_name(label)) + ".png";
}

template <class T>
nlohmann::ordered_json per_region(const std::array<T, kRegionCount>& values) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (RegionLabel label : kRegionOrder) j[std::string(region_name(label))] = values[static_cast<std::size_t>(index_of(label))];
  return j;
}

std::array<std::string, kRegionCount> per_region_from(const nlohmann::json& j, const char* key) {
  if (!j.is_object()) throw ManifestCorrupt(std::string("'") + key + "' must be an object");
  std::array<std::string, kRegionCount> out;
  std::array<bool, kRegionCount> seen{};
  for (const auto& [k, v] : j.items()) {
    const auto label = region_from_name(k);
    if (!label) throw ManifestCorrupt(std::string("unknown key '") + key + "." + k + "'");
    const auto i = static_cast<std::size_t>(index_of(*label));
    out[i] = v.get<std::string>();
    seen[i] = true;
  }
  for (RegionLabel label : kRegionOrder) {
    if (!seen[static_cast<std::size_t>(index_of(label))]) {
      throw ManifestCorrupt(std::string("missing key '") + key + "." + std::string(region_name(label)) + "'");
    }
  }
  return out;
}

Gender gender_from(const std::string& s) {
  if (s == "female") return Gender::female;
  if (s == "male") return Gender::male;
  throw ManifestCorrupt("unknown gender '" + s + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFile("not found: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace

std::string_view gender_name(Gender g) { return g == Gender::male ? "male" : "female"; }

Image quantize8(const Image& image) {
  Image out = image;
  for (double& v : out.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

FgidRecord build_record(const RecordSource& source, const fs::path& root, const FaceParser& parser,
                        const Encoders& encoders, const Captioner& captioner) {
  const std::string& id = source.image_id;
  if (id.empty() || id.find('/') != std::string::npos) throw ConfigError("invalid image id '" + id + "'");
  RegionMaskSet masks;
  try {
    masks = parse_face(source.image, parser, id);
  } catch (const ParserFailure& e) {
    throw ParserFailure(id + ": " + e.what());
  }
  if (masks.present_count() == 0) throw ParserFailure(id + ": no face found");
  const RegionDescriptions desc = describe_regions(source.image, masks, captioner, id);
  const RegionCrops crops = crop_regions(source.image, masks);

  FgidRecord r;
  r.image_id = id;
  r.image = "images/" + id + ".png";
  write_png(root / r.image, source.image);
  r.checksums[r.image] = sha256_file(root / r.image);
  for (RegionLabel label : kRegionOrder) {
    const auto i = static_cast<std::size_t>(index_of(label));
    r.masks[i] = rel_mask(id, label);
    write_pgm(root / r.masks[i], masks.masks[i]);
    r.checksums[r.masks[i]] = sha256_file(root / r.masks[i]);
    r.crops[i] = rel_crop(id, label);
    write_png(root / r.crops[i], crops.crops[i]);
    r.checksums[r.crops[i]] = sha256_file(root / r.crops[i]);
    r.region_descriptions[i] = desc.regions[i];
  }
  const Vector e = embed_identity(crops.face, encoders.identity);
  r.identity_embedding.assign(e.data(), e.data() + e.size());
  r.caption = desc.caption;
  r.identity_id = source.identity_id;
  r.attributes = source.attributes;
  return r;
}

nlohmann::ordered_json record_to_json(const FgidRecord& r) {
  nlohmann::ordered_json j;
  j["version"] = kFgidVersion;
  j["image_id"] = r.image_id;
  j["image"] = r.image;
  j["masks"] = per_region(r.masks);
  j["crops"] = per_region(r.crops);
  j["identity_embedding"] = encode_doubles(r.identity_embedding);
  j["caption"] = r.caption;
  j["region_descriptions"] = per_region(r.region_descriptions);
  j["identity_id"] = r.identity_id ? nlohmann::ordered_json(*r.identity_id) : nlohmann::ordered_json(nullptr);
  if (r.attributes) {
    j["attributes"] = {{"age", r.attributes->age}, {"gender", gender_name(r.attributes->gender)}};
  } else {
    j["attributes"] = nullptr;
  }
  nlohmann::ordered_json sums = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.checksums) sums[k] = v;
  j["checksums"] = sums;
  return j;
}

FgidRecord record_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {"version", "image_id", "image", "masks", "crops", "identity_embedding",
                                              "caption", "region_descriptions", "identity_id", "attributes",
                                              "checksums"};
  if (!j.is_object()) throw ManifestCorrupt("record is not a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!kKeys.count(k)) throw ManifestCorrupt("unknown key '" + k + "'");
  }
  for (const auto& k : kKeys) {
    if (!j.contains(k)) throw ManifestCorrupt("missing key '" + k + "'");
  }
  FgidRecord r;
  try {
    const auto version = j.at("version").get<std::string>();
    if (version != kFgidVersion) throw ManifestCorrupt("unsupported version '" + version + "'");
    r.image_id = j.at("image_id").get<std::string>();
    r.image = j.at("image").get<std::string>();
    r.masks = per_region_from(j.at("masks"), "masks");
    r.crops = per_region_from(j.at("crops"), "crops");
    r.identity_embedding = decode_doubles(j.at("identity_embedding").get<std::string>());
    r.caption = j.at("caption").get<std::string>();
    r.region_descriptions = per_region_from(j.at("region_descriptions"), "region_descriptions");
    if (!j.at("identity_id").is_null()) r.identity_id = j.at("identity_id").get<std::string>();
    const auto& attrs = j.at("attributes");
    if (!attrs.is_null()) {
      if (!attrs.is_object()) throw ManifestCorrupt("'attributes' must be an object or null");
      for (const auto& [k, v] : attrs.items()) {
        if (k != "age" && k != "gender") throw ManifestCorrupt("unknown key 'attributes." + k + "'");
      }
      r.attributes = FgidAttributes{attrs.at("age").get<int>(), gender_from(attrs.at("gender").get<std::string>())};
    }
    if (!j.at("checksums").is_object()) throw ManifestCorrupt("'checksums' must be an object");
    for (const auto& [k, v] : j.at("checksums").items()) r.checksums[k] = v.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ManifestCorrupt(std::string("bad field type: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == "ManifestCorrupt") throw;
    throw ManifestCorrupt(e.what());
  }
  return r;
}

void write_manifest(const std::vector<FgidRecord>& records, const fs::path& path) {
  std::string text;
  for (const auto& r : records) text += record_to_json(r).dump() + "\n";
  write_text(path, text);
}

std::vector<FgidRecord> load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw MissingFile("manifest not found: " + path.string());
  const std::string text = read_text(path);
  std::vector<FgidRecord> out;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    ++line_no;
    const std::size_t nl = text.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string line = text.substr(pos, terminated ? nl - pos : std::string::npos);
    pos = terminated ? nl + 1 : text.size();
    const std::string where = path.string() + ": line " + std::to_string(line_no) + ": ";
    if (line.empty()) throw ManifestCorrupt(where + "empty line");
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ManifestCorrupt(where + "invalid JSON (" + e.what() + ")");
    } catch (const ManifestCorrupt& e) {
      throw ManifestCorrupt(where + e.what());
    }
    if (!terminated) throw ManifestCorrupt(where + "missing trailing newline (truncated?)");
  }
  return out;
}

void validate_record(const FgidRecord& r, const fs::path& root) {
  auto check = [&](const std::string& rel) {
    const fs::path p = root / rel;
    if (!fs::exists(p)) throw MissingFile(r.image_id + ": missing " + p.string());
    auto it = r.checksums.find(rel);
    if (it == r.checksums.end()) throw ManifestCorrupt(r.image_id + ": no checksum for " + rel);
    if (sha256_file(p) != it->second) throw ManifestCorrupt(r.image_id + ": checksum mismatch for " + rel);
  };
  check(r.image);
  for (std::size_t i = 0; i < kRegionCount; ++i) {
    check(r.masks[i]);
    check(r.crops[i]);
    read_pgm(root / r.masks[i], true);
  }
  double n2 = 0.0;
  for (double v : r.identity_embedding) n2 += v * v;
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw ManifestCorrupt(r.image_id + ": identity embedding is not unit-norm");
}

nlohmann::json DatasetStats::to_json() const {
  return {{"total", total},
          {"recognizable", recognizable},
          {"age_histogram", age_histogram},
          {"gender_histogram", gender_histogram},
          {"reference_scale", {{"total", kReferenceTotal}, {"recognizable", kReferenceRecognizable}}}};
}

DatasetStats compute_stats(const std::vector<FgidRecord>& records) {
  DatasetStats s;
  for (const auto& r : records) {
    ++s.total;
    if (r.identity_id) ++s.recognizable;
    if (r.attributes) {
      const int lo = r.attributes->age / 10 * 10;
      ++s.age_histogram[std::to_string(lo) + "-" + std::to_string(lo + 9)];
      ++s.gender_histogram[std::string(gender_name(r.attributes->gender))];
    }
  }
  return s;
}

DatasetStats compute_stats(const fs::path& manifest) { return compute_stats(load_manifest(manifest)); }

void write_corpus(const std::vector<SyntheticFace>& faces, const CorpusInfo& info, const fs::path& dir) {
  nlohmann::ordered_json images = nlohmann::ordered_json::array();
  for (const auto& f : faces) {
    const std::string id = face_id(f);
    write_png(dir / "images" / (id + ".png"), f.image);
    for (RegionLabel label : kRegionOrder) {
      write_pgm(dir / "masks" / mask_file_name(id, label), f.masks.masks[static_cast<std::size_t>(index_of(label))]);
    }
    images.push_back({{"image_id", id},
                      {"identity_id", "id" + std::to_string(f.identity.seed)},
                      {"age", f.identity.age},
                      {"gender", gender_name(f.identity.gender)}});
  }
  nlohmann::ordered_json j;
  j["format"] = "synth/1";
  j["identities"] = info.identities;
  j["poses"] = info.poses;
  j["seed"] = info.seed;
  j["images"] = images;
  write_text(dir / "corpus.json", j.dump(2) + "\n");
}

namespace {

nlohmann::json read_corpus_json(const fs::path& dir) {
  try {
    auto j = nlohmann::json::parse(read_text(dir / "corpus.json"));
    if (j.at("format").get<std::string>() != "synth/1") throw ConfigError("unsupported corpus format");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus.json: ") + e.what());
  }
}

}  // namespace

CorpusInfo read_corpus_info(const fs::path& dir) {
  const auto j = read_corpus_json(dir);
  return {j.at("identities").get<int>(), j.at("poses").get<int>(), j.at("seed").get<std::uint64_t>()};
}

std::vector<FgidRecord> build_dataset(const fs::path& corpus_dir, const fs::path& out, const FaceParser& parser,
                                      const Encoders& encoders, const Captioner& captioner) {
  const auto j = read_corpus_json(corpus_dir);
  std::vector<FgidRecord> records;
  try {
    for (const auto& e : j.at("images")) {
      RecordSource src;
      src.image_id = e.at("image_id").get<std::string>();
      src.image = read_png(corpus_dir / "images" / (src.image_id + ".png"));
      src.identity_id = e.at("identity_id").get<std::string>();
      src.attributes = FgidAttributes{e.at("age").get<int>(), gender_from(e.at("gender").get<std::string>())};
      records.push_back(build_record(src, out, parser, encoders, captioner));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("corpus.json: ") + e.what());
  }
  write_manifest(records, out / "manifest.jsonl");
  write_text(out / "stats.json", compute_stats(records).to_json().dump(2) + "\n");
  return records;
}

std::vector<TrainingExample> load_training_examples(const fs::path& root) {
  const auto records = load_manifest(root / "manifest.jsonl");
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    validate_record(r, root);
    std::array<Mask, kRegionCount> masks;
    for (std::size_t i = 0; i < kRegionCount; ++i) masks[i] = read_pgm(root / r.masks[i], true);
    RegionDescriptions d;
    d.caption = r.caption;
    d.regions = r.region_descriptions;
    out.push_back(TrainingExample{r.image_id, read_png(root / r.image), RegionMaskSet::from_masks(std::move(masks)), d});
  }
  return out;
}

}  // namespace cid
