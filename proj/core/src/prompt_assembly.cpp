#include "consistentid/prompt_assembly.hpp"

#include "consistentid/digest.hpp"
#include "consistentid/errors.hpp"
#include "consistentid/eval_prompts.hpp"
#include "consistentid/rng.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

namespace cid {

namespace {

constexpr std::string_view kPunctuation = ".,;:!?";

struct NamedColor {
  const char* name;
  double r, g, b;
};

constexpr NamedColor kPalette[] = {
    {"black", 0.05, 0.05, 0.05}, {"gray", 0.5, 0.5, 0.5},    {"white", 0.95, 0.95, 0.95}, {"red", 0.8, 0.15, 0.15},
    {"orange", 0.9, 0.5, 0.1},   {"yellow", 0.9, 0.85, 0.2}, {"green", 0.2, 0.6, 0.2},    {"teal", 0.1, 0.5, 0.5},
    {"blue", 0.15, 0.25, 0.75},  {"purple", 0.5, 0.2, 0.6},  {"pink", 0.9, 0.5, 0.6},     {"brown", 0.5, 0.3, 0.15},
    {"olive", 0.45, 0.45, 0.1},  {"navy", 0.1, 0.1, 0.4},    {"maroon", 0.45, 0.08, 0.12}, {"beige", 0.85, 0.75, 0.6}};

constexpr const char* kToneWords[] = {"pale", "light", "medium", "tan", "brown", "dark"};
constexpr const char* kSizeWords[] = {"small", "round", "wide", "full", "large", "long", "broad", "narrow", "oval"};
constexpr const char* kCaptionWords[] = {"a", "person", "with", "skin", "on", "background"};
constexpr const char* kClassWords[] = {"man", "woman", "girl", "boy", "person"};

std::string color_name(const std::array<double, 3>& c) {
  const NamedColor* best = &kPalette[0];
  double best_d = 1e9;
  for (const auto& p : kPalette) {
    const double d = (c[0] - p.r) * (c[0] - p.r) + (c[1] - p.g) * (c[1] - p.g) + (c[2] - p.b) * (c[2] - p.b);
    if (d < best_d) {
      best_d = d;
      best = &p;
    }
  }
  return best->name;
}

std::string tone_name(const std::array<double, 3>& c) {
  const double lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
  if (lum > 0.78) return "pale";
  if (lum > 0.66) return "light";
  if (lum > 0.54) return "medium";
  if (lum > 0.44) return "tan";
  if (lum > 0.34) return "brown";
  return "dark";
}

std::array<double, 3> mean_color(const Image& image, const Mask& mask) {
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  std::size_t n = 0;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (int c = 0; c < 3 && c < image.channels; ++c) acc[static_cast<std::size_t>(c)] += image.at(y, x, c);
      ++n;
    }
  }
  if (n > 0) {
    for (double& v : acc) v /= static_cast<double>(n);
  }
  return acc;
}

// Region area in 4x4 cells at the default 64x64 resolution; scales with image size.
double cell_area(const Mask& mask) {
  const double cell_px = 16.0 * (mask.height * mask.width) / (64.0 * 64.0);
  return static_cast<double>(mask.area()) / cell_px;
}

std::array<int, 2> extent(const Mask& m) {
  int y0 = m.height, y1 = -1, x0 = m.width, x1 = -1;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
    }
  }
  return {y1 - y0 + 1, x1 - x0 + 1};
}

bool is_punctuation(std::string_view tok) {
  return tok.size() == 1 && kPunctuation.find(tok[0]) != std::string_view::npos;
}

}  // namespace

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (text.substr(i, kFacialToken.size()) == kFacialToken) {
      flush();
      out.emplace_back(kFacialToken);
      i += kFacialToken.size() - 1;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else if (kPunctuation.find(ch) != std::string_view::npos) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  v.tokens_ = {std::string(kPadToken), std::string(kUnknownToken), std::string(kFacialToken)};
  std::set<std::string> distinct;
  for (const auto& w : words) {
    if (w == kPadToken || w == kUnknownToken || w == kFacialToken || w.empty()) continue;
    distinct.insert(w);
  }
  v.tokens_.insert(v.tokens_.end(), distinct.begin(), distinct.end());
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) v.index_[v.tokens_[static_cast<std::size_t>(i)]] = i;
  return v;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> words = TemplateCaptioner::lexicon();
    for (const auto& t : split_tokens(kFixedPhrase)) words.push_back(t);
    for (const char* w : kClassWords) words.emplace_back(w);
    const auto& prompts = EvalPromptSet::builtin();
    for (const char* w : kClassWords) {
      for (const auto& p : prompts.instantiate(w)) {
        for (auto& t : split_tokens(p)) words.push_back(std::move(t));
      }
    }
    return from_words(words);
  }();
  return vocab;
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

std::string Vocabulary::digest() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined.push_back('\n');
  }
  return sha256_hex(joined);
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& t : split_tokens(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad) continue;
    const std::string& t = token(id);
    if (!out.empty() && !is_punctuation(t)) out.push_back(' ');
    out += t;
  }
  return out;
}

std::vector<std::string> TemplateCaptioner::lexicon() {
  std::vector<std::string> words;
  for (const auto& c : kPalette) words.emplace_back(c.name);
  for (const char* w : kToneWords) words.emplace_back(w);
  for (const char* w : kSizeWords) words.emplace_back(w);
  for (const char* w : kCaptionWords) words.emplace_back(w);
  for (RegionLabel label : kRegionOrder) words.emplace_back(region_keyword(label));
  for (char p : kPunctuation) words.emplace_back(1, p);
  return words;
}

RegionDescriptions TemplateCaptioner::describe(const Image& image, const RegionMaskSet& masks, std::string_view) const {
  if (image.channels != 3) throw CaptionerFailure("template captioner expects RGB images");
  RegionDescriptions d;
  auto set = [&](RegionLabel label, std::string text) {
    if (masks.presence[static_cast<std::size_t>(index_of(label))]) d.regions[static_cast<std::size_t>(index_of(label))] = std::move(text);
  };
  {
    const Mask& m = masks[RegionLabel::eyes];
    const double per_eye = cell_area(m) / 2.0;
    const char* size = per_eye <= 1.0 ? "small" : (per_eye <= 3.0 ? "round" : "wide");
    set(RegionLabel::eyes, std::string(size) + " " + color_name(mean_color(image, m)) + " eyes");
  }
  {
    const Mask& m = masks[RegionLabel::mouth];
    const double a = cell_area(m);
    const char* size = a <= 2.0 ? "small" : (a <= 3.0 ? "full" : "wide");
    set(RegionLabel::mouth, std::string(size) + " " + color_name(mean_color(image, m)) + " mouth");
  }
  {
    const Mask& m = masks[RegionLabel::ears];
    const double per_ear = cell_area(m) / 2.0;
    set(RegionLabel::ears, std::string(per_ear <= 2.0 ? "small" : "large") + " " + tone_name(mean_color(image, m)) + " ears");
  }
  {
    const Mask& m = masks[RegionLabel::nose];
    const double a = cell_area(m);
    const char* size = a <= 1.0 ? "small" : (a <= 3.0 ? "long" : "broad");
    set(RegionLabel::nose, std::string(size) + " " + tone_name(mean_color(image, m)) + " nose");
  }
  const auto skin = mean_color(image, masks[RegionLabel::face_other]);
  {
    const Mask outline = masks.union_mask();
    const auto [h, w] = extent(outline);
    const double aspect = h > 0 ? static_cast<double>(w) / h : 1.0;
    const char* shape = aspect > 0.86 ? "round" : (aspect > 0.78 ? "oval" : "narrow");
    set(RegionLabel::face_other, std::string(shape) + " " + tone_name(skin) + " face");
  }
  Mask background(image.height, image.width);
  const Mask face = masks.union_mask();
  for (std::size_t i = 0; i < background.data.size(); ++i) background.data[i] = face.data[i] ? 0 : 1;
  std::string caption = "a person";
  if (masks.presence[static_cast<std::size_t>(index_of(RegionLabel::face_other))]) caption += " with " + tone_name(skin) + " skin";
  if (!background.empty()) caption += " on a " + color_name(mean_color(image, background)) + " background";
  d.caption = caption;
  return d;
}

RegionDescriptions FixedPhraseCaptioner::describe(const Image&, const RegionMaskSet& masks, std::string_view) const {
  RegionDescriptions d;
  d.caption = std::string(kFixedPhrase);
  for (RegionLabel label : kRegionOrder) {
    if (masks.presence[static_cast<std::size_t>(index_of(label))]) {
      d.regions[static_cast<std::size_t>(index_of(label))] = std::string(region_keyword(label));
    }
  }
  return d;
}

nlohmann::json ServiceCaptioner::make_request(std::string_view image_id) {
  return nlohmann::json{{"image_id", std::string(image_id)}};
}

RegionDescriptions ServiceCaptioner::parse_response(const nlohmann::json& response) {
  RegionDescriptions d;
  if (!response.is_object() || !response.contains("regions") || !response.at("regions").is_object()) {
    throw CaptionerFailure("service response lacks a 'regions' object");
  }
  const auto& regions = response.at("regions");
  int found = 0;
  for (RegionLabel label : kRegionOrder) {
    const std::string name(region_name(label));
    if (!regions.contains(name) || !regions.at(name).is_string()) continue;
    d.regions[static_cast<std::size_t>(index_of(label))] = regions.at(name).get<std::string>();
    ++found;
  }
  if (found < kRegionCount) {
    throw CaptionerFailure("service returned " + std::to_string(found) + " region strings, expected " +
                           std::to_string(kRegionCount));
  }
  if (!response.contains("caption") || !response.at("caption").is_string()) {
    throw CaptionerFailure("service response lacks a 'caption' string");
  }
  d.caption = response.at("caption").get<std::string>();
  return d;
}

RegionDescriptions ServiceCaptioner::describe(const Image&, const RegionMaskSet&, std::string_view image_id) const {
  nlohmann::json response;
  try {
    response = transport_(make_request(image_id));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw CaptionerFailure(std::string("service transport failed: ") + e.what());
  }
  return parse_response(response);
}

ServiceCaptioner::Transport http_transport(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos || url.substr(0, scheme_end) != "http") {
    throw ConfigError("captioner url must be http://host:port/path");
  }
  const auto path_begin = url.find('/', scheme_end + 3);
  const std::string host = url.substr(0, path_begin);
  const std::string path = path_begin == std::string::npos ? "/" : url.substr(path_begin);
  return [host, path](const nlohmann::json& request) {
    httplib::Client client(host);
    client.set_connection_timeout(5);
    client.set_read_timeout(60);
    auto res = client.Post(path, request.dump(), "application/json");
    if (!res) throw CaptionerFailure("captioner service unreachable at " + host + path);
    if (res->status != 200) throw CaptionerFailure("captioner service returned HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw CaptionerFailure(std::string("captioner service returned invalid JSON: ") + e.what());
    }
  };
}

RegionDescriptions describe_regions(const Image& image, const RegionMaskSet& masks, const Captioner& captioner,
                                    std::string_view image_id) {
  try {
    return captioner.describe(image, masks, image_id);
  } catch (const CaptionerFailure& e) {
    throw CaptionerFailure("image '" + std::string(image_id) + "': " + e.what());
  }
}

MultimodalPrompt substitute_delimiters(const RegionDescriptions& descriptions, const RegionFlags& presence,
                                       const Vocabulary& vocab) {
  MultimodalPrompt prompt;
  prompt.caption = descriptions.caption;
  std::string text = descriptions.caption;
  for (RegionLabel label : kRegionOrder) {
    const auto j = static_cast<std::size_t>(index_of(label));
    if (!presence[j]) continue;
    std::vector<std::string> toks = split_tokens(descriptions.regions[j]);
    auto it = std::find(toks.begin(), toks.end(), region_keyword(label));
    if (it == toks.end()) {
      throw TokenizationError("description of '" + std::string(region_name(label)) + "' lacks keyword '" +
                              std::string(region_keyword(label)) + "': \"" + descriptions.regions[j] + "\"");
    }
    *it = std::string(kFacialToken);
    std::string region_text;
    for (const auto& t : toks) {
      if (!region_text.empty() && !is_punctuation(t)) region_text.push_back(' ');
      region_text += t;
    }
    if (!text.empty()) text += ", ";
    text += region_text;
    prompt.facial_regions.push_back(label);
  }
  prompt.raw_text = text;
  prompt.token_ids = vocab.encode(text);
  for (int i = 0; i < static_cast<int>(prompt.token_ids.size()); ++i) {
    if (prompt.token_ids[static_cast<std::size_t>(i)] == Vocabulary::kFacial) prompt.facial_positions.push_back(i);
  }
  if (prompt.facial_positions.size() != prompt.facial_regions.size()) {
    throw TokenizationError("caption contains a reserved facial delimiter");
  }
  return prompt;
}

MultimodalPrompt compose_prompt(const RegionDescriptions& descriptions, const RegionFlags& presence,
                                const Vocabulary& vocab) {
  MultimodalPrompt prompt;
  prompt.caption = descriptions.caption;
  std::string text = descriptions.caption;
  for (RegionLabel label : kRegionOrder) {
    const auto j = static_cast<std::size_t>(index_of(label));
    if (!presence[j] || descriptions.regions[j].empty()) continue;
    if (!text.empty()) text += ", ";
    text += descriptions.regions[j];
  }
  prompt.raw_text = text;
  prompt.token_ids = vocab.encode(text);
  if (std::find(prompt.token_ids.begin(), prompt.token_ids.end(), Vocabulary::kFacial) != prompt.token_ids.end()) {
    throw TokenizationError("plain prompt contains a reserved facial delimiter");
  }
  return prompt;
}

TextEncoder TextEncoder::create(const Vocabulary& vocab, const TextEncoderConfig& config, std::uint64_t seed) {
  TextEncoder enc;
  enc.config = config;
  enc.table.name = "text.embedding";
  enc.table.value.resize(vocab.size(), config.embed_dim);
  Rng rng(derive_seed({seed, 0x74657874ULL}));
  for (Eigen::Index i = 0; i < enc.table.value.size(); ++i) enc.table.value.data()[i] = 0.5 * rng.normal();
  enc.table.value.row(Vocabulary::kPad).setZero();
  enc.table.zero_grad();
  return enc;
}

namespace {

std::vector<int> padded_ids(const MultimodalPrompt& prompt, const TextEncoder& encoder) {
  const int max_len = encoder.config.max_length;
  if (static_cast<int>(prompt.token_ids.size()) > max_len) {
    throw SequenceTooLong("prompt has " + std::to_string(prompt.token_ids.size()) + " tokens, limit " +
                          std::to_string(max_len) + ": \"" + prompt.raw_text + "\"");
  }
  std::vector<int> ids = prompt.token_ids;
  ids.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  for (int id : ids) {
    if (id < 0 || id >= encoder.table.value.rows()) throw IndexError("token id outside the encoder table");
  }
  return ids;
}

}  // namespace

ad::Matrix encode_text(const MultimodalPrompt& prompt, const TextEncoder& encoder) {
  const auto ids = padded_ids(prompt, encoder);
  ad::Matrix out(static_cast<Eigen::Index>(ids.size()), encoder.table.value.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encoder.table.value.row(ids[i]);
  return out;
}

ad::Var encode_text(ad::Tape& tape, const MultimodalPrompt& prompt, TextEncoder& encoder) {
  const auto ids = padded_ids(prompt, encoder);
  return ad::gather_rows(tape.param(encoder.table), ids);
}

}  // namespace cid
