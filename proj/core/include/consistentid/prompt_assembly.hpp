#pragma once

// Fine-grained text side of the multimodal prompt: captioners, the facial delimiter,
// tokenization, and the lookup text encoder.

#include "consistentid/autodiff.hpp"
#include "consistentid/image.hpp"
#include "consistentid/regions.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cid {

inline constexpr std::string_view kFacialToken = "<facial>";
inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kFixedPhrase = "This person has one nose, two eyes, two ears, and a mouth.";

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;
  static constexpr int kFacial = 2;

  // Specials first, then the distinct words in sorted order.
  static Vocabulary from_words(const std::vector<std::string>& words);
  // Template-captioner lexicon, the fixed phrase, class words and the evaluation prompts.
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  std::string digest() const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

// Whitespace split, with . , ; : ! ? as standalone tokens. "<facial>" stays one token.
std::vector<std::string> split_tokens(std::string_view text);

struct RegionDescriptions {
  std::array<std::string, kRegionCount> regions;
  std::string caption;

  const std::string& operator[](RegionLabel label) const { return regions[static_cast<std::size_t>(index_of(label))]; }
};

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual RegionDescriptions describe(const Image& image, const RegionMaskSet& masks, std::string_view image_id) const = 0;
};

// Reads region size and color off the image and its masks, so identical identities get
// identical text. Absent regions get empty strings.
class TemplateCaptioner final : public Captioner {
 public:
  RegionDescriptions describe(const Image& image, const RegionMaskSet& masks, std::string_view image_id) const override;
  static std::vector<std::string> lexicon();
};

// Caption is the fixed inference phrase; each present region is described by its bare keyword.
class FixedPhraseCaptioner final : public Captioner {
 public:
  RegionDescriptions describe(const Image& image, const RegionMaskSet& masks, std::string_view image_id) const override;
};

// JSON adapter: request {"image_id": ...} -> response {"regions": {label: text}, "caption": text}.
class ServiceCaptioner final : public Captioner {
 public:
  using Transport = std::function<nlohmann::json(const nlohmann::json& request)>;
  explicit ServiceCaptioner(Transport transport) : transport_(std::move(transport)) {}
  RegionDescriptions describe(const Image& image, const RegionMaskSet& masks, std::string_view image_id) const override;

  static nlohmann::json make_request(std::string_view image_id);
  static RegionDescriptions parse_response(const nlohmann::json& response);

 private:
  Transport transport_;
};

// POSTs the request JSON to `url` (http://host:port/path).
ServiceCaptioner::Transport http_transport(const std::string& url);

// Validates the adapter output; CaptionerFailure carries the image id.
RegionDescriptions describe_regions(const Image& image, const RegionMaskSet& masks, const Captioner& captioner,
                                    std::string_view image_id = {});

struct MultimodalPrompt {
  std::string raw_text;
  std::vector<int> token_ids;
  // One position per present region, in canonical region order.
  std::vector<int> facial_positions;
  std::vector<RegionLabel> facial_regions;
  std::string caption;
};

// Replaces the first keyword occurrence of each present region's description with the
// facial delimiter, then appends the descriptions (canonical order) after the caption.
MultimodalPrompt substitute_delimiters(const RegionDescriptions& descriptions, const RegionFlags& presence,
                                       const Vocabulary& vocab = Vocabulary::standard());

// Caption followed by the present regions' descriptions, keywords left in place.
MultimodalPrompt compose_prompt(const RegionDescriptions& descriptions, const RegionFlags& presence,
                                const Vocabulary& vocab = Vocabulary::standard());

struct TextEncoderConfig {
  int max_length = 32;
  int embed_dim = 64;
};

// Non-contextual lookup encoder: row i of the output is the table row of token i; rows
// past the prompt are the padding embedding.
struct TextEncoder {
  TextEncoderConfig config;
  ad::Parameter table;

  static TextEncoder create(const Vocabulary& vocab, const TextEncoderConfig& config, std::uint64_t seed);
  std::vector<ad::Parameter*> parameters() { return {&table}; }
};

ad::Matrix encode_text(const MultimodalPrompt& prompt, const TextEncoder& encoder);
ad::Var encode_text(ad::Tape& tape, const MultimodalPrompt& prompt, TextEncoder& encoder);

}  // namespace cid
