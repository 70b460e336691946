#include "consistentid/eval_prompts.hpp"

#include "consistentid/errors.hpp"

#include <nlohmann/json.hpp>

namespace cid {

std::size_t EvalPromptSet::size() const {
  std::size_t n = 0;
  for (const auto& c : categories) n += c.templates.size();
  return n;
}

std::vector<std::string> EvalPromptSet::templates() const {
  std::vector<std::string> out;
  for (const auto& c : categories) out.insert(out.end(), c.templates.begin(), c.templates.end());
  return out;
}

std::vector<std::string> EvalPromptSet::instantiate(std::string_view class_word) const {
  std::vector<std::string> out;
  for (std::string t : templates()) {
    const auto pos = t.find(class_slot);
    t.replace(pos, class_slot.size(), class_word);
    out.push_back(std::move(t));
  }
  return out;
}

EvalPromptSet EvalPromptSet::parse(std::string_view json_text) {
  EvalPromptSet set;
  try {
    const auto j = nlohmann::json::parse(json_text);
    set.version = j.at("version").get<std::string>();
    set.class_slot = j.at("class_slot").get<std::string>();
    for (const auto& c : j.at("categories")) {
      EvalPromptCategory cat;
      cat.name = c.at("name").get<std::string>();
      cat.templates = c.at("prompts").get<std::vector<std::string>>();
      set.categories.push_back(std::move(cat));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("eval prompt table: ") + e.what());
  }
  for (const auto& t : set.templates()) {
    if (t.find(set.class_slot) == std::string::npos) throw ConfigError("eval prompt without class slot: " + t);
  }
  return set;
}

const EvalPromptSet& EvalPromptSet::builtin() {
  static const EvalPromptSet set = parse(builtin_eval_prompts_json());
  return set;
}

}  // namespace cid
