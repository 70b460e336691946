#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cid {

struct EvalPromptCategory {
  std::string name;
  std::vector<std::string> templates;
};

// Recontextualization prompt table; every template carries the class-word slot.
struct EvalPromptSet {
  std::string version;
  std::string class_slot;
  std::vector<EvalPromptCategory> categories;

  std::size_t size() const;
  // Flattened templates in table order.
  std::vector<std::string> templates() const;
  std::vector<std::string> instantiate(std::string_view class_word) const;

  static EvalPromptSet parse(std::string_view json_text);
  // The table compiled into the library from assets/eval_prompts.json.
  static const EvalPromptSet& builtin();
};

std::string_view builtin_eval_prompts_json();

}  // namespace cid
