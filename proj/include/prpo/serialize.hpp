#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/text.hpp"

namespace prpo {

// Prompt wording. The shipped default lives in templates/default_template.json
// and is mirrored by default_template(); bump `version` on any text change.
struct PromptTemplate {
  int version = 1;
  std::string system_text =
      "You are an expert in tabular data analysis and prediction. You will be given one row of a table, "
      "described as a sequence of sentences, one per column, followed by a prediction question. "
      "Reason carefully about how the features relate to the target before answering.";
  std::string sentence_pattern = "The {feature} is {value}.";
  std::string sentence_separator = " ";
  std::string question_wrapper = "Question: {question}";
  std::string classification_choices = "Choose exactly one of the following answers: {labels}.";
  std::string regression_instruction = "Answer with a single number.";
  std::string format_instruction =
      "Think step by step inside <{think}> </{think}> tags, then give only your final answer inside "
      "<{answer}> </{answer}> tags.";
  std::string shot_header = "Example {index}:";
  std::string shot_answer = "Answer: {answer}";
  std::string target_header = "Now answer for the following row:";
  std::string think_tag = "think";
  std::string answer_tag = "answer";

  std::string open(std::string_view tag) const { return "<" + std::string(tag) + ">"; }
  std::string close(std::string_view tag) const { return "</" + std::string(tag) + ">"; }
};

inline PromptTemplate default_template() { return PromptTemplate{}; }

inline void validate(const PromptTemplate& t) {
  const auto once = [](std::string_view s, std::string_view slot) { return count_occurrences(s, slot) == 1; };
  require(once(t.sentence_pattern, "{feature}") && once(t.sentence_pattern, "{value}"), ErrorCode::kInvalidTemplate,
          "sentence_pattern must contain {feature} and {value} exactly once");
  require(t.sentence_pattern.find("{feature}") < t.sentence_pattern.find("{value}"), ErrorCode::kInvalidTemplate,
          "sentence_pattern must place {feature} before {value}");
  require(t.sentence_pattern.find("{feature}") + 9 < t.sentence_pattern.find("{value}"), ErrorCode::kInvalidTemplate,
          "sentence_pattern needs separating text between {feature} and {value}");
  require(once(t.question_wrapper, "{question}"), ErrorCode::kInvalidTemplate,
          "question_wrapper must contain {question} exactly once");
  require(t.question_wrapper.find("{question}") > 0, ErrorCode::kInvalidTemplate,
          "question_wrapper needs leading text before {question}");
  require(!t.think_tag.empty() && !t.answer_tag.empty() && t.think_tag != t.answer_tag, ErrorCode::kInvalidTemplate,
          "think/answer tags must be nonempty and distinct");
  require(t.sentence_separator.find('\n') == std::string::npos, ErrorCode::kInvalidTemplate,
          "sentence_separator must not contain newlines");
}

inline nlohmann::json template_to_json(const PromptTemplate& t) {
  return nlohmann::json{{"version", t.version},
                        {"system_text", t.system_text},
                        {"sentence_pattern", t.sentence_pattern},
                        {"sentence_separator", t.sentence_separator},
                        {"question_wrapper", t.question_wrapper},
                        {"classification_choices", t.classification_choices},
                        {"regression_instruction", t.regression_instruction},
                        {"format_instruction", t.format_instruction},
                        {"shot_header", t.shot_header},
                        {"shot_answer", t.shot_answer},
                        {"target_header", t.target_header},
                        {"think_tag", t.think_tag},
                        {"answer_tag", t.answer_tag}};
}

// Missing keys fall back to the default template's values.
inline PromptTemplate template_from_json(const nlohmann::json& j) {
  PromptTemplate t;
  try {
    t.version = j.value("version", t.version);
    const auto str = [&](const char* key, std::string& field) { field = j.value(key, field); };
    str("system_text", t.system_text);
    str("sentence_pattern", t.sentence_pattern);
    str("sentence_separator", t.sentence_separator);
    str("question_wrapper", t.question_wrapper);
    str("classification_choices", t.classification_choices);
    str("regression_instruction", t.regression_instruction);
    str("format_instruction", t.format_instruction);
    str("shot_header", t.shot_header);
    str("shot_answer", t.shot_answer);
    str("target_header", t.target_header);
    str("think_tag", t.think_tag);
    str("answer_tag", t.answer_tag);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidTemplate, e.what());
  }
  validate(t);
  return t;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
  try {
    return template_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kInvalidTemplate, path.string() + ": " + e.what());
  }
}

struct Prompt {
  std::string text;
  std::size_t n_features = 0;
  std::size_t permutation_id = 0;
  std::size_t example_id = 0;
  std::size_t shots = 0;
};

struct PromptMeta {
  std::size_t example_id = 0;
  std::size_t permutation_id = 0;
  std::size_t n_features = 0;
};

namespace detail {

inline std::string fill(std::string pattern, std::string_view slot, std::string_view value) {
  replace_all(pattern, slot, value);
  return pattern;
}

struct SentenceParts {
  std::string prefix, middle, suffix;
};

inline SentenceParts sentence_parts(const PromptTemplate& t) {
  const std::size_t f = t.sentence_pattern.find("{feature}");
  const std::size_t v = t.sentence_pattern.find("{value}");
  return {t.sentence_pattern.substr(0, f), t.sentence_pattern.substr(f + 9, v - f - 9),
          t.sentence_pattern.substr(v + 7)};
}

inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

}  // namespace detail

// One sentence per feature in the example's current order.
inline std::string serialize_row(const TabularExample& example, const PromptTemplate& tmpl = default_template()) {
  require(!example.features.empty(), ErrorCode::kEmptyFeatures, "cannot serialize a row without features");
  const auto parts = detail::sentence_parts(tmpl);
  std::string out;
  for (std::size_t i = 0; i < example.features.size(); ++i) {
    if (i) out += tmpl.sentence_separator;
    out += parts.prefix;
    out += example.features[i].name;
    out += parts.middle;
    out += example.features[i].value;
    out += parts.suffix;
  }
  return out;
}

// Inverse of serialize_row given the candidate feature names. Each name is
// consumed at most once; a value ends at the earliest point where the next
// sentence (for a still-unused name) or the end of the row begins.
inline std::optional<std::vector<std::pair<std::string, std::string>>> parse_row(
    std::string_view row, const std::vector<std::string>& names, const PromptTemplate& tmpl = default_template()) {
  const auto parts = detail::sentence_parts(tmpl);
  std::vector<char> used(names.size(), 0);
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t pos = 0;

  const auto starts_at = [&](std::size_t at, std::string_view s) {
    return at <= row.size() && row.substr(at, s.size()) == s;
  };

  while (pos < row.size()) {
    if (!starts_at(pos, parts.prefix)) return std::nullopt;
    const std::size_t name_at = pos + parts.prefix.size();
    std::size_t best = names.size();
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (used[i] || !starts_at(name_at, names[i]) || !starts_at(name_at + names[i].size(), parts.middle)) continue;
      if (best == names.size() || names[i].size() > names[best].size()) best = i;
    }
    if (best == names.size()) return std::nullopt;
    used[best] = 1;
    const std::size_t value_at = name_at + names[best].size() + parts.middle.size();

    std::size_t end = std::string_view::npos;
    std::size_t next = std::string_view::npos;
    for (std::size_t e = value_at; e <= row.size() && end == std::string_view::npos; ++e) {
      if (e + parts.suffix.size() == row.size() && starts_at(e, parts.suffix)) {
        end = e;
        next = row.size();
        break;
      }
      const std::size_t sep_at = e + parts.suffix.size();
      if (!starts_at(e, parts.suffix) || !starts_at(sep_at, tmpl.sentence_separator)) continue;
      const std::size_t cand = sep_at + tmpl.sentence_separator.size();
      if (!starts_at(cand, parts.prefix)) continue;
      const std::size_t cand_name = cand + parts.prefix.size();
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (used[i]) continue;
        if (starts_at(cand_name, names[i]) && starts_at(cand_name + names[i].size(), parts.middle)) {
          end = e;
          next = cand;
          break;
        }
      }
    }
    if (end == std::string_view::npos) return std::nullopt;
    out.emplace_back(names[best], std::string(row.substr(value_at, end - value_at)));
    pos = next;
  }
  if (out.empty()) return std::nullopt;
  return out;
}

inline std::string answer_choices_line(const TaskManifest& manifest, const PromptTemplate& tmpl) {
  std::string line = manifest.task == TaskKind::kClassification
                         ? detail::fill(tmpl.classification_choices, "{labels}", detail::join(manifest.label_values, ", "))
                         : tmpl.regression_instruction;
  if (!manifest.answer_format_hint.empty()) line += " " + manifest.answer_format_hint;
  return line;
}

inline std::string format_instruction(const PromptTemplate& tmpl) {
  return detail::fill(detail::fill(tmpl.format_instruction, "{think}", tmpl.think_tag), "{answer}", tmpl.answer_tag);
}

// Assembles the model input:
//   system text, k shot blocks (row + its answer), the target row,
//   the wrapped question, the permitted answers and the tag instruction.
// With no shots this is exactly the serialized row followed by the question.
inline Prompt build_prompt(const std::string& serialized, const TaskManifest& manifest,
                           const PromptTemplate& tmpl = default_template(),
                           const std::vector<std::pair<TabularExample, std::string>>& shots = {},
                           const PromptMeta& meta = {}) {
  require(!serialized.empty(), ErrorCode::kEmptyFeatures, "empty serialized row");
  std::string text = tmpl.system_text;
  text += "\n\n";
  for (std::size_t s = 0; s < shots.size(); ++s) {
    const auto& [example, label] = shots[s];
    std::string shown = label;
    if (manifest.task == TaskKind::kClassification) {
      const auto it = std::find_if(manifest.label_values.begin(), manifest.label_values.end(),
                                   [&](const std::string& v) { return fold(v) == fold(label); });
      require(it != manifest.label_values.end(), ErrorCode::kShotLabelMismatch,
              "shot " + std::to_string(s) + " label '" + label + "' not in label_values");
      shown = *it;
    } else {
      const auto y = parse_number(label);
      require(y.has_value(), ErrorCode::kShotLabelMismatch,
              "shot " + std::to_string(s) + " label '" + label + "' is not a number");
      shown = render_number(*y);
    }
    text += detail::fill(tmpl.shot_header, "{index}", std::to_string(s + 1));
    text += "\n";
    text += serialize_row(example, tmpl);
    text += "\n";
    text += detail::fill(tmpl.shot_answer, "{answer}", shown);
    text += "\n\n";
  }
  if (!shots.empty()) {
    text += tmpl.target_header;
    text += "\n";
  }
  text += serialized;
  text += "\n\n";
  text += detail::fill(tmpl.question_wrapper, "{question}", manifest.question);
  text += "\n";
  text += answer_choices_line(manifest, tmpl);
  text += "\n";
  text += format_instruction(tmpl);

  Prompt p;
  p.text = std::move(text);
  p.n_features = meta.n_features;
  p.permutation_id = meta.permutation_id;
  p.example_id = meta.example_id;
  p.shots = shots.size();
  return p;
}

// Finds the target row inside a prompt produced by build_prompt with `tmpl`.
inline std::optional<std::string_view> locate_target_row(std::string_view prompt, const PromptTemplate& tmpl) {
  const std::string marker = "\n\n" + tmpl.question_wrapper.substr(0, tmpl.question_wrapper.find("{question}"));
  const std::size_t from = std::min(prompt.size(), tmpl.system_text.size());
  const std::size_t at = prompt.find(marker, from);
  if (at == std::string_view::npos || at == 0) return std::nullopt;
  const std::size_t nl = prompt.rfind('\n', at - 1);
  const std::size_t begin = nl == std::string_view::npos ? 0 : nl + 1;
  if (begin >= at) return std::nullopt;
  return prompt.substr(begin, at - begin);
}

// ---------------------------------------------------------------------------
// Answer extraction

enum class AnswerKind { kClassLabel, kNumber, kMalformed };

struct ExtractedAnswer {
  std::string raw;  // answer-tag content when present, else the whole completion
  AnswerKind kind = AnswerKind::kMalformed;
  std::string label;      // kClassLabel: canonical spelling, or trimmed raw when off-list
  double number = 0.0;    // kNumber
  bool well_formatted = false;
  bool off_list = false;  // kClassLabel not among the manifest's label values

  static ExtractedAnswer class_label(std::string raw, std::string label, bool off_list) {
    ExtractedAnswer a;
    a.raw = std::move(raw);
    a.kind = AnswerKind::kClassLabel;
    a.label = std::move(label);
    a.well_formatted = true;
    a.off_list = off_list;
    return a;
  }
  static ExtractedAnswer numeric(std::string raw, double value) {
    ExtractedAnswer a;
    a.raw = std::move(raw);
    a.kind = AnswerKind::kNumber;
    a.number = value;
    a.well_formatted = true;
    return a;
  }
  static ExtractedAnswer malformed(std::string raw, bool well_formatted) {
    ExtractedAnswer a;
    a.raw = std::move(raw);
    a.well_formatted = well_formatted;
    return a;
  }
};

inline std::string format_completion(std::string_view think, std::string_view answer,
                                     const PromptTemplate& tmpl = default_template()) {
  std::string out = tmpl.open(tmpl.think_tag);
  out += think;
  out += tmpl.close(tmpl.think_tag);
  out += tmpl.open(tmpl.answer_tag);
  out += answer;
  out += tmpl.close(tmpl.answer_tag);
  return out;
}

// Reads the first think block followed by an answer block. The completion is
// well formatted only when each of the four tags occurs exactly once and in
// that order; duplicated or missing tags yield a malformed answer.
inline ExtractedAnswer extract_answer(std::string_view completion, const TaskManifest& manifest,
                                      const PromptTemplate& tmpl = default_template()) {
  const std::string t_open = tmpl.open(tmpl.think_tag), t_close = tmpl.close(tmpl.think_tag);
  const std::string a_open = tmpl.open(tmpl.answer_tag), a_close = tmpl.close(tmpl.answer_tag);
  constexpr auto npos = std::string_view::npos;

  const std::size_t t0 = completion.find(t_open);
  const std::size_t t1 = t0 == npos ? npos : completion.find(t_close, t0 + t_open.size());
  const std::size_t a0 = t1 == npos ? npos : completion.find(a_open, t1 + t_close.size());
  const std::size_t a1 = a0 == npos ? npos : completion.find(a_close, a0 + a_open.size());
  if (a1 == npos) return ExtractedAnswer::malformed(std::string(trim(completion)), false);

  std::string inner(trim(completion.substr(a0 + a_open.size(), a1 - a0 - a_open.size())));
  const bool unique = count_occurrences(completion, t_open) == 1 && count_occurrences(completion, t_close) == 1 &&
                      count_occurrences(completion, a_open) == 1 && count_occurrences(completion, a_close) == 1;
  if (!unique) return ExtractedAnswer::malformed(std::move(inner), false);

  if (manifest.task == TaskKind::kClassification) {
    const std::string key = fold(inner);
    for (const auto& v : manifest.label_values) {
      if (fold(v) == key) return ExtractedAnswer::class_label(inner, v, false);
    }
    std::string label = inner;
    return ExtractedAnswer::class_label(std::move(inner), std::move(label), true);
  }
  if (const auto y = parse_number(inner)) return ExtractedAnswer::numeric(std::move(inner), *y);
  return ExtractedAnswer::malformed(std::move(inner), true);
}

}  // namespace prpo
