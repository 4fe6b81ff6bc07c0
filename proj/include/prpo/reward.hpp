#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/serialize.hpp"
#include "prpo/text.hpp"

namespace prpo {

enum class RewardBranch { kCorrect, kFormattedWrong, kMalformed };

inline std::string_view to_string(RewardBranch b) {
  switch (b) {
    case RewardBranch::kCorrect: return "correct";
    case RewardBranch::kFormattedWrong: return "formatted_wrong";
    case RewardBranch::kMalformed: return "malformed";
  }
  return "unknown";
}

inline constexpr double kRewardCorrect = 1.0;
inline constexpr double kRewardFormattedWrong = 0.1;
inline constexpr double kRewardMalformed = 0.0;
inline constexpr double kNmaeThreshold = 0.1;

struct RewardRecord {
  double value = kRewardMalformed;
  RewardBranch branch = RewardBranch::kMalformed;
  std::optional<double> nmae;  // regression only, when the answer was a number

  static RewardRecord of(RewardBranch b, std::optional<double> nmae = std::nullopt) {
    const double v = b == RewardBranch::kCorrect        ? kRewardCorrect
                     : b == RewardBranch::kFormattedWrong ? kRewardFormattedWrong
                                                          : kRewardMalformed;
    return {v, b, nmae};
  }
};

// Absolute error normalized by the label range width. May exceed 1.
inline double nmae(double y_true, double y_pred, const LabelRange& range) {
  require(range.min < range.max, ErrorCode::kDegenerateRange, "nmae needs min < max");
  require(std::isfinite(y_true) && std::isfinite(y_pred), ErrorCode::kInvalidArgument, "nmae inputs must be finite");
  return std::abs(y_true - y_pred) / (range.max - range.min);
}

inline RewardRecord classification_reward(const ExtractedAnswer& answer, std::string_view y_true) {
  if (!answer.well_formatted || answer.kind != AnswerKind::kClassLabel) return RewardRecord::of(RewardBranch::kMalformed);
  if (!answer.off_list && fold(answer.label) == fold(y_true)) return RewardRecord::of(RewardBranch::kCorrect);
  return RewardRecord::of(RewardBranch::kFormattedWrong);
}

// Strict threshold: nmae == 0.1 lands on the formatted-wrong branch.
inline RewardRecord regression_reward(const ExtractedAnswer& answer, double y_true, const LabelRange& range) {
  require(range.min < range.max, ErrorCode::kDegenerateRange, "regression reward needs min < max");
  if (answer.kind != AnswerKind::kNumber || !std::isfinite(answer.number)) {
    return RewardRecord::of(RewardBranch::kMalformed);
  }
  const double e = nmae(y_true, answer.number, range);
  return RewardRecord::of(e < kNmaeThreshold ? RewardBranch::kCorrect : RewardBranch::kFormattedWrong, e);
}

// Dispatches on the manifest task; regression requires a resolved label range.
inline RewardRecord reward_for(const ExtractedAnswer& answer, const TabularExample& example,
                               const TaskManifest& manifest) {
  if (manifest.task == TaskKind::kClassification) return classification_reward(answer, example.label);
  require(manifest.label_range.has_value(), ErrorCode::kDegenerateRange, "label range unresolved");
  require(example.label_value.has_value(), ErrorCode::kLabelParseFailure, "regression example without numeric label");
  return regression_reward(answer, *example.label_value, *manifest.label_range);
}

}  // namespace prpo
