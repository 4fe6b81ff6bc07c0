#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace prpo {

enum class ErrorCode {
  kMissingColumn,
  kEmptyDataset,
  kLabelParseFailure,
  kMissingValue,
  kInvalidManifest,
  kDegenerateSplit,
  kArityMismatch,
  kEmptyFeatures,
  kShotLabelMismatch,
  kInvalidTemplate,
  kDegenerateRange,
  kGroupTooSmall,
  kShapeMismatch,
  kLengthMismatch,
  kUnknownToken,
  kInvalidArgument,
  kNonFiniteLoss,
  kRemoteUnavailable,
  kProtocolViolation,
  kCoverageMismatch,
  kIo,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingColumn: return "MissingColumn";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kLabelParseFailure: return "LabelParseFailure";
    case ErrorCode::kMissingValue: return "MissingValue";
    case ErrorCode::kInvalidManifest: return "InvalidManifest";
    case ErrorCode::kDegenerateSplit: return "DegenerateSplit";
    case ErrorCode::kArityMismatch: return "ArityMismatch";
    case ErrorCode::kEmptyFeatures: return "EmptyFeatures";
    case ErrorCode::kShotLabelMismatch: return "ShotLabelMismatch";
    case ErrorCode::kInvalidTemplate: return "InvalidTemplate";
    case ErrorCode::kDegenerateRange: return "DegenerateRange";
    case ErrorCode::kGroupTooSmall: return "GroupTooSmall";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kUnknownToken: return "UnknownToken";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kRemoteUnavailable: return "RemoteUnavailable";
    case ErrorCode::kProtocolViolation: return "ProtocolViolation";
    case ErrorCode::kCoverageMismatch: return "CoverageMismatch";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

// All library failures surface as prpo::Error; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace prpo
