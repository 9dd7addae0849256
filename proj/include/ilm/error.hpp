#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ilm {

enum class ErrorCode {
  kEmptyDocument,
  kIoError,
  kMalformedRecord,
  kCorpusTooSmall,
  kUnknownSpecialInText,
  kMisalignedSpan,
  kOverlappingSpans,
  kEmptyCorpus,
  kSequenceTooLong,
  kFingerprintMismatch,
  kShapeMismatch,
  kNonFiniteLoss,
  kContextOverflow,
  kFillCountMismatch,
  kMarkerSyntax,
  kEmptyTargets,
  kConfigInvalid,
  kMissingArtifact,
};

constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kEmptyDocument: return "EmptyDocument";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kMalformedRecord: return "MalformedRecord";
    case ErrorCode::kCorpusTooSmall: return "CorpusTooSmall";
    case ErrorCode::kUnknownSpecialInText: return "UnknownSpecialInText";
    case ErrorCode::kMisalignedSpan: return "MisalignedSpan";
    case ErrorCode::kOverlappingSpans: return "OverlappingSpans";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kFingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kContextOverflow: return "ContextOverflow";
    case ErrorCode::kFillCountMismatch: return "FillCountMismatch";
    case ErrorCode::kMarkerSyntax: return "MarkerSyntax";
    case ErrorCode::kEmptyTargets: return "EmptyTargets";
    case ErrorCode::kConfigInvalid: return "ConfigInvalid";
    case ErrorCode::kMissingArtifact: return "MissingArtifact";
  }
  return "Unknown";
}

// All library failures are reported as ilm::Error; code() is the stable,
// machine-readable part, what() carries detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(error_name(code)) + ": " + detail),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ilm
