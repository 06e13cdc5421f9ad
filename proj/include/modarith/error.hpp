#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace modarith {

enum class ErrorCode {
  DegenerateDistribution,
  DegenerateResidual,
  InvalidArgument,
  VocabularyError,
  EmptyCorpus,
  ClassifierRange,
  BackendUnavailable,
  VocabMismatch,
  BadRequest,
  ContextTooLong,
  ParseError,
  NameError,
  UnsupportedComposition,
  NormalizationViolation,
  RebalanceUnsupported,
  PresetArity,
  FactorMismatch,
  CalibrationEmpty,
  TemplateError,
  ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateDistribution: return "DegenerateDistribution";
    case ErrorCode::DegenerateResidual: return "DegenerateResidual";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::VocabularyError: return "VocabularyError";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::ClassifierRange: return "ClassifierRange";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::VocabMismatch: return "VocabMismatch";
    case ErrorCode::BadRequest: return "BadRequest";
    case ErrorCode::ContextTooLong: return "ContextTooLong";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NameError: return "NameError";
    case ErrorCode::UnsupportedComposition: return "UnsupportedComposition";
    case ErrorCode::NormalizationViolation: return "NormalizationViolation";
    case ErrorCode::RebalanceUnsupported: return "RebalanceUnsupported";
    case ErrorCode::PresetArity: return "PresetArity";
    case ErrorCode::FactorMismatch: return "FactorMismatch";
    case ErrorCode::CalibrationEmpty: return "CalibrationEmpty";
    case ErrorCode::TemplateError: return "TemplateError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Half-open byte range into formula source text, with 1-based line/column of its start.
struct SourceSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t line = 1;
  std::size_t column = 1;
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::optional<SourceSpan> span = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message), span_(span) {}

  ErrorCode code() const noexcept { return code_; }
  // Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }
  const std::optional<SourceSpan>& span() const noexcept { return span_; }

  // Errors caused by an unreachable or misbehaving backend rather than user input.
  bool is_backend() const noexcept {
    return code_ == ErrorCode::BackendUnavailable || code_ == ErrorCode::VocabMismatch ||
           code_ == ErrorCode::BadRequest;
  }

 private:
  ErrorCode code_;
  std::string detail_;
  std::optional<SourceSpan> span_;
};

}  // namespace modarith
