#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sketchssl {

enum class ErrorCode {
  // stroke / geometry
  EmptyInput,
  NonFiniteCoordinate,
  DegenerateCanvas,
  NegativeEpsilon,
  UnnormalizedInput,
  // data
  MalformedRecord,
  EmptyFile,
  UnknownClassName,
  EmptyAlphabet,
  TooFewClasses,
  EmptyDataset,
  // models / losses
  ShapeMismatch,
  MissingTargets,
  EmptyMask,
  SequenceTooLong,
  LengthMismatch,
  LabelOutOfRange,
  // training / persistence
  DivergedLoss,
  CorruptCheckpoint,
  VersionMismatch,
  // downstream
  ModalityMismatch,
  UnknownDepth,
  ClassMismatch,
  InsufficientClassSamples,
  FractionTooSmall,
  EmptyGallery,
  EmptyLexicon,
  EmptyFeatures,
  BadAspect,
  // plumbing
  ConfigError,
  IoError,
};

std::string_view error_code_name(ErrorCode code);

/// Exception carrying a machine-readable code plus a human message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool ok, ErrorCode code, const std::string& message) {
  if (!ok) fail(code, message);
}

}  // namespace sketchssl
