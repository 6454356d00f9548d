#include "sketchssl/error.hpp"

namespace sketchssl {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::NonFiniteCoordinate: return "NonFiniteCoordinate";
    case ErrorCode::DegenerateCanvas: return "DegenerateCanvas";
    case ErrorCode::NegativeEpsilon: return "NegativeEpsilon";
    case ErrorCode::UnnormalizedInput: return "UnnormalizedInput";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::UnknownClassName: return "UnknownClassName";
    case ErrorCode::EmptyAlphabet: return "EmptyAlphabet";
    case ErrorCode::TooFewClasses: return "TooFewClasses";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingTargets: return "MissingTargets";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ModalityMismatch: return "ModalityMismatch";
    case ErrorCode::UnknownDepth: return "UnknownDepth";
    case ErrorCode::ClassMismatch: return "ClassMismatch";
    case ErrorCode::InsufficientClassSamples: return "InsufficientClassSamples";
    case ErrorCode::FractionTooSmall: return "FractionTooSmall";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::EmptyLexicon: return "EmptyLexicon";
    case ErrorCode::EmptyFeatures: return "EmptyFeatures";
    case ErrorCode::BadAspect: return "BadAspect";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace sketchssl
