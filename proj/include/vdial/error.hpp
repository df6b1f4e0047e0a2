#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vdial {

enum class ErrorKind {
  ShapeMismatch,
  NotScalar,
  EmptyLossSet,
  IndexOutOfVocab,
  MissingGrad,
  HeadsDivisibility,
  SequenceTooLong,
  FrameShapeMismatch,
  EmptyAudio,
  DimMismatch,
  EmptyPool,
  NoNegatives,
  NoActiveLoss,
  EmptyCorpus,
  QuestionTooLong,
  InvalidArgument,
  EmptyReference,
  CorpusTooSmall,
  EmptyInput,
  UnsupportedFrameCount,
  InsufficientDistractors,
  IoError,
  FormatVersionMismatch,
  ConfigInvalid,
  DatasetMissing,
  ConfigHashMismatch,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::EmptyLossSet: return "EmptyLossSet";
    case ErrorKind::IndexOutOfVocab: return "IndexOutOfVocab";
    case ErrorKind::MissingGrad: return "MissingGrad";
    case ErrorKind::HeadsDivisibility: return "HeadsDivisibility";
    case ErrorKind::SequenceTooLong: return "SequenceTooLong";
    case ErrorKind::FrameShapeMismatch: return "FrameShapeMismatch";
    case ErrorKind::EmptyAudio: return "EmptyAudio";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::NoNegatives: return "NoNegatives";
    case ErrorKind::NoActiveLoss: return "NoActiveLoss";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::QuestionTooLong: return "QuestionTooLong";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::EmptyReference: return "EmptyReference";
    case ErrorKind::CorpusTooSmall: return "CorpusTooSmall";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::UnsupportedFrameCount: return "UnsupportedFrameCount";
    case ErrorKind::InsufficientDistractors: return "InsufficientDistractors";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::DatasetMissing: return "DatasetMissing";
    case ErrorKind::ConfigHashMismatch: return "ConfigHashMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace vdial
