#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nmod {

enum class Errc {
  // tags and types
  DuplicateTag,
  UnknownParent,
  UnknownTag,
  HierarchyFrozen,
  HierarchyNotFrozen,
  SyntaxError,
  InvalidDim,
  // modules
  DuplicateDescriptor,
  InvalidDescriptor,
  InvalidComposite,
  UnknownDescriptor,
  MissingParam,
  UnknownParam,
  ConstraintViolation,
  RecursionLimit,
  // graphs
  TypeError,
  PortAlreadyBound,
  UnknownPort,
  UnknownInstance,
  DuplicateInstance,
  NotValidated,
  SchemaError,
  // execution
  ShapeMismatch,
  NonFiniteValue,
  NonScalarSink,
  TooManyParameters,
  NoScalarLoss,
  DataExhausted,
  DataError,
  IoError,
  CheckpointMismatch,
};

constexpr std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::DuplicateTag: return "DuplicateTag";
    case Errc::UnknownParent: return "UnknownParent";
    case Errc::UnknownTag: return "UnknownTag";
    case Errc::HierarchyFrozen: return "HierarchyFrozen";
    case Errc::HierarchyNotFrozen: return "HierarchyNotFrozen";
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::InvalidDim: return "InvalidDim";
    case Errc::DuplicateDescriptor: return "DuplicateDescriptor";
    case Errc::InvalidDescriptor: return "InvalidDescriptor";
    case Errc::InvalidComposite: return "InvalidComposite";
    case Errc::UnknownDescriptor: return "UnknownDescriptor";
    case Errc::MissingParam: return "MissingParam";
    case Errc::UnknownParam: return "UnknownParam";
    case Errc::ConstraintViolation: return "ConstraintViolation";
    case Errc::RecursionLimit: return "RecursionLimit";
    case Errc::TypeError: return "TypeError";
    case Errc::PortAlreadyBound: return "PortAlreadyBound";
    case Errc::UnknownPort: return "UnknownPort";
    case Errc::UnknownInstance: return "UnknownInstance";
    case Errc::DuplicateInstance: return "DuplicateInstance";
    case Errc::NotValidated: return "NotValidated";
    case Errc::SchemaError: return "SchemaError";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::NonScalarSink: return "NonScalarSink";
    case Errc::TooManyParameters: return "TooManyParameters";
    case Errc::NoScalarLoss: return "NoScalarLoss";
    case Errc::DataExhausted: return "DataExhausted";
    case Errc::DataError: return "DataError";
    case Errc::IoError: return "IoError";
    case Errc::CheckpointMismatch: return "CheckpointMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library. `name()` is the stable error name
/// printed by the command-line tool.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }
  std::string_view name() const noexcept { return errc_name(code_); }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace nmod
