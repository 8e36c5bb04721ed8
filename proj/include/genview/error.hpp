#pragma once

#include <stdexcept>
#include <string>

namespace genview {

enum class ErrorCode {
  kInvalidArgument,
  kDegenerateInput,
  kShapeMismatch,
  kParse,
  kTransport,
  kBackendRejected,
  kManifestCorrupt,
  kIo,
  kDiverged,
};

const char* to_string(ErrorCode code);

// Base for every domain error raised by the library. The CLI maps these to
// exit code 1; usage errors never reach here.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::kInvalidArgument, what) {}
};

class DegenerateInput : public Error {
 public:
  explicit DegenerateInput(const std::string& what)
      : Error(ErrorCode::kDegenerateInput, what) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what)
      : Error(ErrorCode::kShapeMismatch, what) {}
};

// Carries the raw text that failed to parse (e.g. an LLM reply).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(ErrorCode::kParse, what), raw_(std::move(raw)) {}

  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

// Retryable: the remote side could not be reached or dropped the request.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what)
      : Error(ErrorCode::kTransport, what) {}
};

// Terminal: the backend answered with an explicit error.
class BackendRejected : public Error {
 public:
  explicit BackendRejected(const std::string& what)
      : Error(ErrorCode::kBackendRejected, what) {}
};

class ManifestCorrupt : public Error {
 public:
  explicit ManifestCorrupt(const std::string& what)
      : Error(ErrorCode::kManifestCorrupt, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class Diverged : public Error {
 public:
  explicit Diverged(const std::string& what)
      : Error(ErrorCode::kDiverged, what) {}
};

}  // namespace genview
