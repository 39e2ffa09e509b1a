#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace duovid {

enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  segment_length_mismatch,
  insufficient_frames,
  context_overflow,
  empty_loss,
  config_error,
  io_error,
  pipeline_error,
  parse_error,
  schema_error,
  coverage_gap,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::segment_length_mismatch: return "segment-length-mismatch";
    case ErrorKind::insufficient_frames: return "insufficient-frames";
    case ErrorKind::context_overflow: return "context-overflow";
    case ErrorKind::empty_loss: return "empty-loss";
    case ErrorKind::config_error: return "config-error";
    case ErrorKind::io_error: return "io-error";
    case ErrorKind::pipeline_error: return "pipeline-error";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::schema_error: return "schema-error";
    case ErrorKind::coverage_gap: return "coverage-gap";
  }
  return "unknown";
}

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

}  // namespace duovid
