#pragma once

#include <stdexcept>
#include <string>

namespace vf {

enum class ErrorCode {
  invalid_argument,
  shape,
  numeric,
  io,
  parse,
  behind_camera,
  degenerate_box,
  unsupported_rotation,
  placement,
  empty_batch,
  state,
  unsupported,
};

// Typed runtime error carried across all modules; the C boundary maps
// the code onto vf_status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape: return "shape";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::io: return "io";
    case ErrorCode::parse: return "parse";
    case ErrorCode::behind_camera: return "behind_camera";
    case ErrorCode::degenerate_box: return "degenerate_box";
    case ErrorCode::unsupported_rotation: return "unsupported_rotation";
    case ErrorCode::placement: return "placement";
    case ErrorCode::empty_batch: return "empty_batch";
    case ErrorCode::state: return "state";
    case ErrorCode::unsupported: return "unsupported";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace vf
