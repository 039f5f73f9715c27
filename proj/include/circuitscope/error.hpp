#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace circuitscope {

enum class ErrorCode {
  kInvalidArgument = 1,
  kIo,
  kParse,
  kMissingTensor,
  kShapeMismatch,
  kUnsupportedScheme,
  kInvalidConfig,
  kTokenOutOfRange,
  kSequenceTooLong,
  kIndexOutOfBounds,
  kCacheMissing,
  kInvalidSite,
  kLayerOrderViolation,
  kLengthMismatch,
  kEmptyDataset,
  kMixedDataset,
  kMissingCorrupted,
  kExampleMismatch,
  kConstantInput,
  kDimensionMismatch,
  kUnsupportedFormat,
  kInvalidDataset,
};

std::string_view error_code_name(ErrorCode code);

// Every typed failure in the library is reported through this exception; the
// C API translates it into a status code plus a thread-local message.
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

}  // namespace circuitscope
