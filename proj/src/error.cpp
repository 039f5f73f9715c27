#include "circuitscope/error.hpp"

namespace circuitscope {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kParse: return "ParseError";
    case ErrorCode::kMissingTensor: return "MissingTensor";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kUnsupportedScheme: return "UnsupportedScheme";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kIndexOutOfBounds: return "IndexOutOfBounds";
    case ErrorCode::kCacheMissing: return "CacheMissing";
    case ErrorCode::kInvalidSite: return "InvalidSite";
    case ErrorCode::kLayerOrderViolation: return "LayerOrderViolation";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kMixedDataset: return "MixedDataset";
    case ErrorCode::kMissingCorrupted: return "MissingCorrupted";
    case ErrorCode::kExampleMismatch: return "ExampleMismatch";
    case ErrorCode::kConstantInput: return "ConstantInput";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kUnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::kInvalidDataset: return "InvalidDataset";
  }
  return "Unknown";
}

}  // namespace circuitscope
