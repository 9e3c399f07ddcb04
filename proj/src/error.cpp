#include "bootleg/error.hpp"

#include "bootleg/tensor.hpp"

namespace bootleg {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::EmptyVisible: return "EmptyVisible";
    case ErrorCode::UnsupportedStrategy: return "UnsupportedStrategy";
    case ErrorCode::DimNotDivisible: return "DimNotDivisible";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadIndex: return "BadIndex";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::TapNotCaptured: return "TapNotCaptured";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::UnreadableImage: return "UnreadableImage";
    case ErrorCode::MissingCLS: return "MissingCLS";
    case ErrorCode::MissingLayer: return "MissingLayer";
    case ErrorCode::DegenerateLayer: return "DegenerateLayer";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::Io: return "Io";
    case ErrorCode::GoldenMismatch: return "GoldenMismatch";
  }
  return "Unknown";
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace bootleg
