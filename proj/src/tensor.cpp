#include "psx/tensor.hpp"

#include <cmath>

namespace psx {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::unknown_weight: return "unknown_weight";
    case ErrorCode::unknown_layer: return "unknown_layer";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::format: return "format";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::io: return "io";
    case ErrorCode::insufficient_samples: return "insufficient_samples";
    case ErrorCode::unsupported: return "unsupported";
    case ErrorCode::not_found: return "not_found";
  }
  return "unknown";
}

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace psx
