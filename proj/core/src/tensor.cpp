#include "bsatnp/tensor.hpp"

namespace bsatnp {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void require_shape(const Shape& actual, const Shape& expected, const std::string& what) {
  if (actual != expected) {
    throw DimensionError(what + ": expected shape " + shape_string(expected) + ", got " + shape_string(actual));
  }
}

}  // namespace bsatnp
