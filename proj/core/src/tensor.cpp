#include "fsod/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fsod {

int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::runtime_error("tensor: non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {
  if (static_cast<int>(v.size()) != numel_of(shape)) {
    throw std::runtime_error("tensor: " + std::to_string(v.size()) + " values for shape " +
                             shape_str(shape));
  }
}

Tensor Tensor::full(Shape s, double value) {
  Tensor t(std::move(s));
  for (double& x : t.v) x = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace fsod
