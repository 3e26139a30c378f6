#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fsod {

using Shape = std::vector<int>;

int numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major array of doubles. All intermediate quantities in the
// project (feature maps, encodings, boxes, logits) live in these.
struct Tensor {
  Shape shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double value);
  static Tensor scalar(double value) { return full({1}, value); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  int numel() const { return static_cast<int>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool empty() const { return v.empty(); }

  // Row-major 2D access; callers guarantee ndim()==2.
  double& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
  double at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }
  // 3D access for [C,H,W] maps.
  double& at3(int c, int y, int x) {
    return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at3(int c, int y, int x) const {
    return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

}  // namespace fsod
