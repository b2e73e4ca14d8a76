#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace skem {

// Dense row-major tensor of doubles. All training math runs in 64-bit.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_, double fill = 0.0)
      : shape(std::move(shape_)),
        v(static_cast<std::size_t>(numel_of(shape)), fill) {}
  Tensor(std::initializer_list<int> shape_, std::vector<double> data)
      : shape(shape_), v(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape)) != v.size())
      throw std::invalid_argument("Tensor: data does not match shape");
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
  }

  long long numel() const { return numel_of(shape); }
  int dim(std::size_t i) const { return shape.at(i); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
      s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }
};

}  // namespace skem
