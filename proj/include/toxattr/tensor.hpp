#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace toxattr {

// Dense row-major tensor of doubles. Rank 0 (shape {}) is a scalar with one
// element. All numeric state in the project lives in these.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  // Default is a rank-0 zero; the empty shape product is 1.
  Tensor() : data(1, 0.0) {}

  explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0)
      : shape(std::move(shape_)), data(numel_of(shape), fill) {}

  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
      : shape(std::move(shape_)), data(std::move(data_)) {
    if (data.size() != numel_of(shape)) {
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape (expects " +
                                  std::to_string(numel_of(shape)) + ")");
    }
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor row_vector(std::initializer_list<double> vs) {
    std::vector<double> d(vs);
    std::vector<std::size_t> shape{1, d.size()};
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor vector1d(std::initializer_list<double> vs) {
    std::vector<double> d(vs);
    std::vector<std::size_t> shape{d.size()};
    return Tensor(std::move(shape), std::move(d));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return rank() >= 1 ? shape[0] : 1; }
  std::size_t cols() const { return rank() >= 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace toxattr
