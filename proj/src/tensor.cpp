// SPDX-License-Identifier: Apache-2.0

#include "bflab/tensor.hpp"

#include <cmath>
#include <sstream>

#include "bflab/error.hpp"

namespace bflab::num {

std::size_t element_count(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string shape_string(const std::vector<std::size_t>& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

DenseTensor::DenseTensor(std::vector<std::size_t> dims, double fill)
    : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive");
  }
  values_.assign(element_count(dims_), fill);
}

DenseTensor::DenseTensor(std::vector<std::size_t> dims,
                         std::vector<double> values)
    : dims_(std::move(dims)), values_(std::move(values)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive");
  }
  if (element_count(dims_) != values_.size()) {
    throw ShapeError("tensor " + shape_string(dims_) + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

DenseTensor DenseTensor::matrix(std::size_t rows, std::size_t cols,
                                std::initializer_list<double> values) {
  return DenseTensor({rows, cols}, std::vector<double>(values));
}

DenseTensor DenseTensor::vector(std::initializer_list<double> values) {
  return DenseTensor({values.size()}, std::vector<double>(values));
}

std::size_t DenseTensor::rows() const {
  if (dims_.size() <= 1) return dims_.empty() ? 0 : 1;
  return element_count(dims_) / dims_.back();
}

std::size_t DenseTensor::cols() const {
  return dims_.empty() ? 0 : dims_.back();
}

void DenseTensor::fill(double v) {
  for (auto& x : values_) x = v;
}

bool DenseTensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace bflab::num
