// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bflab::num {

// Row-major dense float64 tensor. The carrier for weights, gradients,
// activations, logits and attention maps.
class DenseTensor {
 public:
  DenseTensor() = default;
  explicit DenseTensor(std::vector<std::size_t> dims, double fill = 0.0);
  DenseTensor(std::vector<std::size_t> dims, std::vector<double> values);

  static DenseTensor matrix(std::size_t rows, std::size_t cols,
                            std::initializer_list<double> values);
  static DenseTensor vector(std::initializer_list<double> values);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // 2-D views; a 1-D tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }
  double* row(std::size_t r) { return values_.data() + r * cols(); }
  const double* row(std::size_t r) const {
    return values_.data() + r * cols();
  }

  void fill(double v);
  bool same_shape(const DenseTensor& other) const {
    return dims_ == other.dims_;
  }
  bool all_finite() const;

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> values_;
};

std::string shape_string(const std::vector<std::size_t>& dims);
std::size_t element_count(const std::vector<std::size_t>& dims);

}  // namespace bflab::num
